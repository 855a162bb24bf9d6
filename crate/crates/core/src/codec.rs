//! Bit-exact text encoding of float payloads.

use crate::error::{Error, Result};

/// Lowercase hex of the little-endian bytes of each value.
pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex::encode(bytes)
}

pub fn decode_f64s(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = hex::decode(text.trim()).map_err(|e| Error::Serde(format!("bad payload: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Serde(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoded payload".into()));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let v = [0.1, -0.0, 1e-300, std::f64::consts::PI, f64::MAX];
        let back = decode_f64s(&encode_f64s(&v), v.len()).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode_f64s(&encode_f64s(&v), 4).is_err());
        assert!(decode_f64s("zz", 1).is_err());
    }
}
