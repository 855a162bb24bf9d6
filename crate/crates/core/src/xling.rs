//! Cross-lingual transfer: align a target-language space to a source space
//! with an orthogonal map learned from translation pairs, then debias the
//! projected space with transforms fitted on the source language.

use std::collections::HashSet;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::numerics::{norm, procrustes, Matrix};
use crate::pipeline::{ApplyOptions, DebiasPipeline};

/// Fewer usable pairs than this makes the alignment unreliable.
pub const MIN_RECOMMENDED_PAIRS: usize = 100;

/// Ordered `(source, target)` word pairs. A source word may have several
/// translations; exact duplicate pairs are dropped, keeping the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationDictionary {
    pairs: Vec<(String, String)>,
}

impl TranslationDictionary {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(pairs.len());
        for p in pairs {
            if seen.insert(p.clone()) {
                kept.push(p);
            }
        }
        if kept.is_empty() {
            return Err(Error::Empty("translation dictionary has no pairs".into()));
        }
        Ok(TranslationDictionary { pairs: kept })
    }

    /// Two whitespace-separated columns per line (tab preferred). Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = if line.contains('\t') {
                line.split('\t').map(str::trim).collect()
            } else {
                line.split_whitespace().collect()
            };
            match cols.as_slice() {
                [s, t] if !s.is_empty() && !t.is_empty() => {
                    pairs.push((s.to_string(), t.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected two columns, got {}", cols.len()),
                    })
                }
            }
        }
        Self::new(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub used: usize,
    pub source_oov: usize,
    pub target_oov: usize,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// `W_CL` such that `tgt_row * W_CL` lands in the source space. Both sides
/// are unit-normalized before alignment. Pairs with a zero vector on either
/// side count as OOV.
pub fn fit_projection(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    dict: &TranslationDictionary,
) -> Result<(Matrix, ProjectionReport)> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch {
            expected: src.dim(),
            found: tgt.dim(),
        });
    }
    let mut report = ProjectionReport::default();
    let mut xs = Vec::new();
    let mut xt = Vec::new();
    for (s, t) in dict.pairs() {
        let sv = src.lookup(s).and_then(unit);
        let tv = tgt.lookup(t).and_then(unit);
        match (sv, tv) {
            (Some(sv), Some(tv)) => {
                xs.push(sv);
                xt.push(tv);
                report.used += 1;
            }
            (sv, tv) => {
                report.source_oov += usize::from(sv.is_none());
                report.target_oov += usize::from(tv.is_none());
            }
        }
    }
    if report.used == 0 {
        return Err(Error::InsufficientTerms(
            "no translation pair has both words in vocabulary".into(),
        ));
    }
    if report.used < MIN_RECOMMENDED_PAIRS {
        warn!(
            "only {} usable translation pairs; the projection may be poor",
            report.used
        );
    }
    let w = procrustes(&Matrix::from_rows(&xt)?, &Matrix::from_rows(&xs)?)?;
    Ok((w, report))
}

/// Row-wise `X * W`.
pub fn project(space: &EmbeddingSpace, w: &Matrix) -> Result<EmbeddingSpace> {
    if w.rows() != space.dim() || w.cols() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            found: w.rows(),
        });
    }
    if w.is_identity() {
        return Ok(space.clone());
    }
    space.with_vectors(space.vectors().matmul(w)?)
}

/// Projects `tgt` into the source space, then applies the source-fitted
/// pipeline if one is given. An exact identity `W_CL` skips the projection,
/// so the result equals in-language debiasing bit for bit.
pub fn transfer_debias(
    tgt: &EmbeddingSpace,
    w: &Matrix,
    pipeline: Option<&DebiasPipeline>,
    options: ApplyOptions,
) -> Result<EmbeddingSpace> {
    if let Some(p) = pipeline {
        if p.dim() != w.cols() {
            return Err(Error::DimensionMismatch {
                expected: w.cols(),
                found: p.dim(),
            });
        }
    }
    let projected = project(tgt, w)?;
    match pipeline {
        Some(p) => p.apply(&projected, options),
        None => Ok(projected),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{fit_gbdd, LinearKind};
    use crate::numerics::{cosine, dot};
    use crate::pipeline::Stage;
    use crate::spec::{BiasSpec, Provenance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_space(n: usize, d: usize, seed: u64) -> EmbeddingSpace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                (format!("w{i}"), v)
            })
            .collect();
        EmbeddingSpace::from_pairs(pairs).unwrap()
    }

    fn identity_dict(space: &EmbeddingSpace) -> TranslationDictionary {
        TranslationDictionary::new(
            space.vocab().iter().map(|w| (w.clone(), w.clone())).collect(),
        )
        .unwrap()
    }

    // Q from the QR of a random matrix via Gram-Schmidt
    fn random_rotation(d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            let n = norm(&v);
            if n > 1e-6 {
                cols.push(v.iter().map(|x| x / n).collect());
            }
        }
        let mut m = Matrix::zeros(d, d);
        for (j, c) in cols.iter().enumerate() {
            for (i, &x) in c.iter().enumerate() {
                m.set(i, j, x);
            }
        }
        m
    }

    #[test]
    fn parse_dictionary() {
        let d = TranslationDictionary::parse("# en de\ndog\tHund\ncat\tKatze\ndog\tHund\n\ndog\tRüde\n").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.pairs()[2], ("dog".to_string(), "Rüde".to_string()));
        assert!(matches!(TranslationDictionary::parse("a b c\n"), Err(Error::Parse { line: 1, .. })));
        assert!(TranslationDictionary::parse("\n# nothing\n").is_err());
    }

    #[test]
    fn self_projection_is_identity() {
        let s = random_space(30, 6, 1);
        let (w, r) = fit_projection(&s, &s, &identity_dict(&s)).unwrap();
        assert_eq!(r.used, 30);
        assert!(w.is_identity());
    }

    #[test]
    fn rotated_target_recovers_inverse() {
        let src = random_space(40, 5, 2);
        let q = random_rotation(5, 3);
        let tgt = src.with_vectors(src.vectors().matmul(&q).unwrap()).unwrap();
        let (w, _) = fit_projection(&src, &tgt, &identity_dict(&src)).unwrap();
        assert!(w.max_abs_diff(&q.transpose()) < 1e-8);
        assert!(w.orthogonality_error() < 1e-8);
        let back = project(&tgt, &w).unwrap();
        assert!(back.vectors().max_abs_diff(src.vectors()) < 1e-8);
    }

    #[test]
    fn oov_pairs_are_counted() {
        let s = random_space(10, 3, 4);
        let mut pairs: Vec<_> = s.vocab().iter().map(|w| (w.clone(), w.clone())).collect();
        pairs.push(("zzz".into(), "w0".into()));
        pairs.push(("w1".into(), "yyy".into()));
        let (_, r) = fit_projection(&s, &s, &TranslationDictionary::new(pairs).unwrap()).unwrap();
        assert_eq!((r.used, r.source_oov, r.target_oov), (10, 1, 1));
        let none = TranslationDictionary::new(vec![("x".into(), "y".into())]).unwrap();
        assert!(matches!(fit_projection(&s, &s, &none), Err(Error::InsufficientTerms(_))));
        let other = random_space(10, 4, 5);
        assert!(matches!(fit_projection(&s, &other, &none), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn projection_preserves_cosines() {
        let src = random_space(25, 4, 6);
        let tgt = random_space(25, 4, 7);
        let (w, _) = fit_projection(&src, &tgt, &identity_dict(&src)).unwrap();
        let p = project(&tgt, &w).unwrap();
        for i in 0..25 {
            for j in 0..25 {
                let a = cosine(tgt.vector(i), tgt.vector(j)).unwrap();
                let b = cosine(p.vector(i), p.vector(j)).unwrap();
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn transfer_removes_planted_bias() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<(String, Vec<f64>)> = (0..40)
            .map(|i| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                if i < 5 {
                    v[0] += 3.0;
                } else if i < 10 {
                    v[0] -= 3.0;
                }
                (format!("w{i}"), v)
            })
            .collect();
        let src = EmbeddingSpace::from_pairs(pairs).unwrap().normalize().unwrap();
        let q = random_rotation(d, 9);
        let tgt = src.with_vectors(src.vectors().matmul(&q).unwrap()).unwrap();
        let s = |r: std::ops::Range<usize>| r.map(|i| format!("w{i}")).collect::<Vec<_>>();
        let spec = BiasSpec::from_words("p", &s(0..5), &s(5..10), None, Provenance::Augmented).unwrap();
        let g = fit_gbdd(&src, &spec).unwrap();
        let LinearKind::Gbdd(b) = g.kind.clone() else { unreachable!() };
        let pipe = DebiasPipeline::compose(vec![Stage::Linear(g)]).unwrap();
        let (w, _) = fit_projection(&src, &tgt, &identity_dict(&src)).unwrap();
        let out = transfer_debias(&tgt, &w, Some(&pipe), ApplyOptions::default()).unwrap();
        for row in out.vectors().row_iter() {
            assert!(dot(row, &b).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_transfer_is_bit_exact() {
        let s = random_space(20, 4, 10).normalize().unwrap();
        let names = |r: std::ops::Range<usize>| r.map(|i| format!("w{i}")).collect::<Vec<_>>();
        let spec = BiasSpec::from_words("p", &names(0..3), &names(3..6), None, Provenance::Augmented).unwrap();
        let pipe = DebiasPipeline::compose(vec![Stage::Linear(fit_gbdd(&s, &spec).unwrap())]).unwrap();
        let (w, _) = fit_projection(&s, &s, &identity_dict(&s)).unwrap();
        let opts = ApplyOptions::default();
        assert_eq!(transfer_debias(&s, &w, Some(&pipe), opts).unwrap(), pipe.apply(&s, opts).unwrap());
        assert_eq!(transfer_debias(&s, &w, None, opts).unwrap(), s);
    }
}
