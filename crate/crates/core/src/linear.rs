//! Projection-based (GBDD) and alignment-based (BAM) debiasing.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_f64s, encode_f64s};
use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, procrustes, top_singular_vector_from_gram, Matrix};
use crate::spec::BiasSpec;

/// Which spec was used for fitting and how many of its terms were usable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FittedOn {
    pub spec: String,
    pub t1_used: usize,
    pub t2_used: usize,
    pub t1_missing: usize,
    pub t2_missing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearKind {
    /// Unit bias direction `b`.
    Gbdd(Vec<f64>),
    /// Orthogonal `d x d` map aligning T1 onto T2.
    Bam(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDebiaser {
    pub kind: LinearKind,
    pub fitted_on: FittedOn,
}

/// Unit-normalized vectors of the in-vocabulary target terms.
pub(crate) struct TargetVectors {
    pub t1: Vec<Vec<f64>>,
    pub t2: Vec<Vec<f64>>,
    pub fitted_on: FittedOn,
}

pub(crate) fn target_vectors(space: &EmbeddingSpace, spec: &BiasSpec) -> Result<TargetVectors> {
    let collect = |words: Vec<String>| -> Result<(Vec<Vec<f64>>, usize)> {
        let mut out = Vec::new();
        let mut missing = 0;
        for w in &words {
            match space.lookup(w) {
                Some(v) => {
                    let n = norm(v);
                    if n == 0.0 {
                        return Err(Error::ZeroNorm(w.clone()));
                    }
                    out.push(v.iter().map(|x| x / n).collect());
                }
                None => missing += 1,
            }
        }
        Ok((out, missing))
    };
    let (t1, t1_missing) = collect(spec.t1_words())?;
    let (t2, t2_missing) = collect(spec.t2_words())?;
    if t1_missing + t2_missing > 0 {
        warn!(
            "{}: skipped {t1_missing} T1 and {t2_missing} T2 terms missing from the space",
            spec.name
        );
    }
    if t1.is_empty() || t2.is_empty() {
        return Err(Error::InsufficientTerms(format!(
            "{}: no usable (t1, t2) pair",
            spec.name
        )));
    }
    Ok(TargetVectors {
        fitted_on: FittedOn {
            spec: spec.name.clone(),
            t1_used: t1.len(),
            t2_used: t2.len(),
            t1_missing,
            t2_missing,
        },
        t1,
        t2,
    })
}

/// `B^T B` for the rows `t1_i - t2_j` over all cross pairs, without
/// materializing `B`:
/// `n2 sum x x^T + n1 sum y y^T - s1 s2^T - s2 s1^T`.
fn cross_difference_gram(t1: &[Vec<f64>], t2: &[Vec<f64>], d: usize) -> Matrix {
    let (n1, n2) = (t1.len() as f64, t2.len() as f64);
    let mut g = vec![0.0; d * d];
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for (set, weight, sum) in [(t1, n2, &mut s1), (t2, n1, &mut s2)] {
        for v in set {
            for (i, &vi) in v.iter().enumerate() {
                sum[i] += vi;
                let wi = weight * vi;
                for (gij, &vj) in g[i * d..(i + 1) * d].iter_mut().zip(v) {
                    *gij += wi * vj;
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            g[i * d + j] -= s1[i] * s2[j] + s2[i] * s1[j];
        }
    }
    Matrix::new(d, d, g).expect("d x d gram")
}

/// Fits the global bias direction: the top right singular vector of the
/// matrix whose rows are `t1_i - t2_j` over all cross pairs.
pub fn fit_gbdd(space: &EmbeddingSpace, spec: &BiasSpec) -> Result<LinearDebiaser> {
    let tv = target_vectors(space, spec)?;
    // B is zero exactly when every target vector is the same
    let first = &tv.t1[0];
    if tv.t1.iter().chain(&tv.t2).all(|v| v == first) {
        return Err(Error::Degenerate(format!(
            "{}: T1 and T2 vectors coincide, no bias direction",
            spec.name
        )));
    }
    let gram = cross_difference_gram(&tv.t1, &tv.t2, space.dim());
    let top = top_singular_vector_from_gram(&gram).map_err(|e| match e {
        Error::Degenerate(_) => Error::Degenerate(format!(
            "{}: T1 and T2 vectors coincide, no bias direction",
            spec.name
        )),
        other => other,
    })?;
    Ok(LinearDebiaser {
        kind: LinearKind::Gbdd(top.vector),
        fitted_on: tv.fitted_on,
    })
}

/// Fits the orthogonal map sending each T1 vector toward each T2 vector over
/// all cross pairs.
pub fn fit_bam(space: &EmbeddingSpace, spec: &BiasSpec) -> Result<LinearDebiaser> {
    let tv = target_vectors(space, spec)?;
    let d = space.dim();
    let n = tv.t1.len() * tv.t2.len();
    let mut xs = Vec::with_capacity(n * d);
    let mut xt = Vec::with_capacity(n * d);
    for a in &tv.t1 {
        for b in &tv.t2 {
            xs.extend_from_slice(a);
            xt.extend_from_slice(b);
        }
    }
    let w = procrustes(&Matrix::new(n, d, xs)?, &Matrix::new(n, d, xt)?)?;
    Ok(LinearDebiaser {
        kind: LinearKind::Bam(w),
        fitted_on: tv.fitted_on,
    })
}

/// `x - <x, b> b`.
pub fn project_out(b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            found: x.len(),
        });
    }
    let p = dot(x, b);
    Ok(x.iter().zip(b).map(|(xi, bi)| xi - p * bi).collect())
}

fn project_out_into(b: &[f64], x: &[f64], out: &mut [f64]) {
    let p = dot(x, b);
    for ((o, xi), bi) in out.iter_mut().zip(x).zip(b) {
        *o = xi - p * bi;
    }
}

fn unit_into(x: &[f64], out: &mut [f64]) {
    let n = norm(x);
    if n == 0.0 {
        out.fill(0.0);
    } else {
        for (o, v) in out.iter_mut().zip(x) {
            *o = v / n;
        }
    }
}

impl LinearDebiaser {
    pub fn dim(&self) -> usize {
        match &self.kind {
            LinearKind::Gbdd(b) => b.len(),
            LinearKind::Bam(w) => w.rows(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LinearKind::Gbdd(_) => "gbdd",
            LinearKind::Bam(_) => "bam",
        }
    }

    /// Transforms one vector. GBDD expects a unit-normalized input.
    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            LinearKind::Gbdd(b) => project_out(b, x),
            LinearKind::Bam(w) => {
                let xw = w.left_apply(x)?;
                Ok(x.iter().zip(&xw).map(|(a, b)| (a + b) / 2.0).collect())
            }
        }
    }

    /// Transforms every row of `space`. GBDD first scales each row to unit
    /// length (zero rows stay zero); BAM applies `(x + xW) / 2` as is.
    pub fn apply(&self, space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
        let d = self.dim();
        if space.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: space.dim(),
            });
        }
        match &self.kind {
            LinearKind::Gbdd(b) => space.map_rows(d, |x, out| {
                let mut unit = vec![0.0; d];
                unit_into(x, &mut unit);
                project_out_into(b, &unit, out);
            }),
            LinearKind::Bam(w) => {
                let xw = space.vectors().matmul(w)?;
                let data = space
                    .vectors()
                    .data()
                    .iter()
                    .zip(xw.data())
                    .map(|(a, b)| (a + b) / 2.0)
                    .collect();
                space.with_vectors(Matrix::new(space.len(), d, data)?)
            }
        }
    }

    pub fn to_json(&self) -> String {
        let payload = match &self.kind {
            LinearKind::Gbdd(b) => encode_f64s(b),
            LinearKind::Bam(w) => encode_f64s(w.data()),
        };
        let file = TransformFile {
            kind: self.kind_name().to_string(),
            dim: self.dim(),
            fitted_on: self.fitted_on.clone(),
            payload,
        };
        serde_json::to_string_pretty(&file).expect("transform serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TransformFile = serde_json::from_str(text)?;
        let d = file.dim;
        if d == 0 {
            return Err(Error::Serde("transform of dimension 0".into()));
        }
        let kind = match file.kind.as_str() {
            "gbdd" => LinearKind::Gbdd(decode_f64s(&file.payload, d)?),
            "bam" => LinearKind::Bam(Matrix::new(d, d, decode_f64s(&file.payload, d * d)?)?),
            other => return Err(Error::Serde(format!("unknown transform kind {other:?}"))),
        };
        Ok(LinearDebiaser {
            kind,
            fitted_on: file.fitted_on,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformFile {
    kind: String,
    dim: usize,
    fitted_on: FittedOn,
    payload: String,
}
