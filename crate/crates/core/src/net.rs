//! DebiasNet: a residual feed-forward map from the space to itself, trained
//! so that T1 and T2 terms end up equidistant from attribute terms while the
//! mapped vectors stay close to their originals.
//!
//! The map is `y = x + tanh(... tanh(x W1 + b1) ...) Wo + bo`. Output weights
//! start at zero, so an untrained network is exactly the identity.

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_f64s, encode_f64s};
use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::spec::BiasSpec;

/// Smallest norm used inside cosine computations.
pub const NORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Half-width of the uniform output-layer init; 0 gives the identity map.
    pub output_init_scale: f64,
    /// Return the parameters of the epoch with the lowest full-data mean J.
    pub keep_best: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_layers: 5,
            hidden_width: 300,
            lambda: 0.2,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            output_init_scale: 0.0,
            keep_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: Matrix,
    b: Vec<f64>,
}

impl Layer {
    fn len(&self) -> usize {
        self.w.data().len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasNetwork {
    dim: usize,
    hidden: Vec<Layer>,
    output: Layer,
    pub config: NetConfig,
}

/// Word indices of one `(t1, t2, a)` training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub t1: usize,
    pub t2: usize,
    pub a: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub ld: f64,
    pub lr: f64,
    pub j: f64,
    /// Some output norm fell below the clamp.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ld: f64,
    pub lr: f64,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Entry 0 is the untrained network; entry `e` follows epoch `e`.
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub triples: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_ld,mean_lr,mean_j\n");
        for e in &self.curve {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.ld, e.lr, e.j));
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleReport {
    pub t1_missing: usize,
    pub t2_missing: usize,
    pub a_missing: usize,
}

/// Full Cartesian product `T1 x T2 x A` over in-vocabulary terms, in spec
/// order. A paired spec has its attribute sets merged first.
pub fn build_triples(
    spec: &BiasSpec,
    space: &EmbeddingSpace,
) -> Result<(Vec<TrainingTriple>, TripleReport)> {
    let a_words = spec.single_words().ok_or_else(|| {
        Error::InvalidSpec(format!("{}: DebiasNet needs attribute terms", spec.name))
    })?;
    let idx = |words: &[String]| -> (Vec<usize>, usize) {
        let found: Vec<usize> = words.iter().filter_map(|w| space.index_of(w)).collect();
        let missing = words.len() - found.len();
        (found, missing)
    };
    let (t1, t1_missing) = idx(&spec.t1_words());
    let (t2, t2_missing) = idx(&spec.t2_words());
    let (a, a_missing) = idx(&a_words);
    for (name, set) in [("t1", &t1), ("t2", &t2), ("a", &a)] {
        if set.is_empty() {
            return Err(Error::InsufficientTerms(format!(
                "{}: set {name} is empty after vocabulary filtering",
                spec.name
            )));
        }
    }
    let mut out = Vec::with_capacity(t1.len() * t2.len() * a.len());
    for &i in &t1 {
        for &j in &t2 {
            for &k in &a {
                out.push(TrainingTriple { t1: i, t2: j, a: k });
            }
        }
    }
    Ok((
        out,
        TripleReport {
            t1_missing,
            t2_missing,
            a_missing,
        },
    ))
}

fn cos_clamped(u: &[f64], v: &[f64]) -> (f64, f64, f64, bool) {
    let nu = norm(u);
    let nv = norm(v);
    let clamped = nu < NORM_CLAMP || nv < NORM_CLAMP;
    let (nu, nv) = (nu.max(NORM_CLAMP), nv.max(NORM_CLAMP));
    (dot(u, v) / (nu * nv), nu, nv, clamped)
}

/// Adds `scale * d cos(u, v) / du` to `g`.
fn add_cos_grad(g: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let (c, nu, nv, _) = cos_clamped(u, v);
    let inv = 1.0 / (nu * nv);
    let k = c / (nu * nu);
    for ((gi, ui), vi) in g.iter_mut().zip(u).zip(v) {
        *gi += scale * (vi * inv - k * ui);
    }
}

/// Loss of one triple from input vectors `x*` and network outputs `y*`.
pub fn triple_loss(x: [&[f64]; 3], y: [&[f64]; 3], lambda: f64) -> Loss {
    let (c1, _, _, k1) = cos_clamped(y[0], y[2]);
    let (c2, _, _, k2) = cos_clamped(y[1], y[2]);
    let ld = (c2 - c1) * (c2 - c1);
    let mut lr = 0.0;
    let mut clamped = k1 || k2;
    for i in 0..3 {
        let (c, _, _, k) = cos_clamped(x[i], y[i]);
        lr += 1.0 - c;
        clamped |= k;
    }
    Loss {
        ld,
        lr,
        j: ld + lambda * lr,
        clamped,
    }
}

/// `dJ/dy` for the three outputs, split into the L_D part and the λ·L_R part.
fn triple_output_grads(
    x: [&[f64]; 3],
    y: [&[f64]; 3],
    lambda: f64,
) -> ([Vec<f64>; 3], [Vec<f64>; 3]) {
    let d = y[0].len();
    let mut gd = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut gr = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    // L_D = (c2 - c1)^2 with c1 = cos(y1, ya), c2 = cos(y2, ya)
    let (c1, ..) = cos_clamped(y[0], y[2]);
    let (c2, ..) = cos_clamped(y[1], y[2]);
    let f = 2.0 * (c2 - c1);
    add_cos_grad(&mut gd[0], y[0], y[2], -f);
    add_cos_grad(&mut gd[2], y[2], y[0], -f);
    add_cos_grad(&mut gd[1], y[1], y[2], f);
    add_cos_grad(&mut gd[2], y[2], y[1], f);
    if lambda != 0.0 {
        for i in 0..3 {
            add_cos_grad(&mut gr[i], y[i], x[i], -lambda);
        }
    }
    (gd, gr)
}

/// Cached activations for a batch of inputs (one row per input).
struct Forward {
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Matrix>,
    out: Matrix,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone)]
struct Grads {
    hidden: Vec<Layer>,
    output: Layer,
}

impl DebiasNetwork {
    pub fn new(dim: usize, config: NetConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("network dimension must be positive".into()));
        }
        if config.hidden_layers > 0 && config.hidden_width == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut hidden = Vec::with_capacity(config.hidden_layers);
        let mut fan_in = dim;
        for _ in 0..config.hidden_layers {
            let fan_out = config.hidden_width;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            hidden.push(Layer {
                w: Matrix::new(fan_in, fan_out, data)?,
                b: vec![0.0; fan_out],
            });
            fan_in = fan_out;
        }
        let s = config.output_init_scale;
        let (w, b) = if s > 0.0 {
            (
                (0..fan_in * dim).map(|_| rng.random_range(-s..=s)).collect(),
                (0..dim).map(|_| rng.random_range(-s..=s)).collect(),
            )
        } else {
            (vec![0.0; fan_in * dim], vec![0.0; dim])
        };
        Ok(DebiasNetwork {
            dim,
            hidden,
            output: Layer {
                w: Matrix::new(fan_in, dim, w)?,
                b,
            },
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parameter_count(&self) -> usize {
        self.hidden.iter().map(Layer::len).sum::<usize>() + self.output.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.parameter_count());
        for l in self.hidden.iter().chain(std::iter::once(&self.output)) {
            p.extend_from_slice(l.w.data());
            p.extend_from_slice(&l.b);
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for l in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            let n = l.w.data().len();
            l.w.data_mut().copy_from_slice(&p[off..off + n]);
            off += n;
            let m = l.b.len();
            l.b.copy_from_slice(&p[off..off + m]);
            off += m;
        }
    }

    fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            let n = l.w.data().len();
            if i < n {
                return &mut l.w.data_mut()[i];
            }
            i -= n;
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    fn forward(&self, x: Matrix) -> Result<Forward> {
        let mut acts = vec![x];
        for layer in &self.hidden {
            let mut z = acts.last().expect("input").matmul(&layer.w)?;
            let w = z.cols();
            z.data_mut().chunks_exact_mut(w).for_each(|row| {
                for (v, b) in row.iter_mut().zip(&layer.b) {
                    *v = (*v + b).tanh();
                }
            });
            acts.push(z);
        }
        let mut out = acts.last().expect("input").matmul(&self.output.w)?;
        let d = self.dim;
        let input = &acts[0];
        out.data_mut()
            .chunks_exact_mut(d)
            .zip(input.row_iter())
            .for_each(|(row, x)| {
                for ((v, b), xi) in row.iter_mut().zip(&self.output.b).zip(x) {
                    *v += b + xi;
                }
            });
        Ok(Forward { acts, out })
    }

    /// Accumulates parameter gradients given `dJ/dy` for every batch row.
    fn backward(&self, fwd: &Forward, gout: &Matrix, grads: &mut Grads) -> Result<()> {
        let h_last = fwd.acts.last().expect("input");
        add_into(&mut grads.output.w, &h_last.t_matmul(gout)?);
        add_col_sums(&mut grads.output.b, gout);
        let mut dh = matmul_t(gout, &self.output.w);
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let h = &fwd.acts[l + 1];
            let mut dz = dh;
            for (g, a) in dz.data_mut().iter_mut().zip(h.data()) {
                *g *= 1.0 - a * a;
            }
            add_into(&mut grads.hidden[l].w, &fwd.acts[l].t_matmul(&dz)?);
            add_col_sums(&mut grads.hidden[l].b, &dz);
            dh = matmul_t(&dz, &layer.w);
        }
        Ok(())
    }

    fn zero_grads(&self) -> Grads {
        let z = |l: &Layer| Layer {
            w: Matrix::zeros(l.w.rows(), l.w.cols()),
            b: vec![0.0; l.b.len()],
        };
        Grads {
            hidden: self.hidden.iter().map(z).collect(),
            output: z(&self.output),
        }
    }

    /// Maps one vector.
    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.forward(Matrix::new(1, self.dim, x.to_vec())?)?.out.into_data())
    }

    /// Maps every row of `space`, in row blocks. Rows are used as given.
    pub fn apply(&self, space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
        const BLOCK: usize = 1024;
        if space.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: space.dim(),
            });
        }
        let d = self.dim;
        let blocks: Vec<Result<Vec<f64>>> = space
            .vectors()
            .data()
            .par_chunks(BLOCK * d)
            .map(|chunk| {
                let m = Matrix::new(chunk.len() / d, d, chunk.to_vec())?;
                Ok(self.forward(m)?.out.into_data())
            })
            .collect();
        let mut data = Vec::with_capacity(space.len() * d);
        for b in blocks {
            data.extend(b?);
        }
        space.with_vectors(Matrix::new(space.len(), d, data)?)
    }

    /// Loss of one triple given input vectors.
    pub fn loss(&self, x: [&[f64]; 3]) -> Result<Loss> {
        let m = Matrix::from_rows(&x)?;
        let out = self.forward(m)?.out;
        Ok(triple_loss(x, [out.row(0), out.row(1), out.row(2)], self.config.lambda))
    }

    /// Gradient of J for one triple, flattened like the parameters, returned
    /// as the L_D part and the λ·L_R part.
    fn triple_grads(&self, x: [&[f64]; 3]) -> Result<(Vec<f64>, Vec<f64>)> {
        let fwd = self.forward(Matrix::from_rows(&x)?)?;
        let y = [fwd.out.row(0), fwd.out.row(1), fwd.out.row(2)];
        let (gd, gr) = triple_output_grads(x, y, self.config.lambda);
        let flat = |g: &[Vec<f64>; 3]| -> Result<Vec<f64>> {
            let mut grads = self.zero_grads();
            self.backward(&fwd, &Matrix::from_rows(g)?, &mut grads)?;
            Ok(flatten(&grads))
        };
        Ok((flat(&gd)?, flat(&gr)?))
    }

    /// Full gradient of J for one triple, flattened like the parameters.
    pub fn gradient(&self, x: [&[f64]; 3]) -> Result<Vec<f64>> {
        let (d, r) = self.triple_grads(x)?;
        Ok(d.iter().zip(&r).map(|(a, b)| a + b).collect())
    }

    /// Gradient of the λ·L_R term alone, flattened like the parameters.
    pub fn regularizer_gradient(&self, x: [&[f64]; 3]) -> Result<Vec<f64>> {
        Ok(self.triple_grads(x)?.1)
    }

    pub fn to_json(&self) -> String {
        let file = NetFile {
            dim: self.dim,
            hidden_layers: self.hidden.len(),
            hidden_width: self.hidden.first().map_or(0, |l| l.b.len()),
            activation: "tanh".into(),
            config: self.config.clone(),
            payload: encode_f64s(&self.params()),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetFile = serde_json::from_str(text)?;
        if file.activation != "tanh" {
            return Err(Error::Serde(format!("unsupported activation {:?}", file.activation)));
        }
        let mut config = file.config;
        config.hidden_layers = file.hidden_layers;
        config.hidden_width = file.hidden_width;
        let mut net = DebiasNetwork::new(file.dim, config)?;
        let p = decode_f64s(&file.payload, net.parameter_count())?;
        net.set_params(&p);
        Ok(net)
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
struct NetFile {
    dim: usize,
    hidden_layers: usize,
    hidden_width: usize,
    activation: String,
    config: NetConfig,
    payload: String,
}

fn flatten(g: &Grads) -> Vec<f64> {
    let mut p = Vec::new();
    for l in g.hidden.iter().chain(std::iter::once(&g.output)) {
        p.extend_from_slice(l.w.data());
        p.extend_from_slice(&l.b);
    }
    p
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

fn add_col_sums(dst: &mut [f64], m: &Matrix) {
    for row in m.row_iter() {
        for (a, b) in dst.iter_mut().zip(row) {
            *a += b;
        }
    }
}

/// `a * b^T`.
fn matmul_t(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    let n = b.rows();
    if n == 0 {
        return out;
    }
    out.data_mut()
        .par_chunks_mut(n)
        .zip(a.data().par_chunks(a.cols().max(1)))
        .for_each(|(dst, ar)| {
            for (o, br) in dst.iter_mut().zip(b.row_iter()) {
                *o = dot(ar, br);
            }
        });
    out
}

/// Central-difference check of the analytic gradient of J.
///
/// Returns the largest relative error `|a - n| / max(|a|, |n|, floor)` over
/// the checked parameters. `sample` limits the check to that many parameters
/// drawn with a fixed seed; `None` checks all of them.
pub fn grad_check(
    net: &DebiasNetwork,
    x: [&[f64]; 3],
    epsilon: f64,
    sample: Option<usize>,
) -> Result<GradCheck> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let analytic = net.gradient(x)?;
    let total = analytic.len();
    let indices: Vec<usize> = match sample {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
            rand::seq::index::sample(&mut rng, total, k).into_vec()
        }
        _ => (0..total).collect(),
    };
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    for &i in &indices {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + epsilon;
        let jp = probe.loss(x)?.j;
        *probe.param_mut(i) = orig - epsilon;
        let jm = probe.loss(x)?.j;
        *probe.param_mut(i) = orig;
        let numeric = (jp - jm) / (2.0 * epsilon);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
        worst_abs = worst_abs.max(abs);
    }
    Ok(GradCheck {
        max_relative_error: worst,
        max_absolute_error: worst_abs,
        checked: indices.len(),
    })
}

/// Denominator floor of the relative error, so parameters whose gradient is
/// numerically zero compare by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
}

/// Minibatch gradient descent on the mean of J over each batch.
///
/// Input rows are scaled to unit length before training. Triples are
/// reshuffled every epoch with a generator seeded from `config.seed`.
pub fn train(
    net: &mut DebiasNetwork,
    triples: &[TrainingTriple],
    space: &EmbeddingSpace,
) -> Result<TrainReport> {
    if triples.is_empty() {
        return Err(Error::InsufficientTerms("no training triples".into()));
    }
    if space.dim() != net.dim {
        return Err(Error::DimensionMismatch {
            expected: net.dim,
            found: space.dim(),
        });
    }
    let cfg = net.config.clone();
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }

    // dense local ids for the words that occur in triples
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut local_triples = Vec::with_capacity(triples.len());
    for t in triples {
        let mut id = |w: usize| -> Result<usize> {
            if let Some(&i) = local.get(&w) {
                return Ok(i);
            }
            if w >= space.len() {
                return Err(Error::InvalidArgument(format!("word index {w} out of range")));
            }
            let v = space.vector(w);
            let n = norm(v);
            if n == 0.0 {
                return Err(Error::ZeroNorm(space.word(w).to_string()));
            }
            rows.push(v.iter().map(|x| x / n).collect());
            local.insert(w, rows.len() - 1);
            Ok(rows.len() - 1)
        };
        local_triples.push([id(t.t1)?, id(t.t2)?, id(t.a)?]);
    }
    let inputs = Matrix::from_rows(&rows)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..local_triples.len()).collect();
    let mut curve = vec![full_loss(net, &inputs, &local_triples, 0)?];
    let mut best = (curve[0].j, 0usize, net.params());

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step(net, &inputs, &local_triples, batch, cfg.learning_rate)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch },
                    other => other,
                })?;
        }
        let e = full_loss(net, &inputs, &local_triples, epoch)?;
        if !e.j.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if e.j < best.0 {
            best = (e.j, epoch, net.params());
        }
        curve.push(e);
    }
    let best_epoch = if cfg.keep_best {
        net.set_params(&best.2);
        best.1
    } else {
        cfg.epochs
    };
    info!(
        "trained on {} triples: mean J {:.6} -> {:.6} (best epoch {best_epoch})",
        triples.len(),
        curve[0].j,
        curve[best_epoch].j
    );
    Ok(TrainReport {
        curve,
        best_epoch,
        triples: triples.len(),
    })
}

fn full_loss(
    net: &DebiasNetwork,
    inputs: &Matrix,
    triples: &[[usize; 3]],
    epoch: usize,
) -> Result<EpochLoss> {
    let out = net.forward(inputs.clone())?.out;
    let (mut ld, mut lr, mut j) = (0.0, 0.0, 0.0);
    let mut clamped = false;
    for t in triples {
        let l = triple_loss(
            [inputs.row(t[0]), inputs.row(t[1]), inputs.row(t[2])],
            [out.row(t[0]), out.row(t[1]), out.row(t[2])],
            net.config.lambda,
        );
        ld += l.ld;
        lr += l.lr;
        j += l.j;
        clamped |= l.clamped;
    }
    if clamped {
        warn!("epoch {epoch}: network output norm clamped at {NORM_CLAMP}");
    }
    let n = triples.len() as f64;
    Ok(EpochLoss {
        epoch,
        ld: ld / n,
        lr: lr / n,
        j: j / n,
    })
}

/// One gradient step on the mean J of `batch`. Each distinct word is passed
/// through the network once.
fn step(
    net: &mut DebiasNetwork,
    inputs: &Matrix,
    triples: &[[usize; 3]],
    batch: &[usize],
    lr: f64,
) -> Result<()> {
    let d = net.dim;
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut words = Vec::new();
    for &t in batch {
        for &w in &triples[t] {
            slot.entry(w).or_insert_with(|| {
                words.push(w);
                words.len() - 1
            });
        }
    }
    let mut x = Vec::with_capacity(words.len() * d);
    for &w in &words {
        x.extend_from_slice(inputs.row(w));
    }
    let fwd = net.forward(Matrix::new(words.len(), d, x)?)?;
    let mut gout = Matrix::zeros(words.len(), d);
    let scale = 1.0 / batch.len() as f64;
    for &t in batch {
        let s = triples[t].map(|w| slot[&w]);
        let xs = [fwd.acts[0].row(s[0]), fwd.acts[0].row(s[1]), fwd.acts[0].row(s[2])];
        let ys = [fwd.out.row(s[0]), fwd.out.row(s[1]), fwd.out.row(s[2])];
        let (gd, gr) = triple_output_grads(xs, ys, net.config.lambda);
        for k in 0..3 {
            let row = gout.row_mut(s[k]);
            for ((r, a), b) in row.iter_mut().zip(&gd[k]).zip(&gr[k]) {
                *r += scale * (a + b);
            }
        }
    }
    let mut grads = net.zero_grads();
    net.backward(&fwd, &gout, &mut grads)?;
    let g = flatten(&grads);
    let mut p = net.params();
    for (pi, gi) in p.iter_mut().zip(&g) {
        *pi -= lr * gi;
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network parameters".into()));
    }
    net.set_params(&p);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;
    use crate::spec::Provenance;

    fn small(d: usize, layers: usize, width: usize, seed: u64, out_scale: f64) -> DebiasNetwork {
        DebiasNetwork::new(
            d,
            NetConfig {
                hidden_layers: layers,
                hidden_width: width,
                seed,
                output_init_scale: out_scale,
                ..NetConfig::default()
            },
        )
        .unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn identity_at_init() {
        let net = small(4, 2, 5, 1, 0.0);
        let x = [0.1, -0.5, 0.3, 0.8];
        assert_eq!(net.apply_vector(&x).unwrap(), x.to_vec());
        let l = net.loss([&x, &[0.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(l.lr.abs() < 1e-15);
    }

    #[test]
    fn equidistant_outputs_have_zero_ld() {
        let a = [1.0, 0.0, 0.0];
        let t1 = [0.6, 0.8, 0.0];
        let t2 = [0.6, 0.0, 0.8];
        let l = triple_loss([&t1, &t2, &a], [&t1, &t2, &a], 0.2);
        assert_eq!(l.ld, 0.0);
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = small(3, 2, 4, 7, 0.3);
        let x: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 3)).collect();
        let l = net.loss([&x[0], &x[1], &x[2]]).unwrap();
        let y: Vec<Vec<f64>> = x.iter().map(|v| net.apply_vector(v).unwrap()).collect();
        let cd = |u: &[f64], v: &[f64]| 1.0 - cosine(u, v).unwrap();
        let ld = (cd(&y[0], &y[2]) - cd(&y[1], &y[2])).powi(2);
        let lr = cd(&x[0], &y[0]) + cd(&x[1], &y[1]) + cd(&x[2], &y[2]);
        assert!((l.ld - ld).abs() < 1e-14);
        assert!((l.lr - lr).abs() < 1e-14);
        assert!((l.j - (ld + 0.2 * lr)).abs() < 1e-14);
    }

    #[test]
    fn gradient_check_tiny_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = small(3, 1, 1, 3, 0.5);
        let x: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 3)).collect();
        let gc = grad_check(&net, [&x[0], &x[1], &x[2]], 1e-6, None).unwrap();
        assert!(gc.max_relative_error < 1e-6, "{gc:?}");
    }

    #[test]
    fn lambda_zero_kills_regularizer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = small(4, 2, 3, 3, 0.5);
        net.config.lambda = 0.0;
        let x: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 4)).collect();
        let g = net.regularizer_gradient([&x[0], &x[1], &x[2]]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn build_triples_cardinality() {
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let space = EmbeddingSpace::from_pairs(
            words.iter().enumerate().map(|(i, w)| (w.clone(), vec![1.0, i as f64])).collect(),
        )
        .unwrap();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let spec = BiasSpec::from_words(
            "t",
            &s(&["w0", "w1"]),
            &s(&["w2", "w3", "w4"]),
            Some((&s(&["w5", "w6", "w7", "w8"]), None)),
            Provenance::Augmented,
        )
        .unwrap();
        let (t, _) = build_triples(&spec, &space).unwrap();
        assert_eq!(t.len(), 24);

        let oov = BiasSpec::from_words(
            "t",
            &s(&["w0", "w1"]),
            &s(&["w2", "w3", "w4"]),
            Some((&s(&["w5", "w6", "w7", "ghost"]), None)),
            Provenance::Augmented,
        )
        .unwrap();
        let (t, r) = build_triples(&oov, &space).unwrap();
        assert_eq!((t.len(), r.a_missing), (18, 1));
    }

    fn toy_problem() -> (EmbeddingSpace, Vec<TrainingTriple>) {
        let space = EmbeddingSpace::from_pairs(vec![
            ("t1", vec![0.9, 0.1, 0.3]),
            ("t2", vec![0.1, 0.9, 0.3]),
            ("a", vec![1.0, 0.0, 0.2]),
        ])
        .unwrap();
        (space, vec![TrainingTriple { t1: 0, t2: 1, a: 2 }])
    }

    #[test]
    fn one_triple_converges() {
        let (space, triples) = toy_problem();
        let mut net = DebiasNetwork::new(
            3,
            NetConfig {
                hidden_layers: 1,
                hidden_width: 8,
                lambda: 0.0,
                learning_rate: 0.5,
                epochs: 200,
                batch_size: 1,
                seed: 1,
                ..NetConfig::default()
            },
        )
        .unwrap();
        let report = train(&mut net, &triples, &space).unwrap();
        assert!(report.curve[0].ld > 0.1);
        assert!(report.curve[report.best_epoch].ld < 1e-4, "{:?}", report.curve.last());
        assert!(report.curve[report.best_epoch].j <= report.curve[0].j);
    }

    #[test]
    fn lambda_zero_descends_monotonically() {
        let (space, triples) = toy_problem();
        for seed in 0..10 {
            let mut net = DebiasNetwork::new(
                3,
                NetConfig {
                    hidden_layers: 2,
                    hidden_width: 6,
                    lambda: 0.0,
                    learning_rate: 0.05,
                    epochs: 60,
                    batch_size: 1,
                    seed,
                    keep_best: false,
                    ..NetConfig::default()
                },
            )
            .unwrap();
            let report = train(&mut net, &triples, &space).unwrap();
            for w in report.curve[1..].windows(2) {
                assert!(w[1].ld <= w[0].ld + 1e-15, "seed {seed}: {:?}", w);
            }
        }
    }

    #[test]
    fn huge_lambda_keeps_space() {
        let (space, triples) = toy_problem();
        let mut net = DebiasNetwork::new(
            3,
            NetConfig {
                hidden_layers: 1,
                hidden_width: 4,
                lambda: 1e6,
                learning_rate: 1e-8,
                epochs: 20,
                batch_size: 1,
                ..NetConfig::default()
            },
        )
        .unwrap();
        train(&mut net, &triples, &space).unwrap();
        let unit = space.normalize().unwrap();
        let out = net.apply(&unit).unwrap();
        for (x, y) in unit.vectors().row_iter().zip(out.vectors().row_iter()) {
            assert!(1.0 - cosine(x, y).unwrap() < 0.01);
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (space, triples) = toy_problem();
        let mut net = DebiasNetwork::new(
            3,
            NetConfig {
                hidden_layers: 1,
                hidden_width: 4,
                learning_rate: 1e300,
                epochs: 5,
                batch_size: 1,
                output_init_scale: 0.5,
                ..NetConfig::default()
            },
        )
        .unwrap();
        assert!(matches!(train(&mut net, &triples, &space), Err(Error::Diverged { epoch: 1 })));
    }

    #[test]
    fn training_is_reproducible_and_checkpoint_round_trips() {
        let (space, triples) = toy_problem();
        let cfg = NetConfig {
            hidden_layers: 2,
            hidden_width: 5,
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 1,
            seed: 42,
            ..NetConfig::default()
        };
        let mut a = DebiasNetwork::new(3, cfg.clone()).unwrap();
        let mut b = DebiasNetwork::new(3, cfg).unwrap();
        train(&mut a, &triples, &space).unwrap();
        train(&mut b, &triples, &space).unwrap();
        assert_eq!(a, b);
        let back = DebiasNetwork::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn trained_net_reduces_association_gap() {
        let (space, triples) = toy_problem();
        let mut net = DebiasNetwork::new(
            3,
            NetConfig {
                hidden_layers: 1,
                hidden_width: 8,
                learning_rate: 0.2,
                epochs: 50,
                batch_size: 1,
                ..NetConfig::default()
            },
        )
        .unwrap();
        let unit = space.normalize().unwrap();
        let gap = |s: &EmbeddingSpace| {
            (cosine(s.vector(0), s.vector(2)).unwrap() - cosine(s.vector(1), s.vector(2)).unwrap()).abs()
        };
        let before = gap(&unit);
        train(&mut net, &triples, &space).unwrap();
        let after = gap(&net.apply(&unit).unwrap());
        assert!(after < before / 5.0, "{before} -> {after}");
    }
}
