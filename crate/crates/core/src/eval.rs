//! Bias and quality measurements: WEAT, ECT, BAT, implicit-bias tests,
//! word-similarity correlation and 2D topology export.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::ml::{cluster_accuracy, kmeans2, svm_fit, SvmParams};
use crate::numerics::{cosine, dot, euclidean_distance, mean, norm, pca_2d, population_std, spearman, Matrix};
use crate::spec::{AugmentedSpec, BiasSpec};

/// Largest number of bipartitions enumerated exactly in `Auto` mode.
pub const EXACT_LIMIT: u64 = 200_000;
pub const MONTE_CARLO_SAMPLES: usize = 100_000;
pub const DEFAULT_PERMUTATION_SEED: u64 = 0x7765_6174;
const MC_CHUNK: usize = 10_000;

/// Unit vectors of the words found in `space`, with the miss count. Zero rows
/// count as misses.
fn unit_vectors(space: &EmbeddingSpace, words: &[String]) -> (Vec<Vec<f64>>, usize) {
    let mut out = Vec::with_capacity(words.len());
    let mut missing = 0;
    for w in words {
        match space.lookup(w) {
            Some(v) if norm(v) > 0.0 => {
                let n = norm(v);
                out.push(v.iter().map(|x| x / n).collect());
            }
            _ => missing += 1,
        }
    }
    (out, missing)
}

fn raw_vectors(space: &EmbeddingSpace, words: &[String]) -> (Vec<Vec<f64>>, usize) {
    let found: Vec<Vec<f64>> = words.iter().filter_map(|w| space.lookup(w).map(<[f64]>::to_vec)).collect();
    let missing = words.len() - found.len();
    (found, missing)
}

fn require_nonempty(sets: &[(&str, usize)], metric: &str) -> Result<()> {
    for (name, len) in sets {
        if *len == 0 {
            return Err(Error::InsufficientTerms(format!(
                "{metric}: set {name} has no in-vocabulary terms"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PermutationMode {
    /// Exact when the bipartition count is at most [`EXACT_LIMIT`].
    Auto { samples: usize, seed: u64 },
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for PermutationMode {
    fn default() -> Self {
        PermutationMode::Auto {
            samples: MONTE_CARLO_SAMPLES,
            seed: DEFAULT_PERMUTATION_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatResult {
    pub statistic: f64,
    /// `None` when the associations have zero spread.
    pub effect_size: Option<f64>,
    pub p_value: f64,
    pub exact: bool,
    pub permutations: u64,
    /// Fraction of permutations tying the observed statistic.
    pub tie_fraction: f64,
    pub n_t1: usize,
    pub n_t2: usize,
    pub oov: usize,
}

/// `n choose k`, saturating.
pub fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k.min(n));
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
        if r > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    r as u64
}

/// Per-term association `mean cos(w, A1) - mean cos(w, A2)`.
fn association(w: &[f64], a1: &[Vec<f64>], a2: &[Vec<f64>]) -> f64 {
    let m1 = a1.iter().map(|a| dot(w, a)).sum::<f64>() / a1.len() as f64;
    let m2 = a2.iter().map(|a| dot(w, a)).sum::<f64>() / a2.len() as f64;
    m1 - m2
}

/// Word Embedding Association Test on a paired spec.
///
/// The statistic is `sum_T1 s(t) - sum_T2 s(t)`, the effect size divides the
/// difference of means by the population standard deviation over T1 ∪ T2,
/// and the one-sided p-value is the fraction of equal-size bipartitions of
/// T1 ∪ T2 whose statistic strictly exceeds the observed one.
pub fn weat(space: &EmbeddingSpace, spec: &BiasSpec, mode: PermutationMode) -> Result<WeatResult> {
    let (a1w, a2w) = spec.paired_words().ok_or_else(|| {
        Error::InvalidSpec(format!("{}: WEAT needs paired attribute sets", spec.name))
    })?;
    let (t1, m1) = unit_vectors(space, &spec.t1_words());
    let (t2, m2) = unit_vectors(space, &spec.t2_words());
    let (a1, m3) = unit_vectors(space, &a1w);
    let (a2, m4) = unit_vectors(space, &a2w);
    require_nonempty(
        &[("t1", t1.len()), ("t2", t2.len()), ("a1", a1.len()), ("a2", a2.len())],
        "weat",
    )?;
    let s: Vec<f64> = t1.iter().chain(&t2).map(|w| association(w, &a1, &a2)).collect();
    let mut r = weat_from_associations(&s, t1.len(), mode)?;
    r.oov = m1 + m2 + m3 + m4;
    Ok(r)
}

/// WEAT quantities from precomputed associations; the first `n1` entries
/// belong to T1.
pub fn weat_from_associations(s: &[f64], n1: usize, mode: PermutationMode) -> Result<WeatResult> {
    let n = s.len();
    if n1 == 0 || n1 >= n {
        return Err(Error::InsufficientTerms("weat needs both target sets".into()));
    }
    if n < 4 {
        warn!("weat on {n} targets: the permutation test is not meaningful");
    }
    if n % 2 == 1 {
        warn!("odd number of targets ({n}); permutations use sizes {} and {}", n / 2, n - n / 2);
    }
    let statistic = s[..n1].iter().sum::<f64>() - s[n1..].iter().sum::<f64>();
    let sd = population_std(s);
    let effect_size = (sd > 0.0).then(|| (mean(&s[..n1]) - mean(&s[n1..])) / sd);

    let m = n / 2;
    let total: f64 = s.iter().sum();
    // every candidate statistic goes through the same expression
    let stat_of = |subset_sum: f64| 2.0 * subset_sum - total;
    let observed = if n1 == m {
        stat_of(s[..n1].iter().sum())
    } else {
        statistic
    };
    let count = binomial(n as u64, m as u64);
    let (exact, samples, seed) = match mode {
        PermutationMode::Exact => (true, 0, 0),
        PermutationMode::Auto { samples, seed } => (count <= EXACT_LIMIT, samples, seed),
        PermutationMode::MonteCarlo { samples, seed } => (false, samples, seed),
    };
    let (greater, equal, perms) = if exact {
        if n > 63 {
            return Err(Error::InvalidArgument(format!("exact permutation test over {n} targets")));
        }
        let (g, e) = exact_counts(s, m, observed, &stat_of);
        (g, e, count)
    } else {
        if samples == 0 {
            return Err(Error::InvalidArgument("Monte Carlo needs at least one sample".into()));
        }
        let (g, e) = sampled_counts(s, m, observed, &stat_of, samples, seed);
        (g, e, samples as u64)
    };
    Ok(WeatResult {
        statistic,
        effect_size,
        p_value: greater as f64 / perms as f64,
        exact,
        permutations: perms,
        tie_fraction: equal as f64 / perms as f64,
        n_t1: n1,
        n_t2: n - n1,
        oov: 0,
    })
}

fn exact_counts(s: &[f64], m: usize, observed: f64, stat_of: &dyn Fn(f64) -> f64) -> (u64, u64) {
    let n = s.len();
    let (mut greater, mut equal) = (0u64, 0u64);
    if m == 0 {
        return (0, 1);
    }
    // Gosper's hack over m-subsets of n bits, in increasing mask order
    let mut mask: u64 = (1u64 << m) - 1;
    let limit: u64 = 1u64 << n;
    while mask < limit {
        let mut sum = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            sum += s[i];
            bits &= bits - 1;
        }
        let v = stat_of(sum);
        if v > observed {
            greater += 1;
        } else if v == observed {
            equal += 1;
        }
        let c = mask & mask.wrapping_neg();
        let r = mask + c;
        mask = (((r ^ mask) >> 2) / c) | r;
    }
    (greater, equal)
}

fn sampled_counts(
    s: &[f64],
    m: usize,
    observed: f64,
    stat_of: &(dyn Fn(f64) -> f64 + Sync),
    samples: usize,
    seed: u64,
) -> (u64, u64) {
    let chunks = samples.div_ceil(MC_CHUNK);
    let counts: Vec<(u64, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let todo = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut idx: Vec<usize> = (0..s.len()).collect();
            let (mut g, mut e) = (0u64, 0u64);
            for _ in 0..todo {
                for i in 0..m {
                    let j = rng.random_range(i..idx.len());
                    idx.swap(i, j);
                }
                let mut chosen = idx[..m].to_vec();
                chosen.sort_unstable();
                let v = stat_of(chosen.iter().map(|&i| s[i]).sum());
                if v > observed {
                    g += 1;
                } else if v == observed {
                    e += 1;
                }
            }
            (g, e)
        })
        .collect();
    counts
        .into_iter()
        .fold((0, 0), |(g, e), (a, b)| (g + a, e + b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EctResult {
    /// Spearman correlation on the 0-100 scale; `None` when undefined.
    pub value: Option<f64>,
    pub n_attributes: usize,
    pub oov: usize,
}

/// Embedding Coherence Test: rank correlation between the attribute
/// similarities of the T1 mean vector and of the T2 mean vector.
pub fn ect(space: &EmbeddingSpace, spec: &BiasSpec) -> Result<EctResult> {
    let aw = spec.single_words().ok_or_else(|| {
        Error::InvalidSpec(format!("{}: ECT needs attribute terms", spec.name))
    })?;
    let (t1, m1) = raw_vectors(space, &spec.t1_words());
    let (t2, m2) = raw_vectors(space, &spec.t2_words());
    let (a, m3) = raw_vectors(space, &aw);
    require_nonempty(&[("t1", t1.len()), ("t2", t2.len())], "ect")?;
    if a.len() < 2 {
        return Err(Error::InsufficientTerms("ect needs at least 2 attribute terms".into()));
    }
    let centroid = |vs: &[Vec<f64>]| -> Vec<f64> {
        let d = vs[0].len();
        (0..d).map(|k| vs.iter().map(|v| v[k]).sum::<f64>() / vs.len() as f64).collect()
    };
    let (mu1, mu2) = (centroid(&t1), centroid(&t2));
    let sims = |mu: &[f64]| -> Vec<f64> {
        a.iter().map(|v| cosine(mu, v).unwrap_or(0.0)).collect()
    };
    let value = spearman(&sims(&mu1), &sims(&mu2))?.map(|r| 100.0 * r);
    Ok(EctResult {
        value,
        n_attributes: a.len(),
        oov: m1 + m2 + m3,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatResult {
    /// Percentage of comparisons won by the biased analogy.
    pub value: f64,
    pub comparisons: u64,
    pub oov: usize,
}

/// Bias Analogy Test on a paired spec, over unit-normalized term vectors.
///
/// For every `(t1, t2, a1, a2)`, `q1 = t1 - t2 + a2` must be strictly closer
/// to `a1` than to each other `a2'`, and `q2 = a1 - t1 + t2` strictly closer
/// to `a2` than to each other `a1'`. Each comparison counts once; ties lose.
pub fn bat(space: &EmbeddingSpace, spec: &BiasSpec) -> Result<BatResult> {
    let (a1w, a2w) = spec.paired_words().ok_or_else(|| {
        Error::InvalidSpec(format!("{}: BAT needs paired attribute sets", spec.name))
    })?;
    let (t1, m1) = unit_vectors(space, &spec.t1_words());
    let (t2, m2) = unit_vectors(space, &spec.t2_words());
    let (a1, m3) = unit_vectors(space, &a1w);
    let (a2, m4) = unit_vectors(space, &a2w);
    require_nonempty(&[("t1", t1.len()), ("t2", t2.len())], "bat")?;
    if a1.len() < 2 || a2.len() < 2 {
        return Err(Error::InsufficientTerms(
            "bat needs at least 2 terms in each attribute set".into(),
        ));
    }
    let rows: Vec<(u64, u64)> = t1
        .par_iter()
        .map(|x1| {
            let (mut wins, mut total) = (0u64, 0u64);
            let mut q1 = vec![0.0; x1.len()];
            let mut q2 = vec![0.0; x1.len()];
            for x2 in &t2 {
                for (i, y1) in a1.iter().enumerate() {
                    for (j, y2) in a2.iter().enumerate() {
                        for k in 0..x1.len() {
                            q1[k] = x1[k] - x2[k] + y2[k];
                            q2[k] = y1[k] - x1[k] + x2[k];
                        }
                        let d1 = euclidean_distance(&q1, y1);
                        for (jj, other) in a2.iter().enumerate() {
                            if jj != j {
                                total += 1;
                                wins += u64::from(d1 < euclidean_distance(&q1, other));
                            }
                        }
                        let d2 = euclidean_distance(&q2, y2);
                        for (ii, other) in a1.iter().enumerate() {
                            if ii != i {
                                total += 1;
                                wins += u64::from(d2 < euclidean_distance(&q2, other));
                            }
                        }
                    }
                }
            }
            (wins, total)
        })
        .collect();
    let (wins, total) = rows.into_iter().fold((0, 0), |(w, t), (a, b)| (w + a, t + b));
    Ok(BatResult {
        value: 100.0 * wins as f64 / total as f64,
        comparisons: total,
        oov: m1 + m2 + m3 + m4,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitResult {
    /// Mean KMeans++ accuracy over the runs, 0-100.
    pub km: f64,
    /// SVM accuracy on the initial terms, 0-100; `None` without train terms.
    pub svm: Option<f64>,
    pub runs: usize,
    pub n_test: usize,
    pub n_train: usize,
    pub oov: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitConfig {
    pub runs: usize,
    pub seed: u64,
    pub svm: SvmParams,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        ImplicitConfig {
            runs: 20,
            seed: 0,
            svm: SvmParams::default(),
        }
    }
}

fn labelled(t1: Vec<Vec<f64>>, t2: Vec<Vec<f64>>) -> Result<(Matrix, Vec<usize>)> {
    let labels: Vec<usize> = std::iter::repeat_n(0, t1.len()).chain(std::iter::repeat_n(1, t2.len())).collect();
    let rows: Vec<Vec<f64>> = t1.into_iter().chain(t2).collect();
    Ok((Matrix::from_rows(&rows)?, labels))
}

/// Separability of the two target sets. KMeans++ clusters the initial
/// terms (`runs` seeds, mean accuracy); the SVM is trained on the augmented
/// terms and scored on the initial ones. The SVM solver is deterministic, so
/// it is fitted once. All vectors are unit-normalized.
pub fn implicit_tests(
    space: &EmbeddingSpace,
    test: &BiasSpec,
    train: Option<&BiasSpec>,
    config: ImplicitConfig,
) -> Result<ImplicitResult> {
    if config.runs == 0 {
        return Err(Error::InvalidArgument("implicit tests need at least one run".into()));
    }
    let (t1, m1) = unit_vectors(space, &test.t1_words());
    let (t2, m2) = unit_vectors(space, &test.t2_words());
    if t1.len() < 2 || t2.len() < 2 {
        return Err(Error::InsufficientTerms(
            "implicit tests need 2 in-vocabulary initial terms per target set".into(),
        ));
    }
    let n_test = t1.len() + t2.len();
    let (points, labels) = labelled(t1, t2)?;
    let accs: Vec<Result<f64>> = (0..config.runs)
        .into_par_iter()
        .map(|r| {
            let c = kmeans2(&points, config.seed.wrapping_add(r as u64))?;
            cluster_accuracy(&c.assignments, &labels)
        })
        .collect();
    let mut km = 0.0;
    for a in accs {
        km += a?;
    }
    km /= config.runs as f64;

    let mut oov = m1 + m2;
    let mut n_train = 0;
    let svm = match train {
        None => None,
        Some(tr) => {
            let (x1, k1) = unit_vectors(space, &tr.t1_words());
            let (x2, k2) = unit_vectors(space, &tr.t2_words());
            oov += k1 + k2;
            require_nonempty(&[("train t1", x1.len()), ("train t2", x2.len())], "svm")?;
            n_train = x1.len() + x2.len();
            let (tp, tl) = labelled(x1, x2)?;
            let model = svm_fit(&tp, &tl, config.svm)?;
            let correct = points
                .row_iter()
                .zip(&labels)
                .filter(|(p, l)| model.predict(p) == **l)
                .count();
            Some(100.0 * correct as f64 / n_test as f64)
        }
    };
    Ok(ImplicitResult {
        km,
        svm,
        runs: config.runs,
        n_test,
        n_train,
        oov,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub w1: String,
    pub w2: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticResult {
    /// Spearman correlation on the 0-100 scale; `None` when undefined.
    pub value: Option<f64>,
    pub covered: usize,
    pub total: usize,
}

/// Spearman correlation between cosine similarity and gold scores over the
/// pairs whose words are both in the vocabulary.
pub fn semantic_quality(space: &EmbeddingSpace, pairs: &[SimilarityPair]) -> Result<SemanticResult> {
    if pairs.is_empty() {
        return Err(Error::Empty("similarity benchmark has no pairs".into()));
    }
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for p in pairs {
        if let (Some(a), Some(b)) = (space.lookup(&p.w1), space.lookup(&p.w2)) {
            pred.push(cosine(a, b).unwrap_or(0.0));
            gold.push(p.gold);
        }
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientTerms(format!(
            "only {} benchmark pairs covered by the vocabulary",
            pred.len()
        )));
    }
    Ok(SemanticResult {
        value: spearman(&pred, &gold)?.map(|r| 100.0 * r),
        covered: pred.len(),
        total: pairs.len(),
    })
}

/// Parses a word-similarity benchmark: two words and a score per line,
/// separated by tabs, commas or spaces. A SimLex-999 header selects its
/// `SimLex999` column; other header lines are skipped.
pub fn parse_benchmark(text: &str) -> Result<Vec<SimilarityPair>> {
    let mut score_col = 2;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).collect()
        } else if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: no + 1,
                message: "expected two words and a score".into(),
            });
        }
        if out.is_empty() && fields[score_col.min(fields.len() - 1)].parse::<f64>().is_err() {
            if let Some(i) = fields.iter().position(|f| f.eq_ignore_ascii_case("SimLex999")) {
                score_col = i;
            }
            continue;
        }
        let raw = fields.get(score_col).ok_or_else(|| Error::Parse {
            line: no + 1,
            message: format!("missing score column {}", score_col + 1),
        })?;
        let gold: f64 = raw.parse().map_err(|_| Error::Parse {
            line: no + 1,
            message: format!("cannot parse score {raw:?}"),
        })?;
        if !gold.is_finite() {
            return Err(Error::NonFinite(format!("benchmark line {}", no + 1)));
        }
        out.push(SimilarityPair {
            w1: fields[0].to_string(),
            w2: fields[1].to_string(),
            gold,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("benchmark has no scored pairs".into()));
    }
    Ok(out)
}

pub fn load_benchmark(path: impl AsRef<Path>) -> Result<Vec<SimilarityPair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_benchmark(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyPoint {
    pub word: String,
    pub set: String,
    pub pc1: f64,
    pub pc2: f64,
}

/// 2D PCA coordinates of the spec's in-vocabulary terms, set by set.
pub fn topology_export(space: &EmbeddingSpace, spec: &BiasSpec) -> Result<Vec<TopologyPoint>> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (id, set) in spec.sets() {
        for t in set {
            if let Some(v) = space.lookup(&t.word) {
                labels.push((t.word.clone(), id.label().to_string()));
                rows.push(v.to_vec());
            }
        }
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientTerms("topology export needs 2 in-vocabulary terms".into()));
    }
    let pca = pca_2d(&Matrix::from_rows(&rows)?)?;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, (word, set))| TopologyPoint {
            word,
            set,
            pc1: pca.coords.get(i, 0),
            pc2: pca.coords.get(i, 1),
        })
        .collect())
}

pub fn topology_csv(points: &[TopologyPoint]) -> String {
    let mut s = String::from("word,set,pc1,pc2\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", csv_field(&p.word), p.set, p.pc1, p.pc2));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Weat,
    Ect,
    Bat,
    Km,
    Svm,
    Sl,
    Ws,
}

impl Metric {
    /// Table column order.
    pub const ALL: [Metric; 7] = [
        Metric::Weat,
        Metric::Ect,
        Metric::Bat,
        Metric::Km,
        Metric::Svm,
        Metric::Sl,
        Metric::Ws,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Weat => "weat",
            Metric::Ect => "ect",
            Metric::Bat => "bat",
            Metric::Km => "km",
            Metric::Svm => "svm",
            Metric::Sl => "sl",
            Metric::Ws => "ws",
        }
    }

    pub fn parse_list(text: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m = Metric::ALL
                .into_iter()
                .find(|m| m.name().eq_ignore_ascii_case(part))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {part:?}")))?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("no metrics requested".into()));
        }
        out.sort();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: Metric,
    pub value: Option<f64>,
    /// `"raw"` or `"x100"`.
    pub scale: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub n_items: usize,
    pub oov_count: usize,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub space: String,
    pub spec: String,
    pub entries: Vec<MetricEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn get(&self, metric: Metric) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.metric == metric)
    }

    /// Header plus one row in table column order; absent metrics print `-`.
    pub fn to_tsv(&self) -> String {
        let mut head = vec!["space".to_string(), "spec".to_string()];
        let mut row = vec![self.space.clone(), self.spec.clone()];
        for m in Metric::ALL {
            head.push(m.name().to_uppercase());
            row.push(match self.get(m).and_then(|e| e.value) {
                Some(v) if m == Metric::Weat => format!("{v:.4}"),
                Some(v) => format!("{v:.2}"),
                None if self.get(m).is_some() => "NA".into(),
                None => "-".into(),
            });
        }
        format!("{}\n{}\n", head.join("\t"), row.join("\t"))
    }
}

/// Everything a full evaluation run needs besides the space.
#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub metrics: Vec<Metric>,
    pub test: Option<BiasSpec>,
    pub train: Option<BiasSpec>,
    pub permutation: PermutationMode,
    pub implicit: ImplicitConfig,
    pub simlex: Option<Vec<SimilarityPair>>,
    pub wordsim: Option<Vec<SimilarityPair>>,
}

impl EvalRequest {
    pub fn with_augmented(mut self, aug: &AugmentedSpec) -> Self {
        self.test = Some(aug.test.clone());
        self.train = Some(aug.train.clone());
        self
    }
}

fn cfg(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Runs the requested metrics in table order.
pub fn evaluate(space: &EmbeddingSpace, space_id: &str, req: &EvalRequest) -> Result<EvalReport> {
    let spec = || {
        req.test
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("bias metrics need a spec".into()))
    };
    let mut entries = Vec::new();
    let mut metrics = req.metrics.clone();
    metrics.sort();
    metrics.dedup();
    let mut implicit: Option<ImplicitResult> = None;
    for m in metrics {
        let entry = match m {
            Metric::Weat => {
                let r = weat(space, spec()?, req.permutation)?;
                let mut c = cfg(&[
                    ("std", "population".into()),
                    ("p_test", "one-sided, strict >".into()),
                    ("permutations", r.permutations.to_string()),
                    ("exact", r.exact.to_string()),
                ]);
                if let PermutationMode::Auto { seed, .. } | PermutationMode::MonteCarlo { seed, .. } = req.permutation {
                    if !r.exact {
                        c.insert("seed".into(), seed.to_string());
                    }
                }
                MetricEntry {
                    metric: m,
                    value: r.effect_size,
                    scale: "raw".into(),
                    p_value: Some(r.p_value),
                    n_items: r.n_t1 + r.n_t2,
                    oov_count: r.oov,
                    config: c,
                }
            }
            Metric::Ect => {
                let r = ect(space, spec()?)?;
                MetricEntry {
                    metric: m,
                    value: r.value,
                    scale: "x100".into(),
                    p_value: None,
                    n_items: r.n_attributes,
                    oov_count: r.oov,
                    config: cfg(&[("attributes", "a1 ∪ a2".into())]),
                }
            }
            Metric::Bat => {
                let r = bat(space, spec()?)?;
                MetricEntry {
                    metric: m,
                    value: Some(r.value),
                    scale: "x100".into(),
                    p_value: None,
                    n_items: r.comparisons as usize,
                    oov_count: r.oov,
                    config: cfg(&[
                        ("ties", "failure".into()),
                        ("counting", "per comparison".into()),
                        ("vectors", "unit-normalized".into()),
                    ]),
                }
            }
            Metric::Km | Metric::Svm => {
                if implicit.is_none() {
                    let train = if req.metrics.contains(&Metric::Svm) {
                        Some(req.train.as_ref().ok_or_else(|| {
                            Error::InvalidArgument("svm needs an augmented spec".into())
                        })?)
                    } else {
                        None
                    };
                    implicit = Some(implicit_tests(space, spec()?, train, req.implicit)?);
                }
                let r = implicit.as_ref().expect("computed above");
                let c = cfg(&[
                    ("runs", r.runs.to_string()),
                    ("seed", req.implicit.seed.to_string()),
                    ("svm_c", req.implicit.svm.c.to_string()),
                    (
                        "svm_gamma",
                        req.implicit
                            .svm
                            .gamma
                            .map_or_else(|| "1/d".to_string(), |g| g.to_string()),
                    ),
                    ("train", "augmented terms".into()),
                    ("test", "initial terms".into()),
                ]);
                MetricEntry {
                    metric: m,
                    value: if m == Metric::Km { Some(r.km) } else { r.svm },
                    scale: "x100".into(),
                    p_value: None,
                    n_items: r.n_test,
                    oov_count: r.oov,
                    config: c,
                }
            }
            Metric::Sl | Metric::Ws => {
                let bench = if m == Metric::Sl { &req.simlex } else { &req.wordsim };
                let pairs = bench.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("{} needs a benchmark file", m.name()))
                })?;
                let r = semantic_quality(space, pairs)?;
                MetricEntry {
                    metric: m,
                    value: r.value,
                    scale: "x100".into(),
                    p_value: None,
                    n_items: r.covered,
                    oov_count: r.total - r.covered,
                    config: BTreeMap::new(),
                }
            }
        };
        entries.push(entry);
    }
    Ok(EvalReport {
        space: space_id.to_string(),
        spec: req.test.as_ref().map_or_else(String::new, |s| s.name.clone()),
        entries,
    })
}
