//! Composition of debiasing transforms.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::linear::{fit_bam, fit_gbdd, LinearDebiaser};
use crate::net::{build_triples, train, DebiasNetwork, NetConfig, TrainReport};
use crate::spec::BiasSpec;
use crate::numerics::{norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Linear(LinearDebiaser),
    Net(DebiasNetwork),
}

impl Stage {
    pub fn dim(&self) -> usize {
        match self {
            Stage::Linear(l) => l.dim(),
            Stage::Net(n) => n.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Linear(l) => l.kind_name(),
            Stage::Net(_) => "dbn",
        }
    }

    /// GBDD and DebiasNet scale rows to unit length before mapping them
    /// (zero rows stay zero); BAM is linear and takes rows as they are.
    pub fn apply(&self, space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
        match self {
            Stage::Linear(l) => l.apply(space),
            Stage::Net(n) => n.apply(&unit_rows(space)?),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyOptions {
    /// Scale every output row to unit length (zero rows stay zero).
    pub renormalize_output: bool,
}

/// Stages in `∘` order: the last stage is applied first.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasPipeline {
    stages: Vec<Stage>,
}

impl DebiasPipeline {
    pub fn compose(stages: Vec<Stage>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return Err(Error::InvalidArgument("empty pipeline".into()));
        };
        let d = first.dim();
        if let Some(bad) = stages.iter().find(|s| s.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.dim(),
            });
        }
        Ok(DebiasPipeline { stages })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    /// `"gbdd∘bam"`-style description.
    pub fn describe(&self) -> String {
        self.stages
            .iter()
            .map(Stage::name)
            .collect::<Vec<_>>()
            .join("∘")
    }

    pub fn apply(&self, space: &EmbeddingSpace, options: ApplyOptions) -> Result<EmbeddingSpace> {
        if space.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: space.dim(),
            });
        }
        let mut cur = space.clone();
        for stage in self.stages.iter().rev() {
            cur = stage.apply(&cur)?;
        }
        if options.renormalize_output {
            cur = unit_rows(&cur)?;
        }
        Ok(cur)
    }
}

/// A chain fitted stage by stage, innermost first.
#[derive(Debug, Clone)]
pub struct FittedChain {
    pub pipeline: DebiasPipeline,
    /// The input space mapped through every stage.
    pub output: EmbeddingSpace,
    /// Training curve of each DebiasNet stage, by position in `∘` order.
    pub reports: Vec<(usize, TrainReport)>,
}

/// Fits the stages of `names` (in `∘` order) on `train_spec`. The rightmost
/// stage is fitted on `space`, each later one on the output of the stage
/// before it. DebiasNet stages train on the spec with merged attributes.
pub fn fit_chain(
    names: &[String],
    space: &EmbeddingSpace,
    train_spec: &BiasSpec,
    net_config: &NetConfig,
) -> Result<FittedChain> {
    let mut cur = space.clone();
    let mut stages: Vec<Option<Stage>> = vec![None; names.len()];
    let mut reports = Vec::new();
    for (pos, name) in names.iter().enumerate().rev() {
        let stage = match name.as_str() {
            "gbdd" => Stage::Linear(fit_gbdd(&cur, train_spec)?),
            "bam" => Stage::Linear(fit_bam(&cur, train_spec)?),
            "dbn" => {
                let merged = train_spec.merge_attributes()?;
                let (triples, _) = build_triples(&merged, &cur)?;
                let mut net = DebiasNetwork::new(cur.dim(), net_config.clone())?;
                reports.push((pos, train(&mut net, &triples, &cur)?));
                Stage::Net(net)
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown stage {other:?}")));
            }
        };
        cur = stage.apply(&cur)?;
        stages[pos] = Some(stage);
    }
    reports.reverse();
    Ok(FittedChain {
        pipeline: DebiasPipeline::compose(stages.into_iter().flatten().collect())?,
        output: cur,
        reports,
    })
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn unit_rows(space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
    let d = space.dim();
    let mut data = space.vectors().data().to_vec();
    for row in data.chunks_exact_mut(d) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    space.with_vectors(Matrix::new(space.len(), d, data)?)
}

/// Parses `"gbdd∘bam"` or `"gbdd,bam"` into stage names in `∘` order.
pub fn parse_chain(chain: &str) -> Result<Vec<String>> {
    let names: Vec<String> = chain
        .split(['∘', ','])
        .map(|s| s.trim().to_lowercase())
        .collect();
    if names.iter().any(String::is_empty) {
        return Err(Error::InvalidArgument(format!("malformed chain {chain:?}")));
    }
    for n in &names {
        if !matches!(n.as_str(), "gbdd" | "bam" | "dbn") {
            return Err(Error::InvalidArgument(format!(
                "unknown stage {n:?}; expected gbdd, bam or dbn"
            )));
        }
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{fit_bam, fit_gbdd, FittedOn, LinearKind};
    use crate::net::NetConfig;
    use crate::spec::{BiasSpec, Provenance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn biased_space() -> (EmbeddingSpace, BiasSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut pairs = Vec::new();
        for i in 0..20 {
            let mut v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            if i < 3 {
                v[0] += 2.0;
            } else if i < 6 {
                v[0] -= 2.0;
                v[1] += 1.0;
            }
            pairs.push((format!("w{i}"), v));
        }
        let space = EmbeddingSpace::from_pairs(pairs).unwrap().normalize().unwrap();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let spec = BiasSpec::from_words("b", &s(&["w0", "w1", "w2"]), &s(&["w3", "w4", "w5"]), None, Provenance::Augmented).unwrap();
        (space, spec)
    }

    #[test]
    fn chain_syntax() {
        assert_eq!(parse_chain("gbdd∘bam").unwrap(), vec!["gbdd", "bam"]);
        assert_eq!(parse_chain("GBDD, dbn").unwrap(), vec!["gbdd", "dbn"]);
        assert!(parse_chain("gbdd∘").is_err());
        assert!(parse_chain("pca").is_err());
    }

    #[test]
    fn singleton_matches_direct_application() {
        let (space, spec) = biased_space();
        let g = fit_gbdd(&space, &spec).unwrap();
        let p = DebiasPipeline::compose(vec![Stage::Linear(g.clone())]).unwrap();
        assert_eq!(p.apply(&space, ApplyOptions::default()).unwrap(), g.apply(&space).unwrap());
    }

    #[test]
    fn order_matters() {
        let (space, spec) = biased_space();
        let g = Stage::Linear(fit_gbdd(&space, &spec).unwrap());
        let b = Stage::Linear(fit_bam(&space, &spec).unwrap());
        let gb = DebiasPipeline::compose(vec![g.clone(), b.clone()]).unwrap();
        let bg = DebiasPipeline::compose(vec![b.clone(), g.clone()]).unwrap();
        assert_eq!(gb.describe(), "gbdd∘bam");
        let o1 = gb.apply(&space, ApplyOptions::default()).unwrap();
        let o2 = bg.apply(&space, ApplyOptions::default()).unwrap();
        assert!(o1.vectors().max_abs_diff(o2.vectors()) > 1e-6);
        // rightmost stage runs first
        let manual = g.apply(&b.apply(&space).unwrap()).unwrap();
        assert_eq!(o1, manual);
    }

    #[test]
    fn gbdd_twice_is_gbdd_once() {
        let (space, spec) = biased_space();
        let g = fit_gbdd(&space, &spec).unwrap();
        let LinearKind::Gbdd(b) = &g.kind else { unreachable!() };
        let once = DebiasPipeline::compose(vec![Stage::Linear(g.clone())]).unwrap();
        let twice = DebiasPipeline::compose(vec![Stage::Linear(g.clone()), Stage::Linear(g.clone())]).unwrap();
        let o1 = once.apply(&space, ApplyOptions::default()).unwrap();
        let o2 = twice.apply(&space, ApplyOptions::default()).unwrap();
        // the second pass only rescales rows, so directions agree exactly up to rounding
        let u1 = unit_rows(&o1).unwrap();
        assert!(u1.vectors().max_abs_diff(o2.vectors()) < 1e-12);
        // projector idempotence on the raw map
        for row in o1.vectors().row_iter() {
            let again = g.apply_vector(row).unwrap();
            for (a, c) in again.iter().zip(row) {
                assert!((a - c).abs() < 1e-15);
            }
            assert!(crate::numerics::dot(row, b).abs() < 1e-12);
        }
    }

    #[test]
    fn fitted_chain_output_matches_pipeline() {
        let (space, spec) = biased_space();
        let names = parse_chain("gbdd∘bam").unwrap();
        let chain = fit_chain(&names, &space, &spec, &NetConfig::default()).unwrap();
        assert_eq!(chain.pipeline.describe(), "gbdd∘bam");
        assert!(chain.reports.is_empty());
        let again = chain.pipeline.apply(&space, ApplyOptions::default()).unwrap();
        assert_eq!(again, chain.output);
        // the outer GBDD was fitted on the BAM output, not on the input
        let direct = fit_gbdd(&space, &spec).unwrap();
        assert_ne!(chain.pipeline.stages()[0], Stage::Linear(direct));
    }

    #[test]
    fn errors() {
        assert!(DebiasPipeline::compose(vec![]).is_err());
        let g2 = LinearDebiaser {
            kind: LinearKind::Gbdd(vec![1.0, 0.0]),
            fitted_on: FittedOn { spec: "x".into(), t1_used: 1, t2_used: 1, t1_missing: 0, t2_missing: 0 },
        };
        let n3 = DebiasNetwork::new(3, NetConfig { hidden_layers: 1, hidden_width: 2, ..NetConfig::default() }).unwrap();
        assert!(matches!(
            DebiasPipeline::compose(vec![Stage::Linear(g2), Stage::Net(n3)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn renormalize_option() {
        let (space, spec) = biased_space();
        let p = DebiasPipeline::compose(vec![Stage::Linear(fit_gbdd(&space, &spec).unwrap())]).unwrap();
        let out = p.apply(&space, ApplyOptions { renormalize_output: true }).unwrap();
        assert!(out.rows_are_unit());
    }

    #[test]
    fn identity_net_stage_keeps_unit_space() {
        let (space, _) = biased_space();
        let n = DebiasNetwork::new(5, NetConfig { hidden_layers: 2, hidden_width: 4, ..NetConfig::default() }).unwrap();
        let out = Stage::Net(n).apply(&space).unwrap();
        assert!(out.vectors().max_abs_diff(space.vectors()) < 1e-9);
    }
}
