use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use debie::codec::encode_f64s;
use debie::embedding::{EmbeddingSpace, LoadOptions, VectorFormat};
use debie::eval::{
    evaluate, load_benchmark, topology_csv, topology_export, EvalRequest, ImplicitConfig, Metric,
    PermutationMode, DEFAULT_PERMUTATION_SEED, MONTE_CARLO_SAMPLES,
};
use debie::linear::LinearDebiaser;
use debie::net::{DebiasNetwork, NetConfig};
use debie::pipeline::{fit_chain, parse_chain, unit_rows, ApplyOptions, DebiasPipeline, Stage};
use debie::spec::{augment as augment_spec, AugmentedSpec, BiasSpec};
use debie::xling::{fit_projection, transfer_debias, TranslationDictionary};

use crate::outputs::{self, Outputs, Provenance};
use crate::{
    AugmentArgs, DebiasArgs, EvalArgs, NetArgs, OovPolicy, ProjectArgs, SpaceArgs, TransferArgs,
};

pub const MANIFEST_NAME: &str = "pipeline.json";

fn load_space(path: &Path, args: &SpaceArgs) -> Result<(EmbeddingSpace, VectorFormat)> {
    let options = LoadOptions {
        format: args.format.parse()?,
        max_words: args.max_words,
    };
    let (space, report) = EmbeddingSpace::load(path, &options)?;
    info!(
        "{}: {} words, dim {}, {} duplicates",
        path.display(),
        report.words,
        report.dim,
        report.duplicates
    );
    Ok((space, report.format))
}

/// Test spec, training spec and the augmented file if there was one.
struct Specs {
    test: BiasSpec,
    train: BiasSpec,
    augmented: Option<AugmentedSpec>,
}

fn load_specs(path: &Path) -> Result<Specs> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(debie::Error::from)?;
    if value.get("train").is_some() {
        let aug = AugmentedSpec::from_json(&text)?;
        Ok(Specs {
            test: aug.test.clone(),
            train: aug.train.clone(),
            augmented: Some(aug),
        })
    } else {
        let spec = BiasSpec::from_json(&text)?;
        Ok(Specs {
            test: spec.clone(),
            train: spec,
            augmented: None,
        })
    }
}

/// Applies the lowercase fallback and the OOV policy to one spec.
fn fit_spec(spec: &BiasSpec, space: &EmbeddingSpace, args: &SpaceArgs) -> Result<BiasSpec> {
    let spec = spec.resolve_case(space, args.lowercase_fallback);
    spec.validate()?;
    let missing: Vec<&str> = spec
        .sets()
        .into_iter()
        .flat_map(|(_, set)| set.iter())
        .map(|t| t.word.as_str())
        .filter(|w| space.index_of(w).is_none())
        .collect();
    if !missing.is_empty() {
        if args.oov == OovPolicy::Error {
            bail!(debie::Error::InsufficientTerms(format!(
                "{}: {} terms missing from the space: {}",
                spec.name,
                missing.len(),
                missing.join(", ")
            )));
        }
        info!("{}: skipping {} missing terms", spec.name, missing.len());
    }
    Ok(spec)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str, outputs: &mut Outputs) -> Result<()> {
    let path = outputs.claim(path);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn space_args_json(a: &SpaceArgs) -> serde_json::Value {
    json!({
        "format": a.format,
        "max_words": a.max_words,
        "lowercase_fallback": a.lowercase_fallback,
        "oov": format!("{:?}", a.oov).to_lowercase(),
    })
}

pub fn augment(a: &AugmentArgs, outputs: &mut Outputs) -> Result<()> {
    let spec_path = outputs::input(&a.spec)?;
    let sim_path = outputs::input(&a.sim_space)?;
    outputs::output(&a.out)?;

    let spec = BiasSpec::load(&spec_path)?;
    let (sim, _) = load_space(&sim_path, &a.space)?;
    let spec = fit_spec(&spec, &sim, &a.space)?;
    let (aug, report) = augment_spec(&spec, &sim, a.k)?;
    if !report.dropped_shared.is_empty() {
        info!("dropped shared candidates: {}", report.dropped_shared.join(", "));
    }
    write_text(&a.out, &(aug.to_json() + "\n"), outputs)?;

    let mut prov = Provenance::new(
        "augment",
        json!({ "k": a.k, "space": space_args_json(&a.space), "report": report }),
    );
    prov.add_input(&spec_path)?;
    prov.add_input(&sim_path)?;
    prov.write_for(&a.out, outputs)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    chain: String,
    /// Transform files in composition order, relative to the manifest.
    stages: Vec<String>,
}

fn net_config(n: &NetArgs) -> NetConfig {
    NetConfig {
        hidden_layers: n.hidden_layers,
        hidden_width: n.hidden_width,
        lambda: n.lambda,
        learning_rate: n.learning_rate,
        epochs: n.epochs,
        batch_size: n.batch_size,
        seed: n.seed,
        ..NetConfig::default()
    }
}

pub fn debias(a: &DebiasArgs, outputs: &mut Outputs) -> Result<()> {
    let names = parse_chain(&a.chain)?;
    let space_path = outputs::input(&a.space)?;
    let spec_path = outputs::input(&a.spec)?;
    outputs::output(&a.out)?;
    std::fs::create_dir_all(&a.transforms)
        .with_context(|| format!("creating {}", a.transforms.display()))?;
    let specs = load_specs(&spec_path)?;
    let net_cfg = net_config(&a.net);

    let (space, format) = load_space(&space_path, &a.input)?;
    let train_spec = fit_spec(&specs.train, &space, &a.input)?;

    let chain = fit_chain(&names, &space, &train_spec, &net_cfg)?;
    for (pos, report) in &chain.reports {
        info!("dbn: {} triples, best epoch {}", report.triples, report.best_epoch);
        let csv = a.transforms.join(format!("stage{pos}_dbn_loss.csv"));
        write_text(&csv, &report.to_csv(), outputs)?;
    }
    let pipeline = chain.pipeline;
    let mut cur = chain.output;

    let mut files = Vec::new();
    for (pos, stage) in pipeline.stages().iter().enumerate() {
        let file = format!("stage{pos}_{}.json", stage.name());
        let text = match stage {
            Stage::Linear(l) => l.to_json(),
            Stage::Net(n) => n.to_json(),
        };
        write_text(&a.transforms.join(&file), &(text + "\n"), outputs)?;
        files.push(file);
    }
    let manifest = Manifest {
        chain: pipeline.describe(),
        stages: files,
    };
    let manifest_path = a.transforms.join(MANIFEST_NAME);
    write_text(
        &manifest_path,
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
        outputs,
    )?;

    if a.renormalize {
        cur = unit_rows(&cur)?;
    }
    let out = outputs.claim(&a.out);
    cur.save(&out, format)?;

    let mut prov = Provenance::new(
        "debias",
        json!({
            "chain": pipeline.describe(),
            "renormalize": a.renormalize,
            "net": net_cfg,
            "space": space_args_json(&a.input),
        }),
    );
    prov.add_input(&space_path)?;
    prov.add_input(&spec_path)?;
    prov.write_for(&a.out, outputs)?;
    prov.write_for(&manifest_path, outputs)
}

fn load_stage(path: &Path) -> Result<Stage> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(debie::Error::from)?;
    Ok(if value.get("kind").is_some() {
        Stage::Linear(LinearDebiaser::from_json(&text)?)
    } else {
        Stage::Net(DebiasNetwork::from_json(&text)?)
    })
}

fn load_pipeline(manifest_path: &Path) -> Result<(DebiasPipeline, Vec<PathBuf>)> {
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(debie::Error::from)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = manifest.stages.iter().map(|f| dir.join(f)).collect();
    for p in &paths {
        outputs::input(p)?;
    }
    let stages = paths.iter().map(|p| load_stage(p)).collect::<Result<Vec<_>>>()?;
    Ok((DebiasPipeline::compose(stages)?, paths))
}

pub fn eval(a: &EvalArgs, outputs: &mut Outputs) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    let space_path = outputs::input(&a.space)?;
    let spec_path = a.spec.as_deref().map(outputs::input).transpose()?;
    let needs = |m: Metric| metrics.contains(&m);
    let bias_metrics = [Metric::Weat, Metric::Ect, Metric::Bat, Metric::Km, Metric::Svm];
    if spec_path.is_none() && bias_metrics.iter().any(|&m| needs(m)) {
        bail!(debie::Error::InvalidArgument(
            "bias metrics need --spec".into()
        ));
    }
    let simlex_path = match (&a.simlex, needs(Metric::Sl)) {
        (Some(p), true) => Some(outputs::input(p)?),
        (None, true) => bail!(debie::Error::InvalidArgument("sl needs --simlex".into())),
        _ => None,
    };
    let wordsim_path = match (&a.wordsim, needs(Metric::Ws)) {
        (Some(p), true) => Some(outputs::input(p)?),
        (None, true) => bail!(debie::Error::InvalidArgument("ws needs --wordsim".into())),
        _ => None,
    };
    let tsv_path = with_suffix(&a.out, ".tsv");
    let json_path = with_suffix(&a.out, ".json");
    outputs::output(&tsv_path)?;

    let specs = spec_path.as_deref().map(load_specs).transpose()?;
    let simlex = simlex_path.as_deref().map(load_benchmark).transpose()?;
    let wordsim = wordsim_path.as_deref().map(load_benchmark).transpose()?;
    let (space, _) = load_space(&space_path, &a.input)?;

    let permutation = if a.exact {
        PermutationMode::Exact
    } else {
        PermutationMode::Auto {
            samples: MONTE_CARLO_SAMPLES,
            seed: a.permutation_seed.unwrap_or(DEFAULT_PERMUTATION_SEED),
        }
    };
    let mut req = EvalRequest {
        metrics,
        permutation,
        implicit: ImplicitConfig {
            runs: a.runs,
            seed: a.seed,
            ..ImplicitConfig::default()
        },
        simlex,
        wordsim,
        ..EvalRequest::default()
    };
    if let Some(s) = &specs {
        req.test = Some(fit_spec(&s.test, &space, &a.input)?);
        if s.augmented.is_some() {
            req.train = Some(fit_spec(&s.train, &space, &a.input)?);
        }
    }
    let label = a.label.clone().unwrap_or_else(|| {
        space_path
            .file_stem()
            .map_or_else(|| "space".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = evaluate(&space, &label, &req)?;

    write_text(&tsv_path, &report.to_tsv(), outputs)?;
    write_text(&json_path, &(report.to_json() + "\n"), outputs)?;

    let mut prov = Provenance::new(
        "eval",
        json!({
            "metrics": a.metrics,
            "label": label,
            "seed": a.seed,
            "runs": a.runs,
            "exact": a.exact,
            "permutation_seed": a.permutation_seed.unwrap_or(DEFAULT_PERMUTATION_SEED),
            "space": space_args_json(&a.input),
        }),
    );
    for p in [Some(&space_path), spec_path.as_ref(), simlex_path.as_ref(), wordsim_path.as_ref()]
        .into_iter()
        .flatten()
    {
        prov.add_input(p)?;
    }
    prov.write_for(&tsv_path, outputs)?;
    prov.write_for(&json_path, outputs)
}

#[derive(Serialize)]
struct ProjectionFile<'a> {
    kind: &'static str,
    dim: usize,
    used: usize,
    source_oov: usize,
    target_oov: usize,
    /// Row-major `W_CL`, applied as `tgt_row * W_CL`.
    payload: &'a str,
}

pub fn transfer(a: &TransferArgs, outputs: &mut Outputs) -> Result<()> {
    let src_path = outputs::input(&a.src_space)?;
    let tgt_path = outputs::input(&a.tgt_space)?;
    let dict_path = outputs::input(&a.dict)?;
    let manifest_path = a.pipeline.as_deref().map(outputs::input).transpose()?;
    outputs::output(&a.out)?;
    if let Some(p) = &a.save_projection {
        outputs::output(p)?;
    }

    let pipeline = manifest_path.as_deref().map(load_pipeline).transpose()?;
    let dict = TranslationDictionary::load(&dict_path)?;
    let (src, _) = load_space(&src_path, &a.input)?;
    let (tgt, format) = load_space(&tgt_path, &a.input)?;
    let (w, report) = fit_projection(&src, &tgt, &dict)?;
    info!(
        "projection from {} pairs ({} source OOV, {} target OOV)",
        report.used, report.source_oov, report.target_oov
    );
    let out_space = transfer_debias(
        &tgt,
        &w,
        pipeline.as_ref().map(|(p, _)| p),
        ApplyOptions {
            renormalize_output: a.renormalize,
        },
    )?;
    let out = outputs.claim(&a.out);
    out_space.save(&out, format)?;

    if let Some(p) = &a.save_projection {
        let payload = encode_f64s(w.data());
        let file = ProjectionFile {
            kind: "projection",
            dim: w.rows(),
            used: report.used,
            source_oov: report.source_oov,
            target_oov: report.target_oov,
            payload: &payload,
        };
        write_text(p, &(serde_json::to_string_pretty(&file)? + "\n"), outputs)?;
    }

    let mut prov = Provenance::new(
        "transfer",
        json!({
            "chain": pipeline.as_ref().map(|(p, _)| p.describe()),
            "renormalize": a.renormalize,
            "pairs_used": report.used,
            "space": space_args_json(&a.input),
        }),
    );
    prov.add_input(&src_path)?;
    prov.add_input(&tgt_path)?;
    prov.add_input(&dict_path)?;
    if let (Some(m), Some((_, stages))) = (&manifest_path, &pipeline) {
        prov.add_input(m)?;
        for s in stages {
            prov.add_input(s)?;
        }
    }
    prov.write_for(&a.out, outputs)?;
    if let Some(p) = &a.save_projection {
        prov.write_for(p, outputs)?;
    }
    Ok(())
}

pub fn project(a: &ProjectArgs, outputs: &mut Outputs) -> Result<()> {
    let space_path = outputs::input(&a.space)?;
    let spec_path = outputs::input(&a.spec)?;
    outputs::output(&a.out)?;
    let specs = load_specs(&spec_path)?;
    let (space, _) = load_space(&space_path, &a.input)?;
    let spec = fit_spec(&specs.test, &space, &a.input)?;
    let points = topology_export(&space, &spec)?;
    write_text(&a.out, &topology_csv(&points), outputs)?;

    let mut prov = Provenance::new("project", json!({ "space": space_args_json(&a.input) }));
    prov.add_input(&space_path)?;
    prov.add_input(&spec_path)?;
    prov.write_for(&a.out, outputs)
}
