use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn debie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debie"))
        .args(args)
        .env_remove("DEBIE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = debie(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn spec_words(v: &Value) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, key) in ["t1", "t2", "a1", "a2"].iter().enumerate() {
        if let Some(list) = v.get(*key).and_then(Value::as_array) {
            out.extend(list.iter().map(|w| (w.as_str().unwrap().to_string(), i)));
        }
    }
    out
}

/// Deterministic space over every word of the augmented k=2 file plus
/// filler, with science and male terms pushed one way along axis 0 and art
/// and female terms the other way.
fn write_space(path: &Path, scale: f64) {
    let aug: Value =
        serde_json::from_str(&std::fs::read_to_string(data("weat8_k2.json")).unwrap()).unwrap();
    let mut words = spec_words(&aug["test"]);
    words.extend(spec_words(&aug["train"]));
    for i in 0..60 {
        words.push((format!("filler{i}"), 9));
    }
    let d = 12;
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut text = format!("{} {d}\n", words.len());
    for (w, set) in &words {
        let mut v: Vec<f64> = (0..d).map(|_| next()).collect();
        match set {
            0 | 2 => v[0] += 1.5,
            1 | 3 => v[0] -= 1.5,
            _ => {}
        }
        let row: Vec<String> = v.iter().map(|x| format!("{}", x * scale)).collect();
        text.push_str(&format!("{w} {}\n", row.join(" ")));
    }
    std::fs::write(path, text).unwrap();
}

fn write_benchmark(path: &Path) {
    let pairs = [
        ("science", "physics", 8.0),
        ("art", "poetry", 7.5),
        ("brother", "sister", 6.0),
        ("father", "mother", 6.5),
        ("science", "poetry", 1.0),
        ("uncle", "aunt", 6.2),
        ("dance", "chemistry", 0.5),
        ("novel", "literature", 7.0),
    ];
    let text: String = pairs
        .iter()
        .map(|(a, b, g)| format!("{a}\t{b}\t{g}\n"))
        .collect();
    std::fs::write(path, text).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn debias_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.vec");
    let bench = dir.path().join("sim.tsv");
    write_space(&space, 1.0);
    write_benchmark(&bench);
    let spec = data("weat8_k2.json");

    let mut reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("debiased{run}.vec"));
        let tdir = dir.path().join(format!("t{run}"));
        ok(&[
            "debias", "--space", s(&space), "--spec", s(&spec), "--chain", "gbdd∘dbn",
            "--out", s(&out), "--transforms", s(&tdir),
            "--hidden-layers", "2", "--hidden-width", "16", "--epochs", "3", "--seed", "7",
        ]);
        for f in ["pipeline.json", "stage0_gbdd.json", "stage1_dbn.json", "stage1_dbn_loss.csv"] {
            assert!(tdir.join(f).is_file(), "missing {f}");
        }
        assert!(dir.path().join(format!("debiased{run}.vec.provenance.json")).is_file());
        let prefix = dir.path().join(format!("report{run}"));
        ok(&[
            "eval", "--space", s(&out), "--spec", s(&spec), "--simlex", s(&bench),
            "--wordsim", s(&bench), "--out", s(&prefix), "--label", "x", "--runs", "3",
        ]);
        let tsv = std::fs::read(dir.path().join(format!("report{run}.tsv"))).unwrap();
        let json = std::fs::read(dir.path().join(format!("report{run}.json"))).unwrap();
        reports.push((tsv, json, std::fs::read(&out).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);

    let tsv = String::from_utf8(reports[0].0.clone()).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "space\tspec\tWEAT\tECT\tBAT\tKM\tSVM\tSL\tWS");
    assert_eq!(lines.next().unwrap().split('\t').count(), 9);
}

#[test]
fn gbdd_reduces_weat() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.vec");
    write_space(&space, 1.0);
    let spec = data("weat8_k2.json");
    let out = dir.path().join("g.vec");
    ok(&[
        "debias", "--space", s(&space), "--spec", s(&spec), "--chain", "gbdd",
        "--out", s(&out), "--transforms", s(&dir.path().join("t")),
    ]);
    let weat = |p: &Path, name: &str| -> f64 {
        let prefix = dir.path().join(name);
        ok(&["eval", "--space", s(p), "--spec", s(&spec), "--metrics", "weat", "--out", s(&prefix)]);
        let v: Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(format!("{name}.json"))).unwrap(),
        )
        .unwrap();
        v["entries"][0]["value"].as_f64().unwrap()
    };
    let before = weat(&space, "before");
    let after = weat(&out, "after");
    assert!(before > 1.0, "planted bias too weak: {before}");
    assert!(after.abs() < before / 2.0, "{before} -> {after}");
}

#[test]
fn scaling_the_space_leaves_metrics_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.vec"), dir.path().join("b.vec"));
    write_space(&a, 1.0);
    write_space(&b, 2.0);
    let bench = dir.path().join("sim.tsv");
    write_benchmark(&bench);
    let spec = data("weat8_k2.json");
    for (p, name) in [(&a, "ra"), (&b, "rb")] {
        ok(&[
            "eval", "--space", s(p), "--spec", s(&spec), "--simlex", s(&bench), "--wordsim",
            s(&bench), "--label", "same", "--runs", "2", "--out", s(&dir.path().join(name)),
        ]);
    }
    let read = |n: &str| std::fs::read_to_string(dir.path().join(n)).unwrap();
    assert_eq!(read("ra.tsv"), read("rb.tsv"));
}

#[test]
fn augment_and_project() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.vec");
    write_space(&space, 1.0);
    let aug = dir.path().join("aug.json");
    ok(&["augment", "--spec", s(&data("weat8.json")), "--sim-space", s(&space), "--k", "2", "--out", s(&aug)]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&aug).unwrap()).unwrap();
    assert_eq!(v["k"], 2);
    assert_eq!(v["test"]["t1"][0], "science");
    assert!(!v["train"]["t1"].as_array().unwrap().is_empty());
    let prov: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("aug.json.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "augment");
    assert_eq!(prov["inputs"].as_object().unwrap().len(), 2);

    let csv = dir.path().join("pca.csv");
    ok(&["project", "--space", s(&space), "--spec", s(&aug), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "word,set,pc1,pc2");
    assert_eq!(text.lines().count(), 33);
}

#[test]
fn transfer_through_identity_matches_in_language_debiasing() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.vec");
    write_space(&space, 1.0);
    let text = std::fs::read_to_string(&space).unwrap();
    let dict: String = text
        .lines()
        .skip(1)
        .map(|l| {
            let w = l.split(' ').next().unwrap();
            format!("{w}\t{w}\n")
        })
        .collect();
    let dict_path = dir.path().join("dict.tsv");
    std::fs::write(&dict_path, dict).unwrap();

    let spec = data("weat8_k2.json");
    let tdir = dir.path().join("t");
    let debiased = dir.path().join("in.vec");
    ok(&[
        "debias", "--space", s(&space), "--spec", s(&spec), "--chain", "gbdd,bam",
        "--out", s(&debiased), "--transforms", s(&tdir),
    ]);
    let transferred = dir.path().join("x.vec");
    ok(&[
        "transfer", "--src-space", s(&space), "--tgt-space", s(&space), "--dict", s(&dict_path),
        "--pipeline", s(&tdir.join("pipeline.json")), "--out", s(&transferred),
        "--save-projection", s(&dir.path().join("w.json")),
    ]);
    assert_eq!(std::fs::read(&debiased).unwrap(), std::fs::read(&transferred).unwrap());
    let w: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("w.json")).unwrap()).unwrap();
    assert_eq!(w["dim"], 12);
}

#[test]
fn errors_are_json_and_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.vec");
    write_space(&space, 1.0);

    let out = debie(&["eval", "--space", "/nonexistent.vec", "--spec", s(&data("weat8.json")), "--metrics", "weat", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");

    // a spec term missing from the space under --oov error
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"name":"x","t1":["science","zzz"],"t2":["art"]}"#).unwrap();
    let out = debie(&["eval", "--space", s(&space), "--spec", s(&spec), "--metrics", "weat", "--oov", "error", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "insufficient_terms");

    // dbn on a spec without attributes fails after the transforms directory is set up
    let tdir = dir.path().join("t");
    let out = debie(&[
        "debias", "--space", s(&space), "--spec", s(&spec), "--chain", "dbn∘gbdd",
        "--out", s(&dir.path().join("o.vec")), "--transforms", s(&tdir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("o.vec").exists());
    assert_eq!(std::fs::read_dir(&tdir).unwrap().count(), 0);

    let out = debie(&["debias", "--space", s(&space), "--spec", s(&spec), "--chain", "pca", "--out", "o", "--transforms", "t"]);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_argument");
}

#[test]
fn data_dir_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.vec");
    write_space(&space, 1.0);
    let out = Command::new(env!("CARGO_BIN_EXE_debie"))
        .args(["eval", "--space", s(&space), "--spec", "weat8.json", "--metrics", "ect", "--out", s(&dir.path().join("r"))])
        .env("DEBIE_DATA_DIR", data(""))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
