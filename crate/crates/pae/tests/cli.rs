//! Subcommand-level contracts: error categories and exit codes, input
//! immutability, and single-subcommand rerun reproducibility.

use std::path::{Path, PathBuf};
use std::process::Command;

fn data_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(rel)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pae"))
}

fn tiny_synth_spec(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "schema_version = 1\nname = \"tiny\"\nsigma = 0.05\ndim = 25\nseed = 4\nseparation = 1.0\ninclude_bonafide = true\n\n[counts]\ntrain = 12\ndev = 6\neval = 6\n",
    )
    .unwrap();
    path
}

#[test]
fn synth_rerun_is_byte_identical_and_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_synth_spec(dir.path());
    let schema = data_path("schemas/asvspoof2019-det.toml");
    let schema_before = pae::manifest::sha256_file(&schema).unwrap();
    let spec_before = pae::manifest::sha256_file(&spec).unwrap();

    for out in ["a", "b"] {
        let status = bin()
            .args([
                "synth",
                "--spec",
                spec.to_str().unwrap(),
                "--schema",
                schema.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
                "--seed",
                "4",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in [
        "train.pae",
        "train.idx",
        "train.meta.json",
        "dev.pae",
        "eval.pae",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(name)).unwrap(),
            std::fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    // Manifests agree on everything except timing (and the out paths).
    let a = pae::manifest::RunManifest::load(&dir.path().join("a/run_manifest.json")).unwrap();
    let b = pae::manifest::RunManifest::load(&dir.path().join("b/run_manifest.json")).unwrap();
    let by_name = |m: &std::collections::BTreeMap<String, String>| -> Vec<(String, String)> {
        m.iter()
            .map(|(k, v)| {
                let name = Path::new(k).file_name().unwrap().to_string_lossy().into_owned();
                (name, v.clone())
            })
            .collect()
    };
    assert_eq!(a.input_hashes, b.input_hashes);
    assert_eq!(by_name(&a.output_hashes), by_name(&b.output_hashes));
    assert_eq!(a.seed, b.seed);

    // Inputs are never mutated.
    assert_eq!(pae::manifest::sha256_file(&schema).unwrap(), schema_before);
    assert_eq!(pae::manifest::sha256_file(&spec).unwrap(), spec_before);
}

#[test]
fn eval_rejects_schema_hash_mismatch_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_synth_spec(dir.path());
    let schema = data_path("schemas/asvspoof2019-det.toml");
    let p = |s: &str| dir.path().join(s).display().to_string();

    let run = |args: &[&str]| {
        let out = bin().args(args).args(["--seed", "4"]).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        &p("synth"),
    ]);
    run(&[
        "train-extractors",
        "--embeddings",
        &p("synth/train.pae"),
        "--index",
        &p("synth/train.idx"),
        "--dev-embeddings",
        &p("synth/dev.pae"),
        "--dev-index",
        &p("synth/dev.idx"),
        "--schema",
        schema.to_str().unwrap(),
        "--epochs",
        "3",
        "--lr",
        "0.01",
        "--batch",
        "8",
        "--out",
        &p("bank"),
    ]);
    run(&[
        "extract",
        "--embeddings",
        &p("synth/eval.pae"),
        "--index",
        &p("synth/eval.idx"),
        "--model",
        &p("bank"),
        "--out",
        &p("rho"),
    ]);
    run(&[
        "train-backend",
        "--embeddings",
        &p("rho/embeddings.pae"),
        "--index",
        &p("rho/embeddings.idx"),
        "--model",
        "nb",
        "--task",
        "detection",
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        &p("backend"),
    ]);

    // Corrupt the model's schema hash; eval must refuse the pairing.
    let model_path = dir.path().join("backend/model.json");
    let mut model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    model["schema_hash"] = serde_json::json!("0000deadbeef");
    std::fs::write(&model_path, serde_json::to_string_pretty(&model).unwrap()).unwrap();

    let out = bin()
        .args([
            "eval",
            "--embeddings",
            &p("rho/embeddings.pae"),
            "--index",
            &p("rho/embeddings.idx"),
            "--model",
            model_path.to_str().unwrap(),
            "--out",
            &p("eval"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let payload: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).expect("machine-readable error");
    assert_eq!(payload["category"], "SchemaMismatch");
}

#[test]
fn missing_input_reports_category_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "hamming",
            "--schema",
            dir.path().join("nope.toml").to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let payload: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(payload["category"], "Io");
}

#[test]
fn nb_requires_schema() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_synth_spec(dir.path());
    let schema = data_path("schemas/asvspoof2019-det.toml");
    let p = |s: &str| dir.path().join(s).display().to_string();
    let status = bin()
        .args([
            "synth",
            "--spec",
            spec.to_str().unwrap(),
            "--schema",
            schema.to_str().unwrap(),
            "--out",
            &p("synth"),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let out = bin()
        .args([
            "train-backend",
            "--embeddings",
            &p("synth/train.pae"),
            "--index",
            &p("synth/train.idx"),
            "--model",
            "nb",
            "--task",
            "detection",
            "--out",
            &p("backend"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let payload: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap())
            .unwrap();
    assert_eq!(payload["category"], "InvalidArgument");
}

#[test]
fn partition_subcommand_writes_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let metadata = dir.path().join("meta.tsv");
    let mut rows = String::new();
    for attack in ["A01", "A02"] {
        for i in 0..10 {
            rows.push_str(&format!("{attack}-{i:02}\t{attack}\tS{}\ttrain\n", i % 3));
        }
        for i in 0..5 {
            rows.push_str(&format!("{attack}-d{i:02}\t{attack}\tS{}\tdev\n", i % 2));
        }
    }
    std::fs::write(&metadata, rows).unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        "schema_version = 1\nname = \"mini\"\nseed = 1\n\n[[rule]]\nattacks = [\"A01\", \"A02\"]\nsource = \"train\"\ntrain_frac = 0.8\ndev_frac = 0.2\neval_from = \"dev\"\n",
    )
    .unwrap();

    let status = bin()
        .args([
            "partition",
            "--metadata",
            metadata.to_str().unwrap(),
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let split =
        pae::dataio::ProtocolSplit::load(&dir.path().join("out/protocol.txt")).unwrap();
    assert_eq!(split.partition_len(pae::dataio::Partition::Train), 16);
    assert_eq!(split.partition_len(pae::dataio::Partition::Dev), 4);
    assert_eq!(split.partition_len(pae::dataio::Partition::Eval), 10);
}
