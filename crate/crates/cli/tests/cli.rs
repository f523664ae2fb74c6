use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use ssat_core::train::Mode;
use ssat_forge::{parse_spec, parse_spec_str, ExperimentSpec, Overrides};

const MICRO: &str = r#"
seed = 5
[model.encoder]
depth = 2
dim = 16
heads = 2
image_size = 8
patch_size = 4
[model.decoder]
depth = 1
dim = 16
heads = 2
[train]
epochs = 2
warmup_epochs = 1
batch_size = 8
[data]
test_per_class = 4
[data.synthetic]
per_class = 6
image_size = 8
[diagnostics]
slice_size = 6
batch_size = 6
[diagnostics.spectrum_config]
k = 2
iterations = 4
samples = 4
[sweep]
lambdas = [0.9, 0.1]
subsets = [0.5, 1.0]
"#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn forge(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ssat-forge")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn empty_config_gives_defaults() {
    let spec = parse_spec_str("", false).unwrap();
    assert_eq!(spec, ExperimentSpec::default());
    assert_eq!(parse_spec_str("{}", true).unwrap(), spec);
    let resolved = parse_spec(None, &Overrides::default()).unwrap();
    assert_eq!(resolved.train.lambda, 0.1);
    assert_eq!(resolved.train.mask_ratio, 0.75);
    assert_eq!(resolved.model.encoder.depth, 4);
}

#[test]
fn command_line_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "seed = 1\n[train]\nlambda = 0.5\nmode = \"scratch\"\n");
    let spec = parse_spec(Some(&path), &Overrides::default()).unwrap();
    assert_eq!((spec.train.lambda, spec.train.mode, spec.train.seed), (0.5, Mode::Scratch, 1));
    let o = Overrides {
        lambda: Some(0.2),
        seed: Some(9),
        mode: Some(Mode::Ssat),
        epochs: Some(3),
        ..Default::default()
    };
    let spec = parse_spec(Some(&path), &o).unwrap();
    assert_eq!(spec.train.lambda, 0.2);
    assert_eq!((spec.seed, spec.train.seed), (9, 9));
    assert_eq!(spec.train.mode, Mode::Ssat);
    assert_eq!((spec.train.epochs, spec.train.warmup_epochs), (3, 3));
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let err = parse_spec_str("[train]\nlamda = 0.5\n", false).unwrap_err();
    assert!(format!("{err:#}").contains("lamda"), "{err:#}");
    let err = parse_spec_str(r#"{"train": {"lamda": 0.5}}"#, true).unwrap_err();
    assert!(format!("{err:#}").contains("lamda"), "{err:#}");
}

#[test]
fn inconsistent_configs_are_rejected() {
    for body in [
        "[train]\nlambda = 1.5\n",
        "[data.synthetic]\nimage_size = 16\n",
        "[data]\nsubset = 0.0\n",
        "[data]\nkind = \"cifar10\"\n",
        "[model.encoder]\ndim = 60\nheads = 7\n",
    ] {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), body);
        assert!(parse_spec(Some(&path), &Overrides::default()).is_err(), "{body}");
    }
}

#[test]
fn training_twice_writes_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MICRO);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    forge(&["train", "--config", s(&cfg), "--out", s(&a)]);
    forge(&["train", "--config", s(&cfg), "--out", s(&b)]);
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("metrics.csv")).unwrap());
    let mut lines = ma.lines();
    assert!(lines.next().unwrap().starts_with("# config_digest="));
    assert_eq!(lines.next().unwrap(), "epoch,l_cls,l_ssat,l_total,lr,eval_acc");
    assert_eq!(lines.count(), 2);
    assert_eq!(fs::read(a.join("checkpoint.ckpt")).unwrap(), fs::read(b.join("checkpoint.ckpt")).unwrap());
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "ssat");
    assert_eq!(summary["seed"], 5);
    assert!(summary["final_accuracy"].as_f64().is_some());

    // a different seed changes the trajectory
    let c = dir.path().join("c");
    forge(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "6"]);
    assert_ne!(ma, fs::read_to_string(c.join("metrics.csv")).unwrap());
}

#[test]
fn resume_continues_a_split_run_and_rejects_changed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MICRO);
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    forge(&["train", "--config", s(&cfg), "--out", s(&whole)]);
    forge(&["train", "--config", s(&cfg), "--out", s(&split), "--until-epoch", "1"]);
    forge(&["train", "--config", s(&cfg), "--out", s(&split), "--resume"]);
    for f in ["metrics.csv", "checkpoint.ckpt"] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_ssat-forge"))
        .args(["train", "--config", s(&cfg), "--out", s(&split), "--resume", "--lambda", "0.5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn eval_with_perturbation_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MICRO);
    let out = dir.path().join("run");
    forge(&["train", "--config", s(&cfg), "--out", s(&out), "--mode", "scratch"]);
    forge(&["eval", "--config", s(&cfg), "--out", s(&out), "--mode", "scratch"]);
    forge(&["eval", "--config", s(&cfg), "--out", s(&out), "--mode", "scratch", "--perturb", "0"]);
    forge(&["eval", "--config", s(&cfg), "--out", s(&out), "--mode", "scratch", "--perturb", "0.5"]);
    let read = |name: &str| -> Value { serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap() };
    let clean = read("eval.json")["accuracy"].as_f64().unwrap();
    assert_eq!(read("eval_perturb_0.json")["accuracy"].as_f64().unwrap(), clean);
    let warped = read("eval_perturb_0.5.json");
    assert_eq!(warped["perturb_strength"], 0.5);
    assert!((0.0..=1.0).contains(&warped["accuracy"].as_f64().unwrap()));
    let summary = read("summary.json");
    assert_eq!(summary["final_accuracy"].as_f64().unwrap(), clean);

    let bad = Command::new(env!("CARGO_BIN_EXE_ssat-forge"))
        .args(["eval", "--config", s(&cfg), "--out", s(&out), "--perturb", "1.5"])
        .output()
        .unwrap();
    assert!(!bad.status.success());

    forge(&["diagnose", "--config", s(&cfg), "--out", s(&out)]);
    let report = read("diagnostics.json");
    assert_eq!(report["report"]["attention"].as_array().unwrap().len(), 2);
    assert!(report["report"]["spectrum"]["top"].is_array());
    for f in ["attention_mass.csv", "inter_token_distance.csv", "feature_variance.csv", "hessian_spectrum.csv"] {
        assert!(fs::read_to_string(out.join(f)).unwrap().starts_with("# config_digest="), "{f}");
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MICRO);
    let out = Command::new(env!("CARGO_BIN_EXE_ssat-forge"))
        .args(["eval", "--config", s(&cfg), "--out", s(&dir.path().join("nothing"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn compare_and_sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &MICRO.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("cmp");
    forge(&["compare", "--config", s(&cfg), "--out", s(&out)]);
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["scratch", "ssl_ft_1", "ssl_ft_2", "ssl_ft_3", "ssl_ft_4", "ssat"]);

    forge(&["compare", "--config", s(&cfg), "--out", s(&out), "--sweep", "lambda"]);
    let lambdas = fs::read_to_string(out.join("lambda_sweep.csv")).unwrap();
    assert_eq!(lambdas.lines().count(), 4);
    forge(&["compare", "--config", s(&cfg), "--out", s(&out), "--sweep", "subset"]);
    let subsets = fs::read_to_string(out.join("subset_sweep.csv")).unwrap();
    assert!(subsets.lines().nth(2).unwrap().starts_with("0.5,9,"), "{subsets}");
}

#[test]
fn flops_prints_per_mode_counts() {
    let out = forge(&["flops"]);
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let macs = |i: usize| rows[i]["macs"].as_u64().unwrap();
    assert_eq!(macs(0) + macs(1), macs(2));
    assert_eq!(rows[0]["flops"].as_u64().unwrap(), 2 * macs(0));
}
