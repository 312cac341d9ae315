use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointxfer::datasets::{Dataset, DomainSpec, SplitFractions};
use pointxfer::models::{decode_checkpoint, encode_checkpoint, Architecture, BackboneKind};
use pointxfer::transfer::{train_from_scratch, FinetuneConfig};

const TINY: &str = "\
[dataset]
samples_per_class = 4
points_per_cloud = 128

[model]
widths = 16,32

[pretrain]
epochs = 2
points = 64
batch_size = 8
pair_cap = 64

[probe]
steps = 50
points = 64

[finetune]
epochs = 2
points = 64
batch_size = 8

[analysis]
batches = 1
batch_size = 4
points = 64

[reproduce]
seeds = 1
source_per_class = 3
target_per_class = 3
points = 64
pretrain_epochs = 1
finetune_epochs = 1
grad_batches = 1
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pointxfer"))
            .arg("--config")
            .arg(self.path("tiny.ini"))
            .arg("--out")
            .arg(self.path("out"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {stdout:?}"))
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_is_deterministic() {
    let sb = Sandbox::new();
    let a = sb.ok(&["gen", "--preset", "TARGET-NEAR", "--out", sb.path("a").to_str().unwrap()]);
    let b = sb.ok(&["gen", "--preset", "TARGET-NEAR", "--out", sb.path("b").to_str().unwrap()]);
    assert_eq!(field(&a, "digest"), field(&b, "digest"));
    assert_eq!(field(&a, "name"), "TARGET-NEAR");
    let mut files: Vec<_> = fs::read_dir(sb.path("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(files.len() > 2);
    for f in files.iter().filter(|f| f.to_str() != Some("config.resolved")) {
        let (pa, pb) = (sb.path("a").join(f), sb.path("b").join(f));
        if pa.is_file() {
            assert_eq!(read(&pa), read(&pb), "{f:?}");
        }
    }
}

#[test]
fn malformed_config_exits_with_code_2() {
    let sb = Sandbox::new();
    fs::write(sb.path("bad.ini"), "[pretrain]\nepoch = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pointxfer"))
        .args(["--config", sb.path("bad.ini").to_str().unwrap(), "pretrain"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let out = sb.run(&["pretrain", "--regularize", "depth=3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let sb = Sandbox::new();
    let out = Command::new(env!("CARGO_BIN_EXE_pointxfer"))
        .args(["--config", sb.path("absent.ini").to_str().unwrap(), "pretrain"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = sb.run(&["probe", "--ckpt", sb.path("none.bin").to_str().unwrap(), "--data", "SOURCE"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pretrain_probe_and_analysis_pipeline() {
    let sb = Sandbox::new();
    let data = sb.path("source");
    sb.ok(&["gen", "--preset", "SOURCE", "--out", data.to_str().unwrap()]);
    let data = data.to_str().unwrap();

    let out = sb.ok(&["pretrain", "--data", data, "--regularize", "layers=0", "--run", "sup"]);
    assert_eq!(field(&out, "objective"), "supervised");
    assert_eq!(field(&out, "regularized_layers"), "layer0");
    let ckpt = sb.path("out/sup/checkpoint.bin");
    for f in ["config.resolved", "curves.csv", "charts/loss.svg"] {
        assert!(sb.path("out/sup").join(f).is_file(), "{f}");
    }
    let first = read(&ckpt);
    sb.ok(&["pretrain", "--data", data, "--regularize", "layers=0", "--run", "sup"]);
    assert_eq!(read(&ckpt), first, "rerun changed the checkpoint");

    let ckpt = ckpt.to_str().unwrap();
    sb.ok(&["probe", "--ckpt", ckpt, "--data", data, "--run", "p1"]);
    sb.ok(&["probe", "--ckpt", ckpt, "--data", data, "--run", "p2"]);
    assert_eq!(read(&sb.path("out/p1/results.csv")), read(&sb.path("out/p2/results.csv")));
    assert_eq!(read(Path::new(ckpt)), first, "probing changed the checkpoint");

    let out = sb.run(&["layer-probe", "--ckpt", ckpt, "--data", data, "--layer", "layer9"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layer0") && err.contains("layer1"), "{err}");
    let out = sb.ok(&["layer-probe", "--ckpt", ckpt, "--data", data, "--layer", "layer0"]);
    assert!(out.contains("test_acc"), "{out}");

    let out = sb.ok(&["analyze", "grad-norms", "--ckpt", ckpt, "--ckpt", "random", "--data", data, "--run", "g"]);
    assert!(out.contains("early_ratio="), "{out}");
    assert!(sb.path("out/g/charts/grad_norms.svg").is_file());
    assert_eq!(read(Path::new(ckpt)), first, "gradient norms changed the checkpoint");

    let out = sb.ok(&["analyze", "export", "--ckpt", ckpt, "--data", data, "--layer", "layer1", "--run", "e"]);
    let features = field(&out, "features").to_string();
    let out = sb.ok(&["analyze", "project", "--features", &features, "--run", "pr"]);
    assert_eq!(field(&out, "rows"), field(&sb.ok(&["analyze", "export", "--ckpt", ckpt, "--data", data, "--layer", "layer1", "--run", "e"]), "rows"));
    assert!(sb.path("out/pr/charts/projection.svg").is_file());
}

#[test]
fn finetuning_random_is_training_from_scratch() {
    let sb = Sandbox::new();
    sb.ok(&["finetune", "--ckpt", "random", "--data", "SOURCE", "--run", "ft"]);
    let mut spec = DomainSpec::source(4, 1);
    spec.points_per_cloud = 128;
    let data = Dataset::generate(&spec, SplitFractions::default()).unwrap();
    let mut arch = Architecture::new(BackboneKind::GlobalPointnet, data.num_classes());
    arch.widths = vec![16, 32];
    let cfg = FinetuneConfig {
        epochs: 2,
        points: 64,
        batch_size: 8,
        seed: 0,
        ..FinetuneConfig::default()
    };
    let want = train_from_scratch(&arch, 0, &data, &cfg).unwrap();
    let got = decode_checkpoint(&read(&sb.path("out/ft/checkpoint.bin"))).unwrap();
    let want = decode_checkpoint(&encode_checkpoint(&want.model)).unwrap();
    assert_eq!(got.provenance, want.provenance);
    assert_eq!(got.tensors, want.tensors);
}

#[test]
fn tiny_reproduce_writes_verdicts() {
    let sb = Sandbox::new();
    let out = sb.run(&["reproduce", "--run", "rep"]);
    let code = out.status.code();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let verdicts: Vec<&str> = stdout.lines().filter(|l| l.starts_with("criterion=")).collect();
    assert_eq!(verdicts.len(), 6, "{stdout}");
    let hard_failed = verdicts.iter().any(|l| l.contains("gate=hard") && !l.contains("verdict=PASS"));
    assert_eq!(code, Some(if hard_failed { 4 } else { 0 }));
    let summary = fs::read_to_string(sb.path("out/rep/summary.csv")).unwrap();
    assert!(summary.starts_with("criterion,gate,"));
    for c in ["6", "7a", "7b", "8", "9a", "9b"] {
        assert!(summary.lines().any(|l| l.starts_with(&format!("{c},"))), "{c}");
    }
    let first = read(&sb.path("out/rep/summary.csv"));
    sb.run(&["reproduce", "--run", "rep"]);
    assert_eq!(read(&sb.path("out/rep/summary.csv")), first);
}
