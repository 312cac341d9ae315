//! Command-line front end: dataset generation, pre-training, probing,
//! fine-tuning, analysis and the full experiment suite.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
//! input, 4 training abort (or a failed hard check in `reproduce`).

mod charts;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pointxfer::analysis::{
    compare_reports, export_features, gradient_norms, pca_project_2d, read_features, AnalysisError, GradNormConfig,
};
use pointxfer::datasets::{build_dataset, Dataset, DatasetError};
use pointxfer::experiments::{run_suite, Domains};
use pointxfer::models::checkpoint::CheckpointError;
use pointxfer::models::{load_checkpoint, save_checkpoint, Model, ModelError};
use pointxfer::transfer::{
    curve_csv, estimate_normals, finetune, layer_probe, linear_probe, pretrain, results_csv, EpochStats, ProbeResult,
    TrainError,
};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "pointxfer", version, about = "Point-cloud pre-training and transfer experiments")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (the dataset directory for `gen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory with its manifest.
    Gen {
        /// Dataset config; same format as --config.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// SOURCE, TARGET-NEAR or TARGET-FAR.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Pre-train a backbone and write its checkpoint.
    Pretrain {
        /// Dataset directory or preset name.
        #[arg(long, default_value = "SOURCE")]
        data: String,
        #[arg(long)]
        objective: Option<String>,
        /// e.g. `layers=0,1` or `layers=0,1;lambda=0.5`.
        #[arg(long)]
        regularize: Option<String>,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Linear probe on the frozen global feature.
    Probe {
        /// Checkpoint path or `random`.
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: String,
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Linear probe on one backbone block.
    LayerProbe {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: String,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Fine-tune all weights with a fresh classifier.
    Finetune {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Layer-wise diagnostics.
    Analyze {
        #[command(subcommand)]
        command: AnalyzeCommand,
    },
    /// Full seed-swept experiment matrix with trend verdicts.
    Reproduce {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        run: Option<String>,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-layer gradient norms of one or more checkpoints.
    GradNorms {
        #[arg(long, required = true)]
        ckpt: Vec<String>,
        #[arg(long)]
        data: String,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        run: Option<String>,
    },
    /// Pooled features of one layer on the test split.
    Export {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: String,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        run: Option<String>,
    },
    /// 2-D principal-component projection of an exported feature file.
    Project {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        run: Option<String>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl ToString) -> Failure {
    Failure {
        code,
        msg: msg.to_string(),
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        fail(2, e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidSpec(_) | DatasetError::UnsupportedFormat(_) => fail(2, e),
            _ => fail(3, e),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(_) => fail(3, e),
            ModelError::UnknownLayer { .. } | ModelError::TooFewPoints { .. } => fail(2, e),
            _ => fail(4, e),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        fail(3, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) => fail(2, e),
            _ => fail(4, e),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(m) => m.into(),
            AnalysisError::Train(t) => t.into(),
            AnalysisError::Io { .. } | AnalysisError::Parse { .. } => fail(3, e),
            AnalysisError::Invalid(_) | AnalysisError::LayerMismatch(..) => fail(2, e),
            _ => fail(4, e),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io(path: &Path, e: std::io::Error) -> Failure {
    fail(3, format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io(path, e))
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    /// Creates `out/<run>/charts` and writes the resolved config there.
    fn run_dir(&self, run: &Option<String>, default: &str) -> Result<PathBuf> {
        let name = run.clone().or_else(|| self.cfg.name.clone()).unwrap_or_else(|| default.into());
        let dir = self.out.join(name);
        fs::create_dir_all(dir.join("charts")).map_err(|e| io(&dir, e))?;
        write(&dir.join("config.resolved"), self.cfg.to_ini())?;
        Ok(dir)
    }

    /// A dataset directory or manifest when `spec` names an existing path,
    /// otherwise a stock domain generated in memory.
    fn data(&self, spec: &str) -> Result<Dataset> {
        let path = Path::new(spec);
        if path.exists() {
            return Ok(Dataset::load(path)?);
        }
        match self.cfg.domain(spec) {
            Ok(domain) => Ok(Dataset::generate(&domain, self.cfg.split())?),
            Err(_) => Err(fail(3, format!("no dataset at {spec:?} and no preset of that name"))),
        }
    }

    fn model(&self, ckpt: &str, data: &Dataset) -> Result<Model<f32>> {
        if ckpt == "random" {
            return Ok(Model::new(self.cfg.architecture(data.num_classes()), self.cfg.seed));
        }
        Ok(load_checkpoint(Path::new(ckpt))?)
    }
}

fn loss_chart(dir: &Path, curve: &[EpochStats]) -> Result<()> {
    let pts = curve.iter().map(|e| (e.epoch as f64, e.loss)).collect();
    write(
        &dir.join("charts").join("loss.svg"),
        charts::line_chart("training loss", &[("loss".into(), pts)]),
    )
}

fn report(dir: &Path, result: &ProbeResult) -> Result<()> {
    write(&dir.join("results.csv"), results_csv(std::slice::from_ref(result)))?;
    println!("{}", result.summary_line());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(fail(3, format!("{}: no such config file", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Gen { spec, preset } => {
            if let Some(p) = spec {
                if !p.exists() {
                    return Err(fail(3, format!("{}: no such spec file", p.display())));
                }
                let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
                let file = RunConfig::parse(&text)?;
                cfg = RunConfig {
                    seed: cfg.seed,
                    jobs: cfg.jobs,
                    ..file
                };
            }
            if let Some(p) = preset {
                cfg.set("dataset", "preset", &p)?;
            }
            let spec = cfg.domain(&cfg.dataset.preset.clone())?;
            let manifest = build_dataset(&spec, cfg.split(), &out)?;
            write(&out.join("config.resolved"), cfg.to_ini())?;
            println!(
                "dataset={} name={} files={} digest={}",
                out.display(),
                spec.name,
                manifest.entries.len(),
                manifest.digest()
            );
        }
        Command::Pretrain {
            data,
            objective,
            regularize,
            backbone,
            epochs,
            run,
        } => {
            if let Some(o) = objective {
                cfg.set("pretrain", "objective", &o)?;
            }
            if let Some(r) = regularize {
                for part in r.split([';', ' ']).filter(|p| !p.is_empty()) {
                    match part.split_once('=') {
                        Some(("layers", v)) => cfg.set("pretrain", "regularize_layers", v)?,
                        Some(("lambda", v)) => cfg.set("pretrain", "lambda", v)?,
                        _ => return Err(fail(2, format!("--regularize: expected layers=I,J[;lambda=X], got {part:?}"))),
                    }
                }
            }
            if let Some(b) = backbone {
                cfg.set("model", "backbone", &b)?;
            }
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            cfg.pretrain.seed = cfg.seed;
            cfg.pretrain.validate()?;
            let ctx = Ctx { cfg, out };
            let mut ds = ctx.data(&data)?;
            if ctx.cfg.pretrain.regularize.is_some() {
                estimate_normals(&mut ds, ctx.cfg.normal_k)?;
            }
            let dir = ctx.run_dir(&run, "pretrain")?;
            let model = Model::new(ctx.cfg.architecture(ds.num_classes()), ctx.cfg.seed);
            let trained = pretrain(model, &ds, &ctx.cfg.pretrain)?;
            let ckpt = dir.join("checkpoint.bin");
            save_checkpoint(&trained.model, &ckpt)?;
            write(&dir.join("curves.csv"), curve_csv(&trained.curve))?;
            loss_chart(&dir, &trained.curve)?;
            let p = &trained.model.provenance;
            println!(
                "checkpoint={} objective={} regularized_layers={} final_loss={:.6}",
                ckpt.display(),
                p.pretraining,
                if p.regularized_layers.is_empty() { "none".into() } else { p.regularized_layers.join(",") },
                trained.curve.last().map_or(f64::NAN, |e| e.loss)
            );
        }
        Command::Probe {
            ckpt,
            data,
            classifier,
            run,
        } => {
            if let Some(c) = classifier {
                cfg.set("probe", "classifier", &c)?;
            }
            cfg.probe.seed = cfg.seed;
            let ctx = Ctx { cfg, out };
            let ds = ctx.data(&data)?;
            let model = ctx.model(&ckpt, &ds)?;
            let dir = ctx.run_dir(&run, "probe")?;
            let probe = linear_probe(&model, &ds, &ctx.cfg.probe)?;
            report(&dir, &probe.result)?;
        }
        Command::LayerProbe {
            ckpt,
            data,
            layer,
            classifier,
            run,
        } => {
            if let Some(c) = classifier {
                cfg.set("probe", "classifier", &c)?;
            }
            cfg.probe.seed = cfg.seed;
            let ctx = Ctx { cfg, out };
            let ds = ctx.data(&data)?;
            let model = ctx.model(&ckpt, &ds)?;
            model.backbone_layer(&layer)?;
            let dir = ctx.run_dir(&run, "layer-probe")?;
            let probe = layer_probe(&model, &ds, &layer, &ctx.cfg.probe)?;
            report(&dir, &probe.result)?;
        }
        Command::Finetune { ckpt, data, epochs, run } => {
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            cfg.finetune.seed = cfg.seed;
            cfg.finetune.validate()?;
            let ctx = Ctx { cfg, out };
            let ds = ctx.data(&data)?;
            let model = ctx.model(&ckpt, &ds)?;
            let dir = ctx.run_dir(&run, "finetune")?;
            let tuned = finetune(model, &ds, &ctx.cfg.finetune)?;
            save_checkpoint(&tuned.model, &dir.join("checkpoint.bin"))?;
            write(&dir.join("curves.csv"), curve_csv(&tuned.curve))?;
            loss_chart(&dir, &tuned.curve)?;
            report(&dir, &tuned.result)?;
        }
        Command::Analyze { command } => analyze(Ctx { cfg, out }, command)?,
        Command::Reproduce { seeds, run } => {
            if let Some(s) = seeds {
                cfg.reproduce.seeds = s;
            }
            let ctx = Ctx { cfg, out };
            let suite = ctx.cfg.suite();
            suite.validate().map_err(|e| fail(2, e))?;
            let dir = ctx.run_dir(&run, "reproduce")?;
            eprintln!("generating domains");
            let domains = Domains::generate(&suite)?;
            eprintln!("running {} seeds x 5 variants on {} worker(s)", suite.seeds, suite.jobs);
            let report = run_suite(&suite, &domains);
            report.write_to(&dir).map_err(|e| io(&dir, e))?;
            for f in report.failures() {
                eprintln!("sub-run failed: {f}");
            }
            for v in report.verdicts() {
                println!(
                    "criterion={} gate={} value={} verdict={}",
                    v.criterion,
                    if v.gate == pointxfer::experiments::Gate::Hard { "hard" } else { "soft" },
                    v.value.map_or("nan".into(), |x| format!("{x:.6}")),
                    v.label()
                );
            }
            println!("summary={}", dir.join("summary.csv").display());
            if report.hard_failure() {
                return Err(fail(4, "a hard trend check failed; see summary.csv"));
            }
        }
    }
    Ok(())
}

fn label(ckpt: &str) -> String {
    Path::new(ckpt)
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| ckpt.to_string(), |n| n.to_string_lossy().into_owned())
}

fn analyze(ctx: Ctx, command: AnalyzeCommand) -> Result<()> {
    match command {
        AnalyzeCommand::GradNorms { ckpt, data, seeds, run } => {
            let ds = ctx.data(&data)?;
            let seeds = seeds.unwrap_or(ctx.cfg.analysis.seeds);
            if seeds == 0 {
                return Err(fail(2, "--seeds must be positive"));
            }
            let models = ckpt.iter().map(|c| ctx.model(c, &ds)).collect::<Result<Vec<_>>>()?;
            let dir = ctx.run_dir(&run, "grad-norms")?;
            let mut groups = Vec::new();
            for (i, (name, model)) in ckpt.iter().zip(&models).enumerate() {
                let mut reports = Vec::new();
                for s in 0..seeds as u64 {
                    let cfg = GradNormConfig {
                        batches: ctx.cfg.analysis.batches,
                        batch_size: ctx.cfg.analysis.batch_size,
                        points: ctx.cfg.analysis.points,
                        seed: ctx.cfg.seed + s,
                    };
                    let r = gradient_norms(model, &ds, &cfg)?;
                    write(&dir.join(format!("gradnorms_{i}_seed{s}.csv")), r.to_csv())?;
                    reports.push(r);
                }
                groups.push((format!("{i}:{}", label(name)), reports));
            }
            let cmp = compare_reports(&groups)?;
            write(&dir.join("results.csv"), cmp.to_csv())?;
            write(&dir.join("charts").join("grad_norms.svg"), cmp.to_svg())?;
            for (g, (_, reports)) in cmp.groups.iter().zip(&groups) {
                println!(
                    "group={} reports={} early_rms={:e} total_l2={:e}",
                    g.group,
                    g.n,
                    g.early_rms.iter().sum::<f64>() / g.n as f64,
                    reports.iter().map(|r| r.total_l2).sum::<f64>() / g.n as f64
                );
            }
            if let Some(r) = cmp.early_ratio {
                println!("early_ratio={r:.6}");
            }
        }
        AnalyzeCommand::Export { ckpt, data, layer, run } => {
            let ds = ctx.data(&data)?;
            let model = ctx.model(&ckpt, &ds)?;
            model.backbone_layer(&layer)?;
            let dir = ctx.run_dir(&run, "export")?;
            let path = dir.join(format!("features_{layer}.csv"));
            let rows = export_features(&model, &ds, &layer, ctx.cfg.probe.points, &path)?;
            println!("features={} rows={rows} layer={layer}", path.display());
        }
        AnalyzeCommand::Project { features, run } => {
            if !features.exists() {
                return Err(fail(3, format!("{}: no such feature file", features.display())));
            }
            let (labels, rows) = read_features(&features)?;
            let proj = pca_project_2d(&rows)?;
            let dir = ctx.run_dir(&run, "project")?;
            let mut csv = String::from("label,pc1,pc2\n");
            for (l, c) in labels.iter().zip(&proj.coords) {
                csv.push_str(&format!("{l},{:.6e},{:.6e}\n", c[0], c[1]));
            }
            write(&dir.join("results.csv"), csv)?;
            let pts: Vec<(f64, f64, usize)> = labels.iter().zip(&proj.coords).map(|(&l, c)| (c[0], c[1], l)).collect();
            write(&dir.join("charts").join("projection.svg"), charts::scatter("principal components", &pts))?;
            let total: f64 = proj.eigenvalues.iter().sum();
            let share = |i: usize| if total > 0.0 { proj.eigenvalues[i] / total } else { 0.0 };
            println!(
                "projection={} rows={} explained1={:.6} explained2={:.6} zero_variance={}",
                dir.join("results.csv").display(),
                labels.len(),
                share(0),
                share(1),
                proj.zero_variance
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
