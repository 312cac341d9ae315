//! Seed-swept experiment matrix: pre-training variants crossed with
//! probing and fine-tuning on both target domains, plus the trend checks
//! computed from it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analysis::{compare_reports, gradient_norms, mean_std, GradNormConfig, GradientNormReport};
use crate::datasets::{Dataset, DatasetError, DomainSpec, SplitFractions};
use crate::models::{Architecture, BackboneKind, Model};
use crate::transfer::{
    estimate_normals, finetune, layer_probe, linear_probe, pretrain, EpochStats, FinetuneConfig, Objective,
    ProbeConfig, ProbeResult, Protocol, Regularization, TrainConfig, TrainError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Random,
    Supervised,
    SupervisedReg,
    Contrastive,
    ContrastiveReg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Random,
        Variant::Supervised,
        Variant::SupervisedReg,
        Variant::Contrastive,
        Variant::ContrastiveReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::Supervised => "supervised",
            Variant::SupervisedReg => "supervised+reg",
            Variant::Contrastive => "point-contrastive",
            Variant::ContrastiveReg => "point-contrastive+reg",
        }
    }

    pub fn objective(self) -> Option<Objective> {
        match self {
            Variant::Random => None,
            Variant::Supervised | Variant::SupervisedReg => Some(Objective::Supervised),
            Variant::Contrastive | Variant::ContrastiveReg => Some(Objective::PointContrastive),
        }
    }

    pub fn regularized(self) -> bool {
        matches!(self, Variant::SupervisedReg | Variant::ContrastiveReg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub backbone: BackboneKind,
    pub seeds: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// SOURCE uses this seed, TARGET-NEAR and TARGET-FAR the next two.
    pub data_seed: u64,
    pub normal_k: usize,
    pub points: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub regularization: Regularization,
    pub probe_layer: String,
    pub grad_batches: usize,
    /// Worker threads; independent cells run concurrently.
    pub jobs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::GlobalPointnet,
            seeds: 5,
            source_per_class: 40,
            target_per_class: 40,
            data_seed: 1,
            normal_k: 30,
            points: 128,
            pretrain_epochs: 45,
            finetune_epochs: 30,
            regularization: Regularization::default(),
            probe_layer: "layer0".into(),
            grad_batches: 8,
            jobs: 1,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.seeds == 0 || self.jobs == 0 {
            return Err("seeds and jobs must be positive".into());
        }
        if self.points < DomainSpec::MIN_POINTS || self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            return Err("points must be at least 64 and epoch counts positive".into());
        }
        Ok(())
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> Option<TrainConfig> {
        Some(TrainConfig {
            objective: variant.objective()?,
            regularize: variant.regularized().then(|| self.regularization.clone()),
            epochs: self.pretrain_epochs,
            seed,
            points: self.points,
            ..TrainConfig::default()
        })
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            points: self.points,
            seed,
            ..ProbeConfig::default()
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            seed,
            points: self.points,
            ..FinetuneConfig::default()
        }
    }

    pub fn grad_config(&self, seed: u64) -> GradNormConfig {
        GradNormConfig {
            batches: self.grad_batches,
            points: self.points,
            seed,
            ..GradNormConfig::default()
        }
    }
}

pub struct Domains {
    pub source: Dataset,
    pub near: Dataset,
    pub far: Dataset,
}

impl Domains {
    /// Generates the three stock domains in memory, with estimated normals
    /// on the source.
    pub fn generate(cfg: &SuiteConfig) -> Result<Self, TrainError> {
        let split = SplitFractions::default();
        let gen = |spec: DomainSpec| Dataset::generate(&spec, split).map_err(|e: DatasetError| TrainError::Config(e.to_string()));
        let mut source = gen(DomainSpec::source(cfg.source_per_class, cfg.data_seed))?;
        estimate_normals(&mut source, cfg.normal_k)?;
        Ok(Self {
            source,
            near: gen(DomainSpec::target_near(cfg.target_per_class, cfg.data_seed + 1))?,
            far: gen(DomainSpec::target_far(cfg.target_per_class, cfg.data_seed + 2))?,
        })
    }
}

pub const NEAR: &str = "TARGET-NEAR";
pub const FAR: &str = "TARGET-FAR";

#[derive(Clone, Debug)]
pub struct CellRow {
    pub domain: &'static str,
    pub result: ProbeResult,
}

/// Everything one (variant, seed) cell produced. Sub-run failures are
/// recorded and the remaining sub-runs still execute.
#[derive(Clone, Debug)]
pub struct Cell {
    pub variant: Variant,
    pub seed: u64,
    pub rows: Vec<CellRow>,
    pub grad: Option<GradientNormReport>,
    pub curve: Vec<EpochStats>,
    pub failures: Vec<String>,
    /// Wall-clock seconds per sub-run, keyed by sub-run name.
    pub timings: Vec<(String, f64)>,
}

impl Cell {
    pub fn find(&self, protocol: Protocol, domain: &str) -> Option<&ProbeResult> {
        self.rows
            .iter()
            .find(|r| r.result.protocol == protocol && r.domain == domain)
            .map(|r| &r.result)
    }

    fn timed<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, String>) -> Option<T> {
        let t = Instant::now();
        let out = f();
        self.timings.push((name.to_string(), t.elapsed().as_secs_f64()));
        out.map_err(|e| self.failures.push(format!("{name}: {e}"))).ok()
    }
}

pub fn run_cell(cfg: &SuiteConfig, data: &Domains, variant: Variant, seed: u64) -> Cell {
    let mut cell = Cell {
        variant,
        seed,
        rows: Vec::new(),
        grad: None,
        curve: Vec::new(),
        failures: Vec::new(),
        timings: Vec::new(),
    };
    let arch = Architecture::new(cfg.backbone, data.source.num_classes());
    let init = Model::new(arch, seed);
    let model = match cfg.train_config(variant, seed) {
        None => Some(init),
        Some(tc) => cell
            .timed("pretrain", || pretrain(init, &data.source, &tc).map_err(|e| e.to_string()))
            .map(|p| {
                cell.curve = p.curve;
                p.model
            }),
    };
    let Some(model) = model else { return cell };
    let pc = cfg.probe_config(seed);
    let fc = cfg.finetune_config(seed);
    for (domain, ds) in [(NEAR, &data.near), (FAR, &data.far)] {
        if let Some(p) = cell.timed(&format!("probe {domain}"), || linear_probe(&model, ds, &pc).map_err(|e| e.to_string())) {
            cell.rows.push(CellRow { domain, result: p.result });
        }
    }
    if let Some(p) = cell.timed("layer-probe", || {
        layer_probe(&model, &data.near, &cfg.probe_layer, &pc).map_err(|e| e.to_string())
    }) {
        cell.rows.push(CellRow {
            domain: NEAR,
            result: p.result,
        });
    }
    for (domain, ds) in [(NEAR, &data.near), (FAR, &data.far)] {
        if let Some(f) = cell.timed(&format!("finetune {domain}"), || {
            finetune(model.clone(), ds, &fc).map_err(|e| e.to_string())
        }) {
            cell.rows.push(CellRow { domain, result: f.result });
        }
    }
    cell.grad = cell.timed("grad-norms", || {
        gradient_norms(&model, &data.far, &cfg.grad_config(seed)).map_err(|e| e.to_string())
    });
    cell
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Hard,
    Soft,
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub criterion: &'static str,
    pub gate: Gate,
    pub statistic: &'static str,
    pub value: Option<f64>,
    /// 95% t-interval of the per-seed statistic.
    pub ci: Option<(f64, f64)>,
    pub threshold: f64,
    pub n: usize,
    /// `None` when no seed produced the inputs.
    pub passed: Option<bool>,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INCOMPLETE",
        }
    }
}

/// Two-sided 95% Student-t interval for the mean of `xs`.
pub fn t_interval(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let (m, s) = mean_std(xs);
    let t = StudentsT::new(0.0, 1.0, (xs.len() - 1) as f64).ok()?.inverse_cdf(0.975);
    let half = t * s / (xs.len() as f64).sqrt();
    Some((m - half, m + half))
}

pub struct SuiteReport {
    pub config: SuiteConfig,
    pub cells: Vec<Cell>,
    pub near_classes: usize,
}

pub fn run_suite(cfg: &SuiteConfig, data: &Domains) -> SuiteReport {
    let jobs: Vec<(Variant, u64)> = (0..cfg.seeds as u64)
        .flat_map(|s| Variant::ALL.into_iter().map(move |v| (v, s)))
        .collect();
    let run = || jobs.par_iter().map(|&(v, s)| run_cell(cfg, data, v, s)).collect();
    let cells = match rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    SuiteReport {
        config: cfg.clone(),
        cells,
        near_classes: data.near.num_classes(),
    }
}

impl SuiteReport {
    fn cell(&self, v: Variant, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.variant == v && c.seed == seed)
    }

    fn acc(&self, v: Variant, seed: u64, protocol: Protocol, domain: &str) -> Option<f64> {
        self.cell(v, seed)?.find(protocol, domain).map(|r| r.test_acc)
    }

    fn early(&self, v: Variant, seed: u64) -> Option<f64> {
        self.cell(v, seed)?.grad.as_ref().map(GradientNormReport::early_rms)
    }

    /// Per-seed pairs `(a, b)` where both sides exist.
    fn paired(&self, f: impl Fn(u64) -> (Option<f64>, Option<f64>)) -> Vec<(f64, f64)> {
        (0..self.config.seeds as u64)
            .filter_map(|s| match f(s) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            })
            .collect()
    }

    fn difference(&self, criterion: &'static str, gate: Gate, statistic: &'static str, pairs: &[(f64, f64)], threshold: f64) -> Verdict {
        let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
        let value = (!d.is_empty()).then(|| mean_std(&d).0);
        Verdict {
            criterion,
            gate,
            statistic,
            value,
            ci: t_interval(&d),
            threshold,
            n: d.len(),
            passed: value.map(|v| v >= threshold),
        }
    }

    fn ratio(&self, criterion: &'static str, statistic: &'static str, pairs: &[(f64, f64)], threshold: f64, below: bool) -> Verdict {
        let r: Vec<f64> = pairs.iter().map(|(a, b)| a / b).collect();
        let value = (!pairs.is_empty()).then(|| {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            mean_std(&a).0 / mean_std(&b).0
        });
        Verdict {
            criterion,
            gate: Gate::Soft,
            statistic,
            value,
            ci: t_interval(&r),
            threshold,
            n: pairs.len(),
            passed: value.map(|v| if below { v < threshold } else { v >= threshold }),
        }
    }

    fn level(&self, criterion: &'static str, statistic: &'static str, xs: &[f64], threshold: f64) -> Verdict {
        let value = (!xs.is_empty()).then(|| mean_std(xs).0);
        Verdict {
            criterion,
            gate: Gate::Hard,
            statistic,
            value,
            ci: t_interval(xs),
            threshold,
            n: xs.len(),
            passed: value.map(|v| v >= threshold),
        }
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        use Protocol::*;
        use Variant::*;
        let chance2 = 2.0 / self.near_classes as f64;
        let layer = |v: Variant| -> Vec<f64> {
            (0..self.config.seeds as u64)
                .filter_map(|s| self.acc(v, s, LayerProbe, NEAR))
                .collect()
        };
        vec![
            self.difference(
                "6",
                Gate::Hard,
                "linear-probe acc TARGET-NEAR supervised minus random",
                &self.paired(|s| (self.acc(Supervised, s, LinearProbe, NEAR), self.acc(Random, s, LinearProbe, NEAR))),
                0.05,
            ),
            self.level("7a", "first-layer probe acc TARGET-NEAR supervised", &layer(Supervised), chance2),
            self.level("7b", "first-layer probe acc TARGET-NEAR point-contrastive", &layer(Contrastive), chance2),
            self.ratio(
                "8",
                "early-layer grad RMS TARGET-FAR supervised over point-contrastive",
                &self.paired(|s| (self.early(Supervised, s), self.early(Contrastive, s))),
                1.0,
                true,
            ),
            self.difference(
                "9a",
                Gate::Soft,
                "fine-tune acc TARGET-FAR supervised+reg minus supervised",
                &self.paired(|s| (self.acc(SupervisedReg, s, FineTune, FAR), self.acc(Supervised, s, FineTune, FAR))),
                0.0,
            ),
            self.ratio(
                "9b",
                "early-layer grad RMS TARGET-FAR supervised+reg over supervised",
                &self.paired(|s| (self.early(SupervisedReg, s), self.early(Supervised, s))),
                1.0,
                false,
            ),
        ]
    }

    pub fn hard_failure(&self) -> bool {
        self.verdicts().iter().any(|v| v.gate == Gate::Hard && v.passed != Some(true))
    }

    pub fn failures(&self) -> Vec<String> {
        self.cells
            .iter()
            .flat_map(|c| c.failures.iter().map(move |f| format!("{} seed {}: {f}", c.variant.name(), c.seed)))
            .collect()
    }

    /// Wall-clock seconds spent on the runs behind the probing check.
    pub fn probing_seconds(&self) -> f64 {
        self.cells
            .iter()
            .filter(|c| matches!(c.variant, Variant::Random | Variant::Supervised))
            .flat_map(|c| c.timings.iter())
            .filter(|(n, _)| n == "pretrain" || n == "probe TARGET-NEAR")
            .map(|(_, t)| t)
            .sum()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("criterion,gate,statistic,value,ci_low,ci_high,threshold,n,verdict\n");
        let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for v in self.verdicts() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{},{}",
                v.criterion,
                if v.gate == Gate::Hard { "hard" } else { "soft" },
                v.statistic,
                num(v.value),
                num(v.ci.map(|c| c.0)),
                num(v.ci.map(|c| c.1)),
                v.threshold,
                v.n,
                v.label()
            );
        }
        out
    }

    /// Every probe and fine-tune result, prefixed by variant and domain.
    pub fn results_csv(&self) -> String {
        let mut out = format!("variant,domain,{}\n", ProbeResult::CSV_HEADER);
        for c in &self.cells {
            for r in &c.rows {
                let _ = writeln!(out, "{},{},{}", c.variant.name(), r.domain, r.result.csv_row());
            }
        }
        out
    }

    /// Seed-averaged test accuracy per variant, protocol and domain.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("variant,protocol,layer,domain,n,mean_test_acc,std_test_acc,ci_low,ci_high\n");
        let keys = [
            (Protocol::LinearProbe, NEAR),
            (Protocol::LinearProbe, FAR),
            (Protocol::LayerProbe, NEAR),
            (Protocol::FineTune, NEAR),
            (Protocol::FineTune, FAR),
        ];
        for v in Variant::ALL {
            for (protocol, domain) in keys {
                let rows: Vec<&ProbeResult> = (0..self.config.seeds as u64)
                    .filter_map(|s| self.cell(v, s)?.find(protocol, domain))
                    .collect();
                let Some(first) = rows.first() else { continue };
                let xs: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
                let (m, s) = mean_std(&xs);
                let ci = t_interval(&xs);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.6},{:.6},{},{}",
                    v.name(),
                    protocol.name(),
                    first.layer,
                    domain,
                    xs.len(),
                    m,
                    s,
                    ci.map_or(String::new(), |c| format!("{:.6}", c.0)),
                    ci.map_or(String::new(), |c| format!("{:.6}", c.1))
                );
            }
        }
        out
    }

    pub fn gradnorms_csv(&self) -> String {
        let mut out = String::from("variant,seed,layer,depth,param_count,grad_l2,grad_rms\n");
        for c in &self.cells {
            for l in c.grad.iter().flat_map(|g| &g.layers) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:e},{:e}",
                    c.variant.name(),
                    c.seed,
                    l.name,
                    l.depth,
                    l.param_count,
                    l.grad_l2,
                    l.grad_rms
                );
            }
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("variant,seed,epoch,loss\n");
        for c in &self.cells {
            for e in &c.curve {
                let _ = writeln!(out, "{},{},{},{:.6}", c.variant.name(), c.seed, e.epoch, e.loss);
            }
        }
        out
    }

    fn reports(&self, v: Variant) -> Vec<GradientNormReport> {
        self.cells
            .iter()
            .filter(|c| c.variant == v)
            .filter_map(|c| c.grad.clone())
            .collect()
    }

    /// Gradient-norm comparison charts as (file stem, SVG).
    pub fn charts(&self) -> Vec<(String, String)> {
        let pairs = [
            ("grad_norms_supervised_vs_contrastive", Variant::Supervised, Variant::Contrastive),
            ("grad_norms_regularization", Variant::SupervisedReg, Variant::Supervised),
        ];
        pairs
            .iter()
            .filter_map(|&(stem, a, b)| {
                let cmp = compare_reports(&[(a.name().into(), self.reports(a)), (b.name().into(), self.reports(b))]).ok()?;
                Some((stem.to_string(), cmp.to_svg()))
            })
            .collect()
    }

    /// Writes every artifact of the suite under `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir.join("charts"))?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("table.csv"), self.table_csv())?;
        fs::write(dir.join("results.csv"), self.results_csv())?;
        fs::write(dir.join("gradnorms.csv"), self.gradnorms_csv())?;
        fs::write(dir.join("curves.csv"), self.curves_csv())?;
        let mut failures = self.failures().join("\n");
        if !failures.is_empty() {
            failures.push('\n');
        }
        fs::write(dir.join("failures.txt"), failures)?;
        for (stem, svg) in self.charts() {
            fs::write(dir.join("charts").join(format!("{stem}.svg")), svg)?;
        }
        Ok(())
    }
}
