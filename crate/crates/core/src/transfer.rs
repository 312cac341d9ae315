//! Pre-training (supervised, point-contrastive, shape-contrastive, each
//! optionally with normal regularization) and the downstream protocols:
//! linear probing, per-layer probing and fine-tuning.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{hex_digest, Dataset, Sample, Split};
use crate::geometry::{make_augmented_pair, pca_normals, sample_augmentation_with, GeometryError, PointCloud};
use crate::models::{Model, ModelError, PointBatch};
use crate::objectives::{
    cross_entropy, normal_regul_loss, point_info_nce, shape_info_nce, total_loss, ObjectiveError,
    DEFAULT_TEMPERATURE,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seed::{derive_seed, rng};
use crate::tensor::{Param, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: non-finite loss or gradient at step {step} (last finite loss {last_finite:?})")]
    NonFinite {
        context: &'static str,
        step: usize,
        last_finite: Option<f64>,
    },
    #[error("non-finite feature for {0}")]
    NonFiniteFeature(String),
    #[error("test-split sample {0} reached a training batch")]
    Hygiene(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_POINTS: u64 = 0x5054;
const TAG_PAIR: u64 = 0x5041;
const TAG_CAP: u64 = 0x4341;
const TAG_EVAL: u64 = 0x4556;
const TAG_HEAD: u64 = 0x4844;
const TAG_AUG: u64 = 0x4147;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Supervised,
    PointContrastive,
    ShapeContrastive,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Supervised => "supervised",
            Objective::PointContrastive => "point-contrastive",
            Objective::ShapeContrastive => "shape-contrastive",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "supervised" => Ok(Objective::Supervised),
            "point-contrastive" | "contrastive" => Ok(Objective::PointContrastive),
            "shape-contrastive" => Ok(Objective::ShapeContrastive),
            _ => Err(format!(
                "unknown objective {s:?} (expected supervised, point-contrastive or shape-contrastive)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    /// Depth indices of the regularized backbone blocks.
    pub layers: Vec<usize>,
    pub lambda: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            layers: vec![0, 1],
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub regularize: Option<Regularization>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau: f64,
    /// Matched pairs kept per shape and step.
    pub pair_cap: usize,
    /// Points per cloud fed to the network (random subset each step).
    pub points: usize,
    pub crop_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Supervised,
            regularize: None,
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 60,
            seed: 0,
            tau: DEFAULT_TEMPERATURE,
            pair_cap: 256,
            points: 256,
            crop_fraction: 0.5,
        }
    }
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    hex_digest(&serde_json::to_vec(config).expect("config serializes"))[..16].to_string()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate().map_err(TrainError::Config)?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.pair_cap == 0 {
            return bad("pair_cap must be positive");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must be in (0, 1]");
        }
        if let Some(r) = &self.regularize {
            if r.layers.is_empty() || !(r.lambda >= 0.0) {
                return bad("regularization needs at least one layer and lambda >= 0");
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: Option<f64>,
}

pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_acc\n");
    for e in curve {
        let acc = e.train_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.8},{}\n", e.epoch, e.loss, acc));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model<f32>,
    pub curve: Vec<EpochStats>,
    /// Source ids of every cloud used in a gradient step.
    pub trained_on: BTreeSet<String>,
}

/// Random subset of `n` points, in ascending source order.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.len() < n {
        return Err(TrainError::Config(format!(
            "cloud {} has {} points, {n} requested",
            cloud.source_id,
            cloud.len()
        )));
    }
    if cloud.len() == n {
        return Ok(cloud.clone());
    }
    let mut idx = index::sample(&mut rng(seed), cloud.len(), n).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}

/// The fixed point subset used whenever a cloud is evaluated.
pub fn eval_view(sample: &Sample, n: usize) -> Result<PointCloud> {
    subsample(&sample.cloud, n, derive_seed(&[sample.seed, TAG_EVAL]))
}

/// Replaces every cloud's normals by PCA estimates from `k` neighbours.
pub fn estimate_normals(data: &mut Dataset, k: usize) -> Result<()> {
    for s in &mut data.samples {
        s.cloud.normals = Some(pca_normals(&s.cloud.points, k)?.normals);
    }
    Ok(())
}

fn check_train(batch: &[&Sample], seen: &mut BTreeSet<String>) -> Result<()> {
    for s in batch {
        if s.split != Split::Train {
            return Err(TrainError::Hygiene(s.cloud.source_id.clone()));
        }
        seen.insert(s.cloud.source_id.clone());
    }
    Ok(())
}

fn normals_tensor(clouds: &[&PointCloud]) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    for c in clouds {
        let n = c.normals.as_ref().ok_or_else(|| {
            TrainError::Config(format!("cloud {} has no normals to regularize against", c.source_id))
        })?;
        data.extend(n.iter().flatten().map(|&v| v as f32));
    }
    let rows = data.len() / 3;
    Ok(Tensor::new(vec![rows, 3], data)?)
}

fn regul_terms(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    bound: &crate::models::Bound,
    out: &crate::models::BackboneOut,
    layers: &[usize],
    gt: &Tensor<f32>,
) -> Result<Vec<Var>> {
    let gt = tape.constant(gt.clone());
    let mut terms = Vec::with_capacity(layers.len());
    for &l in layers {
        let pred = model.predict_normals(tape, bound, out, l)?;
        terms.push(normal_regul_loss(tape, pred, gt)?);
    }
    Ok(terms)
}

fn grads_finite(model: &Model<f32>) -> bool {
    model.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn layer_used(objective: Objective, reg: Option<&Regularization>, name: &str) -> bool {
    if name.starts_with("layer") {
        return true;
    }
    if let Some(l) = name.strip_prefix("normal.layer") {
        return reg.is_some_and(|r| r.layers.iter().any(|d| d.to_string() == l));
    }
    match objective {
        Objective::Supervised => name.starts_with("cls."),
        Objective::PointContrastive => name.starts_with("decoder."),
        Objective::ShapeContrastive => false,
    }
}

/// Pre-trains `model` on the train split of `data`.
pub fn pretrain(mut model: Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let reg = cfg.regularize.as_ref();
    if let Some(r) = reg {
        for &l in &r.layers {
            if !model.arch.normal_layers.contains(&l) {
                return Err(TrainError::Config(format!("layer{l} has no normal-prediction head")));
            }
        }
    }
    if cfg.objective == Objective::Supervised && model.arch.num_classes != data.num_classes() {
        model.reset_classifier(data.num_classes(), derive_seed(&[cfg.seed, TAG_HEAD]));
    }
    let lr_scale: Vec<f64> = (0..model.params.len())
        .map(|p| f64::from(u8::from(layer_used(cfg.objective, reg, model.layer_of(p)))))
        .collect();
    let trainable: BTreeSet<String> = model
        .layers
        .iter()
        .filter(|l| layer_used(cfg.objective, reg, &l.name))
        .map(|l| l.name.clone())
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.params);
    let train = data.train();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut seen = BTreeSet::new();
    let mut last_finite = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng(derive_seed(&[cfg.seed, epoch as u64, TAG_SHUFFLE])));
        let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            check_train(&batch, &mut seen)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |n| trainable.contains(n));
            let views: Vec<PointCloud> = batch
                .iter()
                .map(|s| subsample(&s.cloud, cfg.points, derive_seed(&[cfg.seed, epoch as u64, s.seed, TAG_POINTS])))
                .collect::<Result<_>>()?;
            let loss = match cfg.objective {
                Objective::Supervised => {
                    let refs: Vec<&PointCloud> = views.iter().collect();
                    let out = model.backbone(&mut tape, &bound, &PointBatch::from_clouds(&refs)?)?;
                    let logits = model.classify(&mut tape, &bound, out.global)?;
                    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
                    let ce = cross_entropy(&mut tape, logits, &labels)?;
                    let c = tape.shape(logits)[1];
                    correct += tape
                        .value(logits)
                        .data()
                        .chunks_exact(c)
                        .zip(&labels)
                        .filter(|(row, &y)| argmax(row) == y)
                        .count();
                    let terms = match reg {
                        Some(r) => regul_terms(&model, &mut tape, &bound, &out, &r.layers, &normals_tensor(&refs)?)?,
                        None => Vec::new(),
                    };
                    total_loss(&mut tape, ce, &terms, reg.map_or(0.0, |r| r.lambda))?
                }
                Objective::PointContrastive | Objective::ShapeContrastive => {
                    contrastive_loss(&model, &mut tape, &bound, &batch, &views, cfg, epoch)?
                }
            };
            let value = tape.item(loss) as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    context: "pretrain",
                    step,
                    last_finite,
                });
            }
            tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&tape);
            if !grads_finite(&model) {
                return Err(TrainError::NonFinite {
                    context: "pretrain",
                    step,
                    last_finite,
                });
            }
            last_finite = Some(value);
            opt.step(&mut model.params, &lr_scale);
            loss_sum += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        curve.push(EpochStats {
            epoch,
            loss: loss_sum / count as f64,
            train_acc: (cfg.objective == Objective::Supervised).then(|| correct as f64 / count as f64),
        });
    }
    model.provenance.pretraining = cfg.objective.name().to_string();
    model.provenance.regularized_layers = reg
        .map(|r| r.layers.iter().map(|l| format!("layer{l}")).collect())
        .unwrap_or_default();
    model.provenance.lambda = reg.map_or(0.0, |r| r.lambda);
    model.provenance.seed = cfg.seed;
    model.provenance.config_hash = cfg.hash();
    model.provenance.dataset = data.id();
    Ok(Pretrained {
        model,
        curve,
        trained_on: seen,
    })
}

fn contrastive_loss(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    bound: &crate::models::Bound,
    batch: &[&Sample],
    views: &[PointCloud],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Var> {
    let pairs = batch
        .iter()
        .zip(views)
        .map(|(s, c)| make_augmented_pair(c, derive_seed(&[cfg.seed, epoch as u64, s.seed, TAG_PAIR]), cfg.crop_fraction))
        .collect::<Result<Vec<_>, _>>()?;
    let va: Vec<&PointCloud> = pairs.iter().map(|p| &p.view_a).collect();
    let vb: Vec<&PointCloud> = pairs.iter().map(|p| &p.view_b).collect();
    let out_a = model.backbone(tape, bound, &PointBatch::from_clouds(&va)?)?;
    let out_b = model.backbone(tape, bound, &PointBatch::from_clouds(&vb)?)?;
    let main = match cfg.objective {
        Objective::PointContrastive => {
            let ea = model.decode_points(tape, bound, &out_a)?;
            let eb = model.decode_points(tape, bound, &out_b)?;
            let n = out_a.points;
            let mut per_shape = Vec::with_capacity(pairs.len());
            for (s, (pair, sample)) in pairs.iter().zip(batch).enumerate() {
                let m = &pair.matches;
                let keep: Vec<usize> = if m.len() > cfg.pair_cap {
                    let seed = derive_seed(&[cfg.seed, epoch as u64, sample.seed, TAG_CAP]);
                    let mut idx = index::sample(&mut rng(seed), m.len(), cfg.pair_cap).into_vec();
                    idx.sort_unstable();
                    idx
                } else {
                    (0..m.len()).collect()
                };
                let ia: Vec<usize> = keep.iter().map(|&t| s * n + m[t].0).collect();
                let ib: Vec<usize> = keep.iter().map(|&t| s * n + m[t].1).collect();
                let anchors = tape.gather_rows(ea, &ia)?;
                let keys = tape.gather_rows(eb, &ib)?;
                per_shape.push(point_info_nce(tape, anchors, keys, cfg.tau)?);
            }
            let stacked = tape.concat(&per_shape, 0)?;
            tape.mean_all(stacked)
        }
        _ => {
            let ga = tape.normalize_rows(out_a.global)?;
            let gb = tape.normalize_rows(out_b.global)?;
            shape_info_nce(tape, ga, gb, cfg.tau)?
        }
    };
    let Some(reg) = cfg.regularize.as_ref() else {
        return Ok(main);
    };
    let ta = regul_terms(model, tape, bound, &out_a, &reg.layers, &normals_tensor(&va)?)?;
    let tb = regul_terms(model, tape, bound, &out_b, &reg.layers, &normals_tensor(&vb)?)?;
    let mut terms = Vec::with_capacity(ta.len());
    for (a, b) in ta.into_iter().zip(tb) {
        let s = tape.add(a, b)?;
        terms.push(tape.mul_scalar(s, 0.5));
    }
    Ok(total_loss(tape, main, &terms, reg.lambda)?)
}

// ---- probing ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Logistic,
    LinearSvm,
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logistic" => Ok(ClassifierKind::Logistic),
            "linear-svm" | "svm" => Ok(ClassifierKind::LinearSvm),
            _ => Err(format!("unknown classifier {s:?} (expected logistic or linear-svm)")),
        }
    }
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::LinearSvm => "linear-svm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub classifier: ClassifierKind,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub points: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Logistic,
            steps: 500,
            lr: 1e-2,
            weight_decay: 1e-4,
            points: 256,
            seed: 0,
        }
    }
}

/// Standardized-feature multinomial linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[d, classes]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes();
        let mut s = self.bias.clone();
        for (i, &v) in x.iter().enumerate() {
            let z = (v - self.mean[i]) / self.scale[i];
            for (j, sj) in s.iter_mut().enumerate() {
                *sj += z * self.weight[i * c + j];
            }
        }
        s
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for j in 1..s.len() {
            if s[j] > s[best] {
                best = j;
            }
        }
        best
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        accuracy_of(xs.iter().map(|x| self.predict(x)), ys)
    }
}

fn accuracy_of(pred: impl Iterator<Item = usize>, ys: &[usize]) -> f64 {
    let hits = pred.zip(ys).filter(|(p, y)| p == *y).count();
    hits as f64 / ys.len().max(1) as f64
}

fn per_class_accuracy(pred: &[usize], ys: &[usize], classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
            if idx.is_empty() {
                return 0.0;
            }
            idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64
        })
        .collect()
}

/// Fits a linear classifier on standardized features with full-batch Adam.
pub fn fit_linear(xs: &[Vec<f64>], ys: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearClassifier> {
    let n = xs.len();
    if n == 0 || classes == 0 {
        return Err(TrainError::Config("probe needs at least one sample and one class".into()));
    }
    let d = xs[0].len();
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<f64> = xs
        .iter()
        .flat_map(|x| x.iter().enumerate().map(|(i, v)| (v - mean[i]) / scale[i]).collect::<Vec<_>>())
        .collect();
    let z = Tensor::new(vec![n, d], z)?;
    let mut params = vec![
        Param::new("probe.weight", Tensor::<f64>::zeros(&[d, classes])),
        Param::new("probe.bias", Tensor::<f64>::zeros(&[classes])),
    ];
    let signs = match cfg.classifier {
        ClassifierKind::Logistic => None,
        ClassifierKind::LinearSvm => {
            let s: Vec<f64> = ys
                .iter()
                .flat_map(|&y| (0..classes).map(move |c| if c == y { 1.0 } else { -1.0 }))
                .collect();
            Some(Tensor::new(vec![n, classes], s)?)
        }
    };
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr, cfg.weight_decay), &params);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(z.clone());
        let w = tape.param(0, &params[0].value, true);
        let b = tape.param(1, &params[1].value, true);
        let s = tape.matmul(x, w)?;
        let s = tape.add_bias(s, b)?;
        let loss = match &signs {
            None => cross_entropy(&mut tape, s, ys)?,
            Some(y) => {
                // one-vs-rest hinge: mean of max(0, 1 - y_c * s_c)
                let y = tape.constant(y.clone());
                let m = tape.mul(s, y)?;
                let m = tape.neg(m);
                let m = tape.add_scalar(m, 1.0);
                let m = tape.relu(m);
                tape.mean_all(m)
            }
        };
        if !tape.item(loss).is_finite() {
            return Err(TrainError::NonFinite {
                context: "linear classifier",
                step,
                last_finite: None,
            });
        }
        tape.backward(loss)?;
        for p in &mut params {
            p.zero_grad();
        }
        for (id, g) in tape.param_grads() {
            params[id].grad.copy_from_slice(g);
        }
        opt.step(&mut params, &[1.0, 1.0]);
    }
    Ok(LinearClassifier {
        mean,
        scale,
        weight: params[0].value.data().to_vec(),
        bias: params[1].value.data().to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    LinearProbe,
    FineTune,
    LayerProbe,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::LinearProbe => "linear-probe",
            Protocol::FineTune => "fine-tune",
            Protocol::LayerProbe => "layer-probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub protocol: Protocol,
    pub layer: String,
    pub objective: String,
    pub regularized: bool,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub per_class: Vec<f64>,
    pub config_hash: String,
}

impl ProbeResult {
    pub const CSV_HEADER: &'static str = "protocol,layer,objective,regularized,seed,train_acc,test_acc,config_hash";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.protocol.name(),
            self.layer,
            self.objective,
            self.regularized,
            self.seed,
            self.train_acc,
            self.test_acc,
            self.config_hash
        )
    }

    pub fn summary_line(&self) -> String {
        format!(
            "protocol={} layer={} objective={} regularized={} seed={} train_acc={:.6} test_acc={:.6}",
            self.protocol.name(),
            self.layer,
            self.objective,
            self.regularized,
            self.seed,
            self.train_acc,
            self.test_acc
        )
    }
}

pub fn results_csv(results: &[ProbeResult]) -> String {
    let mut out = format!("{}\n", ProbeResult::CSV_HEADER);
    for r in results {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Max-pooled features of block `depth` for each sample's evaluation view.
pub fn extract_features(model: &Model<f32>, samples: &[&Sample], depth: usize, points: usize) -> Result<Vec<Vec<f32>>> {
    let views = samples.iter().map(|s| eval_view(s, points)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PointCloud> = views.iter().collect();
    let feats = model.pooled_features(&refs, depth, 16)?;
    for (f, s) in feats.iter().zip(samples) {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteFeature(s.cloud.source_id.clone()));
        }
    }
    Ok(feats)
}

pub fn widen(features: &[Vec<f32>]) -> Vec<Vec<f64>> {
    features.iter().map(|f| f.iter().map(|&v| f64::from(v)).collect()).collect()
}

/// A fitted probe plus the evaluation it produced.
#[derive(Clone, Debug)]
pub struct Probe {
    pub result: ProbeResult,
    pub classifier: LinearClassifier,
}

fn probe_at(model: &Model<f32>, data: &Dataset, depth: usize, protocol: Protocol, cfg: &ProbeConfig) -> Result<Probe> {
    let train = data.train();
    let test = data.test();
    let xtr = widen(&extract_features(model, &train, depth, cfg.points)?);
    let xte = widen(&extract_features(model, &test, depth, cfg.points)?);
    let ytr: Vec<usize> = train.iter().map(|s| s.label).collect();
    let yte: Vec<usize> = test.iter().map(|s| s.label).collect();
    let classes = data.num_classes();
    let clf = fit_linear(&xtr, &ytr, classes, cfg)?;
    let pred: Vec<usize> = xte.iter().map(|x| clf.predict(x)).collect();
    let result = ProbeResult {
        protocol,
        layer: format!("layer{depth}"),
        objective: model.provenance.pretraining.clone(),
        regularized: !model.provenance.regularized_layers.is_empty(),
        seed: cfg.seed,
        train_acc: clf.accuracy(&xtr, &ytr),
        test_acc: accuracy_of(pred.iter().copied(), &yte),
        per_class: per_class_accuracy(&pred, &yte, classes),
        config_hash: config_hash(&(cfg, &model.provenance.config_hash, data.id())),
    };
    Ok(Probe { result, classifier: clf })
}

/// Linear classifier on the frozen global feature.
pub fn linear_probe(model: &Model<f32>, data: &Dataset, cfg: &ProbeConfig) -> Result<Probe> {
    probe_at(model, data, model.arch.widths.len() - 1, Protocol::LinearProbe, cfg)
}

/// Linear classifier on the max-pooled features of one backbone block.
pub fn layer_probe(model: &Model<f32>, data: &Dataset, layer_name: &str, cfg: &ProbeConfig) -> Result<Probe> {
    let depth = model.backbone_layer(layer_name)?;
    probe_at(model, data, depth, Protocol::LayerProbe, cfg)
}

// ---- fine-tuning ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Learning rate of the classifier head.
    pub optimizer: OptimizerConfig,
    /// Backbone learning rate relative to the head's.
    pub backbone_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub points: usize,
    pub max_rotation_deg: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(1e-3, 1e-4),
            backbone_lr_scale: 0.1,
            batch_size: 16,
            epochs: 40,
            seed: 0,
            points: 256,
            max_rotation_deg: 15.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 || !(self.backbone_lr_scale >= 0.0) || !(self.max_rotation_deg >= 0.0) {
            return Err(TrainError::Config(format!("invalid fine-tune settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub result: ProbeResult,
    pub model: Model<f32>,
    pub curve: Vec<EpochStats>,
    pub trained_on: BTreeSet<String>,
}

/// Rotation-only augmentation of at most `max_deg` degrees.
fn rotate(cloud: &PointCloud, seed: u64, max_deg: f64) -> PointCloud {
    let mut aug = sample_augmentation_with(seed, max_deg);
    aug.scale = 1.0;
    aug.translation = [0.0; 3];
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = aug.apply_point(*p);
    }
    if let Some(ns) = &mut out.normals {
        for n in ns {
            *n = crate::geometry::mat_vec(&aug.rotation, *n);
        }
    }
    out
}

/// Predicted labels for each sample's evaluation view.
pub fn predict(model: &Model<f32>, samples: &[&Sample], points: usize) -> Result<Vec<usize>> {
    let depth = model.arch.widths.len() - 1;
    let feats = extract_features(model, samples, depth, points)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in feats.chunks(64) {
        let d = chunk[0].len();
        let flat: Vec<f32> = chunk.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::new(vec![chunk.len(), d], flat)?);
        let logits = model.classify(&mut tape, &bound, x)?;
        let c = tape.shape(logits)[1];
        out.extend(tape.value(logits).data().chunks_exact(c).map(argmax));
    }
    Ok(out)
}

/// Attaches a fresh classifier and trains every weight on the target train
/// split; the backbone uses a scaled-down learning rate.
pub fn finetune(mut model: Model<f32>, data: &Dataset, cfg: &FinetuneConfig) -> Result<Finetuned> {
    cfg.validate()?;
    model.reset_classifier(data.num_classes(), derive_seed(&[cfg.seed, TAG_HEAD]));
    let lr_scale: Vec<f64> = (0..model.params.len())
        .map(|p| {
            let l = model.layer_of(p);
            if l.starts_with("layer") {
                cfg.backbone_lr_scale
            } else if l.starts_with("cls.") {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.params);
    let train = data.train();
    let mut seen = BTreeSet::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_finite = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng(derive_seed(&[cfg.seed, epoch as u64, TAG_SHUFFLE])));
        let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            check_train(&batch, &mut seen)?;
            let views = batch
                .iter()
                .map(|s| {
                    let c = subsample(&s.cloud, cfg.points, derive_seed(&[cfg.seed, epoch as u64, s.seed, TAG_POINTS]))?;
                    Ok(rotate(&c, derive_seed(&[cfg.seed, epoch as u64, s.seed, TAG_AUG]), cfg.max_rotation_deg))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PointCloud> = views.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |n| n.starts_with("layer") || n.starts_with("cls."));
            let out = model.backbone(&mut tape, &bound, &PointBatch::from_clouds(&refs)?)?;
            let logits = model.classify(&mut tape, &bound, out.global)?;
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            let value = tape.item(loss) as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    context: "finetune",
                    step,
                    last_finite,
                });
            }
            let c = tape.shape(logits)[1];
            correct += tape
                .value(logits)
                .data()
                .chunks_exact(c)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&tape);
            if !grads_finite(&model) {
                return Err(TrainError::NonFinite {
                    context: "finetune",
                    step,
                    last_finite,
                });
            }
            last_finite = Some(value);
            opt.step(&mut model.params, &lr_scale);
            loss_sum += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        curve.push(EpochStats {
            epoch,
            loss: loss_sum / count as f64,
            train_acc: Some(correct as f64 / count as f64),
        });
    }
    let test = data.test();
    let ytr: Vec<usize> = train.iter().map(|s| s.label).collect();
    let yte: Vec<usize> = test.iter().map(|s| s.label).collect();
    let ptr = predict(&model, &train, cfg.points)?;
    let pte = predict(&model, &test, cfg.points)?;
    let result = ProbeResult {
        protocol: Protocol::FineTune,
        layer: format!("layer{}", model.arch.widths.len() - 1),
        objective: model.provenance.pretraining.clone(),
        regularized: !model.provenance.regularized_layers.is_empty(),
        seed: cfg.seed,
        train_acc: accuracy_of(ptr.iter().copied(), &ytr),
        test_acc: accuracy_of(pte.iter().copied(), &yte),
        per_class: per_class_accuracy(&pte, &yte, data.num_classes()),
        config_hash: config_hash(&(cfg, &model.provenance.config_hash, data.id())),
    };
    model.provenance.pretraining = format!("finetuned:{}", model.provenance.pretraining);
    model.provenance.dataset = data.id();
    Ok(Finetuned {
        result,
        model,
        curve,
        trained_on: seen,
    })
}

/// Fine-tuning from a freshly initialized model.
pub fn train_from_scratch(
    arch: &crate::models::Architecture,
    model_seed: u64,
    data: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<Finetuned> {
    finetune(Model::new(arch.clone(), model_seed), data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_features_probe_perfectly() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = std::f64::consts::FRAC_PI_2 * (i % 4) as f64;
                let r = 3.0 + 0.01 * i as f64;
                vec![r * t.cos(), r * t.sin()]
            })
            .collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 4).collect();
        for classifier in [ClassifierKind::Logistic, ClassifierKind::LinearSvm] {
            let cfg = ProbeConfig {
                classifier,
                ..ProbeConfig::default()
            };
            let clf = fit_linear(&xs, &ys, 4, &cfg).unwrap();
            assert_eq!(clf.accuracy(&xs, &ys), 1.0, "{classifier:?}");
        }
    }

    #[test]
    fn constant_features_give_chance() {
        let xs = vec![vec![0.5, 0.5]; 40];
        let ys: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let clf = fit_linear(&xs, &ys, 4, &ProbeConfig::default()).unwrap();
        assert!((clf.accuracy(&xs, &ys) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::Supervised, Objective::PointContrastive, Objective::ShapeContrastive] {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
    }
}
