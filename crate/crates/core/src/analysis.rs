//! Layer-wise diagnostics: gradient norms of frozen models on downstream
//! data, feature export, PCA projection and report comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::datasets::{Dataset, Sample};
use crate::models::{Model, ModelError, NamedLayer, PointBatch, Provenance};
use crate::objectives::{cross_entropy, ObjectiveError};
use crate::seed::{derive_seed, rng};
use crate::tensor::{Tape, TensorError};
use crate::transfer::{eval_view, extract_features, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in layer {0}")]
    NonFiniteGradient(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("reports do not share layers: {0:?} vs {1:?}")]
    LayerMismatch(Vec<String>, Vec<String>),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Seed of the classifier head attached for gradient probing; shared by
/// every compared checkpoint so only the backbone varies.
pub const HEAD_SEED: u64 = 0x4845_4144;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerNorm {
    pub name: String,
    pub depth: usize,
    pub param_count: usize,
    pub grad_l2: f64,
    pub grad_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientNormReport {
    pub layers: Vec<LayerNorm>,
    /// Mean over batches of the L2 norm of all parameter gradients.
    pub total_l2: f64,
    pub provenance: Provenance,
    pub dataset: String,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradNormConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub points: usize,
    pub seed: u64,
}

impl Default for GradNormConfig {
    fn default() -> Self {
        Self {
            batches: 8,
            batch_size: 16,
            points: 256,
            seed: 0,
        }
    }
}

/// Per-layer L2 and RMS of per-parameter gradients, in the order of
/// `layers`.
pub fn layer_norms(layers: &[NamedLayer], grads: &[Vec<f64>]) -> Vec<LayerNorm> {
    layers
        .iter()
        .map(|l| {
            let (sq, count) = l.params.iter().fold((0.0, 0), |(s, c), &p| {
                (s + grads[p].iter().map(|g| g * g).sum::<f64>(), c + grads[p].len())
            });
            let l2 = sq.sqrt();
            LayerNorm {
                name: l.name.clone(),
                depth: l.depth,
                param_count: count,
                grad_l2: l2,
                grad_rms: l2 / (count as f64).sqrt(),
            }
        })
        .collect()
}

fn batch_order(train: &[&Sample], cfg: &GradNormConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng(derive_seed(&[cfg.seed, 0x474e])));
    let size = cfg.batch_size.min(train.len());
    (0..cfg.batches)
        .map(|b| (0..size).map(|i| order[(b * size + i) % order.len()]).collect())
        .collect()
}

/// Mean per-layer gradient norms of a cross-entropy loss through a fresh
/// classifier head, without any parameter update.
pub fn gradient_norms(model: &Model<f32>, data: &Dataset, cfg: &GradNormConfig) -> Result<GradientNormReport> {
    if cfg.batches == 0 || cfg.batch_size == 0 {
        return Err(AnalysisError::Invalid("batches and batch_size must be positive".into()));
    }
    let mut probe = model.clone();
    probe.reset_classifier(data.num_classes(), HEAD_SEED);
    let train = data.train();
    if train.is_empty() {
        return Err(AnalysisError::Invalid("dataset has no training samples".into()));
    }
    let reported: Vec<NamedLayer> = probe
        .layers
        .iter()
        .filter(|l| l.is_backbone() || l.name.starts_with("cls."))
        .cloned()
        .collect();
    let mut sums = vec![0.0; reported.len()];
    let mut total = 0.0;
    for batch in batch_order(&train, cfg) {
        let samples: Vec<&Sample> = batch.iter().map(|&i| train[i]).collect();
        let views = samples.iter().map(|s| eval_view(s, cfg.points)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = views.iter().collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut tape = Tape::new();
        let bound = probe.bind(&mut tape, |_| true);
        let out = probe.backbone(&mut tape, &bound, &PointBatch::from_clouds(&refs)?)?;
        let logits = probe.classify(&mut tape, &bound, out.global)?;
        let loss = cross_entropy(&mut tape, logits, &labels)?;
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = probe.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (id, g) in tape.param_grads() {
            for (a, &b) in grads[id].iter_mut().zip(g) {
                *a += f64::from(b);
            }
        }
        for (p, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::NonFiniteGradient(probe.layer_of(p).to_string()));
            }
        }
        for (s, l) in sums.iter_mut().zip(layer_norms(&reported, &grads)) {
            *s += l.grad_l2;
        }
        total += grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    }
    let n = cfg.batches as f64;
    let layers = reported
        .iter()
        .zip(sums)
        .map(|(l, s)| {
            let count: usize = l.params.iter().map(|&p| probe.params[p].value.len()).sum();
            LayerNorm {
                name: l.name.clone(),
                depth: l.depth,
                param_count: count,
                grad_l2: s / n,
                grad_rms: s / n / (count as f64).sqrt(),
            }
        })
        .collect();
    Ok(GradientNormReport {
        layers,
        total_l2: total / n,
        provenance: model.provenance.clone(),
        dataset: data.id(),
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    })
}

impl GradientNormReport {
    pub fn to_csv(&self) -> String {
        let p = &self.provenance;
        let mut out = String::new();
        let _ = writeln!(out, "# pretraining={}", p.pretraining);
        let _ = writeln!(out, "# regularized_layers={}", p.regularized_layers.join(" "));
        let _ = writeln!(out, "# checkpoint_seed={}", p.seed);
        let _ = writeln!(out, "# config_hash={}", p.config_hash);
        let _ = writeln!(out, "# dataset={}", self.dataset);
        let _ = writeln!(out, "# batches={} batch_size={} seed={}", self.batches, self.batch_size, self.seed);
        let _ = writeln!(out, "# total_l2={:e}", self.total_l2);
        out.push_str("layer,depth,param_count,grad_l2,grad_rms\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{},{:e},{:e}", l.name, l.depth, l.param_count, l.grad_l2, l.grad_rms);
        }
        out
    }

    /// Mean gradient RMS over the backbone blocks at depth 0 and 1.
    pub fn early_rms(&self) -> f64 {
        let early: Vec<f64> = self.layers.iter().filter(|l| l.depth < 2).map(|l| l.grad_rms).collect();
        early.iter().sum::<f64>() / early.len().max(1) as f64
    }
}

// ---- feature export ----

/// Writes one CSV row per test-split shape: the label, then the max-pooled
/// features of `layer_name`.
pub fn export_features(
    model: &Model<f32>,
    data: &Dataset,
    layer_name: &str,
    points: usize,
    out_path: &Path,
) -> Result<usize> {
    let depth = model.backbone_layer(layer_name)?;
    let test = data.test();
    let feats = extract_features(model, &test, depth, points)?;
    let mut out = String::from("label");
    for i in 0..feats.first().map_or(0, Vec::len) {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for (s, f) in test.iter().zip(&feats) {
        let _ = write!(out, "{}", s.label);
        for v in f {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(out_path, out).map_err(|e| AnalysisError::Io {
        path: out_path.display().to_string(),
        source: e,
    })?;
    Ok(feats.len())
}

/// Reads a feature CSV written by [`export_features`].
pub fn read_features(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| AnalysisError::Io {
        path: name.clone(),
        source: e,
    })?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = |msg: String| AnalysisError::Parse {
            path: name.clone(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err("missing label".into()))?;
        let row = fields
            .map(|f| f.parse::<f32>().map(f64::from).map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        labels.push(label);
        rows.push(row);
    }
    Ok((labels, rows))
}

// ---- PCA projection ----

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Covariance eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Set when the features have no variance at all.
    pub zero_variance: bool,
}

/// Projects centered features onto their top two principal components.
/// Components are sign-fixed so their largest-magnitude loading is
/// positive; components with negligible variance project to zero.
pub fn pca_project_2d(features: &[Vec<f64>]) -> Result<Projection> {
    let s = features.len();
    let d = features.first().map_or(0, Vec::len);
    if s < 3 || d < 2 || features.iter().any(|f| f.len() != d) {
        return Err(AnalysisError::Invalid(format!(
            "projection needs at least 3 rows of equal width >= 2 (got {s} rows of width {d})"
        )));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / s as f64;
        }
    }
    let centered = DMatrix::from_fn(s, d, |i, j| features[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / s as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let top = eigenvalues[0];
    let zero_variance = !(top > 0.0);
    let mut coords = vec![[0.0; 2]; s];
    for (c, &idx) in order.iter().take(2).enumerate() {
        if zero_variance || eigenvalues[c] <= top * 1e-12 {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = (0..d).fold(0, |b, j| if v[j].abs() > v[b].abs() { j } else { b });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, row) in coords.iter_mut().enumerate() {
            row[c] = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
        }
    }
    Ok(Projection {
        coords,
        eigenvalues,
        zero_variance,
    })
}

// ---- report comparison ----

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: String,
    pub n: usize,
    /// Per layer, in report order.
    pub mean_rms: Vec<f64>,
    pub std_rms: Vec<f64>,
    /// Per report.
    pub early_rms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub layers: Vec<String>,
    pub groups: Vec<GroupStats>,
    /// Mean early-layer RMS of the first group over that of the second.
    pub early_ratio: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn compare_reports(groups: &[(String, Vec<GradientNormReport>)]) -> Result<Comparison> {
    let first = groups
        .iter()
        .flat_map(|g| g.1.first())
        .next()
        .ok_or_else(|| AnalysisError::Invalid("no reports to compare".into()))?;
    let layers: Vec<String> = first.layers.iter().map(|l| l.name.clone()).collect();
    let mut stats = Vec::with_capacity(groups.len());
    for (name, reports) in groups {
        if reports.is_empty() {
            return Err(AnalysisError::Invalid(format!("group {name} has no reports")));
        }
        for r in reports {
            let names: Vec<String> = r.layers.iter().map(|l| l.name.clone()).collect();
            if names != layers {
                return Err(AnalysisError::LayerMismatch(layers.clone(), names));
            }
        }
        let (mut mean_rms, mut std_rms) = (Vec::new(), Vec::new());
        for i in 0..layers.len() {
            let xs: Vec<f64> = reports.iter().map(|r| r.layers[i].grad_rms).collect();
            let (m, s) = mean_std(&xs);
            mean_rms.push(m);
            std_rms.push(s);
        }
        stats.push(GroupStats {
            group: name.clone(),
            n: reports.len(),
            mean_rms,
            std_rms,
            early_rms: reports.iter().map(GradientNormReport::early_rms).collect(),
        });
    }
    let early_ratio = (stats.len() >= 2).then(|| mean_std(&stats[0].early_rms).0 / mean_std(&stats[1].early_rms).0);
    Ok(Comparison {
        layers,
        groups: stats,
        early_ratio,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(r) = self.early_ratio {
            let _ = writeln!(out, "# early_ratio={r:e}");
        }
        out.push_str("layer,group,n,mean_rms,std_rms\n");
        for (i, l) in self.layers.iter().enumerate() {
            for g in &self.groups {
                let _ = writeln!(out, "{l},{},{},{:e},{:e}", g.group, g.n, g.mean_rms[i], g.std_rms[i]);
            }
        }
        out
    }

    /// Grouped bar chart of mean gradient RMS per layer with one-std
    /// whiskers.
    pub fn to_svg(&self) -> String {
        const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
        let (w, h) = (120.0 * self.layers.len() as f64 + 140.0, 360.0);
        let (left, bottom, top) = (60.0, 300.0, 30.0);
        let ymax = self
            .groups
            .iter()
            .flat_map(|g| g.mean_rms.iter().zip(&g.std_rms).map(|(m, s)| m + s))
            .fold(0.0f64, f64::max)
            .max(1e-30);
        let scale = (bottom - top) / ymax;
        let bar = 80.0 / self.groups.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<text x="{left}" y="18">gradient RMS per layer</text>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#,
            w - 80.0
        );
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="4" y="{}">{ymax:.2e}</text>"#, top + 4.0);
        for (i, layer) in self.layers.iter().enumerate() {
            let x0 = left + 20.0 + 120.0 * i as f64;
            for (g, stats) in self.groups.iter().enumerate() {
                let (m, sd) = (stats.mean_rms[i], stats.std_rms[i]);
                let x = x0 + bar * g as f64;
                let y = bottom - m * scale;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    bar - 2.0,
                    m * scale,
                    COLORS[g % COLORS.len()]
                );
                let cx = x + (bar - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                    bottom - (m + sd) * scale,
                    bottom - (m - sd).max(0.0) * scale
                );
            }
            let _ = writeln!(s, r#"<text x="{x0:.1}" y="{}">{layer}</text>"#, bottom + 16.0);
        }
        for (g, stats) in self.groups.iter().enumerate() {
            let y = top + 16.0 * g as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                w - 75.0,
                COLORS[g % COLORS.len()],
                w - 60.0,
                y + 9.0,
                stats.group
            );
        }
        if let Some(r) = self.early_ratio {
            let _ = writeln!(s, r#"<text x="{left}" y="{}">early-layer ratio {r:.3}</text>"#, bottom + 40.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(rms: [f64; 4]) -> GradientNormReport {
        GradientNormReport {
            layers: rms
                .iter()
                .enumerate()
                .map(|(i, &r)| LayerNorm {
                    name: format!("layer{i}"),
                    depth: i,
                    param_count: 4,
                    grad_l2: 2.0 * r,
                    grad_rms: r,
                })
                .collect(),
            total_l2: 0.0,
            provenance: Provenance::random(
                &crate::models::Architecture::new(crate::models::BackboneKind::GlobalPointnet, 2),
                0,
            ),
            dataset: String::new(),
            batches: 1,
            batch_size: 1,
            seed: 0,
        }
    }

    #[test]
    fn comparison_arithmetic() {
        let a = report([1.0; 4]);
        let b = report([2.0; 4]);
        let c = compare_reports(&[("a".into(), vec![a.clone()]), ("b".into(), vec![b])]).unwrap();
        assert_eq!(c.early_ratio, Some(0.5));
        let same = compare_reports(&[("a".into(), vec![a.clone()]), ("a2".into(), vec![a.clone()])]).unwrap();
        assert_eq!(same.early_ratio, Some(1.0));
        assert!(same.groups[0].std_rms.iter().all(|&s| s == 0.0));
        let svg = c.to_svg();
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = report([1.0; 4]);
        let mut b = report([1.0; 4]);
        b.layers.pop();
        assert!(matches!(
            compare_reports(&[("a".into(), vec![a]), ("b".into(), vec![b])]),
            Err(AnalysisError::LayerMismatch(..))
        ));
    }

    #[test]
    fn projection_of_planar_data_preserves_distances() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin() * 3.0, (i as f64 * 0.7).cos()]).collect();
        let p = pca_project_2d(&pts).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                let d1 = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_one_and_constant_features() {
        let line: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project_2d(&line).unwrap();
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
        assert!(!p.zero_variance);
        let flat = vec![vec![1.0, 2.0]; 5];
        let p = pca_project_2d(&flat).unwrap();
        assert!(p.zero_variance && p.coords.iter().all(|c| *c == [0.0, 0.0]));
    }
}
