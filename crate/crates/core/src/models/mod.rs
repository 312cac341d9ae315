//! Point-cloud backbones with per-layer feature taps, task heads, and the
//! checkpoint format.
//!
//! A [`Model`] owns an ordered list of named layers. Backbone blocks are
//! called `layer0`, `layer1`, ... in execution order; heads follow them
//! (`normal.layerN`, `decoder.0`, `decoder.1`, `cls.hidden`, `cls.out`).
//! Every layer owns a `.weight` and a `.bias` parameter.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    Provenance,
};

use crate::geometry::{knn_rows, GeometryError, PointCloud};
use crate::seed::{derive_seed, rng};
use crate::tensor::{Param, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{points} points per cloud; edge convolution with k={k} needs at least {}", k + 1)]
    TooFewPoints { points: usize, k: usize },
    #[error("unknown layer {name:?}; valid layers: {}", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },
    #[error("batch clouds must share one point count, got {0:?}")]
    RaggedBatch(Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Shared per-point MLP followed by a max-pool.
    GlobalPointnet,
    /// Dynamic-graph edge convolution: kNN in feature space per block.
    EdgeconvGraph,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::GlobalPointnet => "global-pointnet",
            BackboneKind::EdgeconvGraph => "edgeconv-graph",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global-pointnet" | "pointnet" => Ok(BackboneKind::GlobalPointnet),
            "edgeconv-graph" | "edgeconv" | "dgcnn" => Ok(BackboneKind::EdgeconvGraph),
            _ => Err(format!("unknown backbone {s:?} (expected global-pointnet or edgeconv-graph)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub backbone: BackboneKind,
    /// Output width of each backbone block.
    pub widths: Vec<usize>,
    /// Neighbour count of edge-convolution blocks.
    pub k: usize,
    pub num_classes: usize,
    pub classifier_hidden: usize,
    pub decoder_widths: Vec<usize>,
    /// Depth indices of the blocks that carry a normal-prediction head.
    pub normal_layers: Vec<usize>,
}

impl Architecture {
    pub fn new(backbone: BackboneKind, num_classes: usize) -> Self {
        Self {
            backbone,
            widths: vec![32, 64, 128, 256],
            k: 8,
            num_classes,
            classifier_hidden: 128,
            decoder_widths: vec![128, 64],
            normal_layers: vec![0, 1],
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    pub fn embedding_dim(&self) -> usize {
        *self.decoder_widths.last().expect("at least one decoder layer")
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.widths.len()).map(|i| format!("layer{i}")).collect()
    }
}

/// A named group of parameters at a fixed position in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub depth: usize,
    /// Indices into [`Model::params`].
    pub params: Vec<usize>,
}

impl NamedLayer {
    pub fn is_backbone(&self) -> bool {
        self.name.starts_with("layer")
    }
}

/// Coordinates of `shapes` clouds with `points` points each, stacked into
/// one `[shapes * points, 3]` matrix.
#[derive(Clone, Debug)]
pub struct PointBatch<T> {
    pub coords: Tensor<T>,
    pub shapes: usize,
    pub points: usize,
}

impl<T: Scalar> PointBatch<T> {
    pub fn from_clouds(clouds: &[&PointCloud]) -> Result<Self> {
        let first = clouds.first().ok_or(ModelError::EmptyBatch)?;
        let n = first.len();
        if clouds.iter().any(|c| c.len() != n) {
            return Err(ModelError::RaggedBatch(clouds.iter().map(|c| c.len()).collect()));
        }
        let data = clouds
            .iter()
            .flat_map(|c| c.points.iter().flatten().map(|&v| T::lit(v)))
            .collect();
        Ok(Self {
            coords: Tensor::new(vec![clouds.len() * n, 3], data)?,
            shapes: clouds.len(),
            points: n,
        })
    }

    pub fn single(cloud: &PointCloud) -> Result<Self> {
        Self::from_clouds(&[cloud])
    }
}

/// Parameters bound to one tape, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }
}

/// Per-block taps (`[shapes * points, width]`) and the pooled global
/// feature (`[shapes, feature_dim]`) of one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOut {
    pub taps: Vec<Var>,
    pub global: Var,
    pub shapes: usize,
    pub points: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub arch: Architecture,
    pub params: Vec<Param<T>>,
    pub layers: Vec<NamedLayer>,
    pub provenance: Provenance,
}

fn layer_specs(arch: &Architecture) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut d_in = 3;
    for (i, &w) in arch.widths.iter().enumerate() {
        let fan_in = match arch.backbone {
            BackboneKind::GlobalPointnet => d_in,
            BackboneKind::EdgeconvGraph => 2 * d_in,
        };
        out.push((format!("layer{i}"), fan_in, w));
        d_in = w;
    }
    for &l in &arch.normal_layers {
        out.push((format!("normal.layer{l}"), arch.widths[l], 3));
    }
    let mut d = 2 * arch.feature_dim();
    for (i, &w) in arch.decoder_widths.iter().enumerate() {
        out.push((format!("decoder.{i}"), d, w));
        d = w;
    }
    out.push(("cls.hidden".into(), arch.feature_dim(), arch.classifier_hidden));
    out.push(("cls.out".into(), arch.classifier_hidden, arch.num_classes));
    out
}

/// Fan-in scaled uniform initialization: weights in `±sqrt(6 / fan_in)`,
/// biases in `±1 / sqrt(fan_in)`.
fn init_layer<T: Scalar>(name: &str, fan_in: usize, fan_out: usize, seed: u64) -> [Param<T>; 2] {
    let mut r = rng(seed);
    let wb = (6.0 / fan_in as f64).sqrt();
    let bb = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<T> = (0..fan_in * fan_out).map(|_| T::lit(r.random_range(-wb..wb))).collect();
    let b: Vec<T> = (0..fan_out).map(|_| T::lit(r.random_range(-bb..bb))).collect();
    [
        Param::new(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w).expect("shape")),
        Param::new(format!("{name}.bias"), Tensor::new(vec![fan_out], b).expect("shape")),
    ]
}

impl<T: Scalar> Model<T> {
    /// A freshly initialized model. Each layer draws from its own seed
    /// derived from `seed` and the layer name.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut params = Vec::new();
        let mut layers = Vec::new();
        for (depth, (name, fan_in, fan_out)) in layer_specs(&arch).into_iter().enumerate() {
            let [w, b] = init_layer(&name, fan_in, fan_out, layer_seed(seed, &name));
            layers.push(NamedLayer {
                name,
                depth,
                params: vec![params.len(), params.len() + 1],
            });
            params.push(w);
            params.push(b);
        }
        let provenance = Provenance::random(&arch, seed);
        Self {
            arch,
            params,
            layers,
            provenance,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
            layers: self.layers.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn layer(&self, name: &str) -> Result<&NamedLayer> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLayer {
                name: name.to_string(),
                valid: self.layers.iter().map(|l| l.name.clone()).collect(),
            })
    }

    /// Depth index of a backbone block by name.
    pub fn backbone_layer(&self, name: &str) -> Result<usize> {
        let names = self.arch.layer_names();
        names.iter().position(|n| n == name).ok_or_else(|| ModelError::UnknownLayer {
            name: name.to_string(),
            valid: names.clone(),
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Layer name a parameter belongs to.
    pub fn layer_of(&self, param: usize) -> &str {
        &self.layers.iter().find(|l| l.params.contains(&param)).expect("every param has a layer").name
    }

    /// Replaces the classifier with a freshly initialized one for
    /// `num_classes` classes.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) {
        self.arch.num_classes = num_classes;
        let specs = layer_specs(&self.arch);
        for name in ["cls.hidden", "cls.out"] {
            let (_, fan_in, fan_out) = specs.iter().find(|s| s.0 == name).cloned().expect("classifier layer");
            let [w, b] = init_layer::<T>(name, fan_in, fan_out, layer_seed(seed, name));
            let li = self.layer(name).expect("classifier layer").params.clone();
            self.params[li[0]] = w;
            self.params[li[1]] = b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Adds the gradients recorded on `tape` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (id, g) in tape.param_grads() {
            for (a, &b) in self.params[id].grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }

    /// Puts every parameter on `tape`; `trainable(layer_name)` decides which
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        for layer in &self.layers {
            let t = trainable(&layer.name);
            for &p in &layer.params {
                debug_assert_eq!(p, vars.len());
                vars.push(tape.param(p, &self.params[p].value, t));
            }
        }
        Bound { vars }
    }

    fn wb(&self, bound: &Bound, name: &str) -> (Var, Var) {
        let l = &self.layer(name).expect("architecture layer").params;
        (bound.var(l[0]), bound.var(l[1]))
    }

    fn affine(&self, tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let (w, b) = self.wb(bound, name);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    /// Runs the backbone on a batch.
    pub fn backbone(&self, tape: &mut Tape<T>, bound: &Bound, batch: &PointBatch<T>) -> Result<BackboneOut> {
        let (shapes, n) = (batch.shapes, batch.points);
        if self.arch.backbone == BackboneKind::EdgeconvGraph && n < self.arch.k + 1 {
            return Err(ModelError::TooFewPoints { points: n, k: self.arch.k });
        }
        let mut x = tape.constant(batch.coords.clone());
        let mut taps = Vec::with_capacity(self.arch.widths.len());
        for i in 0..self.arch.widths.len() {
            let name = format!("layer{i}");
            x = match self.arch.backbone {
                BackboneKind::GlobalPointnet => {
                    let y = self.affine(tape, bound, &name, x)?;
                    tape.relu(y)
                }
                BackboneKind::EdgeconvGraph => self.edge_conv(tape, bound, &name, x, shapes, n)?,
            };
            taps.push(x);
        }
        let global = self.pool(tape, x, shapes, n)?;
        Ok(BackboneOut {
            taps,
            global,
            shapes,
            points: n,
        })
    }

    /// `max_j relu(W·[f_i, f_j - f_i] + b)` over the k nearest neighbours j
    /// of i in the current feature space. Evaluated in the factored form
    /// `(W_top - W_bottom)·f_i + W_bottom·f_j + b` so the affine map runs
    /// once per point instead of once per edge.
    fn edge_conv(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        name: &str,
        x: Var,
        shapes: usize,
        n: usize,
    ) -> Result<Var> {
        let k = self.arch.k;
        let d_in = tape.shape(x)[1];
        let (centers, neighbours) = {
            let feats = tape.value(x).data();
            let mut centers = Vec::with_capacity(shapes * n * k);
            let mut neighbours = Vec::with_capacity(shapes * n * k);
            for s in 0..shapes {
                let rows = &feats[s * n * d_in..(s + 1) * n * d_in];
                let idx = knn_rows(rows, d_in, k, true)?;
                neighbours.extend(idx.into_iter().map(|j| s * n + j));
                centers.extend((s * n..(s + 1) * n).flat_map(|i| std::iter::repeat_n(i, k)));
            }
            (centers, neighbours)
        };
        let (w, b) = self.wb(bound, name);
        let w_top = tape.slice_rows(w, 0, d_in)?;
        let w_bottom = tape.slice_rows(w, d_in, d_in)?;
        let w_center = tape.sub(w_top, w_bottom)?;
        let center = tape.matmul(x, w_center)?;
        let center = tape.add_bias(center, b)?;
        let neighbour = tape.matmul(x, w_bottom)?;
        let ec = tape.gather_rows(center, &centers)?;
        let en = tape.gather_rows(neighbour, &neighbours)?;
        let e = tape.add(ec, en)?;
        let e = tape.relu(e);
        let d_out = tape.shape(e)[1];
        let e = tape.reshape(e, &[shapes * n, k, d_out])?;
        Ok(tape.max(e, 1)?)
    }

    /// Max-pool of a `[shapes * n, d]` tap over each shape's points.
    pub fn pool(&self, tape: &mut Tape<T>, tap: Var, shapes: usize, n: usize) -> Result<Var> {
        let d = tape.shape(tap)[1];
        let t = tape.reshape(tap, &[shapes, n, d])?;
        Ok(tape.max(t, 1)?)
    }

    /// Class logits `[shapes, num_classes]` from pooled features.
    pub fn classify(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
        let h = self.affine(tape, bound, "cls.hidden", features)?;
        let h = tape.relu(h);
        self.affine(tape, bound, "cls.out", h)
    }

    /// Unit-norm per-point embeddings from the last tap concatenated with
    /// the owning shape's global feature.
    pub fn decode_points(&self, tape: &mut Tape<T>, bound: &Bound, out: &BackboneOut) -> Result<Var> {
        let owner: Vec<usize> = (0..out.shapes * out.points).map(|i| i / out.points).collect();
        let global = tape.gather_rows(out.global, &owner)?;
        let last = *out.taps.last().expect("at least one block");
        let mut h = tape.concat(&[last, global], 1)?;
        let depth = self.arch.decoder_widths.len();
        for i in 0..depth {
            h = self.affine(tape, bound, &format!("decoder.{i}"), h)?;
            if i + 1 < depth {
                h = tape.relu(h);
            }
        }
        Ok(tape.normalize_rows(h)?)
    }

    /// Predicted normals `[shapes * n, 3]` from the tap of block `depth`.
    pub fn predict_normals(&self, tape: &mut Tape<T>, bound: &Bound, out: &BackboneOut, depth: usize) -> Result<Var> {
        let name = format!("normal.layer{depth}");
        self.layer(&name)?;
        self.affine(tape, bound, &name, out.taps[depth])
    }

    /// Per-point features of block `layer_name` for one cloud together
    /// with their max-pool over points.
    pub fn layer_features(&self, cloud: &PointCloud, layer_name: &str) -> Result<(Tensor<T>, Vec<T>)> {
        let depth = self.backbone_layer(layer_name)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let out = self.backbone(&mut tape, &bound, &PointBatch::single(cloud)?)?;
        let pooled = self.pool(&mut tape, out.taps[depth], 1, out.points)?;
        Ok((tape.value(out.taps[depth]).clone(), tape.value(pooled).data().to_vec()))
    }

    /// Pooled features `[shapes, d]` of block `depth` for every cloud,
    /// computed in chunks of `chunk` clouds.
    pub fn pooled_features(&self, clouds: &[&PointCloud], depth: usize, chunk: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(clouds.len());
        for group in clouds.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, |_| false);
            let batch = PointBatch::from_clouds(group)?;
            let o = self.backbone(&mut tape, &bound, &batch)?;
            let pooled = if depth + 1 == o.taps.len() {
                o.global
            } else {
                self.pool(&mut tape, o.taps[depth], o.shapes, o.points)?
            };
            let d = tape.shape(pooled)[1];
            out.extend(tape.value(pooled).data().chunks_exact(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }
}

fn layer_seed(seed: u64, name: &str) -> u64 {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    derive_seed(&[seed, h])
}
