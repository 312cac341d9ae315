//! Procedurally generated shape datasets with controllable domain shift.
//!
//! Three stock domains stand in for a large clean source collection and two
//! downstream collections, one near and one far from it:
//!
//! * [`DomainSpec::source`]: eight clean, complete shape classes;
//! * [`DomainSpec::target_near`]: the same eight classes with shifted
//!   parameter ranges and mild noise;
//! * [`DomainSpec::target_far`]: six classes (four shared with the source,
//!   two with parameter ranges the source never produces) that are noisy,
//!   partial and unevenly sampled.
//!
//! All three place every shape in a uniformly random pose.

pub mod io;
pub mod shapes;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{read_cloud, write_cloud, CloudFormat};
pub use shapes::{Shape, ShapeClass, ShapeKind};

use crate::geometry::{axis_angle, dot, mat_vec, normalize_cloud, GeometryError, Mat3, Point3, PointCloud};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("unsupported point-cloud format: {0} (expected .xyz or .ply)")]
    UnsupportedFormat(String),
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DatasetError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Canonical,
    Yaw,
    Full,
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::Canonical => "canonical",
            Orientation::Yaw => "yaw",
            Orientation::Full => "full",
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "canonical" => Ok(Orientation::Canonical),
            "yaw" => Ok(Orientation::Yaw),
            "full" => Ok(Orientation::Full),
            _ => Err(format!("unknown orientation {s:?} (expected canonical, yaw or full)")),
        }
    }
}

fn random_rotation(orientation: Orientation, r: &mut impl Rng) -> Option<Mat3> {
    match orientation {
        Orientation::Canonical => None,
        Orientation::Yaw => Some(axis_angle([0.0, 0.0, 1.0], r.random_range(0.0..std::f64::consts::TAU))),
        Orientation::Full => {
            // unit quaternion from four Gaussians is uniform on SO(3)
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let q = loop {
                let q = [normal.sample(r), normal.sample(r), normal.sample(r), normal.sample(r)];
                let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if len > 1e-9 {
                    break q.map(|v| v / len);
                }
            };
            let [w, x, y, z] = q;
            Some([
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ])
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: Vec<ShapeClass>,
    pub points_per_cloud: usize,
    /// Std of isotropic Gaussian coordinate noise, relative to unit radius.
    pub noise_sigma: f64,
    /// Fraction of the surface that stays visible (1 = complete).
    pub partial_fraction: f64,
    /// Exponent of the directional sampling-density skew (0 = uniform).
    pub density_bias: f64,
    /// Pose of each cloud: the shape's canonical frame, a random rotation
    /// about the up axis, or a uniformly random rotation.
    #[serde(default)]
    pub orientation: Orientation,
    pub samples_per_class: usize,
    pub seed: u64,
}

fn source_classes() -> Vec<ShapeClass> {
    use ShapeKind::*;
    vec![
        ShapeClass::new(Sphere, &[]),
        ShapeClass::new(Ellipsoid, &[(0.5, 0.8), (0.3, 0.6)]),
        ShapeClass::new(Box, &[(0.5, 1.0), (0.3, 0.8)]),
        ShapeClass::new(Cylinder, &[(0.6, 1.5)]),
        ShapeClass::new(Cone, &[(1.0, 2.5)]),
        ShapeClass::new(Torus, &[(0.15, 0.45)]),
        ShapeClass::new(Capsule, &[(0.4, 1.2)]),
        ShapeClass::new(Pyramid, &[(0.8, 2.0)]),
    ]
}

impl DomainSpec {
    pub const MIN_POINTS: usize = 64;

    /// Clean, complete eight-class source domain in random poses.
    pub fn source(samples_per_class: usize, seed: u64) -> Self {
        Self {
            name: "SOURCE".into(),
            classes: source_classes(),
            points_per_cloud: 2048,
            noise_sigma: 0.0,
            partial_fraction: 1.0,
            density_bias: 0.0,
            orientation: Orientation::Full,
            samples_per_class,
            seed,
        }
    }

    /// Same classes, shifted parameter ranges, mild noise.
    pub fn target_near(samples_per_class: usize, seed: u64) -> Self {
        use ShapeKind::*;
        Self {
            name: "TARGET-NEAR".into(),
            classes: vec![
                ShapeClass::new(Sphere, &[]),
                ShapeClass::new(Ellipsoid, &[(0.6, 0.9), (0.4, 0.7)]),
                ShapeClass::new(Box, &[(0.6, 1.0), (0.4, 0.9)]),
                ShapeClass::new(Cylinder, &[(0.8, 1.8)]),
                ShapeClass::new(Cone, &[(0.8, 2.0)]),
                ShapeClass::new(Torus, &[(0.2, 0.5)]),
                ShapeClass::new(Capsule, &[(0.6, 1.5)]),
                ShapeClass::new(Pyramid, &[(1.0, 2.4)]),
            ],
            noise_sigma: 0.01,
            ..Self::source(samples_per_class, seed)
        }
    }

    /// Six classes, four shared with the source and two novel; noisy,
    /// partial and unevenly sampled.
    pub fn target_far(samples_per_class: usize, seed: u64) -> Self {
        use ShapeKind::*;
        Self {
            name: "TARGET-FAR".into(),
            classes: vec![
                ShapeClass::new(Box, &[(0.5, 1.0), (0.3, 0.8)]),
                ShapeClass::new(Cylinder, &[(0.6, 1.5)]),
                ShapeClass::new(Cone, &[(1.0, 2.5)]),
                ShapeClass::new(Torus, &[(0.15, 0.45)]),
                // flat discs and long rods: outside every source range
                ShapeClass::new(Ellipsoid, &[(0.85, 1.0), (0.1, 0.2)]),
                ShapeClass::new(Capsule, &[(2.0, 3.0)]),
            ],
            noise_sigma: 0.03,
            partial_fraction: 0.7,
            density_bias: 1.5,
            ..Self::source(samples_per_class, seed)
        }
    }

    /// Looks up a stock domain by name (`SOURCE`, `TARGET-NEAR`, `TARGET-FAR`).
    pub fn preset(name: &str, samples_per_class: usize, seed: u64) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "SOURCE" => Some(Self::source(samples_per_class, seed)),
            "TARGET-NEAR" | "NEAR" => Some(Self::target_near(samples_per_class, seed)),
            "TARGET-FAR" | "FAR" => Some(Self::target_far(samples_per_class, seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.points_per_cloud < Self::MIN_POINTS {
            return bad(format!("points_per_cloud {} < {}", self.points_per_cloud, Self::MIN_POINTS));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.partial_fraction > 0.0 && self.partial_fraction <= 1.0) {
            return bad(format!("partial_fraction {} outside (0, 1]", self.partial_fraction));
        }
        if !(self.density_bias >= 0.0 && self.density_bias.is_finite()) {
            return bad(format!("density_bias {} must be >= 0", self.density_bias));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        for c in &self.classes {
            if c.ranges.len() != c.kind.param_names().len() {
                return bad(format!("{} expects {} parameter ranges", c.name(), c.kind.param_names().len()));
            }
            if c.ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && hi >= lo)) {
                return bad(format!("{} has an empty or non-positive range", c.name()));
            }
        }
        Ok(())
    }
}

/// Per-cloud seed from the dataset seed, class index and sample index.
pub fn cloud_seed(dataset_seed: u64, class_index: usize, sample_index: usize) -> u64 {
    derive_seed(&[dataset_seed, class_index as u64, sample_index as u64])
}

fn rescale(points: &mut [Point3]) {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for d in 0..3 {
            c[d] += p[d] / n;
        }
    }
    let mut r: f64 = 0.0;
    for p in points.iter_mut() {
        for d in 0..3 {
            p[d] -= c[d];
        }
        r = r.max(dot(*p, *p).sqrt());
    }
    if r > 0.0 {
        for p in points.iter_mut() {
            p.iter_mut().for_each(|v| *v /= r);
        }
    }
}

/// Generates one normalized cloud of `class` under `spec`.
///
/// Points are drawn on the analytic surface, skewed by the density bias,
/// truncated to the visible fraction by a random half-space, perturbed by
/// Gaussian noise and normalized. Normals are the analytic normals at the
/// noise-free sample locations.
pub fn gen_cloud(class: &ShapeClass, spec: &DomainSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut r = rng(seed);
    let shape = class.draw(&mut r);
    let n = spec.points_per_cloud;
    let pool = ((n as f64) / spec.partial_fraction).ceil() as usize;
    let bias_dir = random_direction(&mut r);
    let view_dir = random_direction(&mut r);

    let mut samples: Vec<(Point3, Point3)> = Vec::with_capacity(pool);
    let symmetric = class.kind.centrally_symmetric() && spec.density_bias == 0.0 && pool == n;
    if symmetric {
        // Antithetic pairs keep the centroid exactly at the shape center.
        while samples.len() + 1 < pool {
            let (p, nrm) = shape.sample(&mut r);
            samples.push((p, nrm));
            samples.push(([-p[0], -p[1], -p[2]], [-nrm[0], -nrm[1], -nrm[2]]));
        }
        if samples.len() < pool {
            samples.push(shape.sample(&mut r));
        }
    } else {
        // Rejection weights for the density skew need the shape's extent.
        let extent = 1.0 + shape.params.iter().fold(0.0f64, |m, &v| m.max(v));
        while samples.len() < pool {
            let (p, nrm) = shape.sample(&mut r);
            if spec.density_bias > 0.0 {
                let s = (1.0 + dot(p, bias_dir) / extent) / 2.0;
                let accept = s.clamp(0.0, 1.0).powf(spec.density_bias);
                if r.random::<f64>() >= accept {
                    continue;
                }
            }
            samples.push((p, nrm));
        }
    }

    if pool > n {
        let mut order: Vec<(f64, usize)> = samples
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (dot(*p, view_dir), i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = order[..n].iter().map(|&(_, i)| i).collect();
        keep.sort_unstable();
        samples = keep.into_iter().map(|i| samples[i]).collect();
    }

    if let Some(rot) = random_rotation(spec.orientation, &mut r) {
        for (p, n) in samples.iter_mut() {
            *p = mat_vec(&rot, *p);
            *n = mat_vec(&rot, *n);
        }
    }
    let mut points: Vec<Point3> = samples.iter().map(|s| s.0).collect();
    let normals: Vec<Point3> = samples.iter().map(|s| s.1).collect();
    if spec.noise_sigma > 0.0 {
        rescale(&mut points);
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v += noise.sample(&mut r);
            }
        }
    }
    let cloud = PointCloud {
        points,
        normals: Some(normals),
        label: None,
        source_id: String::new(),
    };
    Ok(normalize_cloud(&cloud)?)
}

fn random_direction(r: &mut impl Rng) -> Point3 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = [normal.sample(r), normal.sample(r), normal.sample(r)];
        let len = dot(v, v).sqrt();
        if len > 1e-9 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DomainSpec,
    pub split: SplitFractions,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.spec.classes.len()
    }

    /// Stable identifier of the manifest contents.
    pub fn digest(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_name(class: &ShapeClass, label: usize, sample: usize) -> String {
    format!("{label:02}_{}_{sample:04}.ply", class.name())
}

/// Stratified split: a seeded per-class shuffle puts `round(test * n)`
/// samples of every class in the test split.
fn assign_splits(spec: &DomainSpec, split: SplitFractions) -> Vec<Vec<Split>> {
    let n = spec.samples_per_class;
    let test = ((split.test * n as f64).round() as usize).min(n);
    (0..spec.classes.len())
        .map(|label| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng(derive_seed(&[spec.seed, label as u64, 0x5917])));
            let mut out = vec![Split::Train; n];
            for &i in &order[..test] {
                out[i] = Split::Test;
            }
            out
        })
        .collect()
}

/// Generates every cloud of `spec` and writes them plus `manifest.json`
/// into `out_dir`.
pub fn build_dataset(spec: &DomainSpec, split: SplitFractions, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if !(split.train >= 0.0 && split.test >= 0.0 && ((split.train + split.test) - 1.0).abs() < 1e-9) {
        return Err(DatasetError::InvalidSpec(format!(
            "split fractions {} / {} must be non-negative and sum to 1",
            split.train, split.test
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
    let splits = assign_splits(spec, split);
    let mut entries = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (label, class) in spec.classes.iter().enumerate() {
        for sample in 0..spec.samples_per_class {
            let seed = cloud_seed(spec.seed, label, sample);
            let mut cloud = gen_cloud(class, spec, seed)?;
            cloud.label = Some(label);
            let rel = file_name(class, label, sample);
            write_cloud(&cloud, &out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                label,
                seed,
                split: splits[label][sample],
            });
        }
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        split,
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| DatasetError::io(&path, e))?;
    Ok(manifest)
}

/// Regenerates the file contents an entry should have, without touching disk.
pub fn regenerate_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<String> {
    let class = manifest.spec.classes.get(entry.label).ok_or_else(|| DatasetError::Manifest {
        path: entry.path.clone(),
        msg: format!("label {} has no class", entry.label),
    })?;
    let mut cloud = gen_cloud(class, &manifest.spec, entry.seed)?;
    cloud.label = Some(entry.label);
    let format = CloudFormat::from_path(Path::new(&entry.path))?;
    Ok(io::encode_cloud(&cloud, format))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
    pub split: Split,
    pub seed: u64,
}

/// A manifest together with its loaded clouds.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads a dataset from a directory holding `manifest.json` or from the
    /// manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let mut cloud = read_cloud(&root.join(&e.path))?;
                cloud.label = Some(e.label);
                cloud.source_id = e.path.clone();
                Ok(Sample {
                    cloud,
                    label: e.label,
                    split: e.split,
                    seed: e.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            root,
            samples,
        })
    }

    /// Generates the dataset in memory (same clouds `build_dataset` writes,
    /// before the 32-bit text round trip).
    pub fn generate(spec: &DomainSpec, split: SplitFractions) -> Result<Self> {
        spec.validate()?;
        let splits = assign_splits(spec, split);
        let mut entries = Vec::new();
        let mut samples = Vec::new();
        for (label, class) in spec.classes.iter().enumerate() {
            for sample in 0..spec.samples_per_class {
                let seed = cloud_seed(spec.seed, label, sample);
                let mut cloud = gen_cloud(class, spec, seed)?;
                let path = file_name(class, label, sample);
                cloud.label = Some(label);
                cloud.source_id = path.clone();
                let split = splits[label][sample];
                entries.push(ManifestEntry {
                    path,
                    label,
                    seed,
                    split,
                });
                samples.push(Sample {
                    cloud,
                    label,
                    split,
                    seed,
                });
            }
        }
        Ok(Self {
            manifest: DatasetManifest {
                spec: spec.clone(),
                split,
                entries,
            },
            root: PathBuf::new(),
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test).collect()
    }

    pub fn id(&self) -> String {
        format!("{}@{}", self.manifest.spec.name, &self.manifest.digest()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn, norm, pca_normals};

    fn small(spec: DomainSpec, points: usize) -> DomainSpec {
        DomainSpec {
            points_per_cloud: points,
            ..spec
        }
    }

    #[test]
    fn clean_sphere_has_unit_radius_and_radial_normals() {
        let spec = DomainSpec::source(1, 0);
        let cloud = gen_cloud(&spec.classes[0], &spec, 11).unwrap();
        assert_eq!(cloud.len(), 2048);
        for (p, n) in cloud.points.iter().zip(cloud.normals.as_ref().unwrap()) {
            assert!((norm(*p) - 1.0).abs() < 1e-6);
            assert!((dot(*p, *n) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clean_box_lies_on_faces() {
        let spec = DomainSpec {
            orientation: Orientation::Canonical,
            ..DomainSpec::source(1, 0)
        };
        let cloud = gen_cloud(&spec.classes[2], &spec, 5).unwrap();
        let mut ext = [0.0f64; 3];
        for p in &cloud.points {
            for d in 0..3 {
                ext[d] = ext[d].max(p[d].abs());
            }
        }
        for (p, n) in cloud.points.iter().zip(cloud.normals.as_ref().unwrap()) {
            let axis = (0..3).find(|&d| n[d].abs() == 1.0).expect("axis-aligned normal");
            assert_eq!(n.iter().filter(|v| **v == 0.0).count(), 2);
            assert!((p[axis].abs() - ext[axis]).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec::target_far(1, 3);
        for class in &spec.classes {
            let a = gen_cloud(class, &spec, 77).unwrap();
            let b = gen_cloud(class, &spec, 77).unwrap();
            assert_eq!(io::encode_ply(&a), io::encode_ply(&b));
            assert_eq!(a.len(), spec.points_per_cloud);
            a.validate().unwrap();
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = DomainSpec::source(2, 0);
        s.points_per_cloud = 10;
        assert!(s.validate().is_err());
        let mut s = DomainSpec::source(2, 0);
        s.partial_fraction = 0.0;
        assert!(s.validate().is_err());
        let mut s = DomainSpec::source(2, 0);
        s.noise_sigma = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn build_and_regenerate() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(DomainSpec::source(50, 9), 64);
        let manifest = build_dataset(&spec, SplitFractions::default(), dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 400);
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 401);
        for label in 0..8 {
            let test = manifest
                .entries
                .iter()
                .filter(|e| e.label == label && e.split == Split::Test)
                .count();
            assert_eq!(test, 10);
        }
        for e in manifest.entries.iter().step_by(37) {
            let on_disk = fs::read(dir.path().join(&e.path)).unwrap();
            assert_eq!(hex_digest(&on_disk), hex_digest(regenerate_entry(&manifest, e).unwrap().as_bytes()));
        }
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 400);
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.train().len(), 320);
    }

    #[test]
    fn analytic_normals_agree_with_pca_on_spheres() {
        let spec = DomainSpec::source(1, 0);
        let cloud = gen_cloud(&spec.classes[0], &spec, 1).unwrap();
        let est = pca_normals(&cloud.points, 30).unwrap();
        let mean_cos: f64 = est
            .normals
            .iter()
            .zip(cloud.normals.as_ref().unwrap())
            .map(|(a, b)| dot(*a, *b).abs())
            .sum::<f64>()
            / cloud.len() as f64;
        assert!(mean_cos >= 0.99, "{mean_cos}");
    }

    fn mean_nn_distance(cloud: &PointCloud) -> f64 {
        let nn = knn(&cloud.points, 1, true).unwrap();
        nn.iter()
            .enumerate()
            .map(|(i, &j)| norm(crate::geometry::sub(cloud.points[i], cloud.points[j])))
            .sum::<f64>()
            / cloud.len() as f64
    }

    #[test]
    fn per_class_statistics_do_not_depend_on_seed() {
        let a = small(DomainSpec::target_far(50, 1), 256);
        let b = DomainSpec { seed: 2, ..a.clone() };
        for label in 0..a.classes.len() {
            let stat = |spec: &DomainSpec| -> f64 {
                (0..50)
                    .map(|s| {
                        let c = gen_cloud(&spec.classes[label], spec, cloud_seed(spec.seed, label, s)).unwrap();
                        mean_nn_distance(&c)
                    })
                    .sum::<f64>()
                    / 50.0
            };
            let (sa, sb) = (stat(&a), stat(&b));
            assert!((sa - sb).abs() / sa < 0.05, "class {label}: {sa} vs {sb}");
        }
    }
}
