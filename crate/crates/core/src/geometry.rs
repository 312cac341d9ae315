//! Point-cloud primitives: normalization, k-nearest neighbours, PCA normals,
//! rigid augmentation with half-space cropping, and correspondence tracking
//! between two augmented views of the same cloud.

use nalgebra::{Matrix3, SymmetricEigen};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng};

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    Empty,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("normal {index} is not unit length (norm {norm})")]
    NotUnit { index: usize, norm: f64 },
    #[error("k = {k} too large for {n} points (exclude_self = {exclude_self})")]
    KTooLarge { k: usize, n: usize, exclude_self: bool },
    #[error("PCA normals need N > k >= 3, got N = {n}, k = {k}")]
    NormalNeighborhood { n: usize, k: usize },
    #[error("crop fraction {0} outside (0, 1]")]
    CropFraction(f64),
    #[error("crop would leave {kept} points, minimum is {min}")]
    CropTooSmall { kept: usize, min: usize },
    #[error("augmented pairs need at least {min} points, got {n}")]
    TooFewPoints { n: usize, min: usize },
    #[error("views share only {found} points after {attempts} attempts (need {min})")]
    TooFewMatches {
        found: usize,
        min: usize,
        attempts: usize,
    },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// An N×3 cloud with optional unit normals and class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub normals: Option<Vec<Point3>>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            normals: None,
            label: None,
            source_id: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the type invariants: non-empty, finite, unit normals.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        if let Some(normals) = &self.normals {
            for (index, n) in normals.iter().enumerate() {
                let norm = norm(*n);
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(GeometryError::NotUnit { index, norm });
                }
            }
        }
        Ok(())
    }

    /// Keeps the rows listed in `index`, in that order.
    pub fn select(&self, index: &[usize]) -> PointCloud {
        PointCloud {
            points: index.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| index.iter().map(|&i| n[i]).collect()),
            label: self.label,
            source_id: self.source_id.clone(),
        }
    }

    pub fn flat_points(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn unit(a: Point3) -> Point3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

/// Rotation by `angle` radians about the unit `axis` (Rodrigues).
pub fn axis_angle(axis: Point3, angle: f64) -> Mat3 {
    let [x, y, z] = unit(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Centers the cloud at the origin and scales it so the farthest point has
/// norm 1. A cloud with no spatial extent collapses to the origin.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.validate()?;
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in &cloud.points {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centered: Vec<Point3> = cloud.points.iter().map(|&p| sub(p, c)).collect();
    let radius = centered.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    let points = if radius < 1e-12 {
        vec![[0.0; 3]; cloud.len()]
    } else {
        centered
            .iter()
            .map(|p| [p[0] / radius, p[1] / radius, p[2] / radius])
            .collect()
    };
    Ok(PointCloud {
        points,
        ..cloud.clone()
    })
}

/// k nearest rows of a row-major `n×dim` matrix, by Euclidean distance,
/// ascending, ties by ascending index. Returns a flat `n×k` index matrix.
pub fn knn_rows<F: Float>(rows: &[F], dim: usize, k: usize, exclude_self: bool) -> Result<Vec<usize>> {
    let n = rows.len() / dim.max(1);
    if k == 0 || k + usize::from(exclude_self) > n {
        return Err(GeometryError::KTooLarge { k, n, exclude_self });
    }
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(F, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let a = &rows[i * dim..(i + 1) * dim];
        cand.clear();
        for j in 0..n {
            if exclude_self && j == i {
                continue;
            }
            let b = &rows[j * dim..(j + 1) * dim];
            let d = a
                .iter()
                .zip(b)
                .fold(F::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
            cand.push((d, j));
        }
        let cmp = |x: &(F, usize), y: &(F, usize)| {
            x.0.partial_cmp(&y.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.1.cmp(&y.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let top = &mut cand[..k];
        top.sort_unstable_by(cmp);
        out.extend(top.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// [`knn_rows`] on 3D points.
pub fn knn(points: &[Point3], k: usize, exclude_self: bool) -> Result<Vec<usize>> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    knn_rows(&flat, 3, k, exclude_self)
}

/// Flips `v` so its largest-magnitude component (first on ties) is positive.
pub fn canonical_sign(v: Point3) -> Point3 {
    let mut best = 0;
    for d in 1..3 {
        if v[d].abs() > v[best].abs() {
            best = d;
        }
    }
    if v[best] < 0.0 {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normals: Vec<Point3>,
    /// Points whose neighbourhood has rank <= 1 (collinear or coincident).
    pub degenerate: Vec<usize>,
}

/// Unit normals from the smallest-eigenvalue eigenvector of each point's
/// k-neighbourhood covariance (the point itself plus its k-1 nearest
/// neighbours), sign-canonicalized.
pub fn pca_normals(points: &[Point3], k: usize) -> Result<NormalEstimate> {
    let n = points.len();
    if k < 3 || n <= k {
        return Err(GeometryError::NormalNeighborhood { n, k });
    }
    let neighbors = knn(points, k - 1, true)?;
    let mut normals = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let hood = std::iter::once(i).chain(neighbors[i * (k - 1)..(i + 1) * (k - 1)].iter().copied());
        let mut mean = [0.0; 3];
        for j in hood.clone() {
            for d in 0..3 {
                mean[d] += points[j][d];
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        let mut cov = Matrix3::<f64>::zeros();
        for j in hood {
            let q = sub(points[j], mean);
            for r in 0..3 {
                for c in 0..3 {
                    cov[(r, c)] += q[r] * q[c];
                }
            }
        }
        cov /= k as f64;
        let (normal, is_degenerate) = smallest_eigenvector(cov);
        if is_degenerate {
            degenerate.push(i);
        }
        normals.push(canonical_sign(normal));
    }
    Ok(NormalEstimate {
        normals,
        degenerate,
    })
}

fn smallest_eigenvector(cov: Matrix3<f64>) -> (Point3, bool) {
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let col = |i: usize| -> Point3 {
        let c = eig.eigenvectors.column(i);
        unit([c[0], c[1], c[2]])
    };
    let scale = vals[2].abs();
    if scale < 1e-18 {
        // Coincident points.
        return ([0.0, 0.0, 1.0], true);
    }
    if vals[1] <= 1e-12 * scale {
        // Collinear: pick the direction orthogonal to the line built from the
        // coordinate axis least aligned with it.
        let line = col(order[2]);
        let mut axis = 0;
        for d in 1..3 {
            if line[d].abs() < line[axis].abs() {
                axis = d;
            }
        }
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        return (unit(cross(line, e)), true);
    }
    (col(order[0]), false)
}

/// A sampled similarity transform plus an optional half-space crop direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidAugmentation {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Point3,
    pub crop_direction: Option<Point3>,
    pub seed: u64,
}

pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const MAX_TRANSLATION: f64 = 0.5;
pub const MIN_CLOUD_POINTS: usize = 8;

impl RigidAugmentation {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            scale: 1.0,
            translation: [0.0; 3],
            crop_direction: None,
            seed: 0,
        }
    }

    /// Rotation angle in degrees recovered from the trace.
    pub fn rotation_angle_deg(&self) -> f64 {
        let tr = self.rotation[0][0] + self.rotation[1][1] + self.rotation[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        let r = mat_vec(&self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }

    /// Maps an augmented point back to the source frame.
    pub fn invert_point(&self, p: Point3) -> Point3 {
        let q = sub(p, self.translation);
        let r = mat_vec(&transpose(&self.rotation), q);
        [r[0] / self.scale, r[1] / self.scale, r[2] / self.scale]
    }
}

fn random_unit(rng: &mut impl Rng) -> Point3 {
    loop {
        let v: Point3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Draws a random axis-angle rotation (|angle| <= 45°), a scale in
/// [0.8, 1.25], a per-axis translation in [-0.5, 0.5] and a crop direction.
pub fn sample_augmentation(seed: u64) -> RigidAugmentation {
    sample_augmentation_with(seed, MAX_ROTATION_DEG)
}

/// As [`sample_augmentation`] with a custom rotation bound in degrees.
pub fn sample_augmentation_with(seed: u64, max_rotation_deg: f64) -> RigidAugmentation {
    let mut r = rng(seed);
    let axis = random_unit(&mut r);
    let max = max_rotation_deg.to_radians();
    let angle = r.random_range(-max..=max);
    let scale = r.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let translation = [
        r.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        r.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        r.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
    ];
    let crop_direction = Some(random_unit(&mut r));
    RigidAugmentation {
        rotation: axis_angle(axis, angle),
        scale,
        translation,
        crop_direction,
        seed,
    }
}

/// Crops, then rotates, scales and translates. The crop keeps the
/// `ceil(crop_fraction * N)` points with the largest projection on the crop
/// direction (ties to the lower index). Survivors keep their source order;
/// their source indices are returned alongside.
pub fn apply_augmentation(
    cloud: &PointCloud,
    aug: &RigidAugmentation,
    crop_fraction: f64,
) -> Result<(PointCloud, Vec<usize>)> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(GeometryError::CropFraction(crop_fraction));
    }
    let n = cloud.len();
    let keep = ((crop_fraction * n as f64).ceil() as usize).min(n);
    if keep < MIN_CLOUD_POINTS {
        return Err(GeometryError::CropTooSmall {
            kept: keep,
            min: MIN_CLOUD_POINTS,
        });
    }
    let survivors: Vec<usize> = match aug.crop_direction {
        Some(dir) if keep < n => {
            let mut order: Vec<(f64, usize)> =
                cloud.points.iter().enumerate().map(|(i, &p)| (dot(p, dir), i)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
            kept.sort_unstable();
            kept
        }
        _ => (0..n).collect(),
    };
    let cropped = cloud.select(&survivors);
    let points = cropped.points.iter().map(|&p| aug.apply_point(p)).collect();
    let normals = cropped
        .normals
        .map(|ns| ns.iter().map(|&v| mat_vec(&aug.rotation, v)).collect());
    Ok((
        PointCloud {
            points,
            normals,
            label: cloud.label,
            source_id: cloud.source_id.clone(),
        },
        survivors,
    ))
}

/// Two augmented views of one cloud and the index pairs `(i, j)` linking
/// point `i` of view A with point `j` of view B when both come from the same
/// source point.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub view_a: PointCloud,
    pub view_b: PointCloud,
    pub matches: Vec<(usize, usize)>,
    pub aug_a: RigidAugmentation,
    pub aug_b: RigidAugmentation,
    pub source_a: Vec<usize>,
    pub source_b: Vec<usize>,
}

pub const MIN_PAIR_POINTS: usize = 64;
pub const MIN_MATCHES: usize = 16;
pub const PAIR_ATTEMPTS: usize = 10;

/// Builds two independently augmented views and their correspondences,
/// resampling the augmentations until at least 16 points are shared.
pub fn make_augmented_pair(cloud: &PointCloud, seed: u64, crop_fraction: f64) -> Result<AugmentedPair> {
    let n = cloud.len();
    if n < MIN_PAIR_POINTS {
        return Err(GeometryError::TooFewPoints {
            n,
            min: MIN_PAIR_POINTS,
        });
    }
    let mut found = 0;
    for attempt in 0..PAIR_ATTEMPTS as u64 {
        let aug_a = sample_augmentation(derive_seed(&[seed, attempt, 0]));
        let aug_b = sample_augmentation(derive_seed(&[seed, attempt, 1]));
        let (view_a, source_a) = apply_augmentation(cloud, &aug_a, crop_fraction)?;
        let (view_b, source_b) = apply_augmentation(cloud, &aug_b, crop_fraction)?;
        let mut pos_b = vec![usize::MAX; n];
        for (j, &s) in source_b.iter().enumerate() {
            pos_b[s] = j;
        }
        let matches: Vec<(usize, usize)> = source_a
            .iter()
            .enumerate()
            .filter(|&(_, &s)| pos_b[s] != usize::MAX)
            .map(|(i, &s)| (i, pos_b[s]))
            .collect();
        found = matches.len();
        if found >= MIN_MATCHES {
            return Ok(AugmentedPair {
                view_a,
                view_b,
                matches,
                aug_a,
                aug_b,
                source_a,
                source_b,
            });
        }
    }
    Err(GeometryError::TooFewMatches {
        found,
        min: MIN_MATCHES,
        attempts: PAIR_ATTEMPTS,
    })
}
