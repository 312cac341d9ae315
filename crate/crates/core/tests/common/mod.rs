//! Shared oracles for the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

use pointxfer::datasets::DomainSpec;
use pointxfer::geometry::PointCloud;
use pointxfer::models::{Architecture, BackboneKind, Model, PointBatch};
use pointxfer::objectives::{cross_entropy, normal_regul_loss, point_info_nce, shape_info_nce, total_loss};
use pointxfer::seed::rng;
use pointxfer::tensor::{grad_check, CheckReport, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type OpFn = fn(&mut Tape<f64>, Var) -> Result<Var>;

/// One differentiable primitive: the input shape, how to draw a point where
/// it is smooth, and the op reduced to a scalar.
pub struct OpCase {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub sample: fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    pub f: OpFn,
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

fn positive(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.5..2.5)).collect()
}

/// Magnitudes in [0.2, 2] with random signs: away from the kinks of relu
/// and abs.
fn off_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.random_range(0.2..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values spaced at least 0.1 apart, shuffled, so every argmax is
/// unique and stable under the finite-difference step.
fn spread(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + r.random_range(0.0..0.05)).collect();
    v.shuffle(r);
    v
}

/// `Σ out ∘ w` with fixed, non-uniform `w`, so every output coordinate
/// contributes a distinct weight.
pub fn weighted(t: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin() + 0.1).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(out, w)?;
    Ok(t.sum_all(p))
}

fn constant(t: &mut Tape<f64>, shape: &[usize], salt: f64) -> Result<Var> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.3 + salt).cos()).collect();
    Ok(t.constant(Tensor::new(shape.to_vec(), v)?))
}

fn halves(t: &mut Tape<f64>, x: Var) -> Result<(Var, Var)> {
    Ok((t.slice_rows(x, 0, 1)?, t.slice_rows(x, 1, 1)?))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shape: &[7, 3],
            sample: uniform,
            f: |t, x| {
                let a = t.slice_rows(x, 0, 3)?;
                let b = t.slice_rows(x, 3, 3)?;
                let ab = t.matmul(a, b)?;
                let c = t.slice_rows(x, 6, 1)?;
                let abc = t.matmul(c, ab)?;
                weighted(t, abc)
            },
        },
        OpCase {
            name: "batch_matmul",
            shape: &[2, 3, 3],
            sample: uniform,
            f: |t, x| {
                let c = constant(t, &[2, 3, 2], 0.4)?;
                let y = t.batch_matmul(x, c)?;
                let xt = t.reshape(x, &[2, 3, 3])?;
                let z = t.batch_matmul(xt, y)?;
                weighted(t, z)
            },
        },
        OpCase {
            name: "add",
            shape: &[2, 5],
            sample: uniform,
            f: |t, x| {
                let (a, b) = halves(t, x)?;
                let y = t.add(a, b)?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "sub",
            shape: &[2, 5],
            sample: uniform,
            f: |t, x| {
                let (a, b) = halves(t, x)?;
                let y = t.sub(a, b)?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "mul",
            shape: &[2, 5],
            sample: uniform,
            f: |t, x| {
                let (a, b) = halves(t, x)?;
                let y = t.mul(a, b)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "div",
            shape: &[2, 5],
            sample: positive,
            f: |t, x| {
                let (a, b) = halves(t, x)?;
                let y = t.div(a, b)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "add_scalar",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let y = t.add_scalar(x, 0.7);
                let y = t.mul(y, y)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "mul_scalar",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let y = t.mul_scalar(x, -1.7);
                weighted(t, y)
            },
        },
        OpCase {
            name: "pow_scalar",
            shape: &[3, 4],
            sample: positive,
            f: |t, x| {
                let y = t.pow_scalar(x, 2.5)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "neg",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let y = t.neg(x);
                let y = t.mul(y, x)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "relu",
            shape: &[3, 4],
            sample: off_zero,
            f: |t, x| {
                let y = t.relu(x);
                weighted(t, y)
            },
        },
        OpCase {
            name: "exp",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let y = t.exp(x);
                weighted(t, y)
            },
        },
        OpCase {
            name: "log",
            shape: &[3, 4],
            sample: positive,
            f: |t, x| {
                let y = t.log(x)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "abs",
            shape: &[3, 4],
            sample: off_zero,
            f: |t, x| {
                let y = t.abs(x);
                weighted(t, y)
            },
        },
        OpCase {
            name: "sum",
            shape: &[3, 4, 2],
            sample: uniform,
            f: |t, x| {
                let a = t.sum(x, 1)?;
                let b = t.sum(x, 0)?;
                let (wa, wb) = (weighted(t, a)?, weighted(t, b)?);
                let y = t.mul(wa, wb)?;
                Ok(y)
            },
        },
        OpCase {
            name: "mean",
            shape: &[3, 4, 2],
            sample: uniform,
            f: |t, x| {
                let a = t.mean(x, 2)?;
                let b = t.mean(x, 1)?;
                let (wa, wb) = (weighted(t, a)?, weighted(t, b)?);
                t.mul(wa, wb)
            },
        },
        OpCase {
            name: "sum_all_mean_all",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let sq = t.mul(x, x)?;
                let a = t.sum_all(sq);
                let b = t.mean_all(x);
                t.mul(a, b)
            },
        },
        OpCase {
            name: "max",
            shape: &[4, 6],
            sample: spread,
            f: |t, x| {
                let a = t.max(x, 1)?;
                let b = t.max(x, 0)?;
                let (wa, wb) = (weighted(t, a)?, weighted(t, b)?);
                t.add(wa, wb)
            },
        },
        OpCase {
            name: "log_sum_exp",
            shape: &[3, 5],
            sample: uniform,
            f: |t, x| {
                let a = t.log_sum_exp(x, 1)?;
                let b = t.log_sum_exp(x, 0)?;
                let (wa, wb) = (weighted(t, a)?, weighted(t, b)?);
                t.add(wa, wb)
            },
        },
        OpCase {
            name: "gather_rows",
            shape: &[5, 3],
            sample: uniform,
            f: |t, x| {
                let y = t.gather_rows(x, &[4, 0, 0, 2, 4, 4, 1])?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "concat",
            shape: &[4, 3],
            sample: uniform,
            f: |t, x| {
                let a = t.slice_rows(x, 0, 2)?;
                let b = t.slice_rows(x, 2, 2)?;
                let rows = t.concat(&[b, a, b], 0)?;
                let cols = t.concat(&[a, b], 1)?;
                let (wr, wc) = (weighted(t, rows)?, weighted(t, cols)?);
                let sq = t.mul(wc, wc)?;
                t.add(wr, sq)
            },
        },
        OpCase {
            name: "normalize_rows",
            shape: &[4, 3],
            sample: off_zero,
            f: |t, x| {
                let y = t.normalize_rows(x)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "transpose",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let y = t.transpose(x)?;
                let y = t.matmul(y, x)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "reshape",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let y = t.reshape(x, &[2, 6])?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "add_bias",
            shape: &[4, 3],
            sample: uniform,
            f: |t, x| {
                let rows = t.slice_rows(x, 0, 3)?;
                let b = t.slice_rows(x, 3, 1)?;
                let b = t.reshape(b, &[3])?;
                let y = t.add_bias(rows, b)?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            },
        },
        OpCase {
            name: "slice_rows",
            shape: &[5, 2],
            sample: uniform,
            f: |t, x| {
                let y = t.slice_rows(x, 1, 3)?;
                let y = t.exp(y);
                weighted(t, y)
            },
        },
        OpCase {
            name: "cross_entropy",
            shape: &[4, 5],
            sample: uniform,
            f: |t, x| Ok(cross_entropy(t, x, &[0, 3, 4, 3]).expect("valid labels")),
        },
        OpCase {
            name: "point_info_nce",
            shape: &[8, 8],
            sample: uniform,
            f: |t, x| {
                let u = t.normalize_rows(x)?;
                let a = t.slice_rows(u, 0, 4)?;
                let k = t.slice_rows(u, 4, 4)?;
                Ok(point_info_nce(t, a, k, 0.5).expect("valid batch"))
            },
        },
        OpCase {
            name: "shape_info_nce",
            shape: &[8, 8],
            sample: uniform,
            f: |t, x| {
                let a = t.slice_rows(x, 0, 4)?;
                let k = t.slice_rows(x, 4, 4)?;
                Ok(shape_info_nce(t, a, k, 1.0).expect("valid batch"))
            },
        },
        OpCase {
            name: "normal_regul_loss",
            shape: &[6, 3],
            sample: off_zero,
            f: |t, x| {
                let gt = constant(t, &[6, 3], 0.9)?;
                let gt = t.normalize_rows(gt)?;
                Ok(normal_regul_loss(t, x, gt).expect("valid shapes"))
            },
        },
        OpCase {
            name: "total_loss",
            shape: &[3, 4],
            sample: uniform,
            f: |t, x| {
                let base = t.slice_rows(x, 0, 1)?;
                let base = weighted(t, base)?;
                let r1 = t.slice_rows(x, 1, 1)?;
                let r1 = t.mean_all(r1);
                let r2 = t.slice_rows(x, 2, 1)?;
                let r2 = t.exp(r2);
                let r2 = t.mean_all(r2);
                let r1 = t.reshape(r1, &[1])?;
                let r2 = t.reshape(r2, &[1])?;
                let base = t.reshape(base, &[1])?;
                Ok(total_loss(t, base, &[r1, r2], 0.7).expect("valid terms"))
            },
        },
    ]
}

/// Runs `case` at `instances` random points; returns the worst report.
pub fn check_case(case: &OpCase, instances: usize, tolerance: f64) -> CheckReport {
    let mut r = rng(0xC0DE ^ case.name.len() as u64);
    let n: usize = case.shape.iter().product();
    let mut worst: Option<CheckReport> = None;
    for _ in 0..instances {
        let point = Tensor::new(case.shape.to_vec(), (case.sample)(&mut r, n)).expect("shape");
        let rep = grad_check(case.f, &point, 1e-5, tolerance);
        if !rep.passed {
            return rep;
        }
        if worst.as_ref().is_none_or(|w| rep.max_rel_error > w.max_rel_error) {
            worst = Some(rep);
        }
    }
    worst.expect("at least one instance")
}

// ---- loss oracles in plain f64 loops ----

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &l)| logsumexp(row) - row[l])
        .sum::<f64>()
        / labels.len() as f64
}

pub fn info_nce_oracle(anchors: &[Vec<f64>], keys: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = anchors.len();
    (0..m)
        .map(|i| {
            let sims: Vec<f64> = keys.iter().map(|k| dot(&anchors[i], k) / tau).collect();
            -(sims[i] - logsumexp(&sims))
        })
        .sum::<f64>()
        / m as f64
}

pub fn regul_oracle(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if n < 1e-8 {
                return 1.0;
            }
            1.0 - ((p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / n).abs()
        })
        .sum::<f64>()
        / pred.len() as f64
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), rows[0].len()], &flat).expect("rectangular")
}

pub fn unit_rows(r: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

// ---- losses evaluated through the tape ----

pub fn ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut t = Tape::<f64>::new();
    let x = t.constant(tensor(logits));
    let y = cross_entropy(&mut t, x, labels).unwrap();
    t.item(y)
}

pub fn nce(anchors: &[Vec<f64>], keys: &[Vec<f64>], tau: f64, shape_level: bool) -> f64 {
    let mut t = Tape::<f64>::new();
    let a = t.constant(tensor(anchors));
    let k = t.constant(tensor(keys));
    let y = if shape_level {
        shape_info_nce(&mut t, a, k, tau)
    } else {
        point_info_nce(&mut t, a, k, tau)
    };
    t.item(y.unwrap())
}

pub fn regul(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let rows = |v: &[[f64; 3]]| v.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let mut t = Tape::<f64>::new();
    let p = t.constant(tensor(&rows(pred)));
    let g = t.constant(tensor(&rows(gt)));
    let y = normal_regul_loss(&mut t, p, g).unwrap();
    t.item(y)
}

// ---- geometry helpers ----

pub fn brute_knn(points: &[[f64; 3]], k: usize, exclude_self: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        let mut cand: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| !(exclude_self && *j == i))
            .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(cand.iter().take(k).map(|c| c.1));
    }
    out
}

/// Uniform points on the unit sphere (Gaussian directions).
pub fn sphere_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    (0..n)
        .map(|_| loop {
            let v: [f64; 3] = [
                StandardNormal.sample(&mut r),
                StandardNormal.sample(&mut r),
                StandardNormal.sample(&mut r),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        })
        .collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    PointCloud::new(
        (0..n)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect(),
    )
}

/// Small canonical-pose domain over a subset of the source classes.
pub fn tiny_domain(name: &str, classes: &[usize], per_class: usize, points: usize, seed: u64) -> DomainSpec {
    let all = DomainSpec::source(1, 0).classes;
    DomainSpec {
        name: name.into(),
        classes: classes.iter().map(|&i| all[i].clone()).collect(),
        points_per_cloud: points,
        samples_per_class: per_class,
        seed,
        orientation: pointxfer::datasets::Orientation::Canonical,
        ..DomainSpec::source(per_class, seed)
    }
}

// ---- end-to-end network gradient check ----

/// Small three-block network with a classifier and two normal heads.
pub fn tiny_model(kind: BackboneKind) -> Model<f64> {
    let mut arch = Architecture::new(kind, 3);
    arch.widths = vec![6, 8, 10];
    arch.k = 4;
    arch.classifier_hidden = 8;
    arch.decoder_widths = vec![8, 4];
    arch.normal_layers = vec![0, 1];
    Model::<f32>::new(arch, 7).cast::<f64>()
}

/// Cross-entropy plus the normal regularizer on a batch of two clouds.
pub fn network_loss(model: &Model<f64>, clouds: &[&PointCloud], normals: &Tensor<f64>, tape: &mut Tape<f64>) -> f64 {
    let bound = model.bind(tape, |_| true);
    let batch = PointBatch::from_clouds(clouds).unwrap();
    let out = model.backbone(tape, &bound, &batch).unwrap();
    let logits = model.classify(tape, &bound, out.global).unwrap();
    let ce = cross_entropy(tape, logits, &[0, 2]).unwrap();
    let gt = tape.constant(normals.clone());
    let mut regul = Vec::new();
    for depth in [0, 1] {
        let pred = model.predict_normals(tape, &bound, &out, depth).unwrap();
        regul.push(normal_regul_loss(tape, pred, gt).unwrap());
    }
    let loss = total_loss(tape, ce, &regul, 0.5).unwrap();
    tape.backward(loss).unwrap();
    tape.item(loss)
}

/// Worst relative error between tape and central-difference gradients over
/// every parameter of a small network trained with CE plus the normal
/// regularizer, and the parameter where it occurred.
pub fn network_grad_error(kind: BackboneKind) -> (f64, String) {
    let a = random_cloud(32, 11);
    let b = random_cloud(32, 12);
    let normals: Vec<f64> = sphere_points(64, 13).into_iter().flatten().collect();
    let normals = Tensor::from_f64(&[64, 3], &normals).unwrap();
    let model = tiny_model(kind);

    let mut tape = Tape::new();
    network_loss(&model, &[&a, &b], &normals, &mut tape);
    let mut analytic: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, g) in tape.param_grads() {
        analytic[id].copy_from_slice(g);
    }

    let step = 1e-6;
    let eval = |m: &Model<f64>| network_loss(m, &[&a, &b], &normals, &mut Tape::new());
    let mut worst = (0.0f64, String::new());
    let mut perturbed = model.clone();
    for (pi, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let orig = perturbed.params[pi].value.data()[j];
            perturbed.params[pi].value.data_mut()[j] = orig + step;
            let fp = eval(&perturbed);
            perturbed.params[pi].value.data_mut()[j] = orig - step;
            let fm = eval(&perturbed);
            perturbed.params[pi].value.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (numeric - grads[j]).abs() / 1f64.max(numeric.abs()).max(grads[j].abs());
            if rel > worst.0 {
                worst = (rel, format!("{}[{j}]", model.params[pi].name));
            }
        }
    }
    worst
}
