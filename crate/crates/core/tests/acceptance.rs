//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs the full default reproduction suite, so it takes minutes. The
//! process exits non-zero only when an exact or hard criterion fails; soft
//! trend checks are printed with their confidence intervals either way.

mod common;

use std::time::Instant;

use common::{
    brute_knn, ce, ce_oracle, check_case, info_nce_oracle, nce, network_grad_error, op_cases, random_cloud, regul,
    regul_oracle, sphere_points, tiny_domain, unit_rows,
};
use pointxfer::analysis::{gradient_norms, GradNormConfig};
use pointxfer::datasets::{Dataset, SplitFractions};
use pointxfer::experiments::{run_suite, Domains, Gate, SuiteConfig};
use pointxfer::geometry::{apply_augmentation, dot, knn, make_augmented_pair, norm, pca_normals, sample_augmentation, sub, Point3};
use pointxfer::models::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Architecture, BackboneKind, Model};
use pointxfer::seed::rng;
use pointxfer::transfer::{pretrain, Objective, Regularization, TrainConfig};
use rand::Rng;

struct Gatekeeper {
    hard_failed: bool,
}

impl Gatekeeper {
    fn report(&mut self, criterion: &str, hard: bool, passed: bool, detail: String) {
        let label = if passed { "PASS" } else { "FAIL" };
        let gate = if hard { "hard" } else { "soft" };
        println!("criterion {criterion}: {label} [{gate}] {detail}");
        if hard && !passed {
            self.hard_failed = true;
        }
    }
}

fn autodiff() -> (bool, String) {
    let t = Instant::now();
    let mut worst_op = 0.0f64;
    let mut failed = Vec::new();
    for case in op_cases() {
        let r = check_case(&case, 10, 1e-5);
        worst_op = worst_op.max(r.max_rel_error);
        if !r.passed {
            failed.push(case.name);
        }
    }
    let mut worst_net = 0.0f64;
    for kind in [BackboneKind::GlobalPointnet, BackboneKind::EdgeconvGraph] {
        worst_net = worst_net.max(network_grad_error(kind).0);
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = failed.is_empty() && worst_op <= 1e-5 && worst_net <= 1e-4 && secs < 120.0;
    (
        ok,
        format!("ops max_rel={worst_op:.2e} (<=1e-5) network max_rel={worst_net:.2e} (<=1e-4) time={secs:.1}s (<120s) failed={failed:?}"),
    )
}

fn loss_oracles() -> (bool, String) {
    let mut r = rng(0xACCE);
    let (mut ce_err, mut point_err, mut shape_err, mut reg_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let rows = r.random_range(1..9);
        let classes = r.random_range(2..12);
        let logits: Vec<Vec<f64>> = (0..rows).map(|_| (0..classes).map(|_| r.random_range(-10.0..10.0)).collect()).collect();
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let want = ce_oracle(&logits, &labels);
        ce_err = ce_err.max((ce(&logits, &labels) - want).abs() / want.abs().max(1.0));

        let m = r.random_range(1..12);
        let d = r.random_range(2..16);
        let tau = r.random_range(0.05..1.0);
        let a = unit_rows(&mut r, m, d);
        let k = unit_rows(&mut r, m, d);
        let want = info_nce_oracle(&a, &k, tau);
        point_err = point_err.max((nce(&a, &k, tau, false) - want).abs() / want.abs().max(1.0));
        shape_err = shape_err.max((nce(&a, &k, tau, true) - want).abs() / want.abs().max(1.0));

        let n = r.random_range(1..20);
        let pred: Vec<[f64; 3]> = (0..n)
            .map(|_| [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)])
            .collect();
        let gt: Vec<[f64; 3]> = unit_rows(&mut r, n, 3).into_iter().map(|v| [v[0], v[1], v[2]]).collect();
        reg_err = reg_err.max((regul(&pred, &gt) - regul_oracle(&pred, &gt)).abs());
    }
    let ln10 = ce(&vec![vec![0.0; 10]; 4], &[0, 3, 7, 9]);
    let same = vec![vec![1.0, 0.0, 0.0]; 4];
    let ln4 = nce(&same, &same, 0.1, false);
    let worst = ce_err.max(point_err).max(shape_err).max(reg_err);
    let ok = worst <= 1e-6 && (ln10 - std::f64::consts::LN_10).abs() <= 1e-6 && (ln4 - 4f64.ln()).abs() <= 1e-6;
    (
        ok,
        format!(
            "ce={ce_err:.1e} point_nce={point_err:.1e} shape_nce={shape_err:.1e} regul={reg_err:.1e} (<=1e-6) uniform_ce={ln10:.6} degenerate_nce={ln4:.6}"
        ),
    )
}

fn geometry() -> (bool, String) {
    let mut knn_ok = true;
    for n in 2..=256usize {
        let cloud = random_cloud(n, n as u64);
        for (k, exclude) in [(1, true), ((n - 1).min(8), true), (n - 1, true), (n, false)] {
            knn_ok &= knn(&cloud.points, k, exclude).unwrap() == brute_knn(&cloud.points, k, exclude);
        }
    }

    let sphere = sphere_points(4096, 5);
    let normals = pca_normals(&sphere, 30).unwrap().normals;
    let sphere_cos = sphere.iter().zip(&normals).map(|(p, n)| dot(*p, *n).abs()).sum::<f64>() / 4096.0;

    let mut r = rng(6);
    let mut plane_err = 0.0f64;
    for z in [0.0, 0.7, -2.0] {
        let pts: Vec<Point3> = (0..500).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), z]).collect();
        for n in pca_normals(&pts, 30).unwrap().normals {
            plane_err = plane_err.max(n[0].abs()).max(n[1].abs()).max((n[2].abs() - 1.0).abs());
        }
    }

    let mut round_trip = 0.0f64;
    let cloud = random_cloud(300, 8);
    for seed in 0..50 {
        let aug = sample_augmentation(seed);
        let (view, source) = apply_augmentation(&cloud, &aug, 0.6).unwrap();
        for (p, &s) in view.points.iter().zip(&source) {
            round_trip = round_trip.max(norm(sub(aug.invert_point(*p), cloud.points[s])));
        }
    }

    let (mut matches, mut identical) = (0usize, 0usize);
    for seed in 0..40 {
        let pair = make_augmented_pair(&random_cloud(256, 100 + seed), seed, 0.5).unwrap();
        for &(i, j) in &pair.matches {
            matches += 1;
            let same_source = pair.source_a[i] == pair.source_b[j];
            let a = pair.aug_a.invert_point(pair.view_a.points[i]);
            let b = pair.aug_b.invert_point(pair.view_b.points[j]);
            identical += usize::from(same_source && norm(sub(a, b)) <= 1e-5);
        }
    }

    let ok = knn_ok && sphere_cos >= 0.99 && plane_err <= 1e-5 && round_trip <= 1e-5 && matches > 0 && identical == matches;
    (
        ok,
        format!(
            "knn_all_n<=256={knn_ok} sphere_mean_cos={sphere_cos:.4} (>=0.99) plane_err={plane_err:.1e} (<=1e-5) round_trip={round_trip:.1e} (<=1e-5) pair_identity={identical}/{matches}"
        ),
    )
}

fn small_arch() -> Architecture {
    let mut a = Architecture::new(BackboneKind::GlobalPointnet, 3);
    a.widths = vec![16, 32, 64];
    a.classifier_hidden = 32;
    a.decoder_widths = vec![32, 16];
    a
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_domain("TINY", &[0, 2, 5], 6, 128, 1);
    let d = Dataset::generate(&spec, SplitFractions::default()).unwrap();
    let again = Dataset::generate(&spec, SplitFractions::default()).unwrap();
    let data_rerun = d.manifest == again.manifest
        && d.samples.iter().zip(&again.samples).all(|(a, b)| a.cloud.points == b.cloud.points);

    let mut reruns = true;
    for objective in [Objective::Supervised, Objective::PointContrastive, Objective::ShapeContrastive] {
        let cfg = TrainConfig {
            objective,
            epochs: 2,
            points: 64,
            batch_size: 8,
            pair_cap: 64,
            regularize: Some(Regularization::default()),
            ..TrainConfig::default()
        };
        let a = pretrain(Model::new(small_arch(), 4), &d, &cfg).unwrap();
        let b = pretrain(Model::new(small_arch(), 4), &d, &cfg).unwrap();
        reruns &= encode_checkpoint(&a.model) == encode_checkpoint(&b.model);
    }

    let model = Model::<f32>::new(small_arch(), 7);
    let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save_checkpoint(&model, &p1).unwrap();
    save_checkpoint(&load_checkpoint(&p1).unwrap(), &p2).unwrap();
    let round_trip = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let bytes = encode_checkpoint(&model);
    let covered = bytes.len() - serde_json::to_vec(&model.provenance).unwrap().len() - 8;
    let mut r = rng(15);
    let trials = 200;
    let mut detected = 0;
    for _ in 0..trials {
        let mut bad = bytes.clone();
        let i = r.random_range(12..covered);
        bad[i] ^= 1 << r.random_range(0..8);
        detected += usize::from(decode_checkpoint(&bad).is_err());
    }

    let ok = data_rerun && reruns && round_trip && detected == trials;
    (
        ok,
        format!("save_load_save_identical={round_trip} rerun_identical={reruns} data_rerun_identical={data_rerun} corruption_detected={detected}/{trials}"),
    )
}

fn grad_bookkeeping() -> (bool, String) {
    let d = Dataset::generate(&tiny_domain("TINY", &[0, 3, 5, 7], 8, 128, 21), SplitFractions::default()).unwrap();
    let mut worst = 0.0f64;
    let mut untouched = true;
    for kind in [BackboneKind::GlobalPointnet, BackboneKind::EdgeconvGraph] {
        let mut arch = Architecture::new(kind, 4);
        arch.widths = vec![16, 24, 32, 40];
        arch.classifier_hidden = 32;
        let model = Model::new(arch, 1);
        let before = encode_checkpoint(&model);
        let cfg = GradNormConfig {
            batches: 1,
            batch_size: 8,
            points: 64,
            seed: 3,
        };
        let rep = gradient_norms(&model, &d, &cfg).unwrap();
        untouched &= encode_checkpoint(&model) == before;
        let sum: f64 = rep.layers.iter().map(|l| l.grad_l2 * l.grad_l2).sum();
        let total = rep.total_l2 * rep.total_l2;
        worst = worst.max((sum - total).abs() / total);
    }
    (worst <= 1e-6 && untouched, format!("sum_sq_rel_err={worst:.1e} (<=1e-6) checkpoint_untouched={untouched}"))
}

fn main() {
    let mut gate = Gatekeeper { hard_failed: false };
    for (criterion, check) in [
        ("1", autodiff as fn() -> (bool, String)),
        ("2", loss_oracles),
        ("3", geometry),
        ("4", determinism),
        ("5", grad_bookkeeping),
    ] {
        let (ok, detail) = check();
        gate.report(criterion, true, ok, detail);
    }

    let cfg = SuiteConfig::default();
    let start = Instant::now();
    let data = Domains::generate(&cfg).expect("domain generation");
    let report = run_suite(&cfg, &data);
    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("reproduce");
    let written = report.write_to(&out).is_ok();
    let wall = start.elapsed().as_secs_f64();

    let probing = report.probing_seconds();
    for v in report.verdicts() {
        let value = v.value.map_or("none".into(), |x| format!("{x:.4}"));
        let ci = v.ci.map_or("none".into(), |(lo, hi)| format!("[{lo:.4}, {hi:.4}]"));
        let mut detail = format!("{} = {value} ci95={ci} threshold={} n={}", v.statistic, v.threshold, v.n);
        let mut passed = v.passed == Some(true);
        if v.criterion == "6" {
            passed &= probing <= 600.0;
            detail.push_str(&format!(" runtime={probing:.1}s (<=600s)"));
        }
        gate.report(v.criterion, v.gate == Gate::Hard, passed, detail);
    }

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap_or_default();
    let rows = ["6", "7a", "7b", "8", "9a", "9b"]
        .iter()
        .all(|c| summary.lines().any(|l| l.starts_with(&format!("{c},"))));
    let failures = report.failures();
    gate.report(
        "10",
        true,
        written && rows && wall < 3600.0,
        format!(
            "suite_time={wall:.1}s (<3600s) summary_rows_6_to_9={rows} sub_run_failures={} out={}",
            failures.len(),
            out.display()
        ),
    );
    for f in failures {
        println!("  sub-run failure: {f}");
    }

    if gate.hard_failed {
        std::process::exit(1);
    }
}
