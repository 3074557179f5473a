//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers as arguments to run a subset
//! (`cargo test -p mvk-core --test acceptance -- 1 8`). A failing criterion is reported but
//! only turns the exit status nonzero when `MVK_ACCEPTANCE_STRICT=1`.

use std::time::{Duration, Instant};

use mvk_core::diffusion::KernelAudit;
use mvk_core::experiment::{
    run_brownian_consensus, run_custom, run_flower_multiview, run_helix_singleview, BrownianExperimentConfig,
    CustomExperimentConfig, FlowerExperimentConfig, HelixExperimentConfig,
};
use mvk_core::itosim::{generate_helix, helix_tangent, rng_from_seed};
use mvk_core::localcov::{numerical_rank, pseudo_inverse, LocalCovariance};
use mvk_core::mahalanobis::{mahalanobis_inv, mahalanobis_pinv};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn linear_map_invariance() -> (bool, String) {
    let mut rng = rng_from_seed(11);
    let a = loop {
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let sv = a.clone().svd(false, false).singular_values;
        if sv.min() > 0.1 {
            break a;
        }
    };
    let spd = |rng: &mut rand_chacha::ChaCha8Rng| {
        let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(2, 2) * 0.2
    };
    let mut worst: f64 = 0.0;
    for p in 0..100 {
        let ti = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let tj = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let (cti, ctj) = (spd(&mut rng), spd(&mut rng));
        let cxi = &a * &cti * a.transpose();
        let cxj = &a * &ctj * a.transpose();
        let (xi, xj) = (&a * &ti, &a * &tj);
        let li = LocalCovariance::new(cxi, 2 * p, 0).unwrap();
        let lj = LocalCovariance::new(cxj, 2 * p + 1, 0).unwrap();
        let gamma = 1e-10 * li.largest_singular_value().max(lj.largest_singular_value());
        let ambient = mahalanobis_pinv(xi.as_slice(), xj.as_slice(), &li, &lj, gamma).unwrap();
        let intrinsic = mahalanobis_inv(
            ti.as_slice(),
            tj.as_slice(),
            &LocalCovariance::new(cti, 2 * p, 0).unwrap(),
            &LocalCovariance::new(ctj, 2 * p + 1, 0).unwrap(),
        )
        .unwrap();
        worst = worst.max((ambient - intrinsic).abs() / intrinsic);
    }
    (worst < 1e-8, format!("max relative error {worst:.2e} (< 1e-8)"))
}

fn fourth_order_decay() -> (bool, String) {
    let t0 = 1.0;
    let cov = |t: f64| {
        let j = helix_tangent(t);
        let c = DMatrix::from_fn(3, 3, |r, s| j[r] * j[s]);
        LocalCovariance::new(c, 0, 0).unwrap()
    };
    let ratios: Vec<f64> = (2..=8)
        .map(|k| {
            let phi = 2f64.powi(-k);
            let (ci, cj) = (cov(t0), cov(t0 + phi));
            let gamma = 1e-10 * ci.largest_singular_value().max(cj.largest_singular_value());
            let xi = generate_helix(t0);
            let xj = generate_helix(t0 + phi);
            let d = mahalanobis_pinv(xi.as_slice(), xj.as_slice(), &ci, &cj, gamma).unwrap();
            (d - phi * phi).abs() / phi.powi(4)
        })
        .collect();
    let spread = ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min);
    (spread < 10.0, format!("|Δd|/φ⁴ = {}, spread {spread:.2} (< 10)", fmt(&ratios)))
}

fn q_factor_trend(audits: &mut Vec<KernelAudit>) -> (bool, String) {
    let cfg = BrownianExperimentConfig {
        n: 500,
        views: 7,
        n_c: 2000,
        dt: 0.005,
        epsilon: 0.02,
        repetitions: 10,
        ..Default::default()
    };
    let out = run_brownian_consensus(&cfg).unwrap();
    audits.extend(out.audits);
    let q = &out.q_by_views;
    let rho = out.spearman.unwrap_or(f64::NAN);
    let monotone = q.windows(2).all(|w| w[1] < w[0]);
    let passed = q[6] < q[0] && rho <= -0.8;
    (
        passed,
        format!(
            "mean Q(ζ=1..7) = {}, Q(7) < Q(1): {}, Spearman {rho:.3} (<= -0.8), stepwise monotone: {monotone}",
            fmt(q),
            q[6] < q[0]
        ),
    )
}

fn spectral_lines(audits: &mut Vec<KernelAudit>) -> (bool, String) {
    const REFERENCE: [f64; 8] = [0.0, 1.0, 1.0, 2.0, 4.0, 4.0, 5.0, 5.0];
    let cfg = BrownianExperimentConfig {
        spectral_lines: 8,
        ..Default::default()
    };
    let out = run_brownian_consensus(&cfg).unwrap();
    audits.extend(out.audits);
    let gt = out.ground_truth_lines.unwrap();
    let est = out.estimated_lines.unwrap();
    let gt_ok = gt.iter().zip(REFERENCE).all(|(a, b)| (a - b).abs() <= 0.5);
    let est_ok = est.iter().zip(REFERENCE).all(|(a, b)| (a - b).abs() <= 1.0);
    (
        gt_ok && est_ok,
        format!(
            "ground truth {} within ±0.5: {gt_ok}; ζ=7 estimate {} within ±1.0: {est_ok}",
            fmt(&gt),
            fmt(&est)
        ),
    )
}

fn error_curve_trend() -> (bool, String) {
    let curves = run_helix_singleview(&HelixExperimentConfig::default()).unwrap();
    let errors: Vec<Vec<f64>> = curves.iter().map(|c| c.points.iter().map(|p| p.mean_error).collect()).collect();
    let by_density = (0..errors[0].len()).all(|r| errors.windows(2).all(|w| w[1][r] < w[0][r]));
    let by_radius = errors.iter().all(|e| e.windows(2).all(|w| w[1] <= w[0]));
    let rows: Vec<String> = curves
        .iter()
        .zip(&errors)
        .map(|(c, e)| format!("n={} {}", c.n, fmt(e)))
        .collect();
    (
        by_density && by_radius,
        format!(
            "radii [0.25, 0.5, 1.0]: {}; decreasing in density: {by_density}, non-increasing in radius: {by_radius}",
            rows.join(", ")
        ),
    )
}

fn flower_embedding(audits: &mut Vec<KernelAudit>) -> (bool, String) {
    let out = run_flower_multiview(&FlowerExperimentConfig::default()).unwrap();
    audits.extend(out.audits);
    let mv = &out.multiview.stats;
    let residual = mv.circle_fit_residual.unwrap_or(f64::INFINITY);
    let others: Vec<f64> = out
        .single_views
        .iter()
        .chain(out.concatenated.iter())
        .map(|e| e.stats.max_angular_gap)
        .collect();
    let gaps_ok = others.iter().all(|&g| g > mv.max_angular_gap);
    let passed = residual < 0.05 && mv.angle_correlation > 0.99 && gaps_ok;
    (
        passed,
        format!(
            "multi-view residual {residual:.4} (< 0.05), angle correlation {:.4} (> 0.99), gap {:.3}; \
             single-view gaps {}, concatenated gap {:.3}; all larger: {gaps_ok}",
            mv.angle_correlation,
            mv.max_angular_gap,
            fmt(&others[..others.len() - 1]),
            others[others.len() - 1]
        ),
    )
}

fn kernel_invariants(audits: &mut Vec<KernelAudit>) -> (bool, String) {
    let custom = run_custom(&CustomExperimentConfig::default()).unwrap();
    audits.extend(custom.audits);
    let failing: Vec<&KernelAudit> = audits.iter().filter(|a| !a.passes()).collect();
    let worst_row = audits.iter().map(|a| a.max_row_sum_error).fold(0.0, f64::max);
    let worst_lambda = audits.iter().map(|a| a.lambda0_error).fold(0.0, f64::max);
    let mut detail = format!(
        "{} kernels audited, worst row-sum error {worst_row:.1e}, worst |λ₀ − 1| {worst_lambda:.1e}",
        audits.len()
    );
    if let Some(a) = failing.first() {
        detail.push_str(&format!("; {} failing, first: {a:?}", failing.len()));
    }
    (failing.is_empty(), detail)
}

fn oracle_equivalence() -> (bool, String) {
    let mut rng = rng_from_seed(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(1..=8);
        let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let c = &b * b.transpose() + DMatrix::identity(m, m) * 0.5;
        let pinv = pseudo_inverse(&c, 0.0).unwrap();
        let inv = c.clone().try_inverse().unwrap();
        worst = worst.max((pinv - inv).amax());
    }
    let diag_cases: [(&[f64], f64, usize); 5] = [
        (&[3.0, 2.0, 1.0, 0.0], 1e-9, 3),
        (&[1.0, 1e-3, 1e-12], 1e-6, 2),
        (&[0.0, 0.0], 1e-9, 0),
        (&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25, 0.125], 0.2, 7),
        (&[1.0, 1.0, 1.0], 1.0, 0),
    ];
    let ranks_ok = diag_cases
        .iter()
        .all(|(d, g, r)| numerical_rank(&DMatrix::from_diagonal(&DVector::from_row_slice(d)), *g) == *r);
    (
        worst < 1e-9 && ranks_ok,
        format!("max |pinv − inv| {worst:.2e} (< 1e-9) over 50 SPD matrices; diagonal ranks exact: {ranks_ok}"),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut audits = Vec::new();
    let mut outcomes = Vec::new();
    let mut run = |id: u32, name: &'static str, limit: Option<Duration>, f: &mut dyn FnMut(&mut Vec<KernelAudit>) -> (bool, String)| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let (ok, detail) = f(&mut audits);
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed < l);
        outcomes.push(Outcome {
            id,
            name,
            passed: ok && in_time,
            detail: match limit {
                Some(l) => format!("{detail}; runtime {:.1} s (< {} s)", elapsed.as_secs_f64(), l.as_secs()),
                None => format!("{detail}; runtime {:.1} s", elapsed.as_secs_f64()),
            },
            elapsed,
        });
        let o = outcomes.last().expect("just pushed");
        println!(
            "[{}] criterion {} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
    };
    let secs = |s| Some(Duration::from_secs(s));
    run(1, "linear-map Mahalanobis invariance", secs(1), &mut |_| linear_map_invariance());
    run(2, "fourth-order decay", secs(1), &mut |_| fourth_order_decay());
    run(3, "Q-factor trend over views", secs(300), &mut q_factor_trend);
    run(4, "Fokker-Planck spectral lines", secs(900), &mut spectral_lines);
    run(5, "covariance-radius error trend", secs(120), &mut |_| error_curve_trend());
    run(6, "flower multi-view embedding", secs(300), &mut flower_embedding);
    run(7, "kernel and stochasticity invariants", None, &mut kernel_invariants);
    run(8, "pseudoinverse and rank oracles", secs(60), &mut |_| oracle_equivalence());

    let passed = outcomes.iter().filter(|o| o.passed).count();
    let total: f64 = outcomes.iter().map(|o| o.elapsed.as_secs_f64()).sum();
    println!("acceptance: {passed}/{} criteria passed in {total:.1} s", outcomes.len());
    let strict = std::env::var("MVK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < outcomes.len() {
        std::process::exit(1);
    }
}
