use std::fs;
use std::path::Path;

use mvk_core::dataset::{load_dataset, read_matrix_csv, save_dataset, write_matrix_csv};
use mvk_core::diffusion::{
    audit_kernel, diffusion_map, kernel_spectrum, spectral_lines, write_eigenvalues_json, write_embedding_csv,
    KernelAudit,
};
use mvk_core::experiment::{
    run_brownian_consensus, run_custom, run_flower_multiview, run_helix_singleview, shape_stats,
    BrownianExperimentConfig, CustomExperimentConfig, EmbeddedKernel, FlowerExperimentConfig, FusionMode,
    HelixExperimentConfig,
};
use mvk_core::itosim::{generate_flower_dataset, generate_helix_dataset, BrownianConsensusData, BrownianConsensusSpec};
use mvk_core::metrics::{
    distance_error_curve, ground_truth_kernel, q_factor, write_error_curve_csv, ErrorCurveOptions, EvaluationReport,
};
use mvk_core::multiview::{
    algorithm2_kernel, read_kernel_csv, read_kernel_mvk1, write_kernel_csv, write_kernel_mvk1, Algorithm2Config,
    UnmatchedFloor,
};
use mvk_core::{GammaRule, KernelConvention, KernelMatrix, MultiViewDataset, NeighborhoodSpec};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentName, RunConfig};
use crate::output::Artifacts;
use crate::{CliError, DatasetKind};

const DEFAULT_EPSILON: f64 = 1.0;
const DEFAULT_NEIGHBORS: usize = 20;
const DEFAULT_LINES: usize = 8;

/// Runs `body` against a fresh artifact set and writes the report; removes partial output on failure.
fn with_artifacts(
    cfg: &RunConfig,
    command: &str,
    body: impl FnOnce(&mut Artifacts) -> Result<EvaluationReport, CliError>,
) -> Result<(), CliError> {
    let mut art = Artifacts::create(&cfg.out_dir())?;
    let result = body(&mut art).and_then(|ev| art.finish(command, ev));
    match result {
        Ok(path) => {
            println!("{}", path.display());
            Ok(())
        }
        Err(e) => {
            art.cleanup();
            Err(e)
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn echo(cfg: &RunConfig, resolved: Value) -> Value {
    json!({ "run": to_value(cfg), "resolved": resolved })
}

fn gamma_rule(cfg: &RunConfig, default: GammaRule) -> GammaRule {
    cfg.gamma.map_or(default, GammaRule::RelativeToMax)
}

fn save_into(art: &mut Artifacts, ds: &MultiViewDataset, sub: &str) -> Result<(), CliError> {
    let dir = art.subdir(sub);
    for p in save_dataset(ds, &dir)? {
        art.adopt(&p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    fs::write(path, body + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Prefixes the failing input path to an error.
fn at(path: &Path) -> impl FnOnce(mvk_core::MvkError) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }
}

fn read_kernel(path: &Path, epsilon: f64) -> Result<KernelMatrix, CliError> {
    let values = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mvk1")) {
        read_kernel_mvk1(path)
    } else {
        read_kernel_csv(path)
    };
    KernelMatrix::new(values.map_err(at(path))?, epsilon).map_err(at(path))
}

fn audits_value(audits: &[KernelAudit]) -> Value {
    json!({ "all_pass": audits.iter().all(KernelAudit::passes), "kernels": to_value(&audits) })
}

pub fn generate(cfg: &RunConfig, kind: DatasetKind) -> Result<(), CliError> {
    let seed = cfg.seed();
    with_artifacts(cfg, "generate", |art| {
        let mut details = std::collections::BTreeMap::new();
        let (ds, resolved) = match kind {
            DatasetKind::Brownian => {
                let spec = BrownianConsensusSpec {
                    n: cfg.n.unwrap_or(2000),
                    views: cfg.views.unwrap_or(7),
                    seed,
                    ..BrownianConsensusSpec::default()
                };
                let data = BrownianConsensusData::generate(&spec)?;
                details.insert("view_draws".into(), json!(data.view_draws));
                (data.dataset()?, json!({ "kind": "brownian", "n": spec.n, "views": spec.views, "seed": seed }))
            }
            DatasetKind::Helix => {
                let n = cfg.n.unwrap_or(2000);
                (generate_helix_dataset(n, seed)?, json!({ "kind": "helix", "n": n, "seed": seed }))
            }
            DatasetKind::Flower => {
                let (n, views) = (cfg.n.unwrap_or(2000), cfg.views.unwrap_or(10));
                let (ds, phases) = generate_flower_dataset(n, views, seed)?;
                write_json(&art.path("phases.json"), &phases)?;
                (ds, json!({ "kind": "flower", "n": n, "views": views, "seed": seed }))
            }
        };
        save_into(art, &ds, "dataset")?;
        Ok(EvaluationReport {
            config: echo(cfg, resolved),
            seeds: vec![seed],
            details,
            ..EvaluationReport::default()
        })
    })
}

pub fn kernel(cfg: &RunConfig, dataset: &Path) -> Result<(), CliError> {
    let ds = load_dataset(dataset).map_err(at(dataset))?;
    let epsilon = cfg.epsilon.unwrap_or(DEFAULT_EPSILON);
    let neighbors = cfg.neighbors.unwrap_or(DEFAULT_NEIGHBORS);
    let a2 = Algorithm2Config {
        gamma: gamma_rule(cfg, GammaRule::default()),
        rank_gate: cfg.rank_gate.unwrap_or_default(),
        locality: cfg.locality,
        fusion: cfg.kernel_fusion(),
        floor: UnmatchedFloor::MaxValidDistance,
        convention: cfg.convention(KernelConvention::Full),
        view_epsilons: None,
    };
    with_artifacts(cfg, "kernel", |art| {
        let out = algorithm2_kernel(&ds, &NeighborhoodSpec::Knn(neighbors), epsilon, &a2)?;
        write_kernel_mvk1(&art.path("kernel.mvk1"), &out.kernel)?;
        write_kernel_csv(&art.path("kernel.csv"), &out.kernel)?;
        write_json(&art.path("diagnostics.json"), &out.diagnostics)?;
        let q = match ds.ground_truth() {
            Some(theta) => Some(q_factor(ground_truth_kernel(theta, epsilon, a2.convention)?.values(), out.kernel.values())?),
            None => None,
        };
        let mut report = EvaluationReport {
            q_factor: q,
            config: echo(
                cfg,
                json!({ "dataset": dataset, "epsilon": epsilon, "neighbors": neighbors, "algorithm2": to_value(&a2) }),
            ),
            seeds: vec![cfg.seed()],
            ..EvaluationReport::default()
        };
        report.details.insert("diagnostics".into(), to_value(&out.diagnostics));
        report.details.insert("audit".into(), audits_value(&[audit_kernel("kernel", &out.kernel, None)]));
        Ok(report)
    })
}

pub fn embed(cfg: &RunConfig, kernel_path: &Path, dims: usize, time: u32) -> Result<(), CliError> {
    let epsilon = cfg.epsilon.unwrap_or(DEFAULT_EPSILON);
    let k = read_kernel(kernel_path, epsilon)?;
    with_artifacts(cfg, "embed", |art| {
        let emb = diffusion_map(&k, dims, time)?;
        write_embedding_csv(&art.path("embedding.csv"), &emb)?;
        write_eigenvalues_json(&art.path("eigenvalues.json"), &emb.eigenvalues)?;
        let positive: Vec<f64> = emb.eigenvalues.iter().copied().take_while(|&v| v > 0.0).collect();
        let mut report = EvaluationReport {
            spectral_lines: spectral_lines(&positive, epsilon)?,
            config: echo(
                cfg,
                json!({ "kernel": kernel_path, "epsilon": epsilon, "dims": dims, "diffusion_time": time }),
            ),
            seeds: vec![cfg.seed()],
            ..EvaluationReport::default()
        };
        report.details.insert("eigenvalues".into(), json!(emb.eigenvalues));
        Ok(report)
    })
}

/// Drops a leading `0, 1, …, n−1` index column.
fn strip_index_column(m: DMatrix<f64>) -> DMatrix<f64> {
    let indexed = m.ncols() > 1 && m.column(0).iter().enumerate().all(|(i, &v)| v == i as f64);
    if indexed {
        m.remove_column(0)
    } else {
        m
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    dataset: &Path,
    kernel_path: Option<&Path>,
    embedding: Option<&Path>,
    radii: &[f64],
) -> Result<(), CliError> {
    let ds = load_dataset(dataset).map_err(at(dataset))?;
    let theta = ds.require_ground_truth()?.clone();
    let epsilon = cfg.epsilon.unwrap_or(DEFAULT_EPSILON);
    let convention = cfg.convention(KernelConvention::Full);
    let lines = cfg.spectral_lines.unwrap_or(DEFAULT_LINES);
    let radii = if radii.is_empty() { cfg.radii.clone().unwrap_or_default() } else { radii.to_vec() };
    if kernel_path.is_none() && embedding.is_none() && radii.is_empty() {
        return Err(CliError::config("nothing to evaluate: pass --kernel, --embedding or --radii"));
    }
    let opts = ErrorCurveOptions {
        pairs: cfg.pairs.unwrap_or(1000),
        seed: cfg.seed(),
        gamma: gamma_rule(cfg, GammaRule::default()),
        ..ErrorCurveOptions::default()
    };
    with_artifacts(cfg, "evaluate", |art| {
        let mut report = EvaluationReport {
            config: echo(
                cfg,
                json!({
                    "dataset": dataset, "kernel": kernel_path, "embedding": embedding, "epsilon": epsilon,
                    "convention": to_value(&convention), "spectral_lines": lines, "radii": radii,
                    "error_curve": to_value(&opts),
                }),
            ),
            seeds: vec![cfg.seed()],
            ..EvaluationReport::default()
        };
        if let Some(path) = kernel_path {
            let k = read_kernel(path, epsilon)?;
            let gt = ground_truth_kernel(&theta, epsilon, convention)?;
            report.q_factor = Some(q_factor(gt.values(), k.values())?);
            if lines > 0 {
                let spectrum = kernel_spectrum(&k)?;
                report.spectral_lines = spectral_lines(&spectrum[..lines.min(spectrum.len())], epsilon)?;
                report.details.insert("audit".into(), audits_value(&[audit_kernel("kernel", &k, Some(&spectrum))]));
            } else {
                report.details.insert("audit".into(), audits_value(&[audit_kernel("kernel", &k, None)]));
            }
        }
        if let Some(path) = embedding {
            let e = strip_index_column(read_matrix_csv(path).map_err(at(path))?);
            if e.ncols() < 2 {
                return Err(CliError::config(format!("{}: embedding needs two coordinates", path.display())));
            }
            let t: Vec<f64> = theta.column(0).iter().copied().collect();
            let stats = shape_stats(&e.columns(0, 2).into_owned(), &t)?;
            report.circle_fit_residual = stats.circle_fit_residual;
            report.angle_correlation = Some(stats.angle_correlation);
            report.max_angular_gap = Some(stats.max_angular_gap);
        }
        if !radii.is_empty() {
            let curve = distance_error_curve(&ds, &radii, &opts)?;
            write_error_curve_csv(&art.path("error_curve.csv"), &curve)?;
            report.distance_error_curve = curve;
        }
        Ok(report)
    })
}

pub fn experiment(cfg: &RunConfig, name: ExperimentName) -> Result<(), CliError> {
    let command = format!("experiment {}", name.as_str());
    match name {
        ExperimentName::BrownianConsensus => brownian(cfg, &command),
        ExperimentName::HelixSingleview => helix(cfg, &command),
        ExperimentName::FlowerMultiview => flower(cfg, &command),
        ExperimentName::Custom => custom(cfg, &command),
    }
}

fn brownian(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let d = BrownianExperimentConfig::default();
    let b = BrownianExperimentConfig {
        n: cfg.n.unwrap_or(d.n),
        views: cfg.views.unwrap_or(d.views),
        n_c: cfg.n_c.unwrap_or(d.n_c),
        dt: cfg.dt.unwrap_or(d.dt),
        epsilon: cfg.epsilon.unwrap_or(d.epsilon),
        gamma: gamma_rule(cfg, d.gamma),
        convention: cfg.convention(d.convention),
        fusion: cfg.fusion_mode(d.fusion),
        repetitions: cfg.repetitions.unwrap_or(d.repetitions),
        seed: cfg.seed(),
        spectral_lines: cfg.spectral_lines.unwrap_or(d.spectral_lines),
        ..d
    };
    let resolved = json!({
        "n": b.n, "views": b.views, "n_c": b.n_c, "dt": b.dt, "epsilon": b.epsilon,
        "gamma": to_value(&b.gamma), "convention": to_value(&b.convention), "fusion": to_value(&b.fusion),
        "repetitions": b.repetitions, "seed": b.seed, "spectral_lines": b.spectral_lines,
        "sampler": format!("{:?}", b.sampler), "draw": format!("{:?}", b.draw),
    });
    with_artifacts(cfg, command, |art| {
        let r = run_brownian_consensus(&b)?;
        let mut rows = DMatrix::zeros(r.q_by_views.len(), 2 + b.repetitions);
        for (z, q) in r.q_by_views.iter().enumerate() {
            rows[(z, 0)] = (z + 1) as f64;
            rows[(z, 1)] = *q;
            for (rep, qs) in r.q_per_repetition.iter().enumerate() {
                rows[(z, 2 + rep)] = qs[z];
            }
        }
        let mut header = vec!["views".to_string(), "q_mean".to_string()];
        header.extend((0..b.repetitions).map(|rep| format!("q_rep_{rep}")));
        write_matrix_csv(&art.path("q_by_views.csv"), &rows, Some(&header))?;
        write_kernel_mvk1(&art.path("kernel.mvk1"), &r.kernel)?;
        if let (Some(est), Some(gt)) = (&r.estimated_lines, &r.ground_truth_lines) {
            write_json(&art.path("spectral_lines.json"), &json!({ "estimated": est, "ground_truth": gt }))?;
        }
        save_into(art, &r.dataset, "dataset")?;
        let mut report = EvaluationReport {
            q_factor: r.q_by_views.last().copied(),
            spectral_lines: r.estimated_lines.clone().unwrap_or_default(),
            config: echo(cfg, resolved),
            seeds: vec![b.seed],
            ..EvaluationReport::default()
        };
        let details = [
            ("q_by_views", json!(r.q_by_views)),
            ("q_per_repetition", json!(r.q_per_repetition)),
            ("spearman", json!(r.spearman)),
            ("ground_truth_lines", json!(r.ground_truth_lines)),
            ("fallbacks", json!(r.fallbacks)),
            ("view_draws", json!(r.view_draws)),
            ("audits", audits_value(&r.audits)),
        ];
        report.details.extend(details.into_iter().map(|(k, v)| (k.to_string(), v)));
        Ok(report)
    })
}

fn helix(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let d = HelixExperimentConfig::default();
    let h = HelixExperimentConfig {
        densities: cfg.densities.clone().unwrap_or(d.densities),
        radii: cfg.radii.clone().unwrap_or(d.radii),
        pairs: cfg.pairs.unwrap_or(d.pairs),
        repetitions: cfg.repetitions.unwrap_or(d.repetitions),
        gamma: gamma_rule(cfg, d.gamma),
        seed: cfg.seed(),
        ..d
    };
    with_artifacts(cfg, command, |art| {
        let curves = run_helix_singleview(&h)?;
        let rows: Vec<[f64; 4]> = curves
            .iter()
            .flat_map(|c| c.points.iter().map(|p| [c.n as f64, p.radius, p.mean_error, p.pairs as f64]))
            .collect();
        let table = DMatrix::from_fn(rows.len(), 4, |i, k| rows[i][k]);
        let header: Vec<String> = ["n", "radius", "mean_error", "pairs"].map(String::from).to_vec();
        write_matrix_csv(&art.path("error_curve.csv"), &table, Some(&header))?;
        let mut report = EvaluationReport {
            distance_error_curve: curves.last().map(|c| c.points.clone()).unwrap_or_default(),
            config: echo(cfg, to_value(&h)),
            seeds: vec![h.seed],
            ..EvaluationReport::default()
        };
        report.details.insert("curves".into(), to_value(&curves));
        Ok(report)
    })
}

fn write_embedded(art: &mut Artifacts, stem: &str, e: &EmbeddedKernel) -> Result<(), CliError> {
    write_embedding_csv(&art.path(&format!("embedding_{stem}.csv")), &e.embedding)?;
    Ok(())
}

fn flower(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let d = FlowerExperimentConfig::default();
    let f = FlowerExperimentConfig {
        n: cfg.n.unwrap_or(d.n),
        views: cfg.views.unwrap_or(d.views),
        epsilon: cfg.epsilon.unwrap_or(d.epsilon),
        neighbors: cfg.neighbors.unwrap_or(d.neighbors),
        gamma: gamma_rule(cfg, d.gamma),
        rank_gate: cfg.rank_gate.unwrap_or(d.rank_gate),
        locality: cfg.locality.or(d.locality),
        fusion: cfg.fusion.map_or(d.fusion, |_| cfg.kernel_fusion()),
        convention: cfg.convention(d.convention),
        diffusion_time: cfg.diffusion_time.unwrap_or(d.diffusion_time),
        compare: cfg.compare.unwrap_or(d.compare),
        seed: cfg.seed(),
        ..d
    };
    with_artifacts(cfg, command, |art| {
        let r = run_flower_multiview(&f)?;
        write_embedded(art, "multiview", &r.multiview)?;
        write_eigenvalues_json(&art.path("eigenvalues_multiview.json"), &r.multiview.embedding.eigenvalues)?;
        write_kernel_mvk1(&art.path("kernel_multiview.mvk1"), &r.multiview.kernel)?;
        for (l, e) in r.single_views.iter().enumerate() {
            write_embedded(art, &format!("view_{}", l + 1), e)?;
        }
        if let Some(e) = &r.concatenated {
            write_embedded(art, "concatenated", e)?;
        }
        write_json(&art.path("phases.json"), &r.phases)?;
        save_into(art, &r.dataset, "dataset")?;
        let all: Vec<&EmbeddedKernel> =
            std::iter::once(&r.multiview).chain(&r.single_views).chain(r.concatenated.as_ref()).collect();
        let stats: Vec<Value> = all.iter().map(|e| json!({ "label": e.label, "stats": to_value(&e.stats) })).collect();
        write_json(&art.path("shape_stats.json"), &stats)?;
        let s = &r.multiview.stats;
        let mut report = EvaluationReport {
            circle_fit_residual: s.circle_fit_residual,
            angle_correlation: Some(s.angle_correlation),
            max_angular_gap: Some(s.max_angular_gap),
            config: echo(cfg, to_value(&f)),
            seeds: vec![f.seed],
            ..EvaluationReport::default()
        };
        report.details.insert("shape_stats".into(), json!(stats));
        report.details.insert("diagnostics".into(), to_value(&r.multiview.diagnostics));
        report.details.insert("audits".into(), audits_value(&r.audits));
        Ok(report)
    })
}

fn custom(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let d = CustomExperimentConfig::default();
    let c = CustomExperimentConfig {
        n: cfg.n.unwrap_or(d.n),
        intrinsic_dim: cfg.intrinsic_dim.unwrap_or(d.intrinsic_dim),
        maps: cfg.maps.clone().unwrap_or(d.maps),
        covariance: cfg.covariance.unwrap_or(d.covariance),
        n_c: cfg.n_c.unwrap_or(d.n_c),
        dt: cfg.dt.unwrap_or(d.dt),
        epsilon: cfg.epsilon.unwrap_or(d.epsilon),
        gamma: gamma_rule(cfg, d.gamma),
        convention: cfg.convention(d.convention),
        fusion: cfg.fusion_mode(FusionMode::Min),
        seed: cfg.seed(),
        ..d
    };
    with_artifacts(cfg, command, |art| {
        let r = run_custom(&c)?;
        write_kernel_mvk1(&art.path("kernel.mvk1"), &r.kernel)?;
        write_kernel_mvk1(&art.path("ground_truth_kernel.mvk1"), &r.ground_truth)?;
        save_into(art, &r.dataset, "dataset")?;
        let mut report = EvaluationReport {
            q_factor: Some(r.q_factor),
            config: echo(cfg, to_value(&c)),
            seeds: vec![c.seed],
            ..EvaluationReport::default()
        };
        report.details.insert("fallbacks".into(), json!(r.fallbacks));
        report.details.insert("audits".into(), audits_value(&r.audits));
        Ok(report)
    })
}
