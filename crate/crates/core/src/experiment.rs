//! End-to-end runners for the synthetic benchmarks, shared by the CLI and the acceptance suite.
//!
//! Each runner is deterministic given its config: every random stream is derived from the
//! config seed, and parallel stages write to fixed slots.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{concatenate_views, MultiViewDataset, ViewMatrix};
use crate::diffusion::{audit_kernel, diffusion_map, kernel_spectrum, spectral_lines, DiffusionEmbedding, KernelAudit};
use crate::error::{MvkError, Result};
use crate::itosim::{
    derive_seed, generate_flower_dataset, generate_helix_dataset, point_seed, sample_centers, sample_point_cloud,
    BrownianConsensusData, BrownianConsensusSpec, CenterSampler, ObservationMap, PolynomialView, ViewDrawConfig,
};
use crate::localcov::{covariance_from_cloud, covariances_from_neighborhoods, GammaRule, LocalCovariance, NeighborhoodSpec};
use crate::mahalanobis::{pairwise_distances, PointMetric};
use crate::metrics::{
    angle_correlation, distance_error_curve, ground_truth_kernel, max_angular_gap, circle_fit_residual, q_factor,
    spearman_correlation, ErrorCurveOptions, ErrorCurvePoint, PairSampling,
};
use crate::multiview::{
    algorithm1_from_covariances, algorithm2_kernel, fuse_kernels, inverse_metrics_with_fallback, kernel_entry, Algorithm1Config,
    Algorithm2Config, Algorithm2Diagnostics, DistanceTensor, KernelConvention, KernelFusion, KernelMatrix, RankGate,
    UnmatchedFloor,
};
use crate::packed::PackedSymmetric;

/// How per-view estimates are combined when every view has a covariance at every point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Minimum distance over views, then one kernel.
    #[default]
    Min,
    /// Maximum of per-view kernels.
    Max,
    Histogram { bins: usize },
}

impl FusionMode {
    /// The kernel-level fusion used by the gated construction; `Min` and `Max` coincide there.
    pub fn kernel_fusion(self) -> KernelFusion {
        match self {
            FusionMode::Min | FusionMode::Max => KernelFusion::Max,
            FusionMode::Histogram { bins } => KernelFusion::Histogram { bins },
        }
    }
}

/// Kernel from per-view, per-point covariances (`covs[l][i]`) with inverse metrics, falling back
/// to pseudoinverses. Returns the kernel and the number of fallbacks.
pub fn kernel_from_covariances(
    ds: &MultiViewDataset,
    covs: &[Vec<LocalCovariance>],
    epsilon: f64,
    gamma: &GammaRule,
    convention: KernelConvention,
    fusion: FusionMode,
) -> Result<(KernelMatrix, usize)> {
    if fusion == FusionMode::Min {
        let cfg = Algorithm1Config {
            convention,
            gamma: *gamma,
            view_epsilons: None,
        };
        let out = algorithm1_from_covariances(ds, covs, epsilon, &cfg)?;
        return Ok((out.kernel, out.fallbacks.len()));
    }
    if covs.len() != ds.num_views() || covs.iter().any(|c| c.len() != ds.n()) {
        return Err(MvkError::InvalidParameter("one covariance per point and view is required".into()));
    }
    gamma.validate()?;
    let g = gamma.resolve(covs.iter().flatten());
    let mut tensor = DistanceTensor::new(ds.n());
    let mut fallbacks = 0;
    for (l, view_covs) in covs.iter().enumerate() {
        let (metrics, fb) = inverse_metrics_with_fallback(view_covs, g);
        fallbacks += fb.len();
        tensor.push_view(pairwise_distances(ds.view(l), &metrics, l)?, None)?;
    }
    let fused = fuse_kernels(&tensor, &vec![epsilon; ds.num_views()], convention, fusion.kernel_fusion())?;
    let n = ds.n();
    let rows = (0..n)
        .map(|i| fused.upper_row(i).iter().map(|v| v.expect("every pair is valid")).collect())
        .collect();
    Ok((KernelMatrix::from_packed(&PackedSymmetric::from_rows(n, rows), epsilon), fallbacks))
}

/// Settings of the dynamical consensus benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianExperimentConfig {
    pub n: usize,
    /// Largest number of views; Q is reported for every prefix `1..=views`.
    pub views: usize,
    pub n_c: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub gamma: GammaRule,
    pub convention: KernelConvention,
    pub fusion: FusionMode,
    pub repetitions: usize,
    pub seed: u64,
    /// Number of spectral lines of the estimated and ground-truth kernels (last repetition,
    /// all views); 0 skips the eigendecompositions.
    pub spectral_lines: usize,
    pub sampler: CenterSampler,
    pub draw: ViewDrawConfig,
}

impl Default for BrownianExperimentConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            views: 7,
            n_c: 20_000,
            dt: 0.005,
            epsilon: 0.02,
            gamma: GammaRule::default(),
            convention: KernelConvention::Half,
            fusion: FusionMode::Min,
            repetitions: 1,
            seed: 0,
            spectral_lines: 0,
            sampler: CenterSampler::Uniform,
            draw: ViewDrawConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BrownianExperimentResult {
    /// Mean Q over repetitions; entry `z` is for the first `z + 1` views.
    pub q_by_views: Vec<f64>,
    pub q_per_repetition: Vec<Vec<f64>>,
    /// Rank correlation between view count and mean Q; `None` for a single view count.
    pub spearman: Option<f64>,
    pub estimated_lines: Option<Vec<f64>>,
    pub ground_truth_lines: Option<Vec<f64>>,
    pub fallbacks: usize,
    /// Candidate maps drawn per repetition before enough well-conditioned ones were accepted.
    pub view_draws: Vec<usize>,
    pub audits: Vec<KernelAudit>,
    /// Last repetition: all-view estimate and ground truth.
    pub kernel: KernelMatrix,
    pub ground_truth: KernelMatrix,
    pub dataset: MultiViewDataset,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(MvkError::InvalidParameter(format!("{name} must be positive")))
    } else {
        Ok(())
    }
}

fn positive_f(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(MvkError::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

fn leading_lines(k: &KernelMatrix, count: usize, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let eigs = kernel_spectrum(k)?;
    let lines = spectral_lines(&eigs[..count.min(eigs.len())], epsilon)?;
    Ok((eigs, lines))
}

pub fn run_brownian_consensus(cfg: &BrownianExperimentConfig) -> Result<BrownianExperimentResult> {
    positive("n", cfg.n)?;
    positive("views", cfg.views)?;
    positive("repetitions", cfg.repetitions)?;
    positive_f("epsilon", cfg.epsilon)?;
    positive_f("dt", cfg.dt)?;
    if cfg.n_c < 2 {
        return Err(MvkError::InvalidParameter("n_c must be at least 2".into()));
    }
    cfg.gamma.validate()?;

    let mut q_per_repetition = Vec::with_capacity(cfg.repetitions);
    let mut audits = Vec::new();
    let mut fallbacks = 0;
    let mut view_draws = Vec::new();
    let mut last = None;
    for r in 0..cfg.repetitions {
        let seed = derive_seed(cfg.seed, r as u64);
        let data = BrownianConsensusData::generate(&BrownianConsensusSpec {
            n: cfg.n,
            views: cfg.views,
            intrinsic_dim: 2,
            sampler: cfg.sampler,
            draw: cfg.draw.clone(),
            seed,
        })?;
        view_draws.push(data.view_draws);
        let ds = data.dataset()?;
        let gt = ground_truth_kernel(&data.theta, cfg.epsilon, cfg.convention)?;
        audits.push(audit_kernel(&format!("brownian/rep{r}/ground_truth"), &gt, None));
        let covs = (0..cfg.views)
            .map(|l| {
                (0..cfg.n)
                    .into_par_iter()
                    .map(|i| {
                        let cloud = data.cloud(i, l, cfg.n_c, cfg.dt, seed)?;
                        Ok(covariance_from_cloud(&cloud)?.with_view_id(l))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut qs = Vec::with_capacity(cfg.views);
        let mut kernel = None;
        for z in 1..=cfg.views {
            let (k, fb) = kernel_from_covariances(&ds.prefix(z)?, &covs[..z], cfg.epsilon, &cfg.gamma, cfg.convention, cfg.fusion)?;
            fallbacks += fb;
            audits.push(audit_kernel(&format!("brownian/rep{r}/views{z}"), &k, None));
            qs.push(q_factor(gt.values(), k.values())?);
            kernel = Some(k);
        }
        q_per_repetition.push(qs);
        last = Some((kernel.expect("at least one view"), gt, ds));
    }
    let (kernel, ground_truth, dataset) = last.expect("at least one repetition");
    let q_by_views: Vec<f64> = (0..cfg.views)
        .map(|z| q_per_repetition.iter().map(|q| q[z]).sum::<f64>() / cfg.repetitions as f64)
        .collect();
    let spearman = if cfg.views >= 2 {
        let zs: Vec<f64> = (1..=cfg.views).map(|z| z as f64).collect();
        spearman_correlation(&zs, &q_by_views).ok()
    } else {
        None
    };
    let (estimated_lines, ground_truth_lines) = if cfg.spectral_lines > 0 {
        let (eigs, est) = leading_lines(&kernel, cfg.spectral_lines, cfg.epsilon)?;
        audits.push(audit_kernel("brownian/final/estimate", &kernel, Some(&eigs)));
        let (eigs, gtl) = leading_lines(&ground_truth, cfg.spectral_lines, cfg.epsilon)?;
        audits.push(audit_kernel("brownian/final/ground_truth", &ground_truth, Some(&eigs)));
        (Some(est), Some(gtl))
    } else {
        (None, None)
    };
    Ok(BrownianExperimentResult {
        q_by_views,
        q_per_repetition,
        spearman,
        estimated_lines,
        ground_truth_lines,
        fallbacks,
        view_draws,
        audits,
        kernel,
        ground_truth,
        dataset,
    })
}

/// Settings of the single-view helix error-curve study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixExperimentConfig {
    /// Sample counts on `θ ∈ [0, 2π]`.
    pub densities: Vec<usize>,
    pub radii: Vec<f64>,
    pub pairs: usize,
    pub repetitions: usize,
    pub gamma: GammaRule,
    pub sampling: PairSampling,
    pub seed: u64,
}

impl Default for HelixExperimentConfig {
    fn default() -> Self {
        Self {
            densities: vec![1000, 2000],
            radii: vec![0.25, 0.5, 1.0],
            pairs: 1000,
            repetitions: 3,
            gamma: GammaRule::RelativeToMax(1e-6),
            sampling: PairSampling::NearestNeighbor,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixCurve {
    pub n: usize,
    /// Errors averaged over repetitions; `pairs` is the total over repetitions.
    pub points: Vec<ErrorCurvePoint>,
}

pub fn run_helix_singleview(cfg: &HelixExperimentConfig) -> Result<Vec<HelixCurve>> {
    positive("repetitions", cfg.repetitions)?;
    positive("pairs", cfg.pairs)?;
    if cfg.densities.is_empty() || cfg.radii.is_empty() {
        return Err(MvkError::InvalidParameter("densities and radii must be nonempty".into()));
    }
    cfg.densities
        .iter()
        .map(|&n| {
            positive("density", n)?;
            let mut points: Vec<ErrorCurvePoint> = cfg
                .radii
                .iter()
                .map(|&radius| ErrorCurvePoint {
                    radius,
                    mean_error: 0.0,
                    pairs: 0,
                })
                .collect();
            for r in 0..cfg.repetitions {
                let seed = derive_seed(derive_seed(cfg.seed, n as u64), r as u64);
                let ds = generate_helix_dataset(n, seed)?;
                let opts = ErrorCurveOptions {
                    pairs: cfg.pairs,
                    seed: derive_seed(seed, 1),
                    view: 0,
                    gamma: cfg.gamma,
                    min_neighbors: 3,
                    sampling: cfg.sampling,
                };
                for (acc, p) in points.iter_mut().zip(distance_error_curve(&ds, &cfg.radii, &opts)?) {
                    acc.mean_error += p.mean_error / cfg.repetitions as f64;
                    acc.pairs += p.pairs;
                }
            }
            Ok(HelixCurve { n, points })
        })
        .collect()
}

/// Settings of the flower multi-view embedding study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowerExperimentConfig {
    pub n: usize,
    pub views: usize,
    pub epsilon: f64,
    /// Neighbourhood size for covariances, the point itself included.
    pub neighbors: usize,
    pub gamma: GammaRule,
    pub rank_gate: RankGate,
    pub locality: Option<usize>,
    pub floor: UnmatchedFloor,
    pub fusion: KernelFusion,
    pub convention: KernelConvention,
    pub diffusion_time: u32,
    /// Also embed every single view and the concatenation of all views.
    pub compare: bool,
    pub seed: u64,
}

impl Default for FlowerExperimentConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            views: 10,
            epsilon: 3.0,
            neighbors: 20,
            gamma: GammaRule::RelativeToMax(1e-3),
            rank_gate: RankGate::EqualsMedian,
            locality: Some(20),
            floor: UnmatchedFloor::Value(f64::MIN_POSITIVE),
            fusion: KernelFusion::Max,
            convention: KernelConvention::Full,
            diffusion_time: 1,
            compare: true,
            seed: 0,
        }
    }
}

impl FlowerExperimentConfig {
    pub fn algorithm2(&self) -> Algorithm2Config {
        Algorithm2Config {
            gamma: self.gamma,
            rank_gate: self.rank_gate,
            locality: self.locality,
            fusion: self.fusion,
            floor: self.floor,
            convention: self.convention,
            view_epsilons: None,
        }
    }
}

/// Shape of a 2-D embedding relative to a circle parametrised by θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    /// `None` when no circle fits (collinear embedding).
    pub circle_fit_residual: Option<f64>,
    pub angle_correlation: f64,
    pub max_angular_gap: f64,
}

pub fn shape_stats(embedding: &DMatrix<f64>, theta: &[f64]) -> Result<ShapeStats> {
    let circle_fit_residual = match circle_fit_residual(embedding) {
        Ok(r) => Some(r),
        Err(MvkError::DegenerateFit(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ShapeStats {
        circle_fit_residual,
        angle_correlation: angle_correlation(embedding, theta)?,
        max_angular_gap: max_angular_gap(embedding)?,
    })
}

#[derive(Debug, Clone)]
pub struct EmbeddedKernel {
    pub label: String,
    pub kernel: KernelMatrix,
    pub embedding: DiffusionEmbedding,
    pub stats: ShapeStats,
    /// Present for the gated multi-view construction.
    pub diagnostics: Option<Algorithm2Diagnostics>,
}

#[derive(Debug, Clone)]
pub struct FlowerExperimentResult {
    pub multiview: EmbeddedKernel,
    pub single_views: Vec<EmbeddedKernel>,
    pub concatenated: Option<EmbeddedKernel>,
    pub phases: Vec<[f64; 3]>,
    pub audits: Vec<KernelAudit>,
    pub dataset: MultiViewDataset,
}

fn embed(
    label: &str,
    kernel: KernelMatrix,
    diagnostics: Option<Algorithm2Diagnostics>,
    theta: &[f64],
    t: u32,
    audits: &mut Vec<KernelAudit>,
) -> Result<EmbeddedKernel> {
    let embedding = diffusion_map(&kernel, 2, t)?;
    audits.push(audit_kernel(label, &kernel, Some(&embedding.eigenvalues)));
    let stats = shape_stats(&embedding.leading_pair()?, theta)?;
    Ok(EmbeddedKernel {
        label: label.to_string(),
        kernel,
        embedding,
        stats,
        diagnostics,
    })
}

/// Dense kernel of pseudoinverse Mahalanobis distances within one view, without rank gating or
/// locality: the single-view construction the multi-view kernel is compared against.
pub fn single_view_kernel(
    view: &ViewMatrix,
    spec: &NeighborhoodSpec,
    epsilon: f64,
    gamma: &GammaRule,
    convention: KernelConvention,
) -> Result<KernelMatrix> {
    gamma.validate()?;
    let covs = covariances_from_neighborhoods(view, spec, 0)?;
    let g = gamma.resolve(covs.iter());
    let metrics: Vec<PointMetric> = covs.iter().map(|c| PointMetric::pseudo(c, g)).collect();
    let d = pairwise_distances(view, &metrics, 0)?;
    let n = view.nrows();
    let rows = (0..n)
        .map(|i| d.packed().upper_row(i).iter().map(|&v| kernel_entry(v, epsilon, convention)).collect())
        .collect();
    Ok(KernelMatrix::from_packed(&PackedSymmetric::from_rows(n, rows), epsilon))
}

pub fn run_flower_multiview(cfg: &FlowerExperimentConfig) -> Result<FlowerExperimentResult> {
    positive("n", cfg.n)?;
    positive("views", cfg.views)?;
    positive("neighbors", cfg.neighbors)?;
    positive_f("epsilon", cfg.epsilon)?;
    let (ds, phases) = generate_flower_dataset(cfg.n, cfg.views, cfg.seed)?;
    let theta: Vec<f64> = ds.require_ground_truth()?.column(0).iter().copied().collect();
    let mut audits = Vec::new();
    let spec = NeighborhoodSpec::Knn(cfg.neighbors);
    let t = cfg.diffusion_time;
    let out = algorithm2_kernel(&ds, &spec, cfg.epsilon, &cfg.algorithm2())?;
    let multiview = embed("flower/multiview", out.kernel, Some(out.diagnostics), &theta, t, &mut audits)?;
    let (single_views, concatenated) = if cfg.compare {
        let single = |label: String, view: &ViewMatrix, audits: &mut Vec<KernelAudit>| {
            let k = single_view_kernel(view, &spec, cfg.epsilon, &cfg.gamma, cfg.convention)?;
            embed(&label, k, None, &theta, t, audits)
        };
        let singles = (0..cfg.views)
            .map(|l| single(format!("flower/view{l}"), ds.view(l), &mut audits))
            .collect::<Result<Vec<_>>>()?;
        let concat = single("flower/concatenated".into(), &concatenate_views(&ds), &mut audits)?;
        (singles, Some(concat))
    } else {
        (Vec::new(), None)
    };
    Ok(FlowerExperimentResult {
        multiview,
        single_views,
        concatenated,
        phases,
        audits,
        dataset: ds,
    })
}

/// An observation map of the custom benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapSpec {
    /// `x = θ`.
    Identity,
    /// Rows of coefficients and exponents over `(θ, ψ)` or over `θ` alone.
    Polynomial {
        coefficients: Vec<Vec<f64>>,
        exponents: Vec<Vec<i32>>,
    },
}

impl MapSpec {
    fn build(&self, intrinsic_dim: usize, view_id: usize) -> Result<PolynomialView> {
        let (a, b) = match self {
            MapSpec::Identity => (
                DMatrix::identity(intrinsic_dim, intrinsic_dim),
                DMatrix::from_element(intrinsic_dim, intrinsic_dim, 1),
            ),
            MapSpec::Polynomial { coefficients, exponents } => {
                let rows = coefficients.len();
                let cols = coefficients.first().map_or(0, Vec::len);
                if rows == 0
                    || cols == 0
                    || exponents.len() != rows
                    || coefficients.iter().any(|r| r.len() != cols)
                    || exponents.iter().any(|r| r.len() != cols)
                {
                    return Err(MvkError::InvalidParameter(format!(
                        "view {view_id}: coefficient and exponent tables must be equal nonempty rectangles"
                    )));
                }
                (
                    DMatrix::from_fn(rows, cols, |i, j| coefficients[i][j]),
                    DMatrix::from_fn(rows, cols, |i, j| exponents[i][j]),
                )
            }
        };
        let view = PolynomialView::new(a, b, view_id)?;
        if view.input_dim() != intrinsic_dim && view.input_dim() != intrinsic_dim + 1 {
            return Err(MvkError::InvalidParameter(format!(
                "view {view_id} takes {} inputs; expected {intrinsic_dim} or {}",
                view.input_dim(),
                intrinsic_dim + 1
            )));
        }
        Ok(view)
    }
}

/// Where the per-point covariances come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// `J Jᵀ` from the exact Jacobian of the map.
    #[default]
    Exact,
    /// Sample covariance of short-time clouds, divided by `dt`.
    Cloud,
}

/// Settings of a user-defined dynamical benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomExperimentConfig {
    pub n: usize,
    pub intrinsic_dim: usize,
    /// Box holding θ and every ψ.
    pub lo: f64,
    pub hi: f64,
    pub maps: Vec<MapSpec>,
    pub covariance: CovarianceSource,
    pub n_c: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub gamma: GammaRule,
    pub convention: KernelConvention,
    pub fusion: FusionMode,
    pub seed: u64,
}

impl Default for CustomExperimentConfig {
    fn default() -> Self {
        Self {
            n: 500,
            intrinsic_dim: 2,
            lo: 1.0,
            hi: 2.0,
            maps: vec![MapSpec::Identity],
            covariance: CovarianceSource::Exact,
            n_c: 2000,
            dt: 0.005,
            epsilon: 0.02,
            gamma: GammaRule::default(),
            convention: KernelConvention::Full,
            fusion: FusionMode::Min,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CustomExperimentResult {
    pub q_factor: f64,
    pub kernel: KernelMatrix,
    pub ground_truth: KernelMatrix,
    pub fallbacks: usize,
    pub audits: Vec<KernelAudit>,
    pub dataset: MultiViewDataset,
}

pub fn run_custom(cfg: &CustomExperimentConfig) -> Result<CustomExperimentResult> {
    positive("n", cfg.n)?;
    positive("intrinsic_dim", cfg.intrinsic_dim)?;
    positive_f("epsilon", cfg.epsilon)?;
    positive_f("dt", cfg.dt)?;
    if cfg.maps.is_empty() {
        return Err(MvkError::InvalidParameter("at least one map is required".into()));
    }
    let d = cfg.intrinsic_dim;
    let maps = cfg
        .maps
        .iter()
        .enumerate()
        .map(|(l, m)| m.build(d, l))
        .collect::<Result<Vec<_>>>()?;
    let theta = sample_centers(cfg.n, d, cfg.lo, cfg.hi, CenterSampler::Uniform, derive_seed(cfg.seed, 1))?;
    let psi = sample_centers(cfg.n, maps.len(), cfg.lo, cfg.hi, CenterSampler::Uniform, derive_seed(cfg.seed, 2))?;
    let input = |i: usize, l: usize| -> Vec<f64> {
        let mut u: Vec<f64> = theta.row(i).iter().copied().collect();
        if maps[l].input_dim() == d + 1 {
            u.push(psi[(i, l)]);
        }
        u
    };
    let mut views = Vec::with_capacity(maps.len());
    let mut covs = Vec::with_capacity(maps.len());
    for (l, map) in maps.iter().enumerate() {
        let x = (0..cfg.n)
            .map(|i| ObservationMap::Polynomial(map.clone()).evaluate(&input(i, l)))
            .collect::<Result<Vec<_>>>()?;
        views.push(ViewMatrix::new(DMatrix::from_fn(cfg.n, map.output_dim(), |i, k| x[i][k]))?);
        let view_seed = derive_seed(cfg.seed, 1000 + l as u64);
        let obs = ObservationMap::Polynomial(map.clone());
        let view_covs = (0..cfg.n)
            .into_par_iter()
            .map(|i| match cfg.covariance {
                CovarianceSource::Exact => {
                    let j = map.jacobian(&input(i, l))?;
                    LocalCovariance::new(&j * j.transpose(), i, l)
                }
                CovarianceSource::Cloud => {
                    let u = input(i, l);
                    let (t, p) = if u.len() == d { (&u[..], None) } else { (&u[..d], Some(u[d])) };
                    let cloud = sample_point_cloud(t, p, &obs, cfg.n_c, cfg.dt, point_seed(view_seed, i))?;
                    Ok(covariance_from_cloud(&cloud.with_center_index(i))?.with_view_id(l))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        covs.push(view_covs);
    }
    let ds = MultiViewDataset::new(views)?.with_ground_truth(theta.clone())?;
    let gt = ground_truth_kernel(&theta, cfg.epsilon, cfg.convention)?;
    let (kernel, fallbacks) = kernel_from_covariances(&ds, &covs, cfg.epsilon, &cfg.gamma, cfg.convention, cfg.fusion)?;
    let audits = vec![audit_kernel("custom/ground_truth", &gt, None), audit_kernel("custom/estimate", &kernel, None)];
    Ok(CustomExperimentResult {
        q_factor: q_factor(gt.values(), kernel.values())?,
        kernel,
        ground_truth: gt,
        fallbacks,
        audits,
        dataset: ds,
    })
}
