//! Evaluation: ground-truth kernels, the Q-factor, ambient-vs-intrinsic distance error curves
//! and shape statistics of 2-D embeddings.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::error::{MvkError, Result};
use crate::itosim::rng_from_seed;
use crate::localcov::{sample_covariance, GammaRule, LocalCovariance};
use crate::mahalanobis::mahalanobis_pinv;
use crate::multiview::{KernelConvention, KernelMatrix};

/// `exp(−‖θ_i − θ_j‖² / (c ε))` over the rows of `theta`.
pub fn ground_truth_kernel(theta: &DMatrix<f64>, epsilon: f64, convention: KernelConvention) -> Result<KernelMatrix> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(MvkError::InvalidData("ground truth has non-finite entries".into()));
    }
    let n = theta.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| {
        (0..theta.ncols()).map(|k| (theta[(i, k)] - theta[(j, k)]).powi(2)).sum::<f64>()
    });
    KernelMatrix::from_distances(&d, epsilon, convention)
}

/// `‖K − K̂‖_F / ‖K̂‖_F`. The reference `k` and the estimate `k_hat` are not interchangeable.
pub fn q_factor(k: &DMatrix<f64>, k_hat: &DMatrix<f64>) -> Result<f64> {
    if k.shape() != k_hat.shape() {
        return Err(MvkError::ShapeMismatch {
            expected: k.shape(),
            found: k_hat.shape(),
        });
    }
    let denom = k_hat.norm();
    if denom == 0.0 {
        return Err(MvkError::InvalidData("estimated kernel has zero norm".into()));
    }
    Ok((k - k_hat).norm() / denom)
}

/// How the evaluated pairs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// A random point and its nearest ambient neighbour.
    #[default]
    NearestNeighbor,
    /// Two distinct random points.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveOptions {
    pub pairs: usize,
    pub seed: u64,
    pub view: usize,
    pub gamma: GammaRule,
    /// Smallest neighbourhood that yields a usable covariance.
    pub min_neighbors: usize,
    pub sampling: PairSampling,
}

impl Default for ErrorCurveOptions {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            seed: 0,
            view: 0,
            gamma: GammaRule::default(),
            min_neighbors: 3,
            sampling: PairSampling::NearestNeighbor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurvePoint {
    pub radius: f64,
    pub mean_error: f64,
    pub pairs: usize,
}

fn sq_dist_row(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..x.ncols()).map(|k| (x[(i, k)] - x[(j, k)]).powi(2)).sum()
}

fn nearest_neighbors(x: &DMatrix<f64>) -> Vec<usize> {
    use rayon::prelude::*;
    let n = x.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| sq_dist_row(x, i, a).total_cmp(&sq_dist_row(x, i, b)).then(a.cmp(&b)))
                .unwrap_or(i)
        })
        .collect()
}

/// For each radius, the mean `|d_ambient − d_intrinsic|` over sampled pairs.
///
/// Both distances use covariances over the same neighbourhood: the points within `radius` of the
/// sample in the ambient view. The ambient one goes through `gamma`-pseudoinverses.
pub fn distance_error_curve(ds: &MultiViewDataset, radii: &[f64], opts: &ErrorCurveOptions) -> Result<Vec<ErrorCurvePoint>> {
    let theta = ds.require_ground_truth()?;
    if opts.view >= ds.num_views() {
        return Err(MvkError::InvalidParameter(format!("view {} out of range", opts.view)));
    }
    if opts.pairs == 0 || ds.n() < 2 {
        return Err(MvkError::InvalidParameter("need at least one pair and two points".into()));
    }
    opts.gamma.validate()?;
    let x = ds.view(opts.view).data();
    let n = ds.n();
    let nn = match opts.sampling {
        PairSampling::NearestNeighbor => Some(nearest_neighbors(x)),
        PairSampling::Uniform => None,
    };
    radii
        .iter()
        .map(|&radius| {
            if !(radius > 0.0) {
                return Err(MvkError::InvalidParameter(format!("radius must be positive, got {radius}")));
            }
            let mut balls: HashMap<usize, Option<(LocalCovariance, LocalCovariance)>> = HashMap::new();
            let mut ball = |i: usize| -> Result<bool> {
                if !balls.contains_key(&i) {
                    let idx: Vec<usize> = (0..n).filter(|&j| sq_dist_row(x, i, j) <= radius * radius).collect();
                    let entry = if idx.len() >= opts.min_neighbors.max(2) {
                        Some((
                            LocalCovariance::new(sample_covariance(x, &idx)?, i, opts.view)?,
                            LocalCovariance::new(sample_covariance(theta, &idx)?, i, opts.view)?,
                        ))
                    } else {
                        None
                    };
                    balls.insert(i, entry);
                }
                Ok(balls[&i].is_some())
            };
            let mut rng = rng_from_seed(opts.seed);
            let mut pairs = Vec::with_capacity(opts.pairs);
            let mut attempts = 0;
            while pairs.len() < opts.pairs && attempts < 100 * opts.pairs {
                attempts += 1;
                let i = rng.random_range(0..n);
                let j = match &nn {
                    Some(nn) => nn[i],
                    None => {
                        let j = rng.random_range(0..n - 1);
                        if j >= i {
                            j + 1
                        } else {
                            j
                        }
                    }
                };
                if ball(i)? && ball(j)? {
                    pairs.push((i, j));
                }
            }
            if pairs.is_empty() {
                return Err(MvkError::InsufficientSamples {
                    needed: opts.min_neighbors,
                    got: 0,
                });
            }
            let gamma = opts.gamma.resolve(balls.values().flatten().map(|(cx, _)| cx));
            let mut total = 0.0;
            for &(i, j) in &pairs {
                let (cxi, cti) = balls[&i].as_ref().expect("checked");
                let (cxj, ctj) = balls[&j].as_ref().expect("checked");
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let xj: Vec<f64> = x.row(j).iter().copied().collect();
                let ti: Vec<f64> = theta.row(i).iter().copied().collect();
                let tj: Vec<f64> = theta.row(j).iter().copied().collect();
                let ambient = mahalanobis_pinv(&xi, &xj, cxi, cxj, gamma)?;
                let gt = 1e-12 * cti.largest_singular_value().max(ctj.largest_singular_value());
                let intrinsic = mahalanobis_pinv(&ti, &tj, cti, ctj, gt)?;
                total += (ambient - intrinsic).abs();
            }
            Ok(ErrorCurvePoint {
                radius,
                mean_error: total / pairs.len() as f64,
                pairs: pairs.len(),
            })
        })
        .collect()
}

pub fn write_error_curve_csv(path: &Path, curve: &[ErrorCurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["radius", "mean_error", "pairs"])?;
    for p in curve {
        w.write_record([p.radius.to_string(), p.mean_error.to_string(), p.pairs.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Algebraic least-squares circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub center: (f64, f64),
    pub radius: f64,
    /// RMS radial residual divided by the radius.
    pub residual: f64,
}

fn xy(e: &DMatrix<f64>) -> Result<(&DMatrix<f64>, usize)> {
    if e.ncols() < 2 {
        return Err(MvkError::ShapeMismatch {
            expected: (e.nrows(), 2),
            found: e.shape(),
        });
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(MvkError::InvalidData("embedding has non-finite entries".into()));
    }
    Ok((e, e.nrows()))
}

/// Kåsa fit of the first two columns of `e`.
pub fn fit_circle(e: &DMatrix<f64>) -> Result<CircleFit> {
    let (e, n) = xy(e)?;
    if n < 3 {
        return Err(MvkError::InsufficientSamples { needed: 3, got: n });
    }
    let mx = e.column(0).mean();
    let my = e.column(1).mean();
    let mut cov = Matrix2::zeros();
    for i in 0..n {
        let v = Vector2::new(e[(i, 0)] - mx, e[(i, 1)] - my);
        cov += v * v.transpose();
    }
    let ev = cov.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(MvkError::DegenerateFit("points are collinear or coincident".into()));
    }
    // Centred and scaled coordinates keep the normal equations well conditioned.
    let s = (cov.trace() / n as f64).sqrt();
    let a = DMatrix::from_fn(n, 3, |i, k| match k {
        0 => (e[(i, 0)] - mx) / s,
        1 => (e[(i, 1)] - my) / s,
        _ => 1.0,
    });
    let b = DMatrix::from_fn(n, 1, |i, _| a[(i, 0)].powi(2) + a[(i, 1)].powi(2));
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-12 * sv.max() {
        return Err(MvkError::DegenerateFit("circle system is rank deficient".into()));
    }
    let c = svd.solve(&b, 0.0).map_err(|e| MvkError::DegenerateFit(e.to_string()))?;
    let (cx, cy) = (c[0] / 2.0, c[1] / 2.0);
    let r2 = c[2] + cx * cx + cy * cy;
    if !(r2 > 0.0) {
        return Err(MvkError::DegenerateFit("fitted radius is not positive".into()));
    }
    let center = (mx + s * cx, my + s * cy);
    let radius = s * r2.sqrt();
    let ms: f64 = (0..n)
        .map(|i| ((e[(i, 0)] - center.0).hypot(e[(i, 1)] - center.1) - radius).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok(CircleFit {
        center,
        radius,
        residual: ms.sqrt() / radius,
    })
}

pub fn circle_fit_residual(e: &DMatrix<f64>) -> Result<f64> {
    fit_circle(e).map(|f| f.residual)
}

/// Polar angles of the embedding about the fitted circle centre (the centroid if no circle fits).
pub fn embedding_angles(e: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (e, n) = xy(e)?;
    if n == 0 {
        return Err(MvkError::EmptyInput("empty embedding"));
    }
    let (cx, cy) = match fit_circle(e) {
        Ok(f) => f.center,
        Err(_) => (e.column(0).mean(), e.column(1).mean()),
    };
    Ok((0..n).map(|i| (e[(i, 1)] - cy).atan2(e[(i, 0)] - cx)).collect())
}

/// `max_{s=±1} |mean exp(i(α − sθ))|` where `α` are the embedding angles.
///
/// Rotation of the embedding and a constant shift of θ change only the phase of the mean,
/// reflection is absorbed by `s`.
pub fn angle_correlation(e: &DMatrix<f64>, theta: &[f64]) -> Result<f64> {
    let a = embedding_angles(e)?;
    if a.len() != theta.len() {
        return Err(MvkError::ShapeMismatch {
            expected: (a.len(), 1),
            found: (theta.len(), 1),
        });
    }
    let n = a.len() as f64;
    let best = [1.0, -1.0]
        .iter()
        .map(|s| {
            let (re, im) = a.iter().zip(theta).fold((0.0, 0.0), |(re, im), (ai, ti)| {
                let phi = ai - s * ti;
                (re + phi.cos(), im + phi.sin())
            });
            (re / n).hypot(im / n)
        })
        .fold(0.0, f64::max);
    Ok(best.min(1.0))
}

/// [`angle_correlation`] against the dataset's first ground-truth column.
pub fn angle_correlation_for(ds: &MultiViewDataset, e: &DMatrix<f64>) -> Result<f64> {
    let theta = ds.require_ground_truth()?;
    let t: Vec<f64> = theta.column(0).iter().copied().collect();
    angle_correlation(e, &t)
}

/// Largest gap between consecutive embedding angles, wrap-around included.
pub fn max_angular_gap(e: &DMatrix<f64>) -> Result<f64> {
    let mut a = embedding_angles(e)?;
    a.sort_by(f64::total_cmp);
    let wrap = a[0] + TAU - a[a.len() - 1];
    Ok(a.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max))
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MvkError::ShapeMismatch {
            expected: (x.len(), 1),
            found: (y.len(), 1),
        });
    }
    if x.len() < 2 {
        return Err(MvkError::InsufficientSamples { needed: 2, got: x.len() });
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let m = (x.len() - 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - m) * (b - m);
        sxx += (a - m).powi(2);
        syy += (b - m).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MvkError::InvalidData("constant sequence has no rank correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_factor: Option<f64>,
    #[serde(default)]
    pub spectral_lines: Vec<f64>,
    #[serde(default)]
    pub distance_error_curve: Vec<ErrorCurvePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub circle_fit_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_angular_gap: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.q_factor, self.circle_fit_residual, self.angle_correlation, self.max_angular_gap];
        let finite = scalars.iter().flatten().all(|v| v.is_finite())
            && self.spectral_lines.iter().all(|v| v.is_finite())
            && self.distance_error_curve.iter().all(|p| p.mean_error.is_finite() && p.radius.is_finite());
        if !finite {
            return Err(MvkError::InvalidData("report contains non-finite values".into()));
        }
        if self.q_factor.is_some_and(|q| q < 0.0) || self.circle_fit_residual.is_some_and(|r| r < 0.0) {
            return Err(MvkError::InvalidData("negative error metric".into()));
        }
        if self.angle_correlation.is_some_and(|c| !(-1.0..=1.0).contains(&c)) {
            return Err(MvkError::InvalidData("angle correlation outside [-1, 1]".into()));
        }
        Ok(())
    }
}
