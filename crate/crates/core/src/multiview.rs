//! Consensus kernels from several views.
//!
//! Algorithm 1 takes the minimum Mahalanobis distance over views (cloud covariances, exact
//! inverses). Algorithm 2 works on static data: neighbourhood covariances, a rank gate against
//! the median numerical rank, pseudoinverse distances and max-of-kernel (or histogram) fusion.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::error::{MvkError, Result};
use crate::itosim::PointCloud;
use crate::localcov::{
    covariance_from_cloud, covariances_from_neighborhoods, knn_lists, median_rank, GammaRule, LocalCovariance,
    NeighborhoodSpec,
};
use crate::mahalanobis::{pairwise_distances, PointMetric, ViewDistances};
use crate::packed::PackedSymmetric;

/// Exponent convention `exp(−d / (c ε))`: `Full` has `c = 1`, `Half` has `c = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelConvention {
    Half,
    #[default]
    Full,
}

impl KernelConvention {
    pub fn divisor(self) -> f64 {
        match self {
            KernelConvention::Half => 2.0,
            KernelConvention::Full => 1.0,
        }
    }
}

/// `exp(−d / (c ε))`, kept inside `[f64::MIN_POSITIVE, 1]`.
#[inline]
pub fn kernel_entry(d: f64, epsilon: f64, convention: KernelConvention) -> f64 {
    (-d / (convention.divisor() * epsilon)).exp().clamp(f64::MIN_POSITIVE, 1.0)
}

/// Symmetric affinity matrix with unit diagonal and entries in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    epsilon: f64,
}

impl KernelMatrix {
    pub fn new(values: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let k = Self { values, epsilon };
        k.check_with_floor(true)?;
        Ok(k)
    }

    /// Entrywise `exp(−d/(cε))` of a symmetric distance matrix; the diagonal is set to 1.
    pub fn from_distances(d: &DMatrix<f64>, epsilon: f64, convention: KernelConvention) -> Result<Self> {
        check_epsilon(epsilon)?;
        let n = d.nrows();
        if !d.is_square() {
            return Err(MvkError::ShapeMismatch {
                expected: (n, n),
                found: d.shape(),
            });
        }
        let values = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                kernel_entry(d[(a, b)], epsilon, convention)
            }
        });
        let k = Self { values, epsilon };
        k.check_invariants()?;
        Ok(k)
    }

    pub(crate) fn from_packed(p: &PackedSymmetric<f64>, epsilon: f64) -> Self {
        Self {
            values: p.to_dense(1.0),
            epsilon,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Exact symmetry, unit diagonal and entries in `(0, 1]`, as every constructed kernel has.
    pub fn check_invariants(&self) -> Result<()> {
        self.check_with_floor(false)
    }

    /// Kernels supplied from outside may contain exact zeros, so `new` accepts `[0, 1]`.
    fn check_with_floor(&self, allow_zero: bool) -> Result<()> {
        let k = &self.values;
        let n = k.nrows();
        if !k.is_square() {
            return Err(MvkError::ShapeMismatch {
                expected: (n, n),
                found: k.shape(),
            });
        }
        for i in 0..n {
            if k[(i, i)] != 1.0 {
                return Err(MvkError::InvalidData(format!("kernel diagonal ({i},{i}) = {}", k[(i, i)])));
            }
            for j in 0..n {
                let v = k[(i, j)];
                let low_ok = if allow_zero { v >= 0.0 } else { v > 0.0 };
                if !(low_ok && v <= 1.0) {
                    let range = if allow_zero { "[0, 1]" } else { "(0, 1]" };
                    return Err(MvkError::InvalidData(format!("kernel entry ({i},{j}) = {v} outside {range}")));
                }
                if v.to_bits() != k[(j, i)].to_bits() {
                    return Err(MvkError::InvalidData(format!("kernel not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(MvkError::InvalidParameter(format!("kernel width must be positive, got {epsilon}")))
    }
}

/// Per-view pairwise distances with an optional per-view validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTensor {
    n: usize,
    views: Vec<ViewDistances>,
    masks: Vec<Option<PackedSymmetric<bool>>>,
}

impl DistanceTensor {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            views: Vec::new(),
            masks: Vec::new(),
        }
    }

    /// Adds a view; `mask = None` marks every pair valid.
    pub fn push_view(&mut self, distances: ViewDistances, mask: Option<PackedSymmetric<bool>>) -> Result<()> {
        if distances.n() != self.n || mask.as_ref().is_some_and(|m| m.n() != self.n) {
            return Err(MvkError::ShapeMismatch {
                expected: (self.n, self.n),
                found: (distances.n(), distances.n()),
            });
        }
        self.views.push(distances);
        self.masks.push(mask);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, l: usize) -> &ViewDistances {
        &self.views[l]
    }

    #[inline]
    pub fn is_valid(&self, l: usize, i: usize, j: usize) -> bool {
        i == j || self.masks[l].as_ref().map_or(true, |m| m.get(i, j))
    }

    /// Number of valid off-diagonal pairs in view `l`.
    pub fn valid_pairs(&self, l: usize) -> usize {
        match &self.masks[l] {
            None => self.n * self.n.saturating_sub(1) / 2,
            Some(m) => m.as_slice().iter().filter(|&&b| b).count(),
        }
    }
}

/// Entrywise minimum over valid views, zero diagonal.
pub fn fuse_min_distance(t: &DistanceTensor) -> Result<DMatrix<f64>> {
    let n = t.n;
    if t.num_views() == 0 {
        return Err(MvkError::EmptyInput("no views to fuse"));
    }
    let rows: Vec<std::result::Result<Vec<f64>, usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    (0..t.num_views())
                        .filter(|&l| t.is_valid(l, i, j))
                        .map(|l| t.views[l].get(i, j))
                        .reduce(f64::min)
                        .ok_or(j)
                })
                .collect()
        })
        .collect();
    let mut packed_rows = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        packed_rows.push(r.map_err(|j| MvkError::NoValidView(i, j))?);
    }
    Ok(PackedSymmetric::from_rows(n, packed_rows).to_dense(0.0))
}

/// Running minimum over views, for nested view subsets.
#[derive(Debug, Clone)]
pub struct MinDistanceAccumulator {
    min: PackedSymmetric<f64>,
    views: usize,
}

impl MinDistanceAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            min: PackedSymmetric::filled(n, f64::INFINITY),
            views: 0,
        }
    }

    pub fn add_view(&mut self, d: &ViewDistances) -> Result<()> {
        if d.n() != self.min.n() {
            return Err(MvkError::ShapeMismatch {
                expected: (self.min.n(), self.min.n()),
                found: (d.n(), d.n()),
            });
        }
        let n = d.n();
        let src = d.packed();
        for i in 0..n {
            let dst = self.min.upper_row_mut(i);
            for (a, &b) in dst.iter_mut().zip(src.upper_row(i)) {
                *a = a.min(b);
            }
        }
        self.views += 1;
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn kernel(&self, epsilon: f64, convention: KernelConvention) -> Result<KernelMatrix> {
        check_epsilon(epsilon)?;
        if self.views == 0 {
            return Err(MvkError::EmptyInput("no views accumulated"));
        }
        let n = self.min.n();
        let rows = (0..n)
            .map(|i| self.min.upper_row(i).iter().map(|&d| kernel_entry(d, epsilon, convention)).collect())
            .collect();
        Ok(KernelMatrix::from_packed(&PackedSymmetric::from_rows(n, rows), epsilon))
    }

    pub fn distances(&self) -> DMatrix<f64> {
        self.min.to_dense(0.0)
    }
}

/// How gated per-view kernel entries are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFusion {
    #[default]
    Max,
    Histogram { bins: usize },
}

/// Midpoint of the fullest bin of a `[0, 1]` histogram; ties go to the higher bin.
/// Equal entries are returned unchanged.
pub fn fuse_histogram_mode(entries: &[f64], bins: usize) -> Result<f64> {
    let first = *entries.first().ok_or(MvkError::EmptyInput("histogram of no entries"))?;
    if bins == 0 {
        return Err(MvkError::InvalidParameter("histogram needs at least one bin".into()));
    }
    if entries.iter().all(|&v| v == first) {
        return Ok(first);
    }
    let mut counts = vec![0usize; bins];
    for &v in entries {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut best = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c >= counts[best] {
            best = b;
        }
    }
    Ok((best as f64 + 0.5) / bins as f64)
}

/// Fuses gated per-view kernels `exp(−d_l/(c ε_l))`; `None` marks pairs with no valid view.
pub fn fuse_kernels(
    t: &DistanceTensor,
    epsilons: &[f64],
    convention: KernelConvention,
    fusion: KernelFusion,
) -> Result<PackedSymmetric<Option<f64>>> {
    if epsilons.len() != t.num_views() {
        return Err(MvkError::InvalidParameter(format!(
            "{} kernel widths for {} views",
            epsilons.len(),
            t.num_views()
        )));
    }
    for &e in epsilons {
        check_epsilon(e)?;
    }
    if let KernelFusion::Histogram { bins: 0 } = fusion {
        return Err(MvkError::InvalidParameter("histogram needs at least one bin".into()));
    }
    let n = t.n;
    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut buf = Vec::with_capacity(t.num_views());
            (i + 1..n)
                .map(|j| {
                    buf.clear();
                    buf.extend(
                        (0..t.num_views())
                            .filter(|&l| t.is_valid(l, i, j))
                            .map(|l| kernel_entry(t.views[l].get(i, j), epsilons[l], convention)),
                    );
                    if buf.is_empty() {
                        return None;
                    }
                    Some(match fusion {
                        KernelFusion::Max => buf.iter().copied().fold(0.0, f64::max),
                        KernelFusion::Histogram { bins } => fuse_histogram_mode(&buf, bins).expect("nonempty"),
                    })
                })
                .collect()
        })
        .collect();
    Ok(PackedSymmetric::from_rows(n, rows))
}

/// Settings of the dynamical (cloud-based) construction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Algorithm1Config {
    pub convention: KernelConvention,
    /// Threshold for the pseudoinverse used when a covariance is not invertible.
    pub gamma: GammaRule,
    /// Per-view widths; when set the fused kernel is the maximum of per-view kernels.
    #[serde(default)]
    pub view_epsilons: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Algorithm1Output {
    pub kernel: KernelMatrix,
    pub fused_distances: DMatrix<f64>,
    /// `(view, point)` pairs whose covariance fell back to the pseudoinverse.
    pub fallbacks: Vec<(usize, usize)>,
    pub gamma: f64,
}

/// Inverse-route metrics for one view, falling back to the `gamma`-pseudoinverse when a
/// covariance is rank deficient at `gamma` or fails to factorise.
pub fn inverse_metrics_with_fallback(covs: &[LocalCovariance], gamma: f64) -> (Vec<PointMetric>, Vec<usize>) {
    let mut fallbacks = Vec::new();
    let metrics = covs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let full_rank = c.eigenvalues().iter().all(|&l| l > gamma);
            match (full_rank, PointMetric::inverse(c)) {
                (true, Ok(m)) => m,
                _ => {
                    fallbacks.push(i);
                    PointMetric::pseudo(c, gamma)
                }
            }
        })
        .collect();
    (metrics, fallbacks)
}

/// Min-over-views consensus kernel from per-view, per-point clouds (`clouds[l][i]`).
pub fn algorithm1_kernel(
    ds: &MultiViewDataset,
    clouds: &[Vec<PointCloud>],
    epsilon: f64,
    cfg: &Algorithm1Config,
) -> Result<Algorithm1Output> {
    if clouds.len() != ds.num_views() {
        return Err(MvkError::InvalidParameter(format!(
            "{} cloud sets for {} views",
            clouds.len(),
            ds.num_views()
        )));
    }
    let covs = clouds
        .iter()
        .enumerate()
        .map(|(l, per_view)| {
            if per_view.len() != ds.n() {
                return Err(MvkError::InvalidParameter(format!(
                    "view {l} has {} clouds for {} points",
                    per_view.len(),
                    ds.n()
                )));
            }
            per_view
                .par_iter()
                .map(|c| covariance_from_cloud(c).map(|c| c.with_view_id(l)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    algorithm1_from_covariances(ds, &covs, epsilon, cfg)
}

/// Algorithm 1 with covariances already estimated (`covs[l][i]`).
pub fn algorithm1_from_covariances(
    ds: &MultiViewDataset,
    covs: &[Vec<LocalCovariance>],
    epsilon: f64,
    cfg: &Algorithm1Config,
) -> Result<Algorithm1Output> {
    check_epsilon(epsilon)?;
    cfg.gamma.validate()?;
    if covs.len() != ds.num_views() || covs.iter().any(|c| c.len() != ds.n()) {
        return Err(MvkError::InvalidParameter("one covariance per point and view is required".into()));
    }
    let gamma = cfg.gamma.resolve(covs.iter().flatten());
    let mut tensor = DistanceTensor::new(ds.n());
    let mut fallbacks = Vec::new();
    for (l, view_covs) in covs.iter().enumerate() {
        let (metrics, fb) = inverse_metrics_with_fallback(view_covs, gamma);
        fallbacks.extend(fb.into_iter().map(|i| (l, i)));
        tensor.push_view(pairwise_distances(ds.view(l), &metrics, l)?, None)?;
    }
    let fused = fuse_min_distance(&tensor)?;
    let kernel = match &cfg.view_epsilons {
        None => KernelMatrix::from_distances(&fused, epsilon, cfg.convention)?,
        Some(eps) => {
            let p = fuse_kernels(&tensor, eps, cfg.convention, KernelFusion::Max)?;
            let n = ds.n();
            let rows = (0..n).map(|i| p.upper_row(i).iter().map(|v| v.expect("ungated")).collect()).collect();
            KernelMatrix::from_packed(&PackedSymmetric::from_rows(n, rows), epsilon)
        }
    };
    Ok(Algorithm1Output {
        kernel,
        fused_distances: fused,
        fallbacks,
        gamma,
    })
}

/// Which numerical ranks pass the gate, relative to the median rank κ_m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankGate {
    /// `κ ≥ κ_m`.
    #[default]
    AtLeastMedian,
    /// `κ = κ_m`.
    EqualsMedian,
}

impl RankGate {
    pub fn passes(self, rank: usize, median: usize) -> bool {
        match self {
            RankGate::AtLeastMedian => rank >= median,
            RankGate::EqualsMedian => rank == median,
        }
    }
}

/// Kernel value given to pairs that no view validates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmatchedFloor {
    /// The smallest fused entry among matched pairs, i.e. `exp(−d_max/(cε))` under max fusion.
    #[default]
    MaxValidDistance,
    Value(f64),
}

/// Settings of the static (neighbourhood-based) construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm2Config {
    pub gamma: GammaRule,
    pub rank_gate: RankGate,
    /// When set, a pair is valid in a view only if one point is among the other's `k` nearest
    /// points in that view, counting the point itself as in [`NeighborhoodSpec::Knn`].
    pub locality: Option<usize>,
    pub fusion: KernelFusion,
    pub floor: UnmatchedFloor,
    pub convention: KernelConvention,
    #[serde(default)]
    pub view_epsilons: Option<Vec<f64>>,
}

impl Default for Algorithm2Config {
    fn default() -> Self {
        Self {
            gamma: GammaRule::default(),
            rank_gate: RankGate::AtLeastMedian,
            locality: None,
            fusion: KernelFusion::Max,
            floor: UnmatchedFloor::MaxValidDistance,
            convention: KernelConvention::Full,
            view_epsilons: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm2Diagnostics {
    pub gamma: f64,
    pub median_rank: usize,
    /// `rank_counts[r]` = number of (point, view) covariances with rank `r`.
    pub rank_counts: Vec<usize>,
    pub valid_pairs_per_view: Vec<usize>,
    pub unmatched_pairs: usize,
    pub floor_value: f64,
}

#[derive(Debug, Clone)]
pub struct Algorithm2Output {
    pub kernel: KernelMatrix,
    pub diagnostics: Algorithm2Diagnostics,
}

/// Rank-gated multi-view kernel for static data.
pub fn algorithm2_kernel(
    ds: &MultiViewDataset,
    spec: &NeighborhoodSpec,
    epsilon: f64,
    cfg: &Algorithm2Config,
) -> Result<Algorithm2Output> {
    check_epsilon(epsilon)?;
    cfg.gamma.validate()?;
    spec.validate()?;
    if matches!(spec, NeighborhoodSpec::Cloud) {
        return Err(MvkError::InvalidParameter("static construction needs a radius or knn neighbourhood".into()));
    }
    if let UnmatchedFloor::Value(v) = cfg.floor {
        if !(v > 0.0 && v <= 1.0) {
            return Err(MvkError::InvalidParameter(format!("floor must lie in (0, 1], got {v}")));
        }
    }
    let n = ds.n();
    let zeta = ds.num_views();
    let epsilons = match &cfg.view_epsilons {
        Some(e) => e.clone(),
        None => vec![epsilon; zeta],
    };

    let mut covs = ds
        .views()
        .iter()
        .enumerate()
        .map(|(l, v)| covariances_from_neighborhoods(v, spec, l))
        .collect::<Result<Vec<_>>>()?;
    let gamma = cfg.gamma.resolve(covs.iter().flatten());
    for c in covs.iter_mut().flatten() {
        c.rerank(gamma);
    }
    let ranks: Vec<usize> = covs.iter().flatten().map(LocalCovariance::numerical_rank).collect();
    let kappa_m = median_rank(&ranks)?;
    let max_rank = ranks.iter().copied().max().unwrap_or(0);
    let mut rank_counts = vec![0; max_rank + 1];
    for &r in &ranks {
        rank_counts[r] += 1;
    }

    let mut tensor = DistanceTensor::new(n);
    for (l, view_covs) in covs.iter().enumerate() {
        let view = ds.view(l);
        let ok: Vec<bool> = view_covs.iter().map(|c| cfg.rank_gate.passes(c.numerical_rank(), kappa_m)).collect();
        let mut mask = PackedSymmetric::filled(n, false);
        match cfg.locality {
            None => {
                for i in 0..n {
                    for (off, m) in mask.upper_row_mut(i).iter_mut().enumerate() {
                        *m = ok[i] && ok[i + 1 + off];
                    }
                }
            }
            Some(k) => {
                for (i, list) in knn_lists(view, k).iter().enumerate() {
                    for &j in list.iter().filter(|&&j| j != i) {
                        if ok[i] && ok[j] {
                            mask.set(i, j, true);
                        }
                    }
                }
            }
        }
        let metrics: Vec<PointMetric> = view_covs.iter().map(|c| PointMetric::pseudo(c, gamma)).collect();
        tensor.push_view(pairwise_distances(view, &metrics, l)?, Some(mask))?;
    }
    let valid_pairs_per_view = (0..zeta).map(|l| tensor.valid_pairs(l)).collect();

    let fused = fuse_kernels(&tensor, &epsilons, cfg.convention, cfg.fusion)?;
    let matched_min = fused.as_slice().iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let unmatched_pairs = fused.as_slice().iter().filter(|v| v.is_none()).count();
    if n >= 2 && matched_min.is_infinite() {
        return Err(MvkError::DegenerateDataset("no pair is valid in any view".into()));
    }
    let floor_value = match cfg.floor {
        UnmatchedFloor::MaxValidDistance => matched_min.min(1.0),
        UnmatchedFloor::Value(v) => v,
    };
    let rows = (0..n)
        .map(|i| fused.upper_row(i).iter().map(|v| v.unwrap_or(floor_value)).collect())
        .collect();
    let kernel = KernelMatrix::from_packed(&PackedSymmetric::from_rows(n, rows), epsilon);
    Ok(Algorithm2Output {
        kernel,
        diagnostics: Algorithm2Diagnostics {
            gamma,
            median_rank: kappa_m,
            rank_counts,
            valid_pairs_per_view,
            unmatched_pairs,
            floor_value,
        },
    })
}

const MVK1_MAGIC: &[u8; 4] = b"MVK1";

/// Dense CSV, one kernel row per line.
pub fn write_kernel_csv(path: &Path, k: &KernelMatrix) -> Result<()> {
    crate::dataset::write_matrix_csv(path, k.values(), None)
}

pub fn read_kernel_csv(path: &Path) -> Result<DMatrix<f64>> {
    crate::dataset::read_matrix_csv(path)
}

/// Binary kernel: a 16-byte header (`"MVK1"`, `u32 n`, 8 reserved zero bytes), then `n²`
/// row-major `f64`, all little-endian.
pub fn write_kernel_mvk1(path: &Path, k: &KernelMatrix) -> Result<()> {
    let n = k.n();
    let n32 = u32::try_from(n).map_err(|_| MvkError::InvalidParameter(format!("kernel too large for MVK1: {n}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MVK1_MAGIC)?;
    w.write_all(&n32.to_le_bytes())?;
    w.write_all(&[0u8; 8])?;
    for i in 0..n {
        for j in 0..n {
            w.write_all(&k.values()[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_kernel_mvk1(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != MVK1_MAGIC {
        return Err(MvkError::InvalidData(format!("{}: not an MVK1 file", path.display())));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * n * 8 {
        return Err(MvkError::InvalidData(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n * n * 8,
            bytes.len()
        )));
    }
    let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(n, n, vals))
}
