//! Local covariance estimation, numerical rank and thresholded pseudoinverses.
//!
//! Covariances are symmetrised on construction and keep a descending eigendecomposition,
//! so rank queries and pseudoinverses at any threshold reuse one factorisation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ViewMatrix;
use crate::error::{MvkError, Result};
use crate::itosim::PointCloud;

/// Relative threshold used when nothing else is configured.
pub const DEFAULT_RELATIVE_GAMMA: f64 = 1e-6;

/// Which samples enter the covariance at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodSpec {
    /// Simulated clouds supply the samples.
    Cloud,
    /// All points within this Euclidean radius, the centre included.
    Radius(f64),
    /// The `N` nearest points, the centre included; ties broken by index.
    Knn(usize),
}

impl NeighborhoodSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NeighborhoodSpec::Cloud => Ok(()),
            NeighborhoodSpec::Radius(r) if r > 0.0 && r.is_finite() => Ok(()),
            NeighborhoodSpec::Knn(k) if k >= 2 => Ok(()),
            other => Err(MvkError::InvalidParameter(format!("invalid neighbourhood {other:?}"))),
        }
    }
}

/// Threshold γ on singular values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    Absolute(f64),
    /// Multiple of the largest singular value over all covariances considered together.
    RelativeToMax(f64),
}

impl Default for GammaRule {
    fn default() -> Self {
        GammaRule::RelativeToMax(DEFAULT_RELATIVE_GAMMA)
    }
}

impl GammaRule {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            GammaRule::Absolute(v) | GammaRule::RelativeToMax(v) => v,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(MvkError::InvalidParameter(format!("gamma must be finite and >= 0, got {v}")))
        }
    }

    pub fn resolve<'a>(&self, covariances: impl IntoIterator<Item = &'a LocalCovariance>) -> f64 {
        match *self {
            GammaRule::Absolute(g) => g,
            GammaRule::RelativeToMax(f) => {
                f * covariances
                    .into_iter()
                    .map(LocalCovariance::largest_singular_value)
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Symmetric PSD covariance of one point in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCovariance {
    matrix: DMatrix<f64>,
    numerical_rank: usize,
    gamma: f64,
    point_index: usize,
    view_id: usize,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl LocalCovariance {
    /// Symmetrises `matrix` and ranks it at `DEFAULT_RELATIVE_GAMMA` times its own largest
    /// singular value; call [`LocalCovariance::rerank`] to apply a shared threshold.
    pub fn new(matrix: DMatrix<f64>, point_index: usize, view_id: usize) -> Result<Self> {
        if !matrix.is_square() {
            return Err(MvkError::ShapeMismatch {
                expected: (matrix.nrows(), matrix.nrows()),
                found: matrix.shape(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MvkError::InvalidData(format!(
                "covariance of point {point_index} has non-finite entries"
            )));
        }
        let sym = DMatrix::from_fn(matrix.nrows(), matrix.ncols(), |r, c| 0.5 * (matrix[(r, c)] + matrix[(c, r)]));
        let (eigenvalues, eigenvectors) = sorted_eigen(&sym);
        let mut out = Self {
            matrix: sym,
            numerical_rank: 0,
            gamma: 0.0,
            point_index,
            view_id,
            eigenvalues,
            eigenvectors,
        };
        let g = DEFAULT_RELATIVE_GAMMA * out.largest_singular_value();
        out.rerank(g);
        Ok(out)
    }

    pub fn with_view_id(mut self, view_id: usize) -> Self {
        self.view_id = view_id;
        self
    }

    /// Recomputes the cached rank at threshold `gamma`.
    pub fn rerank(&mut self, gamma: f64) {
        self.gamma = gamma;
        self.numerical_rank = self.eigenvalues.iter().filter(|l| l.abs() > gamma).count();
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn numerical_rank(&self) -> usize {
        self.numerical_rank
    }

    /// Threshold the cached rank was computed at.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn point_index(&self) -> usize {
        self.point_index
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Unit eigenvectors as columns, in the order of [`LocalCovariance::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn largest_singular_value(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, l| m.max(l.abs()))
    }

    /// True when no eigenvalue is below `-tol_rel · ‖C‖_F`.
    pub fn is_psd(&self, tol_rel: f64) -> bool {
        let tol = tol_rel * self.matrix.norm();
        self.eigenvalues.iter().all(|&l| l >= -tol)
    }

    /// `U Λ⁺ Uᵀ`, inverting only eigenvalues above `gamma`.
    pub fn pseudo_inverse(&self, gamma: f64) -> DMatrix<f64> {
        let m = self.dim();
        let mut out = DMatrix::zeros(m, m);
        for (k, &l) in self.eigenvalues.iter().enumerate() {
            if l > gamma {
                let u = self.eigenvectors.column(k);
                out += (u * u.transpose()) / l;
            }
        }
        out
    }

    /// `W` with `WᵀW = C⁺` at threshold `gamma`: rows `λ_k^{-1/2} u_kᵀ` for retained eigenpairs.
    pub fn whitening(&self, gamma: f64) -> DMatrix<f64> {
        let keep: Vec<usize> = (0..self.dim()).filter(|&k| self.eigenvalues[k] > gamma).collect();
        DMatrix::from_fn(keep.len(), self.dim(), |r, c| {
            let k = keep[r];
            self.eigenvectors[(c, k)] / self.eigenvalues[k].sqrt()
        })
    }
}

fn sorted_eigen(sym: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = sym.nrows();
    if m == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_fn(m, |k, _| eig.eigenvalues[order[k]]);
    let vectors = DMatrix::from_fn(m, m, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

/// Unbiased sample covariance (divisor `rows − 1`) of the selected rows of `points`.
pub fn sample_covariance(points: &DMatrix<f64>, rows: &[usize]) -> Result<DMatrix<f64>> {
    let count = rows.len();
    if count < 2 {
        return Err(MvkError::InsufficientSamples { needed: 2, got: count });
    }
    let m = points.ncols();
    let mut mean = vec![0.0; m];
    for &r in rows {
        for (k, mk) in mean.iter_mut().enumerate() {
            *mk += points[(r, k)];
        }
    }
    for mk in &mut mean {
        *mk /= count as f64;
    }
    let mut cov = DMatrix::zeros(m, m);
    let mut centred = vec![0.0; m];
    for &r in rows {
        for k in 0..m {
            centred[k] = points[(r, k)] - mean[k];
        }
        for a in 0..m {
            for b in a..m {
                cov[(a, b)] += centred[a] * centred[b];
            }
        }
    }
    let denom = (count - 1) as f64;
    for a in 0..m {
        for b in a..m {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Cloud sample covariance divided by the step length, estimating `J Jᵀ`.
pub fn covariance_from_cloud(cloud: &PointCloud) -> Result<LocalCovariance> {
    if !(cloud.dt() > 0.0) {
        return Err(MvkError::InvalidParameter(format!(
            "cloud covariance needs dt > 0, got {}",
            cloud.dt()
        )));
    }
    let rows: Vec<usize> = (0..cloud.len()).collect();
    let cov = sample_covariance(cloud.points(), &rows)? / cloud.dt();
    LocalCovariance::new(cov, cloud.center_index(), 0)
}

fn squared_distances_from(points: &DMatrix<f64>, i: usize) -> Vec<f64> {
    let (n, m) = points.shape();
    (0..n)
        .map(|j| (0..m).map(|k| (points[(j, k)] - points[(i, k)]).powi(2)).sum())
        .collect()
}

/// Indices forming the neighbourhood of point `i`, sorted ascending.
pub fn neighbor_indices(points: &DMatrix<f64>, i: usize, spec: &NeighborhoodSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let n = points.nrows();
    if i >= n {
        return Err(MvkError::InvalidParameter(format!("point {i} out of range 0..{n}")));
    }
    let d2 = squared_distances_from(points, i);
    let mut idx = match *spec {
        NeighborhoodSpec::Cloud => {
            return Err(MvkError::InvalidParameter(
                "cloud neighbourhoods come from simulated point clouds".into(),
            ))
        }
        NeighborhoodSpec::Radius(r) => (0..n).filter(|&j| d2[j] <= r * r).collect::<Vec<_>>(),
        NeighborhoodSpec::Knn(k) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(a.cmp(&b)));
            order.truncate(k.min(n));
            order
        }
    };
    idx.sort_unstable();
    Ok(idx)
}

/// Sample covariance of the neighbourhood of point `i` about the neighbourhood mean.
pub fn covariance_from_neighborhood(view: &ViewMatrix, i: usize, spec: &NeighborhoodSpec) -> Result<LocalCovariance> {
    let idx = neighbor_indices(view.data(), i, spec)?;
    LocalCovariance::new(sample_covariance(view.data(), &idx)?, i, 0)
}

/// Covariances of every point of a view, computed in parallel.
pub fn covariances_from_neighborhoods(view: &ViewMatrix, spec: &NeighborhoodSpec, view_id: usize) -> Result<Vec<LocalCovariance>> {
    (0..view.nrows())
        .into_par_iter()
        .map(|i| covariance_from_neighborhood(view, i, spec).map(|c| c.with_view_id(view_id)))
        .collect()
}

/// The `k` nearest neighbours of every point, the point itself first; ties broken by index.
pub fn knn_lists(view: &ViewMatrix, k: usize) -> Vec<Vec<usize>> {
    let points = view.data();
    (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            let d2 = squared_distances_from(points, i);
            let mut order: Vec<usize> = (0..points.nrows()).collect();
            order.sort_by(|&a, &b| d2[a].total_cmp(&d2[b]).then((a != i).cmp(&(b != i))).then(a.cmp(&b)));
            order.truncate(k.min(points.nrows()));
            order
        })
        .collect()
}

/// Number of singular values of `c` strictly greater than `gamma`.
pub fn numerical_rank(c: &DMatrix<f64>, gamma: f64) -> usize {
    if c.is_empty() {
        return 0;
    }
    c.clone().svd(false, false).singular_values.iter().filter(|&&s| s > gamma).count()
}

/// Eigen-based pseudoinverse of a symmetric PSD matrix, dropping eigenvalues `<= gamma`.
pub fn pseudo_inverse(c: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    Ok(LocalCovariance::new(c.clone(), 0, 0)?.pseudo_inverse(gamma))
}

/// Lower median: the `⌊(len+1)/2⌋`-th smallest rank.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    if ranks.is_empty() {
        return Err(MvkError::EmptyInput("median of no ranks"));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() + 1) / 2 - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itosim::{rng_from_seed, sample_point_cloud, ObservationMap, PolynomialView};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    fn random_orthogonal(m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        a.qr().q()
    }

    #[test]
    fn identical_points_give_zero_covariance() {
        let cloud = PointCloud::new(0, DMatrix::from_element(10, 3, 2.5), 0.1).unwrap();
        let c = covariance_from_cloud(&cloud).unwrap();
        assert_eq!(c.matrix(), &DMatrix::zeros(3, 3));
        assert_eq!(c.numerical_rank(), 0);
    }

    #[test]
    fn two_point_variance_uses_unbiased_divisor() {
        let cloud = PointCloud::new(0, DMatrix::from_column_slice(2, 1, &[0.0, 2.0]), 1.0).unwrap();
        assert_eq!(covariance_from_cloud(&cloud).unwrap().matrix()[(0, 0)], 2.0);
    }

    #[test]
    fn linear_cloud_recovers_jacobian_gram() {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 3, &[
            1.5, -0.4, 0.3,
            0.2, 0.9, -1.1,
            -0.7, 0.5, 0.8,
        ]);
        let view = PolynomialView::new(a.clone(), DMatrix::from_element(3, 3, 1), 0).unwrap();
        let map = ObservationMap::Polynomial(view);
        let dt = 0.005;
        let cloud = sample_point_cloud(&[1.3, 1.6], Some(1.2), &map, 100_000, dt, 17).unwrap();
        let raw = sample_covariance(cloud.points(), &(0..cloud.len()).collect::<Vec<_>>()).unwrap();
        let expected = &a * a.transpose();
        assert!((&raw - &expected * dt).norm() / (expected.norm() * dt) < 0.05);
        let c = covariance_from_cloud(&cloud).unwrap();
        assert!((c.matrix() - &expected).norm() / expected.norm() < 0.05);
    }

    #[test]
    fn cloud_needs_positive_dt() {
        let cloud = PointCloud::new(0, DMatrix::from_element(3, 1, 1.0), 0.0).unwrap();
        assert!(covariance_from_cloud(&cloud).is_err());
    }

    #[test]
    fn line_neighbourhood_has_rank_one() {
        let pts = DMatrix::from_fn(41, 3, |i, k| {
            let t = i as f64 / 40.0;
            [1.0 + 2.0 * t, -0.5 * t, 3.0 * t][k]
        });
        let view = ViewMatrix::new(pts).unwrap();
        let c = covariance_from_neighborhood(&view, 20, &NeighborhoodSpec::Radius(0.5)).unwrap();
        assert_eq!(c.numerical_rank(), 1);
        let c = covariance_from_neighborhood(&view, 20, &NeighborhoodSpec::Knn(7)).unwrap();
        assert_eq!(c.numerical_rank(), 1);
    }

    #[test]
    fn huge_radius_gives_global_covariance() {
        let mut rng = rng_from_seed(3);
        let pts = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-1.0..1.0));
        let view = ViewMatrix::new(pts.clone()).unwrap();
        let all: Vec<usize> = (0..30).collect();
        let global = sample_covariance(&pts, &all).unwrap();
        let local = covariance_from_neighborhood(&view, 4, &NeighborhoodSpec::Radius(100.0)).unwrap();
        assert_relative_eq!(local.matrix(), &global, epsilon = 1e-14);
    }

    #[test]
    fn identical_view_points_give_zero_matrix() {
        let view = ViewMatrix::new(DMatrix::from_element(6, 2, -1.0)).unwrap();
        let c = covariance_from_neighborhood(&view, 0, &NeighborhoodSpec::Knn(3)).unwrap();
        assert_eq!(c.matrix(), &DMatrix::zeros(2, 2));
    }

    #[test]
    fn too_small_neighbourhood_fails() {
        let view = ViewMatrix::new(DMatrix::from_fn(5, 1, |i, _| i as f64 * 10.0)).unwrap();
        assert!(matches!(
            covariance_from_neighborhood(&view, 2, &NeighborhoodSpec::Radius(1.0)),
            Err(MvkError::InsufficientSamples { needed: 2, got: 1 })
        ));
        assert!(covariance_from_neighborhood(&view, 2, &NeighborhoodSpec::Cloud).is_err());
    }

    #[test]
    fn knn_lists_start_with_self() {
        let view = ViewMatrix::new(DMatrix::from_element(4, 2, 0.0)).unwrap();
        let lists = knn_lists(&view, 2);
        for (i, l) in lists.iter().enumerate() {
            assert_eq!(l[0], i);
            assert_eq!(l.len(), 2);
        }
    }

    #[test]
    fn rank_examples() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 1e-9]));
        assert_eq!(numerical_rank(&c, 1e-6), 2);
        assert_eq!(numerical_rank(&DMatrix::zeros(4, 4), 1e-12), 0);
        assert_eq!(numerical_rank(&DMatrix::identity(5, 5), 0.5), 5);
    }

    #[test]
    fn pseudo_inverse_examples() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(pseudo_inverse(&i3, 1e-12).unwrap(), i3, epsilon = 1e-15);
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0]));
        let p = pseudo_inverse(&c, 1e-8).unwrap();
        assert_relative_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.0])), epsilon = 1e-15);
    }

    #[test]
    fn pseudo_inverse_of_spd_inverts() {
        let c = random_spd(5, 21);
        let p = pseudo_inverse(&c, 0.0).unwrap();
        assert!((&p * &c - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn whitening_reproduces_pseudo_inverse() {
        let mut rng = rng_from_seed(5);
        let b = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let c = &b * b.transpose();
        let lc = LocalCovariance::new(c, 0, 0).unwrap();
        let g = 1e-9 * lc.largest_singular_value();
        let w = lc.whitening(g);
        assert_relative_eq!(w.transpose() * &w, lc.pseudo_inverse(g), epsilon = 1e-9);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_rank(&[2, 2, 2]).unwrap(), 2);
        assert_eq!(median_rank(&[1, 2, 3, 4]).unwrap(), 2);
        assert_eq!(median_rank(&[4, 3, 1, 2]).unwrap(), 2);
        assert_eq!(median_rank(&[3]).unwrap(), 3);
        assert!(matches!(median_rank(&[]), Err(MvkError::EmptyInput(_))));
    }

    #[test]
    fn gamma_rules_resolve() {
        let a = LocalCovariance::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])), 0, 0).unwrap();
        let b = LocalCovariance::new(DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 0.0])), 1, 0).unwrap();
        assert_eq!(GammaRule::Absolute(0.3).resolve([&a, &b]), 0.3);
        assert_eq!(GammaRule::RelativeToMax(0.5).resolve([&a, &b]), 4.0);
        assert!(GammaRule::Absolute(-1.0).validate().is_err());
    }

    #[test]
    fn construction_symmetrises_exactly() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.3 + 1e-17, 0.3, 2.0]);
        let lc = LocalCovariance::new(c, 0, 0).unwrap();
        assert_eq!(lc.matrix(), &lc.matrix().transpose());
        assert!(lc.is_psd(1e-10));
    }

    proptest! {
        #[test]
        fn rank_is_monotone_in_gamma(diag in proptest::collection::vec(0.0f64..10.0, 1..7), g1 in 0.0f64..10.0, g2 in 0.0f64..10.0) {
            let c = DMatrix::from_diagonal(&DVector::from_vec(diag));
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            prop_assert!(numerical_rank(&c, hi) <= numerical_rank(&c, lo));
        }

        #[test]
        fn rank_invariant_under_rotation(diag in proptest::collection::vec(0.0f64..10.0, 2..6), seed in any::<u64>(), g in 0.05f64..5.0) {
            let m = diag.len();
            // Keep singular values away from the threshold so rounding cannot flip the count.
            prop_assume!(diag.iter().all(|d| (d - g).abs() > 1e-6));
            let c = DMatrix::from_diagonal(&DVector::from_vec(diag));
            let q = random_orthogonal(m, seed);
            let rotated = &q * &c * q.transpose();
            prop_assert_eq!(numerical_rank(&rotated, g), numerical_rank(&c, g));
        }

        #[test]
        fn double_pseudo_inverse_restores_truncation(m in 2usize..7, seed in any::<u64>(), cut in 0usize..3) {
            let q = random_orthogonal(m, seed);
            let mut rng = rng_from_seed(seed ^ 0xABCD);
            let vals: Vec<f64> = (0..m).map(|k| if k < cut { rng.random_range(0.0..1e-9) } else { rng.random_range(0.1..5.0) }).collect();
            let c = &q * DMatrix::from_diagonal(&DVector::from_vec(vals.clone())) * q.transpose();
            let gamma = 1e-6;
            let truncated = &q * DMatrix::from_diagonal(&DVector::from_iterator(m, vals.iter().map(|&v| if v > gamma { v } else { 0.0 }))) * q.transpose();
            let inner = pseudo_inverse(&c, gamma).unwrap();
            let back = pseudo_inverse(&inner, 1e-10 * inner.amax()).unwrap();
            prop_assert!((&back - &truncated).norm() <= 1e-8 * truncated.norm().max(1e-300));
        }

        #[test]
        fn cloud_covariance_ignores_point_order(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let pts = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
            let mut perm: Vec<usize> = (0..12).collect();
            perm.reverse();
            perm.swap(2, 7);
            let shuffled = pts.select_rows(perm.iter());
            let a = covariance_from_cloud(&PointCloud::new(0, pts, 0.1).unwrap()).unwrap();
            let b = covariance_from_cloud(&PointCloud::new(0, shuffled, 0.1).unwrap()).unwrap();
            prop_assert!((a.matrix() - b.matrix()).amax() < 1e-13);
        }
    }
}
