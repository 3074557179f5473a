//! Symmetrised two-point Mahalanobis distances `½ Δᵀ (C_i⁻¹ + C_j⁻¹) Δ`.
//!
//! Each point carries a factor `T_i` with `Δᵀ C_i⁻¹ Δ = ‖T_i Δ‖²`: a Cholesky factor for the
//! inverse route, a whitening matrix for the pseudoinverse route. Negating `Δ` negates `T_i Δ`
//! exactly, so `d(i, j)` and `d(j, i)` are the same floating-point value.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::dataset::ViewMatrix;
use crate::error::{MvkError, Result};
use crate::localcov::LocalCovariance;
use crate::packed::PackedSymmetric;

/// One evaluated pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDistance {
    pub i: usize,
    pub j: usize,
    pub view_id: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Factor {
    /// Lower Cholesky factor, row-major.
    Lower(Vec<f64>),
    /// `rank × m` whitening matrix, row-major.
    Whiten { rows: usize, w: Vec<f64> },
}

/// Per-point quadratic form `Δ ↦ Δᵀ M Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMetric {
    dim: usize,
    factor: Factor,
}

impl PointMetric {
    /// Exact inverse through a Cholesky factorisation.
    pub fn inverse(c: &LocalCovariance) -> Result<Self> {
        let m = c.dim();
        let chol = Cholesky::new(c.matrix().clone()).ok_or(MvkError::SingularCovariance {
            point: c.point_index(),
            view: c.view_id(),
        })?;
        let l = chol.l();
        let mut flat = Vec::with_capacity(m * m);
        for r in 0..m {
            for k in 0..m {
                flat.push(l[(r, k)]);
            }
        }
        if (0..m).any(|r| !(flat[r * m + r] > 0.0)) {
            return Err(MvkError::SingularCovariance {
                point: c.point_index(),
                view: c.view_id(),
            });
        }
        Ok(Self {
            dim: m,
            factor: Factor::Lower(flat),
        })
    }

    /// Pseudoinverse dropping eigenvalues `<= gamma`.
    pub fn pseudo(c: &LocalCovariance, gamma: f64) -> Self {
        let w = c.whitening(gamma);
        let mut flat = Vec::with_capacity(w.len());
        for r in 0..w.nrows() {
            for k in 0..w.ncols() {
                flat.push(w[(r, k)]);
            }
        }
        Self {
            dim: c.dim(),
            factor: Factor::Whiten { rows: w.nrows(), w: flat },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_pseudo(&self) -> bool {
        matches!(self.factor, Factor::Whiten { .. })
    }

    /// `Δᵀ M Δ`.
    #[inline]
    pub fn quad(&self, delta: &[f64]) -> f64 {
        let m = self.dim;
        debug_assert_eq!(delta.len(), m);
        match &self.factor {
            Factor::Lower(l) => {
                // Forward substitution L y = Δ, so ‖y‖² = Δᵀ C⁻¹ Δ.
                let mut y = [0.0f64; 16];
                let mut heap;
                let y: &mut [f64] = if m <= 16 {
                    &mut y[..m]
                } else {
                    heap = vec![0.0; m];
                    &mut heap
                };
                let mut acc = 0.0;
                for r in 0..m {
                    let row = &l[r * m..r * m + r];
                    let s: f64 = row.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                    y[r] = (delta[r] - s) / l[r * m + r];
                    acc += y[r] * y[r];
                }
                acc
            }
            Factor::Whiten { rows, w } => {
                let mut acc = 0.0;
                for r in 0..*rows {
                    let y: f64 = w[r * m..(r + 1) * m].iter().zip(delta).map(|(a, b)| a * b).sum();
                    acc += y * y;
                }
                acc
            }
        }
    }

    /// The matrix `M` itself.
    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.dim;
        match &self.factor {
            Factor::Lower(l) => {
                let lm = DMatrix::from_row_slice(m, m, l);
                let inv = lm.solve_lower_triangular(&DMatrix::identity(m, m)).expect("positive diagonal");
                inv.transpose() * inv
            }
            Factor::Whiten { rows, w } => {
                let wm = DMatrix::from_row_slice(*rows, m, w);
                wm.transpose() * wm
            }
        }
    }
}

/// `max(0, ½ (Δᵀ M_i Δ + Δᵀ M_j Δ))` with `Δ = x_i − x_j`.
#[inline]
pub fn pair_distance(xi: &[f64], xj: &[f64], mi: &PointMetric, mj: &PointMetric) -> f64 {
    let mut buf = [0.0f64; 16];
    let mut heap;
    let delta: &mut [f64] = if xi.len() <= 16 {
        &mut buf[..xi.len()]
    } else {
        heap = vec![0.0; xi.len()];
        &mut heap
    };
    for (d, (a, b)) in delta.iter_mut().zip(xi.iter().zip(xj)) {
        *d = a - b;
    }
    (0.5 * (mi.quad(delta) + mj.quad(delta))).max(0.0)
}

fn check_dims(xi: &[f64], xj: &[f64], ci: &LocalCovariance, cj: &LocalCovariance) -> Result<()> {
    let m = xi.len();
    if xj.len() != m || ci.dim() != m || cj.dim() != m {
        return Err(MvkError::ShapeMismatch {
            expected: (m, m),
            found: (xj.len(), ci.dim().max(cj.dim())),
        });
    }
    Ok(())
}

/// Distance with exact inverses; fails on a covariance that is not positive definite.
pub fn mahalanobis_inv(xi: &[f64], xj: &[f64], ci: &LocalCovariance, cj: &LocalCovariance) -> Result<f64> {
    check_dims(xi, xj, ci, cj)?;
    Ok(pair_distance(xi, xj, &PointMetric::inverse(ci)?, &PointMetric::inverse(cj)?))
}

/// Distance with `gamma`-thresholded pseudoinverses.
pub fn mahalanobis_pinv(xi: &[f64], xj: &[f64], ci: &LocalCovariance, cj: &LocalCovariance, gamma: f64) -> Result<f64> {
    check_dims(xi, xj, ci, cj)?;
    Ok(pair_distance(
        xi,
        xj,
        &PointMetric::pseudo(ci, gamma),
        &PointMetric::pseudo(cj, gamma),
    ))
}

/// All pairwise distances of one view, strict upper triangle; the diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDistances {
    view_id: usize,
    values: PackedSymmetric<f64>,
}

impl ViewDistances {
    pub fn from_packed(view_id: usize, values: PackedSymmetric<f64>) -> Self {
        Self { view_id, values }
    }

    pub fn from_dense(view_id: usize, d: &DMatrix<f64>) -> Result<Self> {
        let n = d.nrows();
        if !d.is_square() {
            return Err(MvkError::ShapeMismatch {
                expected: (n, n),
                found: d.shape(),
            });
        }
        let rows = (0..n).map(|i| (i + 1..n).map(|j| d[(i, j)]).collect()).collect();
        Ok(Self {
            view_id,
            values: PackedSymmetric::from_rows(n, rows),
        })
    }

    pub fn n(&self) -> usize {
        self.values.n()
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.values.get(i, j)
        }
    }

    pub fn pair(&self, i: usize, j: usize) -> PairDistance {
        PairDistance {
            i,
            j,
            view_id: self.view_id,
            value: self.get(i, j),
        }
    }

    pub fn packed(&self) -> &PackedSymmetric<f64> {
        &self.values
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.values.to_dense(0.0)
    }
}

/// Evaluates every pair of a view in parallel.
pub fn pairwise_distances(view: &ViewMatrix, metrics: &[PointMetric], view_id: usize) -> Result<ViewDistances> {
    let n = view.nrows();
    let m = view.ncols();
    if metrics.len() != n {
        return Err(MvkError::ShapeMismatch {
            expected: (n, m),
            found: (metrics.len(), m),
        });
    }
    if let Some(bad) = metrics.iter().find(|p| p.dim() != m) {
        return Err(MvkError::ShapeMismatch {
            expected: (m, m),
            found: (bad.dim(), bad.dim()),
        });
    }
    let flat = view.rows_flat();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &flat[i * m..(i + 1) * m];
            (i + 1..n)
                .map(|j| pair_distance(xi, &flat[j * m..(j + 1) * m], &metrics[i], &metrics[j]))
                .collect()
        })
        .collect();
    Ok(ViewDistances {
        view_id,
        values: PackedSymmetric::from_rows(n, rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itosim::rng_from_seed;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn cov(m: DMatrix<f64>) -> LocalCovariance {
        LocalCovariance::new(m, 0, 0).unwrap()
    }

    fn diag(v: &[f64]) -> LocalCovariance {
        cov(DMatrix::from_diagonal(&DVector::from_row_slice(v)))
    }

    fn random_spd(m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.2
    }

    #[test]
    fn identity_covariances_give_squared_euclidean() {
        let i = diag(&[1.0, 1.0, 1.0]);
        let d = mahalanobis_inv(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0], &i, &i).unwrap();
        assert_relative_eq!(d, 9.0, epsilon = 1e-14);
    }

    #[test]
    fn coincident_points_are_at_zero() {
        let a = diag(&[3.0, 0.5]);
        let b = diag(&[1.0, 7.0]);
        assert_eq!(mahalanobis_inv(&[0.3, 0.4], &[0.3, 0.4], &a, &b).unwrap(), 0.0);
        assert_eq!(mahalanobis_pinv(&[0.3, 0.4], &[0.3, 0.4], &a, &b, 1e-9).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_anisotropic_case() {
        let d = mahalanobis_inv(&[1.0, 0.0], &[0.0, 0.0], &diag(&[1.0, 1.0]), &diag(&[4.0, 1.0])).unwrap();
        assert_relative_eq!(d, 0.625, epsilon = 1e-15);
    }

    #[test]
    fn singular_covariance_rejected_by_inverse_route() {
        let r = mahalanobis_inv(&[0.0, 1.0], &[0.0, 0.0], &diag(&[1.0, 0.0]), &diag(&[1.0, 1.0]));
        assert!(matches!(r, Err(MvkError::SingularCovariance { .. })));
    }

    #[test]
    fn null_space_difference_vanishes_under_pseudoinverse() {
        let c = diag(&[1.0, 0.0]);
        assert_eq!(mahalanobis_pinv(&[0.0, 5.0], &[0.0, 0.0], &c, &c, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn pseudoinverse_agrees_with_inverse_at_full_rank() {
        let mut rng = rng_from_seed(12);
        for _ in 0..20 {
            let a = cov(random_spd(3, &mut rng));
            let b = cov(random_spd(3, &mut rng));
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let di = mahalanobis_inv(&x, &y, &a, &b).unwrap();
            let dp = mahalanobis_pinv(&x, &y, &a, &b, 0.0).unwrap();
            assert!((di - dp).abs() <= 1e-10 * di.max(1.0));
        }
    }

    #[test]
    fn linear_view_matches_intrinsic_distance() {
        let mut rng = rng_from_seed(2);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        for _ in 0..20 {
            let ti = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let tj = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let (cti, ctj) = (random_spd(2, &mut rng), random_spd(2, &mut rng));
            let xi = &a * &ti;
            let xj = &a * &tj;
            let ci = cov(&a * &cti * a.transpose());
            let cj = cov(&a * &ctj * a.transpose());
            let g = 1e-10 * ci.largest_singular_value().max(cj.largest_singular_value());
            let ambient = mahalanobis_pinv(xi.as_slice(), xj.as_slice(), &ci, &cj, g).unwrap();
            let intrinsic = mahalanobis_inv(ti.as_slice(), tj.as_slice(), &cov(cti), &cov(ctj)).unwrap();
            assert!((ambient - intrinsic).abs() <= 1e-8 * intrinsic);
        }
    }

    #[test]
    fn metric_matrix_round_trips() {
        let mut rng = rng_from_seed(8);
        let c = cov(random_spd(4, &mut rng));
        let inv = c.matrix().clone().try_inverse().unwrap();
        assert_relative_eq!(PointMetric::inverse(&c).unwrap().matrix(), inv, epsilon = 1e-9);
        assert_relative_eq!(PointMetric::pseudo(&c, 0.0).matrix(), inv, epsilon = 1e-9);
    }

    #[test]
    fn pairwise_table_is_consistent_with_single_pairs() {
        let mut rng = rng_from_seed(31);
        let n = 9;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let covs: Vec<LocalCovariance> = (0..n).map(|_| cov(random_spd(2, &mut rng))).collect();
        let metrics: Vec<PointMetric> = covs.iter().map(|c| PointMetric::inverse(c).unwrap()).collect();
        let view = ViewMatrix::new(x.clone()).unwrap();
        let table = pairwise_distances(&view, &metrics, 3).unwrap();
        assert_eq!(table.view_id(), 3);
        for i in 0..n {
            assert_eq!(table.get(i, i), 0.0);
            for j in 0..n {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let xj: Vec<f64> = x.row(j).iter().copied().collect();
                let d = mahalanobis_inv(&xi, &xj, &covs[i], &covs[j]).unwrap();
                assert_eq!(table.get(i, j), d);
                assert_eq!(table.get(i, j), table.get(j, i));
            }
        }
        let dense = table.to_dense();
        assert_eq!(dense, dense.transpose());
    }

    proptest! {
        #[test]
        fn distance_is_exactly_symmetric_and_nonnegative(seed in any::<u64>(), m in 1usize..6, gamma in 0.0f64..0.5) {
            let mut rng = rng_from_seed(seed);
            let a = cov(random_spd(m, &mut rng));
            let b = cov(random_spd(m, &mut rng));
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let d1 = mahalanobis_pinv(&x, &y, &a, &b, gamma).unwrap();
            let d2 = mahalanobis_pinv(&y, &x, &b, &a, gamma).unwrap();
            prop_assert_eq!(d1, d2);
            prop_assert!(d1 >= 0.0);
            let e1 = mahalanobis_inv(&x, &y, &a, &b).unwrap();
            let e2 = mahalanobis_inv(&y, &x, &b, &a).unwrap();
            prop_assert_eq!(e1, e2);
        }
    }
}
