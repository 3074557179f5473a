//! Stochastic generators: Euler–Maruyama paths with mirror reflection, short-time point clouds
//! pushed through observation maps, and the synthetic view maps used by the experiments.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::dataset::{MultiViewDataset, ViewMatrix};
use crate::error::{MvkError, Result};

/// The only exponents a random polynomial view may draw.
pub const POLYNOMIAL_EXPONENTS: [i32; 6] = [-3, -2, -1, 1, 2, 3];

/// Seeded generator used everywhere in the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Decorrelated child seed for an independent stream (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the cloud around sample `index` in a view whose stream seed is `view_seed`.
pub fn point_seed(view_seed: u64, index: usize) -> u64 {
    view_seed ^ index as u64
}

/// Per-coordinate boundary behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Boundary {
    #[default]
    Free,
    Reflect { lo: f64, hi: f64 },
}

impl Boundary {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Boundary::Free => x,
            Boundary::Reflect { lo, hi } => reflect_into(x, lo, hi),
        }
    }
}

/// Folds `x` back into `[lo, hi]` by repeated mirroring at the walls.
pub fn reflect_into(x: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * width);
    if y > width {
        y = 2.0 * width - y;
    }
    (lo + y).clamp(lo, hi)
}

/// Drift coefficient `a^r(state)` for coordinate `r`.
pub type DriftFn = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone, Default)]
pub enum Drift {
    #[default]
    Zero,
    Custom(DriftFn),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Zero => f.write_str("Zero"),
            Drift::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Diagonal-noise Itô process `dθ^r = a^r(θ) dt + dw^r`.
#[derive(Debug, Clone)]
pub struct ItoProcessSpec {
    pub dim: usize,
    pub drift: Drift,
    pub dt: f64,
    pub boundary: Vec<Boundary>,
    pub seed: u64,
    pub start: Vec<f64>,
}

impl ItoProcessSpec {
    /// Free, driftless process started at the origin.
    pub fn new(dim: usize, dt: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            dim,
            drift: Drift::Zero,
            dt,
            boundary: vec![Boundary::Free; dim],
            seed,
            start: vec![0.0; dim],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = drift;
        self
    }

    /// Same reflecting interval on every coordinate.
    pub fn with_reflection(mut self, lo: f64, hi: f64) -> Result<Self> {
        self.boundary = vec![Boundary::Reflect { lo, hi }; self.dim];
        self.validate()?;
        Ok(self)
    }

    pub fn with_boundary(mut self, boundary: Vec<Boundary>) -> Result<Self> {
        self.boundary = boundary;
        self.validate()?;
        Ok(self)
    }

    pub fn with_start(mut self, start: Vec<f64>) -> Result<Self> {
        self.start = start;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(MvkError::InvalidParameter("process dimension must be positive".into()));
        }
        // dt = 0 is accepted as the degenerate frozen process.
        if !(self.dt >= 0.0 && self.dt.is_finite()) {
            return Err(MvkError::InvalidParameter(format!("dt must be finite and >= 0, got {}", self.dt)));
        }
        if self.boundary.len() != self.dim || self.start.len() != self.dim {
            return Err(MvkError::InvalidParameter(format!(
                "boundary ({}) and start ({}) must both have length {}",
                self.boundary.len(),
                self.start.len(),
                self.dim
            )));
        }
        for b in &self.boundary {
            if let Boundary::Reflect { lo, hi } = *b {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(MvkError::InvalidParameter(format!("reflect bounds need lo < hi, got [{lo}, {hi}]")));
                }
            }
        }
        if self.start.iter().any(|v| !v.is_finite()) {
            return Err(MvkError::InvalidParameter("start state must be finite".into()));
        }
        Ok(())
    }
}

/// Euler–Maruyama path with `n` rows; row 0 is the (boundary-folded) start state.
pub fn simulate_trajectory(spec: &ItoProcessSpec, n: usize) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if n == 0 {
        return Err(MvkError::InvalidParameter("trajectory needs at least one step".into()));
    }
    let d = spec.dim;
    let mut rng = rng_from_seed(spec.seed);
    let sqrt_dt = spec.dt.sqrt();
    let mut out = DMatrix::zeros(n, d);
    let mut state: Vec<f64> = spec
        .start
        .iter()
        .zip(&spec.boundary)
        .map(|(&x, b)| b.apply(x))
        .collect();
    let mut next = vec![0.0; d];
    for r in 0..d {
        out[(0, r)] = state[r];
    }
    for t in 1..n {
        for r in 0..d {
            let a = match &spec.drift {
                Drift::Zero => 0.0,
                Drift::Custom(f) => f(r, &state),
            };
            if !a.is_finite() {
                return Err(MvkError::DriftDiverged { step: t - 1, coordinate: r });
            }
            let xi: f64 = StandardNormal.sample(&mut rng);
            next[r] = spec.boundary[r].apply(state[r] + a * spec.dt + sqrt_dt * xi);
            if !next[r].is_finite() {
                return Err(MvkError::DriftDiverged { step: t - 1, coordinate: r });
            }
        }
        std::mem::swap(&mut state, &mut next);
        for r in 0..d {
            out[(t, r)] = state[r];
        }
    }
    Ok(out)
}

/// `x^k = Σ_q a[k][q] · u_q^{b[k][q]}` where `u` is the intrinsic state followed by the interference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialView {
    coefficients: DMatrix<f64>,
    exponents: DMatrix<i32>,
    view_id: usize,
}

impl PolynomialView {
    pub fn new(coefficients: DMatrix<f64>, exponents: DMatrix<i32>, view_id: usize) -> Result<Self> {
        if coefficients.shape() != exponents.shape() {
            return Err(MvkError::ShapeMismatch {
                expected: coefficients.shape(),
                found: exponents.shape(),
            });
        }
        if coefficients.iter().any(|a| !a.is_finite()) {
            return Err(MvkError::InvalidParameter("polynomial coefficients must be finite".into()));
        }
        if exponents.iter().any(|&b| b == 0) {
            return Err(MvkError::InvalidParameter("polynomial exponents must be nonzero".into()));
        }
        Ok(Self {
            coefficients,
            exponents,
            view_id,
        })
    }

    /// A fixed well-conditioned view with inputs `(θ¹, θ², ψ)`.
    pub fn reference_instance() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 3, &[
            -1.94, 0.24, -0.62,
            -1.59, 1.39, 0.53,
            -0.68, 0.34, 1.10,
        ]);
        #[rustfmt::skip]
        let b = DMatrix::from_row_slice(3, 3, &[
            1, -2, 1,
            1, 1, 3,
            -3, 2, -2,
        ]);
        Self::new(a, b, 0).expect("static instance is valid")
    }

    /// Coefficients uniform on `[-2, 2]`, exponents uniform on [`POLYNOMIAL_EXPONENTS`].
    pub fn random<R: Rng + ?Sized>(rng: &mut R, outputs: usize, inputs: usize, view_id: usize) -> Self {
        let coef = Uniform::new_inclusive(-2.0, 2.0).expect("valid range");
        let a = DMatrix::from_fn(outputs, inputs, |_, _| coef.sample(rng));
        let b = DMatrix::from_fn(outputs, inputs, |_, _| {
            POLYNOMIAL_EXPONENTS[rng.random_range(0..POLYNOMIAL_EXPONENTS.len())]
        });
        Self {
            coefficients: a,
            exponents: b,
            view_id,
        }
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn exponents(&self) -> &DMatrix<i32> {
        &self.exponents
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    pub fn input_dim(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.coefficients.nrows()
    }

    fn check_defined(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(MvkError::ShapeMismatch {
                expected: (1, self.input_dim()),
                found: (1, u.len()),
            });
        }
        for k in 0..self.output_dim() {
            for (q, &x) in u.iter().enumerate() {
                let b = self.exponents[(k, q)];
                if x == 0.0 && b < 0 && self.coefficients[(k, q)] != 0.0 {
                    return Err(MvkError::SingularMap { coordinate: q, exponent: b });
                }
            }
        }
        Ok(())
    }

    /// Writes the image of `u` into `out` (length `output_dim`).
    pub fn evaluate_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_defined(u)?;
        for (k, o) in out.iter_mut().enumerate().take(self.output_dim()) {
            let mut acc = 0.0;
            for (q, &x) in u.iter().enumerate() {
                let a = self.coefficients[(k, q)];
                if a != 0.0 {
                    acc += a * x.powi(self.exponents[(k, q)]);
                }
            }
            *o = acc;
        }
        Ok(())
    }

    /// `∂x^k/∂u_q`, an `output_dim × input_dim` matrix.
    pub fn jacobian(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        self.check_defined(u)?;
        Ok(DMatrix::from_fn(self.output_dim(), self.input_dim(), |k, q| {
            let a = self.coefficients[(k, q)];
            let b = self.exponents[(k, q)];
            if a == 0.0 {
                0.0
            } else {
                a * f64::from(b) * u[q].powi(b - 1)
            }
        }))
    }
}

/// Evaluates a polynomial view at intrinsic state `theta` with interference `psi`.
pub fn apply_polynomial_view(theta: &[f64], psi: f64, map: &PolynomialView) -> Result<DVector<f64>> {
    let mut u = theta.to_vec();
    u.push(psi);
    let mut out = DVector::zeros(map.output_dim());
    map.evaluate_into(&u, out.as_mut_slice())?;
    Ok(out)
}

/// `((2 + cos 8θ) cos θ, (2 + cos 8θ) sin θ, 3θ² − θ)`.
pub fn generate_helix(theta: f64) -> Vector3<f64> {
    let r = 2.0 + (8.0 * theta).cos();
    Vector3::new(r * theta.cos(), r * theta.sin(), 3.0 * theta * theta - theta)
}

/// Derivative of [`generate_helix`] with respect to θ.
pub fn helix_tangent(theta: f64) -> Vector3<f64> {
    let r = 2.0 + (8.0 * theta).cos();
    let dr = -8.0 * (8.0 * theta).sin();
    Vector3::new(
        dr * theta.cos() - r * theta.sin(),
        dr * theta.sin() + r * theta.cos(),
        6.0 * theta - 1.0,
    )
}

/// Flower-shaped closed curve, deformed per view by three phases.
pub fn generate_flower_view(theta: f64, phases: &[f64; 3]) -> Vector3<f64> {
    let a = theta + phases[0];
    let b = theta + phases[1];
    let c = (theta + phases[2]).rem_euclid(TAU);
    Vector3::new(
        4.0 / 3.0 * a.cos() - (4.0 * a).cos() / 3.0,
        4.0 / 3.0 * b.sin() - (4.0 * b).sin() / 3.0,
        (0.8 * c).sin(),
    )
}

/// Observation function of one view.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationMap {
    /// Input is `(θ, ψ)`.
    Polynomial(PolynomialView),
    /// Input is scalar θ.
    Helix,
    /// Input is scalar θ.
    Flower { phases: [f64; 3], view_id: usize },
}

impl ObservationMap {
    pub fn input_dim(&self) -> usize {
        match self {
            ObservationMap::Polynomial(p) => p.input_dim(),
            ObservationMap::Helix | ObservationMap::Flower { .. } => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ObservationMap::Polynomial(p) => p.output_dim(),
            ObservationMap::Helix | ObservationMap::Flower { .. } => 3,
        }
    }

    pub fn evaluate_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        let scalar = |u: &[f64]| -> Result<f64> {
            match u {
                [t] => Ok(*t),
                _ => Err(MvkError::ShapeMismatch {
                    expected: (1, 1),
                    found: (1, u.len()),
                }),
            }
        };
        match self {
            ObservationMap::Polynomial(p) => p.evaluate_into(u, out),
            ObservationMap::Helix => {
                out.copy_from_slice(generate_helix(scalar(u)?).as_slice());
                Ok(())
            }
            ObservationMap::Flower { phases, .. } => {
                out.copy_from_slice(generate_flower_view(scalar(u)?, phases).as_slice());
                Ok(())
            }
        }
    }

    pub fn evaluate(&self, u: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.output_dim());
        self.evaluate_into(u, out.as_mut_slice())?;
        Ok(out)
    }
}

/// Images of `N_c` short-time simulations started at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    center_index: usize,
    points: DMatrix<f64>,
    dt: f64,
}

impl PointCloud {
    pub fn new(center_index: usize, points: DMatrix<f64>, dt: f64) -> Result<Self> {
        if points.nrows() < 2 {
            return Err(MvkError::InsufficientSamples {
                needed: 2,
                got: points.nrows(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(MvkError::InvalidData("point cloud has non-finite entries".into()));
        }
        Ok(Self {
            center_index,
            points,
            dt,
        })
    }

    pub fn with_center_index(mut self, index: usize) -> Self {
        self.center_index = index;
        self
    }

    pub fn center_index(&self) -> usize {
        self.center_index
    }

    /// `N_c × m` matrix, one simulated observation per row.
    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// One driftless Euler–Maruyama step of length `dt` from `(θ, ψ)`, repeated `n_c` times and mapped.
///
/// `psi` is appended to `theta` to form the map input; pass `None` for maps without interference.
pub fn sample_point_cloud(
    theta: &[f64],
    psi: Option<f64>,
    map: &ObservationMap,
    n_c: usize,
    dt: f64,
    seed: u64,
) -> Result<PointCloud> {
    if n_c < 2 {
        return Err(MvkError::InsufficientSamples { needed: 2, got: n_c });
    }
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(MvkError::InvalidParameter(format!("dt must be finite and >= 0, got {dt}")));
    }
    let mut center = theta.to_vec();
    center.extend(psi);
    if center.len() != map.input_dim() {
        return Err(MvkError::ShapeMismatch {
            expected: (1, map.input_dim()),
            found: (1, center.len()),
        });
    }
    let m = map.output_dim();
    let mut rng = rng_from_seed(seed);
    let sqrt_dt = dt.sqrt();
    let mut u = vec![0.0; center.len()];
    let mut out = vec![0.0; m];
    let mut points = DMatrix::zeros(n_c, m);
    for s in 0..n_c {
        for (x, &c) in u.iter_mut().zip(&center) {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *x = c + sqrt_dt * xi;
        }
        map.evaluate_into(&u, &mut out)?;
        for k in 0..m {
            points[(s, k)] = out[k];
        }
    }
    PointCloud::new(0, points, dt)
}

/// How sample centres are placed in the intrinsic box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CenterSampler {
    /// Independent uniform draws.
    #[default]
    Uniform,
    /// Consecutive states of a reflected Brownian path started at the box centre.
    ReflectedBrownian { dt: f64 },
}

/// `n × dim` centres inside `[lo, hi]^dim`.
pub fn sample_centers(n: usize, dim: usize, lo: f64, hi: f64, sampler: CenterSampler, seed: u64) -> Result<DMatrix<f64>> {
    if !(lo < hi) {
        return Err(MvkError::InvalidParameter(format!("box needs lo < hi, got [{lo}, {hi}]")));
    }
    match sampler {
        CenterSampler::Uniform => {
            let mut rng = rng_from_seed(seed);
            let u = Uniform::new_inclusive(lo, hi).expect("valid range");
            Ok(DMatrix::from_fn(n, dim, |_, _| u.sample(&mut rng)))
        }
        CenterSampler::ReflectedBrownian { dt } => {
            if !(dt > 0.0) {
                return Err(MvkError::InvalidParameter("Brownian centre sampler needs dt > 0".into()));
            }
            let spec = ItoProcessSpec::new(dim, dt, seed)?
                .with_reflection(lo, hi)?
                .with_start(vec![0.5 * (lo + hi); dim])?;
            simulate_trajectory(&spec, n)
        }
    }
}

/// Rejection rule that keeps only random views whose Jacobian stays well conditioned on the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewDrawConfig {
    pub lo: f64,
    pub hi: f64,
    /// Smallest singular value of the Jacobian allowed anywhere on the grid.
    pub min_singular_value: f64,
    /// Grid points per input axis.
    pub grid_points: usize,
    pub max_attempts: usize,
}

impl Default for ViewDrawConfig {
    fn default() -> Self {
        Self {
            lo: 1.0,
            hi: 2.0,
            min_singular_value: 0.1,
            grid_points: 11,
            max_attempts: 100_000,
        }
    }
}

/// Smallest singular value of the view's Jacobian over a regular grid of `[lo, hi]^inputs`.
pub fn min_jacobian_singular_value(view: &PolynomialView, lo: f64, hi: f64, grid_points: usize) -> f64 {
    let d = view.input_dim();
    let g = grid_points.max(2);
    let total = g.pow(d as u32);
    let mut u = vec![0.0; d];
    let mut worst = f64::INFINITY;
    for idx in 0..total {
        let mut rest = idx;
        for x in u.iter_mut() {
            *x = lo + (hi - lo) * (rest % g) as f64 / (g - 1) as f64;
            rest /= g;
        }
        let s = match view.jacobian(&u) {
            Ok(j) => j.singular_values().min(),
            Err(_) => 0.0,
        };
        worst = worst.min(s);
    }
    worst
}

/// Draws `count` random polynomial views that pass the conditioning rule.
/// Returns the views and the total number of draws.
pub fn draw_conditioned_views<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    outputs: usize,
    inputs: usize,
    cfg: &ViewDrawConfig,
) -> Result<(Vec<PolynomialView>, usize)> {
    let mut views = Vec::with_capacity(count);
    let mut attempts = 0;
    while views.len() < count {
        if attempts >= cfg.max_attempts {
            return Err(MvkError::InvalidParameter(format!(
                "no view met the conditioning bound {} after {attempts} draws",
                cfg.min_singular_value
            )));
        }
        attempts += 1;
        let v = PolynomialView::random(rng, outputs, inputs, views.len());
        if min_jacobian_singular_value(&v, cfg.lo, cfg.hi, cfg.grid_points) >= cfg.min_singular_value {
            views.push(v);
        }
    }
    Ok((views, attempts))
}

/// Parameters of the dynamical multi-view benchmark: a 2-D consensus in a box plus one
/// interference coordinate per view, observed through random polynomial maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianConsensusSpec {
    pub n: usize,
    pub views: usize,
    pub intrinsic_dim: usize,
    pub sampler: CenterSampler,
    pub draw: ViewDrawConfig,
    pub seed: u64,
}

impl Default for BrownianConsensusSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            views: 7,
            intrinsic_dim: 2,
            sampler: CenterSampler::Uniform,
            draw: ViewDrawConfig::default(),
            seed: 0,
        }
    }
}

/// A drawn instance of the benchmark.
#[derive(Debug, Clone)]
pub struct BrownianConsensusData {
    /// `n × d` consensus states.
    pub theta: DMatrix<f64>,
    /// `n × ζ` interference states, column `l` for view `l`.
    pub psi: DMatrix<f64>,
    pub maps: Vec<PolynomialView>,
    pub view_draws: usize,
}

impl BrownianConsensusData {
    pub fn generate(spec: &BrownianConsensusSpec) -> Result<Self> {
        if spec.n == 0 || spec.views == 0 || spec.intrinsic_dim == 0 {
            return Err(MvkError::InvalidParameter("n, views and intrinsic_dim must be positive".into()));
        }
        let (lo, hi) = (spec.draw.lo, spec.draw.hi);
        let mut rng = rng_from_seed(derive_seed(spec.seed, 0));
        let (maps, view_draws) =
            draw_conditioned_views(&mut rng, spec.views, 3, spec.intrinsic_dim + 1, &spec.draw)?;
        // Negative exponents are undefined at 0, so any exact zero triggers a redraw.
        let mut attempt = 0u64;
        loop {
            let theta = sample_centers(spec.n, spec.intrinsic_dim, lo, hi, spec.sampler, derive_seed(spec.seed, 1 + 2 * attempt))?;
            let psi = sample_centers(spec.n, spec.views, lo, hi, spec.sampler, derive_seed(spec.seed, 2 + 2 * attempt))?;
            if theta.iter().chain(psi.iter()).all(|&v| v != 0.0) {
                return Ok(Self {
                    theta,
                    psi,
                    maps,
                    view_draws,
                });
            }
            attempt += 1;
        }
    }

    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn num_views(&self) -> usize {
        self.maps.len()
    }

    /// Map input `(θ_i, ψ_{i,l})`.
    pub fn state(&self, i: usize, l: usize) -> Vec<f64> {
        let mut u: Vec<f64> = self.theta.row(i).iter().copied().collect();
        u.push(self.psi[(i, l)]);
        u
    }

    pub fn observation_map(&self, l: usize) -> ObservationMap {
        ObservationMap::Polynomial(self.maps[l].clone())
    }

    /// Observed samples of every view, with θ attached as ground truth.
    pub fn dataset(&self) -> Result<MultiViewDataset> {
        let n = self.n();
        let mut views = Vec::with_capacity(self.num_views());
        for (l, map) in self.maps.iter().enumerate() {
            let mut x = DMatrix::zeros(n, map.output_dim());
            let mut out = vec![0.0; map.output_dim()];
            for i in 0..n {
                map.evaluate_into(&self.state(i, l), &mut out)?;
                for (k, v) in out.iter().enumerate() {
                    x[(i, k)] = *v;
                }
            }
            views.push(ViewMatrix::new(x)?);
        }
        MultiViewDataset::new(views)?.with_ground_truth(self.theta.clone())
    }

    /// Cloud around sample `i` in view `l`; the seed depends only on `(seed, l, i)`.
    pub fn cloud(&self, i: usize, l: usize, n_c: usize, dt: f64, seed: u64) -> Result<PointCloud> {
        let theta: Vec<f64> = self.theta.row(i).iter().copied().collect();
        let view_seed = derive_seed(seed, 1000 + l as u64);
        Ok(sample_point_cloud(
            &theta,
            Some(self.psi[(i, l)]),
            &self.observation_map(l),
            n_c,
            dt,
            point_seed(view_seed, i),
        )?
        .with_center_index(i))
    }
}

/// `n` helix samples with θ uniform on `[0, 2π]`; θ is the ground truth.
pub fn generate_helix_dataset(n: usize, seed: u64) -> Result<MultiViewDataset> {
    let mut rng = rng_from_seed(seed);
    let u = Uniform::new_inclusive(0.0, TAU).expect("valid range");
    let theta = DMatrix::from_fn(n, 1, |_, _| u.sample(&mut rng));
    let x = DMatrix::from_fn(n, 3, |i, k| generate_helix(theta[(i, 0)])[k]);
    MultiViewDataset::new(vec![ViewMatrix::new(x)?])?.with_ground_truth(theta)
}

/// `views` flower views of `n` shared angles; θ and all phases uniform on `[0, 2π)`.
/// Returns the dataset (θ as ground truth) and the per-view phases.
pub fn generate_flower_dataset(n: usize, views: usize, seed: u64) -> Result<(MultiViewDataset, Vec<[f64; 3]>)> {
    if views == 0 {
        return Err(MvkError::InvalidParameter("need at least one view".into()));
    }
    let mut rng = rng_from_seed(seed);
    let u = Uniform::new(0.0, TAU).expect("valid range");
    let theta = DMatrix::from_fn(n, 1, |_, _| u.sample(&mut rng));
    let phases: Vec<[f64; 3]> = (0..views)
        .map(|_| [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)])
        .collect();
    let mats = phases
        .iter()
        .map(|z| ViewMatrix::new(DMatrix::from_fn(n, 3, |i, k| generate_flower_view(theta[(i, 0)], z)[k])))
        .collect::<Result<Vec<_>>>()?;
    Ok((MultiViewDataset::new(mats)?.with_ground_truth(theta)?, phases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn frozen_process_is_constant() {
        let spec = ItoProcessSpec::new(3, 0.0, 7).unwrap().with_start(vec![0.1, -2.0, 5.0]).unwrap();
        let path = simulate_trajectory(&spec, 50).unwrap();
        for t in 0..50 {
            assert_eq!(path.row(t), path.row(0));
        }
    }

    #[test]
    fn brownian_increments_have_dt_variance() {
        let dt = 0.01;
        let n = 100_000;
        let spec = ItoProcessSpec::new(2, dt, 42).unwrap();
        let path = simulate_trajectory(&spec, n + 1).unwrap();
        for r in 0..2 {
            let inc: Vec<f64> = (0..n).map(|t| path[(t + 1, r)] - path[(t, r)]).collect();
            let mean = inc.iter().sum::<f64>() / n as f64;
            let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let mean_sd = (dt / n as f64).sqrt();
            // Sample variance of Gaussian data has sd σ²·sqrt(2/(n-1)).
            let var_sd = dt * (2.0 / (n - 1) as f64).sqrt();
            assert!(mean.abs() < 3.0 * mean_sd, "mean {mean}");
            assert!((var - dt).abs() < 3.0 * var_sd, "var {var}");
        }
    }

    #[test]
    fn reflected_path_stays_in_unit_box() {
        let spec = ItoProcessSpec::new(2, 0.05, 3)
            .unwrap()
            .with_reflection(0.0, 1.0)
            .unwrap()
            .with_start(vec![0.5, 0.5])
            .unwrap();
        let path = simulate_trajectory(&spec, 20_000).unwrap();
        assert!(path.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn reflection_mirrors_at_walls() {
        assert_abs_diff_eq!(reflect_into(1.2, 0.0, 1.0), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(reflect_into(-0.3, 0.0, 1.0), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(reflect_into(2.25, 0.0, 1.0), 0.25, epsilon = 1e-15);
        assert_eq!(reflect_into(0.4, 0.0, 1.0), 0.4);
    }

    #[test]
    fn diverging_drift_is_reported() {
        let drift = Drift::Custom(Arc::new(|r, x: &[f64]| if r == 1 && x[0] > -10.0 { f64::NAN } else { 0.0 }));
        let spec = ItoProcessSpec::new(2, 0.1, 1).unwrap().with_drift(drift);
        assert!(matches!(
            simulate_trajectory(&spec, 5),
            Err(MvkError::DriftDiverged { step: 0, coordinate: 1 })
        ));
    }

    #[test]
    fn constant_drift_shifts_mean() {
        let drift = Drift::Custom(Arc::new(|_, _: &[f64]| 2.0));
        let spec = ItoProcessSpec::new(1, 0.01, 11).unwrap().with_drift(drift);
        let path = simulate_trajectory(&spec, 10_001).unwrap();
        // X_T = 2T + W_T with T = 100, so X_T / T ≈ 2 ± 0.3.
        assert!((path[(10_000, 0)] / 100.0 - 2.0).abs() < 0.3);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let spec = ItoProcessSpec::new(3, 0.02, 99).unwrap().with_reflection(-1.0, 1.0).unwrap();
        assert_eq!(simulate_trajectory(&spec, 300).unwrap(), simulate_trajectory(&spec, 300).unwrap());
        let map = ObservationMap::Polynomial(PolynomialView::reference_instance());
        let a = sample_point_cloud(&[1.2, 1.7], Some(1.4), &map, 100, 0.005, 5).unwrap();
        let b = sample_point_cloud(&[1.2, 1.7], Some(1.4), &map, 100, 0.005, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ItoProcessSpec::new(0, 0.1, 0).is_err());
        assert!(ItoProcessSpec::new(1, -0.1, 0).is_err());
        assert!(ItoProcessSpec::new(1, 0.1, 0).unwrap().with_reflection(1.0, 1.0).is_err());
        let spec = ItoProcessSpec::new(1, 0.1, 0).unwrap();
        assert!(simulate_trajectory(&spec, 0).is_err());
    }

    #[test]
    fn zero_coefficients_give_origin() {
        let v = PolynomialView::new(DMatrix::zeros(3, 3), DMatrix::from_element(3, 3, -2), 0).unwrap();
        let x = apply_polynomial_view(&[0.3, 0.9], 1.5, &v).unwrap();
        assert_eq!(x, DVector::zeros(3));
    }

    #[test]
    fn first_coordinate_copied_to_every_output() {
        let mut a = DMatrix::zeros(3, 3);
        a.column_mut(0).fill(1.0);
        let v = PolynomialView::new(a, DMatrix::from_element(3, 3, 1), 0).unwrap();
        let x = apply_polynomial_view(&[0.37, 5.0], -2.0, &v).unwrap();
        assert_eq!(x, DVector::from_element(3, 0.37));
    }

    #[test]
    fn printed_instance_first_coordinate() {
        let x = apply_polynomial_view(&[0.5, 0.5], 1.0, &PolynomialView::reference_instance()).unwrap();
        assert_abs_diff_eq!(x[0], -0.63, epsilon = 1e-12);
    }

    #[test]
    fn zero_base_with_negative_exponent_is_singular() {
        let v = PolynomialView::reference_instance();
        assert!(matches!(
            apply_polynomial_view(&[0.5, 0.0], 1.0, &v),
            Err(MvkError::SingularMap { coordinate: 1, exponent: -2 })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let v = PolynomialView::reference_instance();
        let u = [1.3, 1.6, 1.1];
        let j = v.jacobian(&u).unwrap();
        let h = 1e-6;
        for q in 0..3 {
            let (mut up, mut dn) = (u, u);
            up[q] += h;
            dn[q] -= h;
            let mut fu = [0.0; 3];
            let mut fd = [0.0; 3];
            v.evaluate_into(&up, &mut fu).unwrap();
            v.evaluate_into(&dn, &mut fd).unwrap();
            for k in 0..3 {
                assert_abs_diff_eq!(j[(k, q)], (fu[k] - fd[k]) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn random_views_use_allowed_values() {
        let mut rng = rng_from_seed(1);
        for _ in 0..20 {
            let v = PolynomialView::random(&mut rng, 3, 3, 0);
            assert!(v.coefficients().iter().all(|a| (-2.0..=2.0).contains(a)));
            assert!(v.exponents().iter().all(|b| POLYNOMIAL_EXPONENTS.contains(b)));
        }
    }

    #[test]
    fn conditioned_views_pass_their_bound() {
        let mut rng = rng_from_seed(4);
        let cfg = ViewDrawConfig::default();
        let (views, draws) = draw_conditioned_views(&mut rng, 3, 3, 3, &cfg).unwrap();
        assert_eq!(views.len(), 3);
        assert!(draws >= 3);
        for v in &views {
            assert!(min_jacobian_singular_value(v, cfg.lo, cfg.hi, cfg.grid_points) >= cfg.min_singular_value);
        }
    }

    #[test]
    fn helix_reference_points() {
        assert_abs_diff_eq!(generate_helix(0.0), Vector3::new(3.0, 0.0, 0.0), epsilon = 1e-15);
        let p = generate_helix(PI);
        assert_abs_diff_eq!(p, Vector3::new(-3.0, 0.0, 3.0 * PI * PI - PI), epsilon = 1e-12);
        let p = generate_helix(PI / 2.0);
        assert_abs_diff_eq!(p, Vector3::new(0.0, 3.0, 3.0 * PI * PI / 4.0 - PI / 2.0), epsilon = 1e-12);
    }

    #[test]
    fn helix_tangent_matches_finite_differences() {
        for &t in &[0.0, 0.4, 1.0, 2.5, 5.9] {
            let h = 1e-6;
            let fd = (generate_helix(t + h) - generate_helix(t - h)) / (2.0 * h);
            assert_abs_diff_eq!(helix_tangent(t), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn flower_reference_points() {
        assert_abs_diff_eq!(generate_flower_view(0.0, &[0.0; 3]), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        let p = generate_flower_view(PI / 2.0, &[0.0; 3]);
        assert_abs_diff_eq!(p, Vector3::new(-1.0 / 3.0, 4.0 / 3.0, (0.4 * PI).sin()), epsilon = 1e-12);
    }

    #[test]
    fn point_cloud_collapses_without_time() {
        let map = ObservationMap::Helix;
        let cloud = sample_point_cloud(&[0.7], None, &map, 10, 0.0, 3).unwrap();
        let c = generate_helix(0.7);
        for s in 0..10 {
            for k in 0..3 {
                assert_eq!(cloud.points()[(s, k)], c[k]);
            }
        }
    }

    #[test]
    fn point_cloud_validates_inputs() {
        let map = ObservationMap::Helix;
        assert!(sample_point_cloud(&[0.7], None, &map, 1, 0.1, 0).is_err());
        assert!(sample_point_cloud(&[0.7, 1.0], None, &map, 5, 0.1, 0).is_err());
    }

    #[test]
    fn uniform_and_brownian_centres_stay_in_box() {
        for sampler in [CenterSampler::Uniform, CenterSampler::ReflectedBrownian { dt: 0.01 }] {
            let c = sample_centers(500, 2, 1.0, 2.0, sampler, 8).unwrap();
            assert_eq!(c.shape(), (500, 2));
            assert!(c.iter().all(|v| (1.0..=2.0).contains(v)));
        }
    }

    #[test]
    fn consensus_instance_is_consistent() {
        let spec = BrownianConsensusSpec {
            n: 40,
            views: 2,
            ..Default::default()
        };
        let data = BrownianConsensusData::generate(&spec).unwrap();
        let ds = data.dataset().unwrap();
        assert_eq!(ds.num_views(), 2);
        assert_eq!(ds.n(), 40);
        let x = apply_polynomial_view(&[data.theta[(5, 0)], data.theta[(5, 1)]], data.psi[(5, 1)], &data.maps[1]).unwrap();
        assert_eq!(ds.view(1).data().row(5).transpose(), x);
        let c1 = data.cloud(3, 1, 50, 0.005, 9).unwrap();
        let c2 = data.cloud(3, 1, 50, 0.005, 9).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.center_index(), 3);
        assert_ne!(c1, data.cloud(4, 1, 50, 0.005, 9).unwrap());
    }

    proptest! {
        #[test]
        fn flower_is_periodic_away_from_seam(t in 0.0f64..TAU, z0 in 0.0f64..TAU, z1 in 0.0f64..TAU, z2 in 0.0f64..TAU) {
            let z = [z0, z1, z2];
            let a = generate_flower_view(t, &z);
            let b = generate_flower_view(t + TAU, &z);
            prop_assert!((a[0] - b[0]).abs() < 1e-9);
            prop_assert!((a[1] - b[1]).abs() < 1e-9);
            let c = (t + z2).rem_euclid(TAU);
            if c > 1e-6 && TAU - c > 1e-6 {
                prop_assert!((a[2] - b[2]).abs() < 1e-9);
            }
        }

        #[test]
        fn reflection_lands_in_box(x in -50.0f64..50.0, lo in -3.0f64..3.0, w in 0.01f64..5.0) {
            let y = reflect_into(x, lo, lo + w);
            prop_assert!(y >= lo && y <= lo + w);
        }

        #[test]
        fn derived_seeds_differ_by_stream(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
            prop_assume!(a != b);
            prop_assert_ne!(derive_seed(seed, a), derive_seed(seed, b));
        }
    }
}
