//! Diffusion maps through the symmetric conjugate `S = D^{-1/2} K D^{-1/2}` of `P = D⁻¹K`.
//!
//! `S` and `P` share eigenvalues; right eigenvectors of `P` are `D^{-1/2} v`. They are scaled so
//! the trivial one is identically 1, and each is signed so its first nonzero entry is positive.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MvkError, Result};
use crate::multiview::KernelMatrix;

/// Top-eigenvalue multiplicity above this tolerance means the Markov chain is disconnected.
const DEGENERACY_TOL: f64 = 1e-12;

/// `D⁻¹K`.
pub fn row_normalize(k: &KernelMatrix) -> DMatrix<f64> {
    let v = k.values();
    let mut p = v.clone();
    for i in 0..v.nrows() {
        let s: f64 = v.row(i).iter().sum();
        p.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    p
}

fn degrees(k: &KernelMatrix) -> Vec<f64> {
    let v = k.values();
    (0..v.nrows()).map(|i| v.row(i).iter().sum()).collect()
}

/// `S_ij = K_ij / (√d_i √d_j)`; exactly symmetric because `K` is.
pub fn symmetric_conjugate(k: &KernelMatrix) -> DMatrix<f64> {
    let q: Vec<f64> = degrees(k).iter().map(|d| d.sqrt()).collect();
    let v = k.values();
    DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / (q[i] * q[j]))
}

/// Eigenvalues of `D⁻¹K`, descending.
pub fn kernel_spectrum(k: &KernelMatrix) -> Result<Vec<f64>> {
    let s = symmetric_conjugate(k);
    let vals = s.symmetric_eigenvalues();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(MvkError::SpectralFailure("non-finite eigenvalue".into()));
    }
    let mut out: Vec<f64> = vals.iter().copied().collect();
    out.sort_by(|a, b| b.total_cmp(a));
    Ok(out)
}

/// Measured deviations of a kernel from the invariants every constructed kernel must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelAudit {
    pub label: String,
    pub n: usize,
    /// Largest `|K_ij − K_ji|`.
    pub max_asymmetry: f64,
    /// Largest `|K_ii − 1|`.
    pub max_diagonal_error: f64,
    pub min_entry: f64,
    pub max_entry: f64,
    /// Largest `|Σ_j P_ij − 1|` for `P = D⁻¹K`.
    pub max_row_sum_error: f64,
    /// `|λ₀ − 1|`, from the full spectrum when given, else from the Rayleigh quotient of `S`
    /// at `√d` (row-stochasticity bounds every eigenvalue by 1 in modulus).
    pub lambda0_error: f64,
}

impl KernelAudit {
    pub fn passes(&self) -> bool {
        self.max_asymmetry == 0.0
            && self.max_diagonal_error == 0.0
            && self.min_entry > 0.0
            && self.max_entry <= 1.0
            && self.max_row_sum_error <= 1e-12
            && self.lambda0_error <= 1e-10
    }
}

/// Measures `k` against the kernel invariants. `eigenvalues`, if supplied, are the descending
/// eigenvalues of `D⁻¹K`.
pub fn audit_kernel(label: &str, k: &KernelMatrix, eigenvalues: Option<&[f64]>) -> KernelAudit {
    let v = k.values();
    let n = v.nrows();
    let mut max_asymmetry: f64 = 0.0;
    let mut max_diagonal_error: f64 = 0.0;
    for i in 0..n {
        max_diagonal_error = max_diagonal_error.max((v[(i, i)] - 1.0).abs());
        for j in i + 1..n {
            max_asymmetry = max_asymmetry.max((v[(i, j)] - v[(j, i)]).abs());
        }
    }
    let p = row_normalize(k);
    let max_row_sum_error = (0..n).map(|i| (p.row(i).sum() - 1.0).abs()).fold(0.0, f64::max);
    let lambda0_error = match eigenvalues {
        Some(e) if !e.is_empty() => (e[0] - 1.0).abs(),
        _ => {
            let d = degrees(k);
            let total: f64 = d.iter().sum();
            let u: Vec<f64> = d.iter().map(|x| (x / total).sqrt()).collect();
            let s = symmetric_conjugate(k);
            let rq: f64 = (0..n).map(|i| u[i] * (0..n).map(|j| s[(i, j)] * u[j]).sum::<f64>()).sum();
            (rq - 1.0).abs()
        }
    };
    KernelAudit {
        label: label.to_string(),
        n,
        max_asymmetry,
        max_diagonal_error,
        min_entry: v.min(),
        max_entry: v.max(),
        max_row_sum_error,
        lambda0_error,
    }
}

/// Eigenvalues and diffusion coordinates `λ_iᵗ ψ_i`, `i = 1..=dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionEmbedding {
    pub eigenvalues: Vec<f64>,
    /// `n × dims`.
    pub coordinates: DMatrix<f64>,
    pub diffusion_time: u32,
}

impl DiffusionEmbedding {
    pub fn dims(&self) -> usize {
        self.coordinates.ncols()
    }

    /// First two coordinates as an `n × 2` matrix.
    pub fn leading_pair(&self) -> Result<DMatrix<f64>> {
        if self.dims() < 2 {
            return Err(MvkError::InvalidParameter("embedding has fewer than two coordinates".into()));
        }
        Ok(self.coordinates.columns(0, 2).into_owned())
    }
}

/// Diffusion map with `dims` nontrivial coordinates at diffusion time `t`.
pub fn diffusion_map(k: &KernelMatrix, dims: usize, t: u32) -> Result<DiffusionEmbedding> {
    let n = k.n();
    if dims == 0 || dims >= n {
        return Err(MvkError::InvalidParameter(format!("need 1 <= dims < n, got dims = {dims}, n = {n}")));
    }
    let d = degrees(k);
    let s = symmetric_conjugate(k);
    let eig = SymmetricEigen::try_new(s, f64::EPSILON, 100_000)
        .ok_or_else(|| MvkError::SpectralFailure("symmetric eigensolver did not converge".into()))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MvkError::SpectralFailure("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    if eigenvalues[0] - eigenvalues[1] <= DEGENERACY_TOL {
        return Err(MvkError::DegenerateSpectrum(format!(
            "top eigenvalue is repeated (λ0 = {}, λ1 = {}); the kernel graph is disconnected",
            eigenvalues[0], eigenvalues[1]
        )));
    }
    let scale = d.iter().sum::<f64>().sqrt();
    let mut coordinates = DMatrix::zeros(n, dims);
    for c in 0..dims {
        let col = eig.eigenvectors.column(order[c + 1]);
        let amax = col.amax();
        let first = col.iter().find(|v| v.abs() > 1e-12 * amax).copied().unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        let weight = eigenvalues[c + 1].powi(t as i32);
        for i in 0..n {
            coordinates[(i, c)] = sign * weight * scale * col[i] / d[i].sqrt();
        }
    }
    Ok(DiffusionEmbedding {
        eigenvalues,
        coordinates,
        diffusion_time: t,
    })
}

/// `−2 ln λ_i / (π² ε)` for every eigenvalue.
pub fn spectral_lines(eigenvalues: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(MvkError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    eigenvalues
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value <= 0.0 {
                Err(MvkError::NonPositiveEigenvalue { index, value })
            } else {
                Ok(-2.0 * value.ln() / (std::f64::consts::PI.powi(2) * epsilon))
            }
        })
        .collect()
}

/// CSV with columns `index, phi_1, …, phi_k`.
pub fn write_embedding_csv(path: &Path, emb: &DiffusionEmbedding) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string()];
    header.extend((1..=emb.dims()).map(|c| format!("phi_{c}")));
    w.write_record(&header)?;
    for i in 0..emb.coordinates.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(emb.coordinates.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EigenvalueFile {
    eigenvalues: Vec<f64>,
}

pub fn write_eigenvalues_json(path: &Path, eigenvalues: &[f64]) -> Result<()> {
    let body = serde_json::to_string_pretty(&EigenvalueFile {
        eigenvalues: eigenvalues.to_vec(),
    })?;
    fs::write(path, body)?;
    Ok(())
}

pub fn read_eigenvalues_json(path: &Path) -> Result<Vec<f64>> {
    let f: EigenvalueFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(f.eigenvalues)
}
