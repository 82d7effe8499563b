//! Discretized Matern Gaussian prior on the unit square.
//!
//! The covariance is Gamma = A^-1 M A^-1 with mass matrix M and shifted
//! stiffness matrix A assembled from P1 elements (natural Neumann boundary,
//! alpha fixed to 2). The square-root action Gamma^{1/2} eta = A^-1 L_M eta
//! uses the banded Cholesky factor L_M of M.

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};
use crate::linalg::{standard_normal_vector, BandCholesky, BandMatrix};
use crate::mesh::Mesh2D;

// RNG stream namespace for prior draws; keeps them disjoint from noise draws.
pub(crate) const STREAM_PRIOR: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct PriorModel {
    pub mesh: Mesh2D,
    pub gamma: f64,
    pub kappa: f64,
    pub mean: DVector<f64>,
    mass: BandMatrix,
    stiff: BandMatrix,
    chol_m: BandCholesky,
    chol_a: BandCholesky,
}

/// Assembles the prior operators on an `n x n` grid. `mean = None` gives the
/// zero-mean prior used throughout.
pub fn build_prior(n: usize, gamma: f64, kappa: f64, mean: Option<DVector<f64>>) -> Result<PriorModel> {
    if gamma <= 0.0 || kappa <= 0.0 {
        return Err(OedError::InvalidParameter(format!(
            "prior hyperparameters must be positive (gamma = {gamma}, kappa = {kappa})"
        )));
    }
    let mesh = Mesh2D::new(n)?;
    let d = mesh.node_count();
    let bw = mesh.bandwidth();
    let mut mass = BandMatrix::zeros(d, bw);
    let mut stiff = BandMatrix::zeros(d, bw);
    for e in 0..mesh.elements().len() {
        let nodes = mesh.elements()[e];
        let (_, ke, me) = mesh.element_matrices(e);
        // each unordered node pair is visited once; the band stores the
        // symmetric entry a single time
        for a in 0..3 {
            for b in 0..=a {
                let (i, j) = (nodes[a], nodes[b]);
                mass.add(i, j, me[a][b]);
                stiff.add(i, j, gamma * ke[a][b] + kappa * me[a][b]);
            }
        }
    }
    let chol_m = mass.cholesky()?;
    let chol_a = stiff.cholesky()?;
    let mean = match mean {
        Some(v) => {
            if v.len() != d {
                return Err(OedError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                    context: "prior mean",
                });
            }
            v
        }
        None => DVector::zeros(d),
    };
    Ok(PriorModel {
        mesh,
        gamma,
        kappa,
        mean,
        mass,
        stiff,
        chol_m,
        chol_a,
    })
}

impl PriorModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mass(&self) -> &BandMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &BandMatrix {
        &self.stiff
    }

    pub fn chol_mass(&self) -> &BandCholesky {
        &self.chol_m
    }

    /// Gamma^{1/2} x = A^-1 L_M x.
    pub fn sqrt_cov_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol_a.solve(&self.chol_m.mul_lower(x))
    }

    /// (Gamma^{1/2})^T x = L_M^T A^-1 x.
    pub fn sqrt_cov_apply_t(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol_m.mul_lower_t(&self.chol_a.solve(x))
    }

    /// Gamma^{-1/2} x = L_M^-1 A x (inverse of `sqrt_cov_apply`).
    pub fn inv_sqrt_cov_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol_m.solve_lower(&self.stiff.mul_vec(x))
    }

    /// Gamma^-1 x = A M^-1 A x.
    pub fn inv_cov_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.stiff.mul_vec(&self.chol_m.solve(&self.stiff.mul_vec(x)))
    }

    /// Gamma x = A^-1 M A^-1 x.
    pub fn cov_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.chol_a.solve(x);
        self.chol_a.solve(&self.mass.mul_vec(&t))
    }

    /// Whitened draw: m = mean + Gamma^{1/2} eta with eta the i.i.d. normal
    /// vector of the given (seed, sample index) stream.
    pub fn sample(&self, seed: u64, sample_index: u64) -> DVector<f64> {
        let eta = standard_normal_vector(self.dim(), seed, STREAM_PRIOR + sample_index);
        self.sample_from_noise(&eta)
    }

    pub fn sample_from_noise(&self, eta: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.sqrt_cov_apply(eta)
    }

    /// (A u)^T M^-1 (A v), the Gamma^-1 inner product.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        let d = self.dim();
        if u.len() != d || v.len() != d {
            return Err(OedError::DimensionMismatch {
                expected: d,
                got: if u.len() != d { u.len() } else { v.len() },
                context: "prior_inner",
            });
        }
        let au = self.stiff.mul_vec(u);
        let av = self.stiff.mul_vec(v);
        Ok(au.dot(&self.chol_m.solve(&av)))
    }

    /// ||u||^2 in the Gamma^-1 metric.
    pub fn norm2(&self, u: &DVector<f64>) -> Result<f64> {
        self.inner(u, u)
    }

    /// Dense Gamma = A^-1 M A^-1, guarded to small meshes.
    pub fn cov_dense(&self, max_dim: usize) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > max_dim {
            return Err(OedError::InvalidParameter(format!(
                "dense covariance requested at dimension {d} > {max_dim}"
            )));
        }
        let mut g = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            g.set_column(j, &self.cov_apply(&e));
        }
        Ok(g)
    }

    /// Dense Gamma^-1 = A M^-1 A, guarded to small meshes.
    pub fn inv_cov_dense(&self, max_dim: usize) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > max_dim {
            return Err(OedError::InvalidParameter(format!(
                "dense precision requested at dimension {d} > {max_dim}"
            )));
        }
        let mut g = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            g.set_column(j, &self.inv_cov_apply(&e));
        }
        Ok(g)
    }
}
