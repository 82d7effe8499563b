//! Surrogate-accelerated Laplace: reduced-space MAP by LBFGS and the
//! reduced misfit eigenproblem.

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};
use crate::forward::{restrict, Design};
use crate::laplace::{Eigenpairs, NoiseCov};
use crate::prior::PriorModel;
use crate::reduce::{BasisKind, Metric, ReducedBasis};
use crate::surrogate::{ReducedForward, Surrogate};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsCfg {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsCfg {
    fn default() -> Self {
        LbfgsCfg { memory: 10, max_iter: 100, grad_tol: 1e-8 }
    }
}

/// Optional Adam warm start before LBFGS (used for networks trained
/// without Jacobian data, whose early reduced landscape is rough).
#[derive(Debug, Clone, Copy)]
pub struct AdamWarmstart {
    pub iterations: usize,
    pub learning_rate: f64,
}

/// Reduced MAP problem: minimize over beta
/// 1/2 ||y - xi^T (center + Psi_F Phi(beta))||^2_{Gn^-1} + 1/2 beta^T Q beta
/// with Q = Psi_m^T Gamma_prior^-1 Psi_m (identity for DIS).
pub struct ReducedMapProblem<'a, R: ReducedForward> {
    pub reduced: &'a R,
    pub input_basis: &'a ReducedBasis,
    pub output_basis: &'a ReducedBasis,
    pub design: Design,
    pub y: DVector<f64>,
    pub noise: NoiseCov,
    pub gamma_m: DMatrix<f64>,
    pub cfg: LbfgsCfg,
    pub warmstart: Option<AdamWarmstart>,
    sel_psi_f: DMatrix<f64>,
    sel_center: DVector<f64>,
}

/// Psi_m^T Gamma_prior^-1 Psi_m, the reduced prior precision.
pub fn compute_gamma_m(basis: &ReducedBasis) -> Result<DMatrix<f64>> {
    if basis.metric != Metric::PriorInverse {
        return Err(OedError::InvalidParameter(
            "reduced prior precision needs a prior-metric input basis".into(),
        ));
    }
    Ok(basis.psi.transpose() * basis.dual())
}

impl<'a, R: ReducedForward> ReducedMapProblem<'a, R> {
    pub fn new(
        reduced: &'a R,
        input_basis: &'a ReducedBasis,
        output_basis: &'a ReducedBasis,
        design: Design,
        y: DVector<f64>,
        noise: NoiseCov,
        cfg: LbfgsCfg,
    ) -> Result<Self> {
        if input_basis.rank() != reduced.dim_in() || output_basis.rank() != reduced.dim_out() {
            return Err(OedError::DimensionMismatch {
                expected: reduced.dim_in(),
                got: input_basis.rank(),
                context: "reduced map basis ranks",
            });
        }
        if y.len() != design.len() || noise.dim() != design.len() {
            return Err(OedError::DimensionMismatch {
                expected: design.len(),
                got: y.len(),
                context: "reduced problem data",
            });
        }
        let gamma_m = compute_gamma_m(input_basis)?;
        let idx = design.indices();
        let sel_psi_f = DMatrix::from_fn(idx.len(), output_basis.rank(), |i, j| {
            output_basis.psi[(idx[i], j)]
        });
        let sel_center = restrict(&output_basis.center, &design);
        Ok(ReducedMapProblem {
            reduced,
            input_basis,
            output_basis,
            design,
            y,
            noise,
            gamma_m,
            cfg,
            warmstart: None,
            sel_psi_f,
            sel_center,
        })
    }

    /// residual y - xi^T D(Phi(beta)).
    fn residual(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.y - (&self.sel_center + &self.sel_psi_f * phi)
    }

    fn objective_grad(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let phi = self.reduced.eval(beta);
        let r = self.residual(&phi);
        let qb = &self.gamma_m * beta;
        let obj = 0.5 * self.noise.inv_norm2(&r) + 0.5 * beta.dot(&qb);
        let jac = self.reduced.jacobian(beta);
        let pulled = jac.transpose() * (self.sel_psi_f.transpose() * self.noise.inv_apply(&r));
        (obj, qb - pulled)
    }

    fn objective(&self, beta: &DVector<f64>) -> f64 {
        let phi = self.reduced.eval(beta);
        let r = self.residual(&phi);
        0.5 * self.noise.inv_norm2(&r) + 0.5 * beta.dot(&(&self.gamma_m * beta))
    }
}

impl<'a> ReducedMapProblem<'a, crate::surrogate::NetParams> {
    pub fn from_surrogate(
        surrogate: &'a Surrogate,
        design: Design,
        y: DVector<f64>,
        noise: NoiseCov,
        cfg: LbfgsCfg,
    ) -> Result<Self> {
        Self::new(
            &surrogate.net,
            &surrogate.input_basis,
            &surrogate.output_basis,
            design,
            y,
            noise,
            cfg,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ReducedMapSolution {
    pub beta: DVector<f64>,
    /// Lifted point m_prior + Psi_m beta.
    pub m_lifted: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Strong Wolfe line search (c1 = 1e-4, c2 = 0.9) by bracket and zoom.
/// Near the minimum the objective comparison saturates in rounding noise,
/// so sufficient decrease is tested with an epsilon-tolerant (approximate
/// Wolfe) margin and the curvature condition carries the decision.
fn strong_wolfe<R: ReducedForward>(
    problem: &ReducedMapProblem<'_, R>,
    x: &DVector<f64>,
    p: &DVector<f64>,
    f0: f64,
    slope0: f64,
) -> Option<(f64, f64, DVector<f64>)> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let f_eps = 1e-14 * f0.abs().max(1e-300);
    let eval = |alpha: f64| {
        let xt = x + p * alpha;
        let (f, g) = problem.objective_grad(&xt);
        (f, g.dot(p), g)
    };
    let zoom = |mut lo: f64, mut f_lo: f64, mut hi: f64| -> Option<(f64, f64, DVector<f64>)> {
        for _ in 0..50 {
            let alpha = 0.5 * (lo + hi);
            let (f, slope, g) = eval(alpha);
            if f > f0 + C1 * alpha * slope0 + f_eps || f >= f_lo + f_eps {
                hi = alpha;
            } else {
                if slope.abs() <= -C2 * slope0 {
                    return Some((alpha, f, g));
                }
                if slope * (hi - lo) >= 0.0 {
                    hi = lo;
                }
                lo = alpha;
                f_lo = f;
            }
            if (hi - lo).abs() < 1e-16 {
                let (f, _, g) = eval(lo);
                return Some((lo, f, g));
            }
        }
        None
    };
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = 1.0;
    for i in 0..30 {
        let (f, slope, g) = eval(alpha);
        if f > f0 + C1 * alpha * slope0 + f_eps || (i > 0 && f >= f_prev + f_eps) {
            return zoom(alpha_prev, f_prev, alpha);
        }
        if slope.abs() <= -C2 * slope0 {
            return Some((alpha, f, g));
        }
        if slope >= 0.0 {
            return zoom(alpha, f, alpha_prev);
        }
        alpha_prev = alpha;
        f_prev = f;
        alpha *= 2.0;
    }
    None
}

/// LBFGS (two-loop recursion) on the reduced objective. Returns the best
/// iterate with `converged = false` when the iteration cap is reached.
pub fn map_reduced<R: ReducedForward>(
    problem: &ReducedMapProblem<'_, R>,
) -> Result<ReducedMapSolution> {
    let r_m = problem.reduced.dim_in();
    let mut x = DVector::zeros(r_m);

    if let Some(ws) = problem.warmstart {
        // plain Adam on the reduced objective before LBFGS
        let (mut m, mut v): (DVector<f64>, DVector<f64>) =
            (DVector::zeros(r_m), DVector::zeros(r_m));
        for t in 1..=ws.iterations {
            let (_, g) = problem.objective_grad(&x);
            for i in 0..r_m {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mhat = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vhat = v[i] / (1.0 - 0.999f64.powi(t as i32));
                x[i] -= ws.learning_rate * mhat / (vhat.sqrt() + 1e-8);
            }
        }
    }

    let (mut f, mut g) = problem.objective_grad(&x);
    let g0_norm = g.norm();
    let tol = problem.cfg.grad_tol * g0_norm.max(1.0);
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = g.norm() <= tol;

    while !converged && iterations < problem.cfg.max_iter {
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha_buf = vec![0.0; k];
        for i in (0..k).rev() {
            alpha_buf[i] = rho[i] * s_hist[i].dot(&q);
            q -= &y_hist[i] * alpha_buf[i];
        }
        if let (Some(s), Some(yv)) = (s_hist.last(), y_hist.last()) {
            q *= s.dot(yv) / yv.norm_squared();
        }
        for i in 0..k {
            let beta = rho[i] * y_hist[i].dot(&q);
            q += &s_hist[i] * (alpha_buf[i] - beta);
        }
        let mut p = -q;
        let mut slope = g.dot(&p);
        if slope >= 0.0 {
            // fall back to steepest descent if curvature information is stale
            p = -g.clone();
            slope = g.dot(&p);
        }
        let Some((alpha, f_new, g_new)) = strong_wolfe(problem, &x, &p, f, slope) else {
            break;
        };
        let step = &p * alpha;
        let y_diff = &g_new - &g;
        let sy = step.dot(&y_diff);
        if sy > 1e-12 * step.norm() * y_diff.norm() {
            s_hist.push(step.clone());
            y_hist.push(y_diff);
            rho.push(1.0 / sy);
            if s_hist.len() > problem.cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
        }
        x += step;
        f = f_new;
        g = g_new;
        iterations += 1;
        converged = g.norm() <= tol;
    }
    let m_lifted = &problem.input_basis.center + &problem.input_basis.psi * &x;
    Ok(ReducedMapSolution {
        beta: x,
        m_lifted,
        iterations,
        grad_norm: g.norm(),
        converged,
    })
}

/// Reduced eigenpairs with the lifted eigenvectors.
#[derive(Debug, Clone)]
pub struct ReducedEigen {
    pub values: Vec<f64>,
    /// Coefficient eigenvectors u_i (Euclidean-orthonormal).
    pub coeff_vectors: DMatrix<f64>,
    /// Lifted vectors Psi_m u_i (prior-metric orthonormal).
    pub lifted: DMatrix<f64>,
}

impl ReducedEigen {
    pub fn as_eigenpairs(&self) -> Eigenpairs {
        Eigenpairs { values: self.values.clone(), vectors: self.lifted.clone() }
    }
}

/// Dense symmetric eigendecomposition of the reduced misfit Hessian
/// H_hat = dPhi^T Psi_F^T xi Gn^-1 xi^T Psi_F dPhi.
pub fn eig_reduced<R: ReducedForward>(
    problem: &ReducedMapProblem<'_, R>,
    beta_map: &DVector<f64>,
) -> Result<ReducedEigen> {
    let r_m = problem.reduced.dim_in();
    let jac = problem.reduced.jacobian(beta_map);
    let c = &problem.sel_psi_f * jac; // r_s x r_m
    let mut white = DMatrix::zeros(c.nrows(), c.ncols());
    for j in 0..c.ncols() {
        white.set_column(j, &problem.noise.whiten(&c.column(j).into_owned()));
    }
    let h = white.transpose() * &white;
    let (values, coeff_vectors) = crate::linalg::sym_eig_sorted(&h);
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let lifted = &problem.input_basis.psi * &coeff_vectors;
    let _ = r_m;
    Ok(ReducedEigen { values, coeff_vectors, lifted })
}

/// MAP discrepancy metrics between the high-fidelity and reduced points:
/// relative errors in the mass-weighted L2 norm and the prior-precision
/// norm.
#[derive(Debug, Clone, Copy)]
pub struct MapErrorMetrics {
    pub l2: f64,
    pub prior_metric: f64,
}

pub fn map_error_metrics(
    hifi: &DVector<f64>,
    reduced: &DVector<f64>,
    prior: &PriorModel,
) -> Result<MapErrorMetrics> {
    let diff = hifi - reduced;
    let m_norm = |v: &DVector<f64>| -> f64 { v.dot(&prior.mass().mul_vec(v)).sqrt() };
    let hifi_m = m_norm(hifi);
    let hifi_g = prior.norm2(hifi)?.sqrt();
    if hifi_m == 0.0 || hifi_g == 0.0 {
        return Err(OedError::NumericalValidity(
            "MAP error metrics need a nonzero reference point".into(),
        ));
    }
    Ok(MapErrorMetrics {
        l2: m_norm(&diff) / hifi_m,
        prior_metric: prior.norm2(&diff)?.sqrt() / hifi_g,
    })
}

/// Exact linear reduced map Phi(beta) = c0 + C beta; the drop-in stand-in
/// for a trained network in oracle cross-checks.
#[derive(Debug, Clone)]
pub struct LinearReducedMap {
    pub c: DMatrix<f64>,
    pub c0: DVector<f64>,
}

impl ReducedForward for LinearReducedMap {
    fn dim_in(&self) -> usize {
        self.c.ncols()
    }

    fn dim_out(&self) -> usize {
        self.c.nrows()
    }

    fn eval(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.c0 + &self.c * beta
    }

    fn jacobian(&self, _beta: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }
}

/// Identity output basis over all candidates (full-rank decoder).
pub fn identity_output_basis(d_s: usize) -> ReducedBasis {
    ReducedBasis::from_parts(
        BasisKind::Pca,
        DMatrix::identity(d_s, d_s),
        vec![1.0; d_s],
        DVector::zeros(d_s),
        None,
    )
    .expect("identity basis parts are consistent")
}
