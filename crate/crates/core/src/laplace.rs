//! High-fidelity Laplace approximation: MAP estimation by inexact
//! Newton-CG with the Gauss-Newton Hessian, the prior-preconditioned
//! misfit eigenproblem, and the low-rank posterior covariance.
//!
//! The Newton iteration runs in whitened coordinates m = m_prior +
//! Gamma^{1/2} eta, where the Gauss-Newton Hessian is identity plus a
//! rank <= r_s term and CG needs only O(r_s) iterations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{OedError, Result};
use crate::forward::{restrict, scatter_design, Design, ObservableMap};
use crate::prior::PriorModel;

/// SPD observation-noise covariance with a cached factorization.
#[derive(Debug, Clone)]
pub struct NoiseCov {
    dim: usize,
    chol: Option<Cholesky<f64, Dyn>>,
    iso_sigma: Option<f64>,
}

impl NoiseCov {
    pub fn iso(sigma: f64, dim: usize) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(OedError::InvalidParameter(format!(
                "noise sigma must be positive, got {sigma}"
            )));
        }
        Ok(NoiseCov {
            dim,
            chol: None,
            iso_sigma: Some(sigma),
        })
    }

    pub fn full(cov: DMatrix<f64>) -> Result<Self> {
        let dim = cov.nrows();
        if dim != cov.ncols() {
            return Err(OedError::InvalidParameter("noise covariance must be square".into()));
        }
        let chol = Cholesky::new(cov)
            .ok_or(OedError::Factorization("noise covariance is not SPD"))?;
        Ok(NoiseCov {
            dim,
            chol: Some(chol),
            iso_sigma: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gamma_noise^-1 x.
    pub fn inv_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match (&self.chol, self.iso_sigma) {
            (Some(c), _) => c.solve(x),
            (None, Some(s)) => x / (s * s),
            _ => unreachable!(),
        }
    }

    /// L^-1 x with Gamma_noise = L L^T.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        match (&self.chol, self.iso_sigma) {
            (Some(c), _) => c.l_dirty().solve_lower_triangular(x).expect("nonsingular factor"),
            (None, Some(s)) => x / s,
            _ => unreachable!(),
        }
    }

    /// L x, turning an i.i.d. standard normal draw into correlated noise.
    pub fn color(&self, x: &DVector<f64>) -> DVector<f64> {
        match (&self.chol, self.iso_sigma) {
            (Some(c), _) => c.l() * x,
            (None, Some(s)) => x * s,
            _ => unreachable!(),
        }
    }

    /// ||x||^2 in the Gamma_noise^-1 metric.
    pub fn inv_norm2(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.inv_apply(x))
    }
}

/// Full-candidate noise description, restricted per design so one draw at
/// all d_s candidates serves every design consistently.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Iso { sigma: f64 },
    Full { cov: DMatrix<f64> },
}

impl NoiseModel {
    pub fn restrict(&self, design: &Design) -> Result<NoiseCov> {
        match self {
            NoiseModel::Iso { sigma } => NoiseCov::iso(*sigma, design.len()),
            NoiseModel::Full { cov } => {
                let idx = design.indices();
                let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| cov[(idx[i], idx[j])]);
                NoiseCov::full(sub)
            }
        }
    }

    /// Colored draw at all d_s candidates.
    pub fn draw_full(&self, d_s: usize, seed: u64, stream: u64) -> Result<DVector<f64>> {
        let eta = crate::linalg::standard_normal_vector(d_s, seed, stream);
        match self {
            NoiseModel::Iso { sigma } => {
                if *sigma <= 0.0 {
                    return Err(OedError::InvalidParameter("noise sigma must be positive".into()));
                }
                Ok(eta * *sigma)
            }
            NoiseModel::Full { cov } => Ok(NoiseCov::full(cov.clone())?.color(&eta)),
        }
    }
}

/// One inverse problem instance: forward map, prior, restricted noise,
/// design, and observed data.
pub struct InverseProblem<'a, F: ObservableMap> {
    pub forward: &'a F,
    pub prior: &'a PriorModel,
    pub noise: NoiseCov,
    pub design: Design,
    pub y: DVector<f64>,
}

impl<'a, F: ObservableMap> InverseProblem<'a, F> {
    pub fn new(
        forward: &'a F,
        prior: &'a PriorModel,
        noise: NoiseCov,
        design: Design,
        y: DVector<f64>,
    ) -> Result<Self> {
        if noise.dim() != design.len() || y.len() != design.len() {
            return Err(OedError::DimensionMismatch {
                expected: design.len(),
                got: if noise.dim() != design.len() { noise.dim() } else { y.len() },
                context: "inverse problem design dimensions",
            });
        }
        Ok(InverseProblem { forward, prior, noise, design, y })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonCfg {
    pub grad_tol: f64,
    pub max_newton: usize,
}

impl Default for NewtonCfg {
    fn default() -> Self {
        NewtonCfg { grad_tol: 1e-8, max_newton: 50 }
    }
}

/// MAP point with solver statistics.
#[derive(Debug, Clone)]
pub struct MapSolution {
    pub m_map: DVector<f64>,
    pub newton_iterations: usize,
    pub total_cg_iterations: usize,
    pub objective_history: Vec<f64>,
    pub grad_norm: f64,
}

impl MapSolution {
    pub fn avg_cg_iterations(&self) -> f64 {
        if self.newton_iterations == 0 {
            0.0
        } else {
            self.total_cg_iterations as f64 / self.newton_iterations as f64
        }
    }
}

/// Misfit eigenpairs (lambda_i, w_i) with W^T Gamma_prior^-1 W = I.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// MAP point plus eigenpairs for one (y, design) instance.
#[derive(Debug, Clone)]
pub struct LaplaceResult {
    pub map: MapSolution,
    pub eigen: Eigenpairs,
}

struct Evaluated<S> {
    state: S,
    objective: f64,
    residual: DVector<f64>, // y - F_xi(m)
}

fn evaluate<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    eta: &DVector<f64>,
) -> Result<Evaluated<F::State>> {
    let m = problem.prior.sample_from_noise(eta);
    let state = problem.forward.solve(&m)?;
    let f_sel = restrict(&problem.forward.observe(&state), &problem.design);
    let residual = &problem.y - f_sel;
    let misfit = if problem.design.is_empty() {
        0.0
    } else {
        0.5 * problem.noise.inv_norm2(&residual)
    };
    Ok(Evaluated {
        state,
        objective: misfit + 0.5 * eta.norm_squared(),
        residual,
    })
}

/// Whitened objective gradient: eta - T^T J_xi^T Gamma_n^-1 (y - F_xi).
fn gradient<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    eta: &DVector<f64>,
    ev: &Evaluated<F::State>,
) -> DVector<f64> {
    if problem.design.is_empty() {
        return eta.clone();
    }
    let w = scatter_design(
        &problem.noise.inv_apply(&ev.residual),
        &problem.design,
        problem.forward.obs_dim(),
    );
    let pulled = problem.prior.sqrt_cov_apply_t(&problem.forward.vjp(&ev.state, &w));
    eta - pulled
}

/// Gauss-Newton Hessian-vector product in whitened coordinates:
/// (I + T^T J_xi^T Gamma_n^-1 J_xi T) p, two linearized solves per call.
fn gn_hessian_vec<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    ev: &Evaluated<F::State>,
    p: &DVector<f64>,
) -> DVector<f64> {
    if problem.design.is_empty() {
        return p.clone();
    }
    let jp = restrict(
        &problem.forward.jvp(&ev.state, &problem.prior.sqrt_cov_apply(p)),
        &problem.design,
    );
    let w = scatter_design(
        &problem.noise.inv_apply(&jp),
        &problem.design,
        problem.forward.obs_dim(),
    );
    p + problem.prior.sqrt_cov_apply_t(&problem.forward.vjp(&ev.state, &w))
}

/// Unpreconditioned CG on the whitened GN system; the operator is identity
/// plus rank <= r_s, so convergence needs O(r_s) iterations.
fn solve_newton_system<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    ev: &Evaluated<F::State>,
    grad: &DVector<f64>,
    forcing: f64,
) -> (DVector<f64>, usize) {
    let n = grad.len();
    let max_iter = 2 * problem.design.len() + 30;
    let mut x = DVector::zeros(n);
    let mut r = -grad.clone();
    let rhs_norm = grad.norm();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut iters = 0;
    while rs.sqrt() > forcing * rhs_norm && iters < max_iter {
        let hp = gn_hessian_vec(problem, ev, &p);
        let alpha = rs / p.dot(&hp);
        x += &p * alpha;
        r -= hp * alpha;
        let rs_new = r.norm_squared();
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
        iters += 1;
    }
    (x, iters)
}

/// Minimizes the misfit-plus-prior objective by inexact Newton-CG with the
/// Gauss-Newton Hessian, Eisenstat-Walker forcing min(0.5, sqrt(||g||)),
/// and Armijo backtracking. Converges when the whitened gradient norm
/// drops below `grad_tol * max(1, initial)`.
pub fn map_hifi<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    m0: Option<&DVector<f64>>,
    cfg: NewtonCfg,
) -> Result<MapSolution> {
    let prior = problem.prior;
    let mut eta = match m0 {
        Some(m) => prior.inv_sqrt_cov_apply(&(m - &prior.mean)),
        None => DVector::zeros(prior.dim()),
    };
    let mut ev = evaluate(problem, &eta)?;
    let mut grad = gradient(problem, &eta, &ev);
    let g0 = grad.norm();
    let tol = cfg.grad_tol * g0.max(1.0);
    let mut history = vec![ev.objective];
    let mut total_cg = 0;
    let mut newton = 0;
    while grad.norm() > tol {
        if newton >= cfg.max_newton {
            return Err(OedError::NonConvergence {
                what: "Newton-CG MAP solve",
                iterations: newton,
                residual: grad.norm(),
            });
        }
        let forcing = 0.5f64.min(grad.norm().sqrt());
        let (p, cg_iters) = solve_newton_system(problem, &ev, &grad, forcing);
        total_cg += cg_iters;
        let slope = grad.dot(&p);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let eta_trial = &eta + &p * alpha;
            match evaluate(problem, &eta_trial) {
                Ok(t) if t.objective <= ev.objective + 1e-4 * alpha * slope => {
                    accepted = Some((eta_trial, t));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let (eta_new, ev_new) = accepted.ok_or(OedError::NonConvergence {
            what: "Newton-CG line search",
            iterations: newton,
            residual: grad.norm(),
        })?;
        eta = eta_new;
        ev = ev_new;
        grad = gradient(problem, &eta, &ev);
        history.push(ev.objective);
        newton += 1;
    }
    Ok(MapSolution {
        m_map: prior.sample_from_noise(&eta),
        newton_iterations: newton,
        total_cg_iterations: total_cg,
        objective_history: history,
        grad_norm: grad.norm(),
    })
}

/// Solves the generalized misfit eigenproblem H_misfit w = lambda
/// Gamma_prior^-1 w at the MAP point by the whitened SVD route:
/// S = Gamma_n^{-1/2} J_xi Gamma_prior^{1/2}, lambda_i = sigma_i^2،
/// w_i = Gamma_prior^{1/2} v_i. Requires r_s adjoint solves.
pub fn gen_eig_hifi<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    m_map: &DVector<f64>,
    r: usize,
) -> Result<Eigenpairs> {
    let prior = problem.prior;
    let d = prior.dim();
    let r_s = problem.design.len();
    let r = r.min(r_s);
    if r_s == 0 {
        return Ok(Eigenpairs {
            values: Vec::new(),
            vectors: DMatrix::zeros(d, 0),
        });
    }
    let state = problem.forward.solve(m_map)?;
    // rows of J_xi Gamma^{1/2}: one adjoint solve per selected sensor
    let mut s0 = DMatrix::zeros(r_s, d);
    for k in 0..r_s {
        let mut e = DVector::zeros(r_s);
        e[k] = 1.0;
        let w = scatter_design(&e, &problem.design, problem.forward.obs_dim());
        let row = prior.sqrt_cov_apply_t(&problem.forward.vjp(&state, &w));
        s0.row_mut(k).copy_from(&row.transpose());
    }
    // noise whitening on the left
    let mut s = DMatrix::zeros(r_s, d);
    for j in 0..d {
        s.set_column(j, &problem.noise.whiten(&s0.column(j).into_owned()));
    }
    let svd = s.svd(false, true);
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut values = Vec::with_capacity(r);
    let mut vectors = DMatrix::zeros(d, r);
    for (dst, &src) in order.iter().take(r).enumerate() {
        let sigma = svd.singular_values[src];
        values.push(sigma * sigma);
        let v = vt.row(src).transpose();
        vectors.set_column(dst, &prior.sqrt_cov_apply(&v));
    }
    Ok(Eigenpairs { values, vectors })
}

/// Low-rank posterior covariance action
/// (Gamma_prior - W_r D_r W_r^T) v with D_r = diag(lambda_i / (1 + lambda_i)).
pub fn posterior_cov_apply(
    prior: &PriorModel,
    eigen: &Eigenpairs,
    v: &DVector<f64>,
) -> DVector<f64> {
    let mut out = prior.cov_apply(v);
    if !eigen.values.is_empty() {
        let wt_v = eigen.vectors.transpose() * v;
        let mut scaled = wt_v;
        for (i, &lam) in eigen.values.iter().enumerate() {
            scaled[i] *= lam / (1.0 + lam);
        }
        out -= &eigen.vectors * scaled;
    }
    out
}

/// MAP plus eigenpairs in one call.
pub fn laplace_solve<F: ObservableMap>(
    problem: &InverseProblem<'_, F>,
    r: usize,
    cfg: NewtonCfg,
) -> Result<LaplaceResult> {
    let map = map_hifi(problem, None, cfg)?;
    let eigen = gen_eig_hifi(problem, &map.m_map, r)?;
    Ok(LaplaceResult { map, eigen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Design;
    use crate::linalg::{standard_normal_vector, sym_eig_sorted};
    use crate::oracle::LinearMap;
    use crate::prior::build_prior;

    fn dense_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
        let (vals, vecs) = sym_eig_sorted(m);
        let mut s = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, &v) in vals.iter().enumerate() {
            let col = vecs.column(i);
            s += col * col.transpose() * v.max(0.0).sqrt();
        }
        s
    }

    fn toy_linear(n: usize, d_s: usize, seed: u64) -> (crate::prior::PriorModel, LinearMap) {
        let prior = build_prior(n, 0.1, 0.5, None).unwrap();
        let d = prior.dim();
        let g = standard_normal_vector(d_s * d, seed, 0);
        let a = DMatrix::from_fn(d_s, d, |i, j| g[j * d_s + i] / (d as f64).sqrt());
        (prior, LinearMap::new(a))
    }

    #[test]
    fn linear_map_matches_closed_form() {
        let (prior, fwd) = toy_linear(6, 5, 3);
        let d = prior.dim();
        let design = Design::new(vec![0, 2, 4], 5).unwrap();
        let noise = NoiseCov::iso(0.1, 3).unwrap();
        let y = standard_normal_vector(3, 4, 0) * 0.3;
        let problem = InverseProblem::new(&fwd, &prior, noise, design.clone(), y.clone()).unwrap();
        let sol = map_hifi(&problem, None, NewtonCfg { grad_tol: 1e-12, ..Default::default() }).unwrap();

        // dense closed form (A^T Gn^-1 A + Gp^-1)^-1 (A^T Gn^-1 y)
        let a_sel = DMatrix::from_fn(3, d, |i, j| fwd.matrix()[(design.indices()[i], j)]);
        let gp_inv = prior.inv_cov_dense(256).unwrap();
        let gn_inv = DMatrix::identity(3, 3) / 0.01;
        let lhs = a_sel.transpose() * &gn_inv * &a_sel + &gp_inv;
        let rhs = a_sel.transpose() * &gn_inv * &y;
        let m_closed = lhs.lu().solve(&rhs).unwrap();
        let num = prior.norm2(&(&sol.m_map - &m_closed)).unwrap().sqrt();
        let den = prior.norm2(&m_closed).unwrap().sqrt();
        assert!(num / den < 1e-8, "MAP relative error {}", num / den);
    }

    #[test]
    fn stationary_at_exact_data() {
        let (prior, fwd) = toy_linear(6, 4, 7);
        let design = Design::new(vec![1, 3], 4).unwrap();
        let noise = NoiseCov::iso(0.2, 2).unwrap();
        let state = fwd.solve(&prior.mean).unwrap();
        let y = restrict(&fwd.observe(&state), &design);
        let problem = InverseProblem::new(&fwd, &prior, noise, design, y).unwrap();
        let sol = map_hifi(&problem, None, NewtonCfg::default()).unwrap();
        assert!(prior.norm2(&(&sol.m_map - &prior.mean)).unwrap().sqrt() < 1e-6);
        assert_eq!(sol.newton_iterations, 0);
    }

    #[test]
    fn gradient_tolerance_postcondition_and_monotone_objective() {
        let (prior, fwd) = toy_linear(6, 6, 11);
        let design = Design::new(vec![0, 1, 2, 3, 4, 5], 6).unwrap();
        let noise = NoiseCov::iso(0.05, 6).unwrap();
        let y = standard_normal_vector(6, 12, 0);
        let problem = InverseProblem::new(&fwd, &prior, noise, design, y).unwrap();
        let cfg = NewtonCfg::default();
        let sol = map_hifi(&problem, None, cfg).unwrap();
        // replay the postcondition from public pieces
        let eta = prior.inv_sqrt_cov_apply(&(&sol.m_map - &prior.mean));
        let ev = evaluate(&problem, &eta).unwrap();
        let g = gradient(&problem, &eta, &ev);
        let eta0 = DVector::zeros(prior.dim());
        let g0 = gradient(&problem, &eta0, &evaluate(&problem, &eta0).unwrap());
        assert!(g.norm() <= cfg.grad_tol * g0.norm().max(1.0));
        for w in sol.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn empty_design_returns_prior_mean() {
        let (prior, fwd) = toy_linear(4, 3, 13);
        let problem = InverseProblem::new(
            &fwd,
            &prior,
            NoiseCov::iso(0.1, 0).unwrap(),
            Design::empty(),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = map_hifi(&problem, None, NewtonCfg::default()).unwrap();
        assert_eq!(sol.m_map, prior.mean);
        let eig = gen_eig_hifi(&problem, &sol.m_map, 5).unwrap();
        assert!(eig.values.is_empty());
    }

    #[test]
    fn eigenpairs_match_dense_generalized_oracle() {
        let (prior, fwd) = toy_linear(8, 5, 17);
        let d = prior.dim();
        let gamma = prior.cov_dense(256).unwrap();
        let half = dense_sqrt(&gamma);
        for r_s in 1..=5usize {
            let design = Design::new((0..r_s).collect(), 5).unwrap();
            let noise = NoiseCov::iso(0.1, r_s).unwrap();
            let y = standard_normal_vector(r_s, 18, r_s as u64);
            let problem = InverseProblem::new(&fwd, &prior, noise, design.clone(), y).unwrap();
            let m_map = prior.mean.clone();
            let eig = gen_eig_hifi(&problem, &m_map, r_s).unwrap();
            assert!(eig.values.len() <= r_s);

            // dense oracle: eigenvalues of G^{1/2} (A_sel^T Gn^-1 A_sel) G^{1/2}
            let a_sel = DMatrix::from_fn(r_s, d, |i, j| fwd.matrix()[(design.indices()[i], j)]);
            let h = a_sel.transpose() * &a_sel / 0.01;
            let (oracle, _) = sym_eig_sorted(&(&half * h * &half));
            for (i, &lam) in eig.values.iter().enumerate() {
                assert!(
                    (lam - oracle[i]).abs() <= 1e-8 * oracle[0].max(1.0),
                    "r_s {r_s}, eig {i}: {lam} vs {}",
                    oracle[i]
                );
            }
            // sorted, nonnegative
            for w in eig.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            assert!(eig.values.iter().all(|&l| l >= 0.0));
            // Gamma^-1-orthonormal
            let mut gram = DMatrix::zeros(eig.values.len(), eig.values.len());
            for i in 0..eig.values.len() {
                for j in 0..eig.values.len() {
                    gram[(i, j)] = prior
                        .inner(&eig.vectors.column(i).into_owned(), &eig.vectors.column(j).into_owned())
                        .unwrap();
                }
            }
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    let t = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - t).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn noise_scaling_homogeneity() {
        let (prior, fwd) = toy_linear(6, 4, 19);
        let design = Design::new(vec![0, 1, 2], 4).unwrap();
        let y = standard_normal_vector(3, 20, 0);
        let m_map = prior.sample(21, 0);
        let base = InverseProblem::new(&fwd, &prior, NoiseCov::iso(0.1, 3).unwrap(), design.clone(), y.clone()).unwrap();
        let scaled = InverseProblem::new(&fwd, &prior, NoiseCov::iso(0.1 * 2.0, 3).unwrap(), design, y).unwrap();
        let e1 = gen_eig_hifi(&base, &m_map, 3).unwrap();
        let e2 = gen_eig_hifi(&scaled, &m_map, 3).unwrap();
        // Gamma_n -> c Gamma_n scales every eigenvalue by 1/c (c = 4 here)
        for (a, b) in e1.values.iter().zip(&e2.values) {
            assert!((a / b - 4.0).abs() < 1e-10 * 4.0);
        }
    }

    #[test]
    fn posterior_cov_with_zero_eigenvalues_is_prior() {
        let prior = build_prior(5, 0.1, 0.5, None).unwrap();
        let eigen = Eigenpairs {
            values: vec![],
            vectors: DMatrix::zeros(prior.dim(), 0),
        };
        let v = standard_normal_vector(prior.dim(), 30, 0);
        let out = posterior_cov_apply(&prior, &eigen, &v);
        assert!((out - prior.cov_apply(&v)).norm() < 1e-14);
    }

    #[test]
    fn smw_identity_full_rank() {
        // whitened identity: (I + V L V^T)^-1 = I - V D V^T at full rank
        let (prior, fwd) = toy_linear(6, 6, 23);
        let d = prior.dim();
        let design = Design::new((0..6).collect(), 6).unwrap();
        let noise = NoiseCov::iso(0.3, 6).unwrap();
        let y = standard_normal_vector(6, 24, 0);
        let problem = InverseProblem::new(&fwd, &prior, noise, design, y).unwrap();
        let eig = gen_eig_hifi(&problem, &prior.mean.clone(), 6).unwrap();
        // V = Gamma^{-1/2} W in the whitened space
        let gamma = prior.cov_dense(256).unwrap();
        let half_inv = dense_sqrt(&gamma).try_inverse().unwrap();
        let v = &half_inv * &eig.vectors;
        let r = eig.values.len();
        let lam = DMatrix::from_fn(r, r, |i, j| if i == j { eig.values[i] } else { 0.0 });
        let dmat = DMatrix::from_fn(r, r, |i, j| {
            if i == j { eig.values[i] / (1.0 + eig.values[i]) } else { 0.0 }
        });
        let lhs = (DMatrix::identity(d, d) + &v * lam * v.transpose()).try_inverse().unwrap();
        let rhs = DMatrix::identity(d, d) - &v * dmat * v.transpose();
        assert!((lhs - rhs).norm() < 1e-12 * (d as f64));
    }

    #[test]
    fn posterior_cov_matches_dense_inverse_at_full_rank() {
        let (prior, fwd) = toy_linear(6, 7, 29);
        let d = prior.dim();
        let design = Design::new((0..7).collect(), 7).unwrap();
        let noise = NoiseCov::iso(0.1, 7).unwrap();
        let y = standard_normal_vector(7, 31, 0);
        let problem = InverseProblem::new(&fwd, &prior, noise, design, y).unwrap();
        let m_map = prior.mean.clone();
        let eig = gen_eig_hifi(&problem, &m_map, 7).unwrap();
        let a = fwd.matrix();
        let h = a.transpose() * a / 0.01;
        let gp_inv = prior.inv_cov_dense(256).unwrap();
        let dense_post = (h + gp_inv).try_inverse().unwrap();
        let v = standard_normal_vector(d, 32, 0);
        let lowrank = posterior_cov_apply(&prior, &eig, &v);
        let dense = &dense_post * &v;
        assert!((lowrank - &dense).norm() <= 1e-8 * dense.norm());
    }
}
