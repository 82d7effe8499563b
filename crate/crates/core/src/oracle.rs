//! Closed-form Gaussian-linear oracle: dense, solver-free reference values
//! for MAP points, misfit eigenvalues, and design criteria.
//!
//! Everything here is computed by dense linear algebra with no iterative
//! solver, so it serves as a fixed point for cross-checking the Newton-CG,
//! SVD, and surrogate paths.

use nalgebra::{DMatrix, DVector};

use crate::criteria::{a_opt, d_opt, eig_gain};
use crate::error::{OedError, Result};
use crate::forward::{restrict, Design, ObservableMap};
use crate::laplace::NoiseCov;
use crate::linalg::{standard_normal_vector, sym_eig_sorted};
use crate::prior::PriorModel;

/// Hard cap for the dense oracle.
pub const ORACLE_MAX_DIM: usize = 512;

/// Explicit linear parameter-to-observable map F(m) = A m.
#[derive(Debug, Clone)]
pub struct LinearMap {
    a: DMatrix<f64>,
}

impl LinearMap {
    pub fn new(a: DMatrix<f64>) -> Self {
        LinearMap { a }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl ObservableMap for LinearMap {
    type State = DVector<f64>;

    fn param_dim(&self) -> usize {
        self.a.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    fn solve(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * m)
    }

    fn observe(&self, state: &DVector<f64>) -> DVector<f64> {
        state.clone()
    }

    fn jvp(&self, _state: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * v
    }

    fn vjp(&self, _state: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.a.transpose() * w
    }
}

/// A Gaussian-linear inverse problem with every operator materialized
/// densely at construction.
pub struct LinearProblem<'a> {
    pub map: &'a LinearMap,
    pub prior: &'a PriorModel,
    pub noise: NoiseCov,
    pub design: Design,
    a_sel: DMatrix<f64>,
    gp_inv: DMatrix<f64>,
    gp_half: DMatrix<f64>,
}

fn dense_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eig_sorted(m);
    let mut s = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &v) in vals.iter().enumerate() {
        let col = vecs.column(i);
        s += col * col.transpose() * v.max(0.0).sqrt();
    }
    s
}

impl<'a> LinearProblem<'a> {
    pub fn new(
        map: &'a LinearMap,
        prior: &'a PriorModel,
        noise: NoiseCov,
        design: Design,
    ) -> Result<Self> {
        let d = prior.dim();
        if d > ORACLE_MAX_DIM {
            return Err(OedError::InvalidParameter(format!(
                "linear oracle is dense-only and limited to dimension {ORACLE_MAX_DIM}, got {d}"
            )));
        }
        if map.param_dim() != d {
            return Err(OedError::DimensionMismatch {
                expected: d,
                got: map.param_dim(),
                context: "linear map parameter dimension",
            });
        }
        if noise.dim() != design.len() {
            return Err(OedError::DimensionMismatch {
                expected: design.len(),
                got: noise.dim(),
                context: "noise dimension vs design",
            });
        }
        let idx = design.indices();
        let a_sel = DMatrix::from_fn(idx.len(), d, |i, j| map.matrix()[(idx[i], j)]);
        let gp_inv = prior.inv_cov_dense(ORACLE_MAX_DIM)?;
        let gp_half = dense_sqrt(&prior.cov_dense(ORACLE_MAX_DIM)?);
        Ok(LinearProblem { map, prior, noise, design, a_sel, gp_inv, gp_half })
    }

    pub fn selected_map(&self) -> &DMatrix<f64> {
        &self.a_sel
    }

    pub fn prior_inv_dense(&self) -> &DMatrix<f64> {
        &self.gp_inv
    }

    /// ||v||^2 in the dense prior-precision metric.
    pub fn prior_norm2_dense(&self, v: &DVector<f64>) -> f64 {
        (v.transpose() * &self.gp_inv * v)[(0, 0)]
    }
}

/// Closed-form MAP: (A^T Gn^-1 A + Gp^-1)^-1 (A^T Gn^-1 y + Gp^-1 m_prior).
pub fn oracle_map(lp: &LinearProblem<'_>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let r_s = lp.design.len();
    let mut lhs = lp.gp_inv.clone();
    let mut rhs = &lp.gp_inv * &lp.prior.mean;
    if r_s > 0 {
        let mut gn_inv_a = DMatrix::zeros(r_s, lp.prior.dim());
        for j in 0..lp.prior.dim() {
            gn_inv_a.set_column(j, &lp.noise.inv_apply(&lp.a_sel.column(j).into_owned()));
        }
        lhs += lp.a_sel.transpose() * &gn_inv_a;
        rhs += gn_inv_a.transpose() * y;
    }
    let chol = lhs
        .cholesky()
        .ok_or(OedError::Factorization("oracle posterior precision not SPD"))?;
    Ok(chol.solve(&rhs))
}

/// Generalized misfit eigenvalues via the dense whitened operator
/// Gn^{-1/2} A_sel Gp^{1/2}.
pub fn oracle_eigs(lp: &LinearProblem<'_>) -> Vec<f64> {
    let r_s = lp.design.len();
    if r_s == 0 {
        return Vec::new();
    }
    let a_half = &lp.a_sel * &lp.gp_half;
    let mut s = DMatrix::zeros(r_s, a_half.ncols());
    for j in 0..a_half.ncols() {
        s.set_column(j, &lp.noise.whiten(&a_half.column(j).into_owned()));
    }
    let gram = &s * s.transpose();
    let (vals, _) = sym_eig_sorted(&gram);
    vals.into_iter().map(|v| v.max(0.0)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct OracleCriteria {
    pub a: f64,
    pub d: f64,
    pub eig: f64,
}

/// All three criteria from the exact Gaussian formulas at data `y`.
pub fn oracle_criteria(lp: &LinearProblem<'_>, y: &DVector<f64>) -> Result<OracleCriteria> {
    let lambdas = oracle_eigs(lp);
    let m_map = oracle_map(lp, y)?;
    let dev = &m_map - &lp.prior.mean;
    let norm2 = lp.prior_norm2_dense(&dev);
    Ok(OracleCriteria {
        a: a_opt(&lambdas)?,
        d: d_opt(&lambdas)?,
        eig: eig_gain(&lambdas, norm2)?,
    })
}

/// Analytic expectation of the information-gain criterion over exact
/// marginal data draws: the misfit-norm term averages to the A-term, so
/// E[EIG] = sum log(1 + lambda_i).
pub fn oracle_expected_eig(lp: &LinearProblem<'_>) -> f64 {
    oracle_eigs(lp).iter().map(|l| (1.0 + l).ln()).sum()
}

/// One exact marginal draw y = A_sel m + eps with m from the prior.
pub fn oracle_marginal_draw(lp: &LinearProblem<'_>, seed: u64, k: u64) -> DVector<f64> {
    let m = lp.prior.sample(seed, k);
    let eps = lp
        .noise
        .color(&standard_normal_vector(lp.design.len(), seed, (1 << 33) + k));
    restrict(&(lp.map.matrix() * m), &lp.design) + eps
}

/// Per-sample entries of the measured error budget.
#[derive(Debug, Clone, Copy)]
pub struct BudgetSample {
    /// ||F_xi - F_hat_xi|| at the prior sample.
    pub eps1: f64,
    /// Whitened Jacobian gap ||(J_xi - J_hat_xi) Gamma^{1/2}||_F.
    pub eps2: f64,
    /// Projection residual ||(I - P_r) eta*|| of the high-fidelity MAP.
    pub eps3: f64,
    /// ||eta* - eta_hat*|| = Gamma^-1 distance between the MAP points.
    pub eps_m: f64,
    /// max_i |lambda_i - lambda_hat_i| (zero-padded).
    pub eps_lambda: f64,
    /// ||H - H_hat||_F between the whitened misfit Hessians.
    pub weyl_gap: f64,
    pub weyl_ok: bool,
    /// |A - A_hat| and |D - D_hat| against their r * eps_lambda bounds.
    pub a_gap: f64,
    pub d_gap: f64,
    pub criteria_bounds_ok: bool,
}

/// Empirical error budget: sup over the provided samples of each epsilon,
/// with the per-sample detail kept for reporting.
#[derive(Debug, Clone)]
pub struct ErrorBudget {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub eps_m: f64,
    pub eps_lambda: f64,
    pub per_sample: Vec<BudgetSample>,
}

impl ErrorBudget {
    pub fn median_eps_m(&self) -> f64 {
        median(self.per_sample.iter().map(|s| s.eps_m))
    }

    pub fn median_eps_lambda(&self) -> f64 {
        median(self.per_sample.iter().map(|s| s.eps_lambda))
    }

    pub fn all_weyl_ok(&self) -> bool {
        self.per_sample.iter().all(|s| s.weyl_ok)
    }

    pub fn all_criteria_bounds_ok(&self) -> bool {
        self.per_sample.iter().all(|s| s.criteria_bounds_ok)
    }
}

pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// ||S^T S - T^T T||_F without forming the d x d Hessians, via the small
/// Gram matrices S S^T, S T^T, T T^T.
fn hessian_frobenius_gap(s: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    let ss = s * s.transpose();
    let st = s * t.transpose();
    let tt = t * t.transpose();
    let val = ss.norm_squared() - 2.0 * st.norm_squared() + tt.norm_squared();
    val.max(0.0).sqrt()
}

/// Measures the assumption quantities (eps_1, eps_2, eps_3) and the
/// theorem left-hand sides (eps_m, eps_lambda, the Weyl gap, criterion
/// gaps) over the bank samples, comparing a high-fidelity forward map with
/// a reduced surrogate.
#[allow(clippy::too_many_arguments)]
pub fn measure_error_budget<F, R>(
    forward: &F,
    prior: &PriorModel,
    noise: &crate::laplace::NoiseModel,
    design: &Design,
    reduced: &R,
    input_basis: &crate::reduce::ReducedBasis,
    output_basis: &crate::reduce::ReducedBasis,
    bank: &crate::criteria::SaaBank,
    newton_cfg: crate::laplace::NewtonCfg,
    lbfgs_cfg: crate::reduced::LbfgsCfg,
) -> Result<ErrorBudget>
where
    F: ObservableMap,
    R: crate::surrogate::ReducedForward,
{
    use crate::criteria::{a_opt, d_opt};
    use crate::forward::scatter_design;
    use crate::laplace::{gen_eig_hifi, map_hifi, InverseProblem};
    use crate::reduce::{decode_output, encode_input};
    use crate::reduced::{eig_reduced, map_reduced, ReducedMapProblem};

    let r_s = design.len();
    let r_m = input_basis.rank();
    // whitened input basis Phi_m = Gamma^{-1/2} Psi_m, for the projector P_r
    let mut phi_m = DMatrix::zeros(prior.dim(), r_m);
    for j in 0..r_m {
        phi_m.set_column(j, &prior.inv_sqrt_cov_apply(&input_basis.psi.column(j).into_owned()));
    }

    let noise_cov = noise.restrict(design)?;
    let mut per_sample = Vec::with_capacity(bank.len());
    for n in 0..bank.len() {
        let m_n = &bank.parameters[n];
        let y = bank.data_for(n, design);

        // A2 quantities at the prior sample
        let beta_n = encode_input(input_basis, m_n)?;
        let f_hat = decode_output(output_basis, &reduced.eval(&beta_n))?;
        let eps1 = (restrict(&bank.observables[n], design) - restrict(&f_hat, design)).norm();

        let state_n = forward.solve(m_n)?;
        let mut s_hifi = DMatrix::zeros(r_s, prior.dim());
        for k in 0..r_s {
            let mut e = DVector::zeros(r_s);
            e[k] = 1.0;
            let w = scatter_design(&e, design, forward.obs_dim());
            let row = prior.sqrt_cov_apply_t(&forward.vjp(&state_n, &w));
            s_hifi.row_mut(k).copy_from(&row.transpose());
        }
        let jac_red = reduced.jacobian(&beta_n);
        let sel_psi_f = {
            let idx = design.indices();
            DMatrix::from_fn(idx.len(), output_basis.rank(), |i, j| output_basis.psi[(idx[i], j)])
        };
        let s_surr = &sel_psi_f * &jac_red * phi_m.transpose();
        let eps2 = (&s_hifi - &s_surr).norm();

        // high-fidelity Laplace
        let problem =
            InverseProblem::new(forward, prior, noise_cov.clone(), design.clone(), y.clone())?;
        let map = map_hifi(&problem, None, newton_cfg)?;
        let eig = gen_eig_hifi(&problem, &map.m_map, r_s)?;
        let eta_star = prior.inv_sqrt_cov_apply(&(&map.m_map - &prior.mean));
        let eps3 = (&eta_star - &phi_m * (phi_m.transpose() * &eta_star)).norm();

        // reduced Laplace
        let rp = ReducedMapProblem::new(
            reduced,
            input_basis,
            output_basis,
            design.clone(),
            y,
            noise_cov.clone(),
            lbfgs_cfg,
        )?;
        let rsol = map_reduced(&rp)?;
        let reig = eig_reduced(&rp, &rsol.beta)?;
        let eps_m = prior.norm2(&(&map.m_map - &rsol.m_lifted))?.sqrt();

        let r_pad = eig.values.len().max(reig.values.len());
        let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        let eps_lambda = (0..r_pad)
            .map(|i| (get(&eig.values, i) - get(&reig.values, i)).abs())
            .fold(0.0f64, f64::max);

        // whitened misfit Hessians at the respective MAP points
        let state_map = forward.solve(&map.m_map)?;
        let mut s_map = DMatrix::zeros(r_s, prior.dim());
        for k in 0..r_s {
            let mut e = DVector::zeros(r_s);
            e[k] = 1.0;
            let w = scatter_design(&e, design, forward.obs_dim());
            let row = prior.sqrt_cov_apply_t(&forward.vjp(&state_map, &w));
            s_map.row_mut(k).copy_from(&noise_cov.whiten(&row).transpose());
        }
        let jac_hat = reduced.jacobian(&rsol.beta);
        let s_hat_raw = &sel_psi_f * &jac_hat * phi_m.transpose();
        let mut s_hat = DMatrix::zeros(r_s, prior.dim());
        for j in 0..prior.dim() {
            s_hat.set_column(j, &noise_cov.whiten(&s_hat_raw.column(j).into_owned()));
        }
        let weyl_gap = hessian_frobenius_gap(&s_map, &s_hat);
        let weyl_ok = eps_lambda <= weyl_gap * (1.0 + 1e-10) + 1e-12;

        let pad = |v: &[f64]| -> Vec<f64> { (0..r_pad).map(|i| get(v, i)).collect() };
        let a_gap = (a_opt(&pad(&eig.values))? - a_opt(&pad(&reig.values))?).abs();
        let d_gap = (d_opt(&pad(&eig.values))? - d_opt(&pad(&reig.values))?).abs();
        let bound = r_pad as f64 * eps_lambda * (1.0 + 1e-10) + 1e-12;
        let criteria_bounds_ok = a_gap <= bound && d_gap <= bound;

        per_sample.push(BudgetSample {
            eps1,
            eps2,
            eps3,
            eps_m,
            eps_lambda,
            weyl_gap,
            weyl_ok,
            a_gap,
            d_gap,
            criteria_bounds_ok,
        });
    }
    let sup = |f: fn(&BudgetSample) -> f64| per_sample.iter().map(f).fold(0.0f64, f64::max);
    Ok(ErrorBudget {
        eps1: sup(|s| s.eps1),
        eps2: sup(|s| s.eps2),
        eps3: sup(|s| s.eps3),
        eps_m: sup(|s| s.eps_m),
        eps_lambda: sup(|s| s.eps_lambda),
        per_sample,
    })
}
