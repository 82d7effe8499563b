//! Input and output dimension reduction: derivative-informed subspaces,
//! Karhunen-Loeve, PCA, and projection-error diagnostics.
//!
//! Input bases (DIS, KLE) are orthonormal in the prior-precision metric,
//! output bases (DOS, PCA) in the Euclidean metric. All bases are computed
//! once at the maximum rank and truncated, so nested-rank comparisons are
//! meaningful.

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};
use crate::forward::{self, ForwardModel, ObservableMap, SensorGrid};
use crate::linalg::{randomized_sym_eig, sym_eig_sorted};
use crate::prior::PriorModel;

/// Above this dimension the dense symmetric eigensolver is replaced by the
/// randomized double-pass method (oversampling 10, one power iteration).
pub const DENSE_EIG_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Dis,
    Kle,
    Dos,
    Pca,
}

impl BasisKind {
    pub fn metric(self) -> Metric {
        match self {
            BasisKind::Dis | BasisKind::Kle => Metric::PriorInverse,
            BasisKind::Dos | BasisKind::Pca => Metric::Euclidean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Dis => "dis",
            BasisKind::Kle => "kle",
            BasisKind::Dos => "dos",
            BasisKind::Pca => "pca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    PriorInverse,
    Euclidean,
}

/// A projection basis with its spectrum.
///
/// `dual` holds the metric-weighted columns (Gamma^-1 Psi for the prior
/// metric, Psi itself conceptually for the Euclidean one), so encoding
/// never needs the prior operators again. The encode/decode projector
/// Psi dual^T reproduces the Euclidean projector for KLE/PCA/DOS and the
/// prior-weighted oblique projector for DIS.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub kind: BasisKind,
    pub metric: Metric,
    pub psi: DMatrix<f64>,
    pub values: Vec<f64>,
    pub center: DVector<f64>,
    dual: Option<DMatrix<f64>>,
    pub truncated: bool,
}

impl ReducedBasis {
    /// Rebuilds a basis from raw pieces (deserialization, test harnesses).
    /// `dual` must be `Gamma^-1 Psi` for prior-metric bases and `None` for
    /// Euclidean ones.
    pub fn from_parts(
        kind: BasisKind,
        psi: DMatrix<f64>,
        values: Vec<f64>,
        center: DVector<f64>,
        dual: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let metric = kind.metric();
        if values.len() != psi.ncols() {
            return Err(OedError::DimensionMismatch {
                expected: psi.ncols(),
                got: values.len(),
                context: "basis spectrum length",
            });
        }
        if center.len() != psi.nrows() {
            return Err(OedError::DimensionMismatch {
                expected: psi.nrows(),
                got: center.len(),
                context: "basis center",
            });
        }
        if metric == Metric::PriorInverse && dual.is_none() {
            return Err(OedError::InvalidParameter(
                "prior-metric basis needs its dual columns".into(),
            ));
        }
        Ok(ReducedBasis { kind, metric, psi, values, center, dual, truncated: false })
    }

    pub fn rank(&self) -> usize {
        self.psi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn dual(&self) -> &DMatrix<f64> {
        self.dual.as_ref().unwrap_or(&self.psi)
    }

    /// Prefix basis of rank `r` (bases are nested by construction).
    pub fn truncate(&self, r: usize) -> ReducedBasis {
        let r = r.min(self.rank());
        ReducedBasis {
            kind: self.kind,
            metric: self.metric,
            psi: self.psi.columns(0, r).into_owned(),
            values: self.values[..r].to_vec(),
            center: self.center.clone(),
            dual: self.dual.as_ref().map(|d| d.columns(0, r).into_owned()),
            truncated: self.truncated,
        }
    }

    /// Max |Psi^T W Psi - I| entry for the basis metric (W = Gamma^-1 or I).
    pub fn orthonormality_defect(&self, prior: Option<&PriorModel>) -> f64 {
        let r = self.rank();
        let gram = match self.metric {
            Metric::Euclidean => self.psi.transpose() * &self.psi,
            Metric::PriorInverse => {
                let prior = prior.expect("prior metric needs the prior model");
                let mut winv = DMatrix::zeros(self.dim(), r);
                for j in 0..r {
                    winv.set_column(j, &prior.inv_cov_apply(&self.psi.column(j).into_owned()));
                }
                self.psi.transpose() * winv
            }
        };
        let mut defect: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((gram[(i, j)] - target).abs());
            }
        }
        defect
    }
}

/// Deterministic sign convention: the entry of largest magnitude in each
/// column is made positive.
fn fix_signs(psi: &mut DMatrix<f64>, dual: Option<&mut DMatrix<f64>>) {
    let mut flips = vec![false; psi.ncols()];
    for j in 0..psi.ncols() {
        let col = psi.column(j);
        let mut best = 0usize;
        for i in 0..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            flips[j] = true;
            psi.column_mut(j).neg_mut();
        }
    }
    if let Some(dual) = dual {
        for (j, &f) in flips.iter().enumerate() {
            if f {
                dual.column_mut(j).neg_mut();
            }
        }
    }
}

/// Drops trailing spectrum entries below a relative floor; reports whether
/// anything was cut.
fn numerical_rank(values: &[f64]) -> usize {
    let v0 = values.first().copied().unwrap_or(0.0).abs();
    let floor = v0 * 1e-12;
    values.iter().take_while(|&&v| v > floor || v0 == 0.0).count()
}

/// Whitened Jacobian J Gamma^{1/2} = J A^-1 L_M, one pair of banded solves
/// per row.
pub fn whiten_jacobian(prior: &PriorModel, j: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(j.nrows(), j.ncols());
    for i in 0..j.nrows() {
        let row = j.row(i).transpose();
        out.row_mut(i)
            .copy_from(&prior.sqrt_cov_apply_t(&row).transpose());
    }
    out
}

/// Streaming accumulator for the sample-average Gram operators behind DIS
/// (input side, d_m x d_m) and DOS (output side, d_s x d_s). Jacobians are
/// whitened and folded in one at a time so the full stack never lives in
/// memory.
pub struct GramAccumulator {
    g_input: DMatrix<f64>,
    h_output: DMatrix<f64>,
    n: usize,
}

impl GramAccumulator {
    pub fn new(d_m: usize, d_s: usize) -> Self {
        GramAccumulator {
            g_input: DMatrix::zeros(d_m, d_m),
            h_output: DMatrix::zeros(d_s, d_s),
            n: 0,
        }
    }

    pub fn push(&mut self, prior: &PriorModel, jacobian: &DMatrix<f64>) {
        let jt = whiten_jacobian(prior, jacobian);
        self.g_input += jt.transpose() * &jt;
        self.h_output += &jt * jt.transpose();
        self.n += 1;
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    /// Eigendecomposition of the input Gram, lifted to the DIS basis.
    pub fn finish_dis(&self, prior: &PriorModel, r: usize) -> Result<ReducedBasis> {
        if self.n == 0 {
            return Err(OedError::InvalidParameter(
                "DIS needs at least one Jacobian sample".into(),
            ));
        }
        let d = self.g_input.nrows();
        if r > d {
            return Err(OedError::InvalidParameter(format!(
                "requested rank {r} exceeds parameter dimension {d}"
            )));
        }
        let g = &self.g_input / self.n as f64;
        let (vals, phis) = if d <= DENSE_EIG_LIMIT {
            let (v, p) = sym_eig_sorted(&g);
            (v[..r].to_vec(), p.columns(0, r).into_owned())
        } else {
            randomized_sym_eig(d, r, |v| &g * v, 0x6a15)
        };
        let keep = r.min(numerical_rank(&vals));
        let mut psi = DMatrix::zeros(d, keep);
        let mut dual = DMatrix::zeros(d, keep);
        for jcol in 0..keep {
            let phi = phis.column(jcol).into_owned();
            let p = prior.sqrt_cov_apply(&phi);
            dual.set_column(jcol, &prior.inv_cov_apply(&p));
            psi.set_column(jcol, &p);
        }
        fix_signs(&mut psi, Some(&mut dual));
        let values_kept: Vec<f64> = vals[..keep].iter().map(|&v| v.max(0.0)).collect();
        Ok(ReducedBasis {
            kind: BasisKind::Dis,
            metric: Metric::PriorInverse,
            psi,
            values: values_kept,
            center: prior.mean.clone(),
            dual: Some(dual),
            truncated: keep < r,
        })
    }

    /// Eigendecomposition of the output Gram (always small): the DOS basis.
    pub fn finish_dos(&self, center: DVector<f64>, r: usize) -> Result<ReducedBasis> {
        if self.n == 0 {
            return Err(OedError::InvalidParameter(
                "DOS needs at least one Jacobian sample".into(),
            ));
        }
        let d_s = self.h_output.nrows();
        let r = r.min(d_s);
        let h = &self.h_output / self.n as f64;
        let (vals, vecs) = sym_eig_sorted(&h);
        let keep = r.min(numerical_rank(&vals[..r]));
        let mut psi = vecs.columns(0, keep).into_owned();
        fix_signs(&mut psi, None);
        Ok(ReducedBasis {
            kind: BasisKind::Dos,
            metric: Metric::Euclidean,
            psi,
            values: vals[..keep].iter().map(|&v| v.max(0.0)).collect(),
            center,
            dual: None,
            truncated: keep < r,
        })
    }
}

/// DIS from a list of full Jacobian samples.
pub fn compute_dis(prior: &PriorModel, jacobians: &[DMatrix<f64>], r: usize) -> Result<ReducedBasis> {
    let d_s = jacobians
        .first()
        .map(|j| j.nrows())
        .ok_or_else(|| OedError::InvalidParameter("DIS needs at least one Jacobian sample".into()))?;
    let mut acc = GramAccumulator::new(prior.dim(), d_s);
    for j in jacobians {
        acc.push(prior, j);
    }
    acc.finish_dis(prior, r)
}

/// DOS from a list of full Jacobian samples and the observable sample mean.
pub fn compute_dos(
    prior: &PriorModel,
    jacobians: &[DMatrix<f64>],
    center: DVector<f64>,
    r: usize,
) -> Result<ReducedBasis> {
    let d_s = jacobians
        .first()
        .map(|j| j.nrows())
        .ok_or_else(|| OedError::InvalidParameter("DOS needs at least one Jacobian sample".into()))?;
    let mut acc = GramAccumulator::new(prior.dim(), d_s);
    for j in jacobians {
        acc.push(prior, j);
    }
    acc.finish_dos(center, r)
}

/// Truncated Karhunen-Loeve basis of the prior covariance, rescaled to be
/// orthonormal in the prior-precision metric.
pub fn compute_kle(prior: &PriorModel, r: usize) -> Result<ReducedBasis> {
    let d = prior.dim();
    if r > d {
        return Err(OedError::InvalidParameter(format!(
            "requested rank {r} exceeds parameter dimension {d}"
        )));
    }
    let (vals, vecs) = if d <= DENSE_EIG_LIMIT {
        let gamma = prior.cov_dense(DENSE_EIG_LIMIT)?;
        let (v, p) = sym_eig_sorted(&gamma);
        (v[..r].to_vec(), p.columns(0, r).into_owned())
    } else {
        randomized_sym_eig(d, r, |v| prior.cov_apply(v), 0x6b1e)
    };
    let keep = r.min(numerical_rank(&vals));
    let mut psi = DMatrix::zeros(d, keep);
    let mut dual = DMatrix::zeros(d, keep);
    for j in 0..keep {
        let u = vecs.column(j).into_owned();
        let s = vals[j].sqrt();
        psi.set_column(j, &(&u * s));
        dual.set_column(j, &(&u / s));
    }
    fix_signs(&mut psi, Some(&mut dual));
    Ok(ReducedBasis {
        kind: BasisKind::Kle,
        metric: Metric::PriorInverse,
        psi,
        values: vals[..keep].to_vec(),
        center: prior.mean.clone(),
        dual: Some(dual),
        truncated: keep < r,
    })
}

/// PCA of centered observable samples (columns of the bank).
pub fn compute_pca(observables: &[DVector<f64>], r: usize) -> Result<ReducedBasis> {
    let n = observables.len();
    if n == 0 {
        return Err(OedError::InvalidParameter("PCA needs at least one sample".into()));
    }
    let d_s = observables[0].len();
    let r = r.min(n.min(d_s));
    let mut center = DVector::zeros(d_s);
    for f in observables {
        center += f;
    }
    center /= n as f64;
    let mut b = DMatrix::zeros(d_s, n);
    for (j, f) in observables.iter().enumerate() {
        b.set_column(j, &(f - &center));
    }
    let svd = b.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let keep = r.min(numerical_rank(&sv[..r.min(sv.len())]));
    let mut psi = u.columns(0, keep).into_owned();
    fix_signs(&mut psi, None);
    Ok(ReducedBasis {
        kind: BasisKind::Pca,
        metric: Metric::Euclidean,
        psi,
        values: sv[..keep].to_vec(),
        center,
        dual: None,
        truncated: keep < r,
    })
}

/// beta = dual^T (m - center) in the prior-precision metric.
pub fn encode_input(basis: &ReducedBasis, m: &DVector<f64>) -> Result<DVector<f64>> {
    if basis.metric != Metric::PriorInverse {
        return Err(OedError::InvalidParameter(
            "encode_input needs a prior-metric (DIS/KLE) basis".into(),
        ));
    }
    Ok(basis.dual().transpose() * (m - &basis.center))
}

/// m_r = center + Psi beta.
pub fn decode_input(basis: &ReducedBasis, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if basis.metric != Metric::PriorInverse {
        return Err(OedError::InvalidParameter(
            "decode_input needs a prior-metric (DIS/KLE) basis".into(),
        ));
    }
    Ok(&basis.center + &basis.psi * beta)
}

/// beta = Psi^T (F - center) in the Euclidean metric.
pub fn encode_output(basis: &ReducedBasis, f: &DVector<f64>) -> Result<DVector<f64>> {
    if basis.metric != Metric::Euclidean {
        return Err(OedError::InvalidParameter(
            "encode_output needs a Euclidean (DOS/PCA) basis".into(),
        ));
    }
    Ok(basis.psi.transpose() * (f - &basis.center))
}

pub fn decode_output(basis: &ReducedBasis, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if basis.metric != Metric::Euclidean {
        return Err(OedError::InvalidParameter(
            "decode_output needs a Euclidean (DOS/PCA) basis".into(),
        ));
    }
    Ok(&basis.center + &basis.psi * beta)
}

/// Training and diagnostic samples: parameters, observables, and optional
/// Jacobian data, with the solve counts spent producing them.
#[derive(Debug, Clone, Default)]
pub struct SampleBank {
    pub parameters: Vec<DVector<f64>>,
    pub observables: Vec<DVector<f64>>,
    pub jacobians: Option<Vec<DMatrix<f64>>>,
    pub reduced_jacobians: Option<Vec<DMatrix<f64>>>,
    pub seed: u64,
    pub state_solves: usize,
    pub linearized_solves: usize,
}

impl SampleBank {
    pub fn len(&self) -> usize {
        self.parameters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parameters.is_empty()
    }

    /// Draws `n` prior samples and solves the forward map at each.
    pub fn generate(
        prior: &PriorModel,
        model: &ForwardModel,
        sensors: &SensorGrid,
        n: usize,
        seed: u64,
        with_full_jacobians: bool,
    ) -> Result<SampleBank> {
        let mut bank = SampleBank {
            seed,
            ..Default::default()
        };
        let mut jacs = Vec::new();
        for k in 0..n {
            let m = prior.sample(seed, k as u64);
            let state = forward::solve_state(model, &m)?;
            bank.state_solves += 1;
            bank.observables.push(forward::observe(&state, sensors));
            if with_full_jacobians {
                jacs.push(forward::jacobian_full(model, &state, sensors));
                bank.linearized_solves += sensors.count();
            }
            bank.parameters.push(m);
        }
        if with_full_jacobians {
            bank.jacobians = Some(jacs);
        }
        Ok(bank)
    }

    /// Computes reduced Jacobians Psi_F^T J Psi_m for every sample with
    /// min(r_F, r_m) linearized solves each (states are re-solved, the
    /// factorization is then reused across the sweep).
    pub fn add_reduced_jacobians(
        &mut self,
        model: &ForwardModel,
        sensors: &SensorGrid,
        input_basis: &ReducedBasis,
        output_basis: &ReducedBasis,
    ) -> Result<()> {
        let mut out = Vec::with_capacity(self.len());
        for m in &self.parameters {
            let state = forward::solve_state(model, m)?;
            out.push(forward::reduced_jacobian(
                model,
                &state,
                sensors,
                &input_basis.psi,
                &output_basis.psi,
            ));
            self.linearized_solves += input_basis.rank().min(output_basis.rank());
        }
        self.reduced_jacobians = Some(out);
        Ok(())
    }
}

/// Mean relative projection errors over a bank.
#[derive(Debug, Clone, Default)]
pub struct ProjectionReport {
    /// ||F(m) - F(P m)|| / ||F(m)|| for input bases,
    /// ||F - (center + Psi Psi^T (F - center))|| / ||F|| for output bases.
    pub observable: Option<f64>,
    /// Input: ||J - J Psi dual^T||_F / ||J||_F; output: ||J - Psi Psi^T J||_F / ||J||_F.
    pub jacobian: Option<f64>,
    /// ||m - P m||_W / ||m||_W in the basis metric (input bases only).
    pub parameter: Option<f64>,
}

/// Projection diagnostics for a basis over the bank samples. For input
/// bases the observable error re-solves the forward map at the projected
/// parameter, so `map` must be provided; output bases need no solves.
pub fn projection_errors<M: ObservableMap>(
    bank: &SampleBank,
    basis: &ReducedBasis,
    prior: &PriorModel,
    map: Option<&M>,
) -> Result<ProjectionReport> {
    if bank.is_empty() {
        return Err(OedError::InvalidParameter("projection_errors: empty bank".into()));
    }
    let n = bank.len();
    let mut report = ProjectionReport::default();
    match basis.metric {
        Metric::PriorInverse => {
            if let Some(map) = map {
                let mut acc = 0.0;
                for (m, f) in bank.parameters.iter().zip(&bank.observables) {
                    let mr = decode_input(basis, &encode_input(basis, m)?)?;
                    let fr = map.observe(&map.solve(&mr)?);
                    acc += (f - fr).norm() / f.norm().max(1e-300);
                }
                report.observable = Some(acc / n as f64);
            }
            if let Some(jacs) = &bank.jacobians {
                let mut acc = 0.0;
                for j in jacs {
                    // J P with P = Psi dual^T: equals J Psi Psi^T Gamma^-1
                    // for DIS and J Psi_unit Psi_unit^T for KLE
                    let jp = (j * &basis.psi) * basis.dual().transpose();
                    acc += (j - jp).norm() / j.norm().max(1e-300);
                }
                report.jacobian = Some(acc / jacs.len() as f64);
            }
            let mut acc = 0.0;
            for m in &bank.parameters {
                let mr = decode_input(basis, &encode_input(basis, m)?)?;
                let num = prior.norm2(&(m - &mr))?.sqrt();
                let den = prior.norm2(m)?.sqrt();
                acc += num / den.max(1e-300);
            }
            report.parameter = Some(acc / n as f64);
        }
        Metric::Euclidean => {
            let mut acc = 0.0;
            for f in &bank.observables {
                let fr = decode_output(basis, &encode_output(basis, f)?)?;
                acc += (f - &fr).norm() / f.norm().max(1e-300);
            }
            report.observable = Some(acc / n as f64);
            if let Some(jacs) = &bank.jacobians {
                let mut acc = 0.0;
                for j in jacs {
                    let jp = &basis.psi * (basis.psi.transpose() * j);
                    acc += (j - jp).norm() / j.norm().max(1e-300);
                }
                report.jacobian = Some(acc / jacs.len() as f64);
            }
        }
    }
    Ok(report)
}
