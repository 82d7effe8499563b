//! Forward PDE models, pointwise observation, and Jacobians via adjoints.
//!
//! Two model kinds share the machinery:
//!  - `LinearDiffusion`: -div(e^m grad u) = 0, u = 1 on top, u = 0 on
//!    bottom, no-flux sides;
//!  - `SemilinearReaction`: -nu Lap u + e^m u^3 = f, u = 0 on the whole
//!    boundary, solved by a damped Newton iteration.
//!
//! Each solved state carries the banded factorization of its linearized
//! operator; every Jacobian row/column reuses that factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};
use crate::linalg::{BandCholesky, BandMatrix};
use crate::mesh::Mesh2D;

pub const DEFAULT_NEWTON_TOL: f64 = 1e-10;
pub const DEFAULT_NEWTON_MAX: usize = 25;
const MAX_BACKTRACK: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardKind {
    LinearDiffusion,
    SemilinearReaction,
}

/// Precomputed per-element data (node triple, unit stiffness, mass).
#[derive(Debug, Clone)]
struct ElementData {
    nodes: [usize; 3],
    stiff: [[f64; 3]; 3],
    mass: [[f64; 3]; 3],
}

#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub kind: ForwardKind,
    pub mesh: Mesh2D,
    pub nu: f64,
    pub newton_tol: f64,
    pub newton_max: usize,
    elements: Vec<ElementData>,
    /// Dirichlet constraints (node, value) for this kind.
    constraints: Vec<(usize, f64)>,
    constrained: Vec<bool>,
    /// Lumped vertex weights w_i = sum of area/3 over adjacent elements.
    lumped: DVector<f64>,
    /// Load vector M f (reaction only; zero for diffusion).
    load: DVector<f64>,
    /// Nodal source values (reaction only).
    pub source: DVector<f64>,
}

impl ForwardModel {
    pub fn linear_diffusion(n: usize) -> Result<Self> {
        let mesh = Mesh2D::new(n)?;
        let mut constraints: Vec<(usize, f64)> =
            mesh.top_nodes().into_iter().map(|i| (i, 1.0)).collect();
        constraints.extend(mesh.bottom_nodes().into_iter().map(|i| (i, 0.0)));
        Self::build(ForwardKind::LinearDiffusion, mesh, 0.0, constraints, None)
    }

    pub fn semilinear_reaction(n: usize, nu: f64) -> Result<Self> {
        if nu <= 0.0 {
            return Err(OedError::InvalidParameter(format!(
                "diffusion coefficient must be positive, got {nu}"
            )));
        }
        let mesh = Mesh2D::new(n)?;
        let constraints: Vec<(usize, f64)> =
            mesh.boundary_nodes().into_iter().map(|i| (i, 0.0)).collect();
        let source = DVector::from_fn(mesh.node_count(), |i, _| {
            let [x, y] = mesh.coords()[i];
            let d2 = (x - 0.7).powi(2) + (y - 0.7).powi(2);
            (0.5f64).max((-25.0 * d2).exp())
        });
        Self::build(
            ForwardKind::SemilinearReaction,
            mesh,
            nu,
            constraints,
            Some(source),
        )
    }

    fn build(
        kind: ForwardKind,
        mesh: Mesh2D,
        nu: f64,
        constraints: Vec<(usize, f64)>,
        source: Option<DVector<f64>>,
    ) -> Result<Self> {
        let d = mesh.node_count();
        let mut elements = Vec::with_capacity(mesh.elements().len());
        let mut lumped = DVector::zeros(d);
        for e in 0..mesh.elements().len() {
            let (area, stiff, mass) = mesh.element_matrices(e);
            let nodes = mesh.elements()[e];
            for &node in &nodes {
                lumped[node] += area / 3.0;
            }

            elements.push(ElementData { nodes, stiff, mass });
        }
        let mut constrained = vec![false; d];
        for &(c, _) in &constraints {
            constrained[c] = true;
        }
        let source = source.unwrap_or_else(|| DVector::zeros(d));
        // load = M f with the consistent mass matrix
        let mut load = DVector::zeros(d);
        for el in &elements {
            for a in 0..3 {
                let mut s = 0.0;
                for b in 0..3 {
                    s += el.mass[a][b] * source[el.nodes[b]];
                }
                load[el.nodes[a]] += s;
            }
        }
        Ok(ForwardModel {
            kind,
            mesh,
            nu,
            newton_tol: DEFAULT_NEWTON_TOL,
            newton_max: DEFAULT_NEWTON_MAX,
            elements,
            constraints,
            constrained,
            lumped,
            load,
            source,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.mesh.node_count()
    }

    /// e^{mbar_T} with mbar_T the element average of the P1 coefficient.
    fn element_coefs(&self, m: &DVector<f64>) -> Vec<f64> {
        self.elements
            .iter()
            .map(|el| {
                ((m[el.nodes[0]] + m[el.nodes[1]] + m[el.nodes[2]]) / 3.0).exp()
            })
            .collect()
    }

    /// Assembles the diffusion operator K(m) with per-element coefficients.
    fn assemble_diffusion(&self, coefs: &[f64]) -> BandMatrix {
        let mut k = BandMatrix::zeros(self.mesh.node_count(), self.mesh.bandwidth());
        for (el, &c) in self.elements.iter().zip(coefs) {
            for a in 0..3 {
                for b in 0..=a {
                    k.add(el.nodes[a], el.nodes[b], c * el.stiff[a][b]);
                }
            }
        }
        k
    }

    /// Assembles nu * K1 (unit-coefficient stiffness scaled by nu).
    fn assemble_scaled_laplacian(&self) -> BandMatrix {
        let mut k = BandMatrix::zeros(self.mesh.node_count(), self.mesh.bandwidth());
        for el in &self.elements {
            for a in 0..3 {
                for b in 0..=a {
                    k.add(el.nodes[a], el.nodes[b], self.nu * el.stiff[a][b]);
                }
            }
        }
        k
    }

    /// Full residual of the semilinear problem: nu K1 u + N(u) - M f, with
    /// the lumped-vertex reaction N(u)_i = w_i e^{m_i} u_i^3. Rows at
    /// constrained nodes are zeroed (the state is pinned there).
    fn reaction_residual(
        &self,
        lap: &BandMatrix,
        m: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        let mut r = lap.mul_vec(u) - &self.load;
        for i in 0..r.len() {
            r[i] += self.lumped[i] * m[i].exp() * u[i].powi(3);
        }
        for (i, &c) in self.constrained.iter().enumerate() {
            if c {
                r[i] = 0.0;
            }
        }
        r
    }
}

/// Solved forward state plus the reusable factorization of the linearized
/// state operator at this (u, m).
pub struct StateSolution {
    pub u: DVector<f64>,
    pub newton_iterations: usize,
    pub newton_residuals: Vec<f64>,
    factor: BandCholesky,
    kind_data: StateKindData,
}

enum StateKindData {
    /// e^{mbar_T} per element, for d(K u)/dm products.
    Diffusion { elem_coefs: Vec<f64> },
    /// w_i e^{m_i} u_i^3 per node (zero at constrained nodes).
    Reaction { dm_coef: DVector<f64> },
}

pub fn solve_state(model: &ForwardModel, m: &DVector<f64>) -> Result<StateSolution> {
    let d = model.param_dim();
    if m.len() != d {
        return Err(OedError::DimensionMismatch {
            expected: d,
            got: m.len(),
            context: "solve_state parameter",
        });
    }
    match model.kind {
        ForwardKind::LinearDiffusion => {
            let coefs = model.element_coefs(m);
            let mut k = model.assemble_diffusion(&coefs);
            let mut rhs = DVector::zeros(d);
            k.apply_dirichlet(&mut rhs, &model.constraints);
            let factor = k.cholesky()?;
            let u = factor.solve(&rhs);
            Ok(StateSolution {
                u,
                newton_iterations: 0,
                newton_residuals: Vec::new(),
                factor,
                kind_data: StateKindData::Diffusion { elem_coefs: coefs },
            })
        }
        ForwardKind::SemilinearReaction => {
            let lap = model.assemble_scaled_laplacian();
            let mut u = DVector::zeros(d);
            let mut residuals = Vec::new();
            let mut r = model.reaction_residual(&lap, m, &u);
            let mut rnorm = r.norm();
            residuals.push(rnorm);
            let mut factor = None;
            let mut iters = 0;
            while rnorm >= model.newton_tol {
                if iters >= model.newton_max {
                    return Err(OedError::NonConvergence {
                        what: "Newton state solve",
                        iterations: iters,
                        residual: rnorm,
                    });
                }
                // J = nu K1 + diag(3 w_i e^{m_i} u_i^2), SPD on free nodes
                let mut jac = lap.clone();
                for i in 0..d {
                    jac.add(i, i, 3.0 * model.lumped[i] * m[i].exp() * u[i] * u[i]);
                }
                let mut rhs = -&r;
                jac.apply_dirichlet(&mut rhs, &model.constraints);
                let f = jac.cholesky()?;
                let delta = f.solve(&rhs);
                // backtracking on the residual norm
                let mut alpha = 1.0;
                let mut accepted = false;
                for _ in 0..=MAX_BACKTRACK {
                    let trial = &u + &delta * alpha;
                    let rt = model.reaction_residual(&lap, m, &trial);
                    let tn = rt.norm();
                    if tn < (1.0 - 1e-4 * alpha) * rnorm {
                        u = trial;
                        r = rt;
                        rnorm = tn;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    return Err(OedError::NonConvergence {
                        what: "Newton line search",
                        iterations: iters,
                        residual: rnorm,
                    });
                }
                residuals.push(rnorm);
                factor = Some(f);
                iters += 1;
            }
            let factor = match factor {
                Some(f) => f,
                None => {
                    // converged at the initial guess; factor the Jacobian there
                    let mut jac = lap.clone();
                    for i in 0..d {
                        jac.add(i, i, 3.0 * model.lumped[i] * m[i].exp() * u[i] * u[i]);
                    }
                    let mut rhs = DVector::zeros(d);
                    jac.apply_dirichlet(&mut rhs, &model.constraints);
                    jac.cholesky()?
                }
            };
            let mut dm_coef = DVector::zeros(d);
            for i in 0..d {
                if !model.constrained[i] {
                    dm_coef[i] = model.lumped[i] * m[i].exp() * u[i].powi(3);
                }
            }
            Ok(StateSolution {
                u,
                newton_iterations: iters,
                newton_residuals: residuals,
                factor,
                kind_data: StateKindData::Reaction { dm_coef },
            })
        }
    }
}

/// Directional derivative of the state: du = -(d_u R)^-1 (d_m R) v.
fn state_tangent(model: &ForwardModel, state: &StateSolution, v: &DVector<f64>) -> DVector<f64> {
    let d = model.param_dim();
    let mut g = DVector::zeros(d);
    match &state.kind_data {
        StateKindData::Diffusion { elem_coefs } => {
            for (el, &c) in model.elements.iter().zip(elem_coefs) {
                let vbar = (v[el.nodes[0]] + v[el.nodes[1]] + v[el.nodes[2]]) / 3.0;
                if vbar == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    let mut s = 0.0;
                    for b in 0..3 {
                        s += el.stiff[a][b] * state.u[el.nodes[b]];
                    }
                    g[el.nodes[a]] += c * vbar * s;
                }
            }
        }
        StateKindData::Reaction { dm_coef } => {
            for i in 0..d {
                g[i] = dm_coef[i] * v[i];
            }
        }
    }
    for (i, &c) in model.constrained.iter().enumerate() {
        if c {
            g[i] = 0.0;
        }
    }
    -state.factor.solve(&g)
}

/// Adjoint product: grad = -(d_m R)^T (d_u R)^-1 b for a nodal functional b.
fn state_adjoint(model: &ForwardModel, state: &StateSolution, b: &DVector<f64>) -> DVector<f64> {
    let d = model.param_dim();
    let mut rhs = b.clone();
    for (i, &c) in model.constrained.iter().enumerate() {
        if c {
            rhs[i] = 0.0;
        }
    }
    let q = state.factor.solve(&rhs);
    let mut grad = DVector::zeros(d);
    match &state.kind_data {
        StateKindData::Diffusion { elem_coefs } => {
            for (el, &c) in model.elements.iter().zip(elem_coefs) {
                let mut qsu = 0.0;
                for a in 0..3 {
                    let mut s = 0.0;
                    for b_ in 0..3 {
                        s += el.stiff[a][b_] * state.u[el.nodes[b_]];
                    }
                    qsu += q[el.nodes[a]] * s;
                }
                let contrib = -c * qsu / 3.0;
                for &node in &el.nodes {
                    grad[node] += contrib;
                }
            }
        }
        StateKindData::Reaction { dm_coef } => {
            for i in 0..d {
                grad[i] = -dm_coef[i] * q[i];
            }
        }
    }
    grad
}

/// Candidate sensors with P1 barycentric interpolation rows.
#[derive(Debug, Clone)]
pub struct SensorGrid {
    pub locations: Vec<[f64; 2]>,
    rows: Vec<[(usize, f64); 3]>,
}

impl SensorGrid {
    pub fn new(mesh: &Mesh2D, locations: Vec<[f64; 2]>) -> Result<Self> {
        let mut rows = Vec::with_capacity(locations.len());
        for &[x, y] in &locations {
            if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
                return Err(OedError::InvalidParameter(format!(
                    "sensor ({x}, {y}) is not strictly inside the domain"
                )));
            }
            let (e, w) = mesh.locate(x, y)?;
            let nodes = mesh.elements()[e];
            rows.push([(nodes[0], w[0]), (nodes[1], w[1]), (nodes[2], w[2])]);
        }
        Ok(SensorGrid { locations, rows })
    }

    /// A near-square regular grid of `count` points inside the given box.
    pub fn regular_layout(
        mesh: &Mesh2D,
        count: usize,
        x_range: (f64, f64),
        y_range: (f64, f64),
    ) -> Result<Self> {
        if count == 0 {
            return Err(OedError::InvalidParameter("sensor count must be positive".into()));
        }
        let nx = (count as f64).sqrt().ceil() as usize;
        let ny = count.div_ceil(nx);
        let mut pts = Vec::with_capacity(count);
        'outer: for j in 0..ny {
            for i in 0..nx {
                if pts.len() == count {
                    break 'outer;
                }
                let fx = (i + 1) as f64 / (nx + 1) as f64;
                let fy = (j + 1) as f64 / (ny + 1) as f64;
                pts.push([
                    x_range.0 + fx * (x_range.1 - x_range.0),
                    y_range.0 + fy * (y_range.1 - y_range.0),
                ]);
            }
        }
        SensorGrid::new(mesh, pts)
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// B u: interpolate the state at every candidate sensor.
    pub fn interpolate(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rows.len(), |i, _| {
            self.rows[i].iter().map(|&(n, w)| w * u[n]).sum()
        })
    }

    /// B^T w: scatter sensor weights back onto the nodes.
    pub fn scatter(&self, w: &DVector<f64>, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        for (row, &wi) in self.rows.iter().zip(w.iter()) {
            if wi != 0.0 {
                for &(n, b) in row {
                    out[n] += b * wi;
                }
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> &[(usize, f64); 3] {
        &self.rows[i]
    }
}

/// An ordered selection of candidate sensor indices (a design matrix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Design {
    selected: Vec<usize>,
}

impl Design {
    pub fn new(selected: Vec<usize>, d_s: usize) -> Result<Self> {
        let mut seen = vec![false; d_s];
        for &s in &selected {
            if s >= d_s {
                return Err(OedError::InvalidParameter(format!(
                    "sensor index {s} out of range (d_s = {d_s})"
                )));
            }
            if seen[s] {
                return Err(OedError::InvalidParameter(format!("duplicate sensor index {s}")));
            }
            seen[s] = true;
        }
        Ok(Design { selected })
    }

    pub fn empty() -> Self {
        Design { selected: Vec::new() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// F at the selected indices, in selection order.
pub fn restrict(f: &DVector<f64>, design: &Design) -> DVector<f64> {
    DVector::from_fn(design.len(), |i, _| f[design.indices()[i]])
}

/// xi w: scatter a design-space vector back to all candidates.
pub fn scatter_design(w: &DVector<f64>, design: &Design, d_s: usize) -> DVector<f64> {
    let mut out = DVector::zeros(d_s);
    for (k, &s) in design.indices().iter().enumerate() {
        out[s] = w[k];
    }
    out
}

pub fn observe(state: &StateSolution, sensors: &SensorGrid) -> DVector<f64> {
    sensors.interpolate(&state.u)
}

/// Full Jacobian of the parameter-to-observable map, one adjoint solve per
/// sensor, all reusing the state factorization.
pub fn jacobian_full(
    model: &ForwardModel,
    state: &StateSolution,
    sensors: &SensorGrid,
) -> DMatrix<f64> {
    let d = model.param_dim();
    let mut j = DMatrix::zeros(sensors.count(), d);
    for i in 0..sensors.count() {
        let mut b = DVector::zeros(d);
        for &(n, w) in sensors.row(i) {
            b[n] += w;
        }
        let row = state_adjoint(model, state, &b);
        j.row_mut(i).copy_from(&row.transpose());
    }
    j
}

/// J v for the full candidate set (one linearized solve).
pub fn jacobian_vec(
    model: &ForwardModel,
    state: &StateSolution,
    sensors: &SensorGrid,
    v: &DVector<f64>,
) -> DVector<f64> {
    sensors.interpolate(&state_tangent(model, state, v))
}

/// J^T w for the full candidate set (one linearized solve).
pub fn jacobian_t_vec(
    model: &ForwardModel,
    state: &StateSolution,
    sensors: &SensorGrid,
    w: &DVector<f64>,
) -> DVector<f64> {
    state_adjoint(model, state, &sensors.scatter(w, model.param_dim()))
}

/// Psi_F^T J Psi_m with min(r_F, r_m) linearized solves: adjoint sweep over
/// the output basis when r_F <= r_m, tangent sweep over the input basis
/// otherwise.
pub fn reduced_jacobian(
    model: &ForwardModel,
    state: &StateSolution,
    sensors: &SensorGrid,
    psi_m: &DMatrix<f64>,
    psi_f: &DMatrix<f64>,
) -> DMatrix<f64> {
    let r_m = psi_m.ncols();
    let r_f = psi_f.ncols();
    let mut jr = DMatrix::zeros(r_f, r_m);
    if r_f == 0 || r_m == 0 {
        return jr;
    }
    if r_f <= r_m {
        for i in 0..r_f {
            let w = psi_f.column(i).into_owned();
            let jt_w = jacobian_t_vec(model, state, sensors, &w);
            let row = jt_w.transpose() * psi_m;
            jr.row_mut(i).copy_from(&row);
        }
    } else {
        for jcol in 0..r_m {
            let v = psi_m.column(jcol).into_owned();
            let jv = jacobian_vec(model, state, sensors, &v);
            jr.set_column(jcol, &(psi_f.transpose() * jv));
        }
    }
    jr
}

/// Forward model plus sensors, the unit the Laplace machinery consumes.
pub trait ObservableMap: Sync {
    type State;
    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn solve(&self, m: &DVector<f64>) -> Result<Self::State>;
    fn observe(&self, state: &Self::State) -> DVector<f64>;
    fn jvp(&self, state: &Self::State, v: &DVector<f64>) -> DVector<f64>;
    fn vjp(&self, state: &Self::State, w: &DVector<f64>) -> DVector<f64>;
}

pub struct PdeMap<'a> {
    pub model: &'a ForwardModel,
    pub sensors: &'a SensorGrid,
}

impl ObservableMap for PdeMap<'_> {
    type State = StateSolution;

    fn param_dim(&self) -> usize {
        self.model.param_dim()
    }

    fn obs_dim(&self) -> usize {
        self.sensors.count()
    }

    fn solve(&self, m: &DVector<f64>) -> Result<StateSolution> {
        solve_state(self.model, m)
    }

    fn observe(&self, state: &StateSolution) -> DVector<f64> {
        observe(state, self.sensors)
    }

    fn jvp(&self, state: &StateSolution, v: &DVector<f64>) -> DVector<f64> {
        jacobian_vec(self.model, state, self.sensors, v)
    }

    fn vjp(&self, state: &StateSolution, w: &DVector<f64>) -> DVector<f64> {
        jacobian_t_vec(self.model, state, self.sensors, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rel_err_vec, standard_normal_vector};
    use crate::prior::build_prior;

    fn smooth_param(prior: &crate::prior::PriorModel, seed: u64, k: u64) -> DVector<f64> {
        prior.sample(seed, k)
    }

    #[test]
    fn constant_coefficient_gives_linear_profile() {
        for n in [4usize, 16] {
            let model = ForwardModel::linear_diffusion(n).unwrap();
            for c in [0.0, -1.3, 2.0] {
                let m = DVector::from_element(model.param_dim(), c);
                let state = solve_state(&model, &m).unwrap();
                for (i, coord) in model.mesh.coords().iter().enumerate() {
                    assert!(
                        (state.u[i] - coord[1]).abs() < 1e-10,
                        "node {i}: u = {}, y = {}",
                        state.u[i],
                        coord[1]
                    );
                }
            }
        }
    }

    #[test]
    fn observe_linear_profile() {
        let model = ForwardModel::linear_diffusion(8).unwrap();
        let mesh = &model.mesh;
        let sensors = SensorGrid::new(mesh, vec![[0.5, 0.25]]).unwrap();
        let m = DVector::zeros(model.param_dim());
        let state = solve_state(&model, &m).unwrap();
        let f = observe(&state, &sensors);
        assert!((f[0] - 0.25).abs() < 1e-10);

        // a grid of 50 sensors reads off its own y-coordinates
        let grid = SensorGrid::regular_layout(mesh, 50, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let fg = observe(&state, &grid);
        for (i, loc) in grid.locations.iter().enumerate() {
            assert!((fg[i] - loc[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn sensor_at_node_reads_nodal_value() {
        let model = ForwardModel::linear_diffusion(8).unwrap();
        let prior = build_prior(8, 0.1, 0.5, None).unwrap();
        let m = smooth_param(&prior, 5, 0);
        let state = solve_state(&model, &m).unwrap();
        let sensors = SensorGrid::new(&model.mesh, vec![[0.25, 0.5]]).unwrap();
        let f = observe(&state, &sensors);
        let node = model.mesh.node_index(2, 4);
        assert_eq!(f[0], state.u[node]);
    }

    #[test]
    fn restrict_semantics() {
        let f = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let all = Design::new(vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(restrict(&f, &all), f);
        let none = Design::empty();
        assert_eq!(restrict(&f, &none).len(), 0);
        let pick = Design::new(vec![2, 0], 4).unwrap();
        assert_eq!(restrict(&f, &pick), DVector::from_vec(vec![3.0, 1.0]));
        assert!(Design::new(vec![4], 4).is_err());
        assert!(Design::new(vec![1, 1], 4).is_err());
    }

    #[test]
    fn reaction_zero_source_gives_zero_state() {
        let mut model = ForwardModel::semilinear_reaction(8, 0.01).unwrap();
        model.source = DVector::zeros(model.param_dim());
        model.load = DVector::zeros(model.param_dim());
        let m = DVector::zeros(model.param_dim());
        let state = solve_state(&model, &m).unwrap();
        assert!(state.u.norm() < 1e-14);
    }

    #[test]
    fn reaction_residual_below_tolerance() {
        let model = ForwardModel::semilinear_reaction(16, 0.01).unwrap();
        let m = DVector::zeros(model.param_dim());
        let state = solve_state(&model, &m).unwrap();
        // recompute the residual independently of the solver loop
        let lap = model.assemble_scaled_laplacian();
        let r = model.reaction_residual(&lap, &m, &state.u);
        assert!(r.norm() < 1e-10, "residual {}", r.norm());
        // boundary pinned
        for i in model.mesh.boundary_nodes() {
            assert_eq!(state.u[i], 0.0);
        }
    }

    #[test]
    fn newton_residuals_decrease_quadratically() {
        let model = ForwardModel::semilinear_reaction(12, 0.01).unwrap();
        let prior = build_prior(12, 0.1, 0.5, None).unwrap();
        let m = smooth_param(&prior, 17, 3);
        let state = solve_state(&model, &m).unwrap();
        let res = &state.newton_residuals;
        assert!(res.len() >= 3, "too few Newton iterations to check");
        let tail = &res[res.len().saturating_sub(3)..];
        for w in tail.windows(2) {
            if w[1] > 1e-14 {
                let ratio = w[1].ln().abs() / w[0].ln().abs().max(1e-300);
                assert!(ratio >= 1.7, "slow contraction: {} -> {}", w[0], w[1]);
            }
        }
    }

    fn fd_check(model: &ForwardModel, sensors: &SensorGrid, m: &DVector<f64>, seed: u64) {
        // converge the perturbed states well below the FD step so the
        // quotient sees only truncation error
        let mut model = model.clone();
        model.newton_tol = 1e-13;
        let model = &model;
        let d = model.param_dim();
        let state = solve_state(model, m).unwrap();
        let j = jacobian_full(model, &state, sensors);
        assert_eq!(j.nrows(), sensors.count());
        assert_eq!(j.ncols(), d);
        let h = 1e-5;
        for k in 0..5u64 {
            let v = standard_normal_vector(d, seed, k);
            let fp = observe(&solve_state(model, &(m + &v * h)).unwrap(), sensors);
            let fm = observe(&solve_state(model, &(m - &v * h)).unwrap(), sensors);
            let fd = (fp - fm) / (2.0 * h);
            let jv = &j * &v;
            assert!(
                rel_err_vec(&jv, &fd) < 1e-5,
                "finite-difference mismatch {}",
                rel_err_vec(&jv, &fd)
            );
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_diffusion() {
        let model = ForwardModel::linear_diffusion(8).unwrap();
        let prior = build_prior(8, 0.1, 0.5, None).unwrap();
        let sensors =
            SensorGrid::regular_layout(&model.mesh, 9, (0.0, 1.0), (0.0, 1.0)).unwrap();
        fd_check(&model, &sensors, &smooth_param(&prior, 31, 0), 77);
    }

    #[test]
    fn jacobian_matches_finite_differences_reaction() {
        let model = ForwardModel::semilinear_reaction(8, 0.01).unwrap();
        let prior = build_prior(8, 0.1, 0.5, None).unwrap();
        let sensors =
            SensorGrid::regular_layout(&model.mesh, 9, (0.0, 1.0), (0.0, 1.0)).unwrap();
        fd_check(&model, &sensors, &smooth_param(&prior, 32, 1), 78);
    }

    #[test]
    fn constant_direction_is_gauge_invariant() {
        // shifting log-permeability by a constant leaves u = y unchanged
        let model = ForwardModel::linear_diffusion(8).unwrap();
        let sensors =
            SensorGrid::regular_layout(&model.mesh, 12, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let m = DVector::zeros(model.param_dim());
        let state = solve_state(&model, &m).unwrap();
        let v = DVector::from_element(model.param_dim(), 3.0);
        let jv = jacobian_vec(&model, &state, &sensors, &v);
        assert!(jv.norm() < 1e-9, "Jv = {}", jv.norm());
    }

    #[test]
    fn adjoint_consistency() {
        for model in [
            ForwardModel::linear_diffusion(8).unwrap(),
            ForwardModel::semilinear_reaction(8, 0.01).unwrap(),
        ] {
            let prior = build_prior(8, 0.1, 0.5, None).unwrap();
            let sensors =
                SensorGrid::regular_layout(&model.mesh, 7, (0.0, 1.0), (0.0, 1.0)).unwrap();
            let m = smooth_param(&prior, 41, 2);
            let state = solve_state(&model, &m).unwrap();
            for k in 0..5u64 {
                let a = standard_normal_vector(sensors.count(), 43, k);
                let b = standard_normal_vector(model.param_dim(), 44, k);
                let lhs = a.dot(&jacobian_vec(&model, &state, &sensors, &b));
                let rhs = jacobian_t_vec(&model, &state, &sensors, &a).dot(&b);
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-10),
                    "adjoint gap: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn factorization_reuse_changes_nothing() {
        let model = ForwardModel::linear_diffusion(8).unwrap();
        let prior = build_prior(8, 0.1, 0.5, None).unwrap();
        let sensors =
            SensorGrid::regular_layout(&model.mesh, 5, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let m = smooth_param(&prior, 51, 0);
        let state = solve_state(&model, &m).unwrap();
        let j1 = jacobian_full(&model, &state, &sensors);
        // a fresh state (fresh factorization) must agree to roundoff
        let state2 = solve_state(&model, &m).unwrap();
        let j2 = jacobian_full(&model, &state2, &sensors);
        assert!((&j1 - &j2).amax() < 1e-13);
    }

    #[test]
    fn reduced_jacobian_matches_projection() {
        for model in [
            ForwardModel::linear_diffusion(8).unwrap(),
            ForwardModel::semilinear_reaction(8, 0.01).unwrap(),
        ] {
            let prior = build_prior(8, 0.1, 0.5, None).unwrap();
            let sensors =
                SensorGrid::regular_layout(&model.mesh, 6, (0.0, 1.0), (0.0, 1.0)).unwrap();
            let m = smooth_param(&prior, 61, 1);
            let state = solve_state(&model, &m).unwrap();
            let j = jacobian_full(&model, &state, &sensors);
            let d = model.param_dim();

            // canonical-basis blocks pick out a submatrix
            let mut psi_m = DMatrix::zeros(d, 3);
            for (c, node) in [0usize, 5, 11].iter().enumerate() {
                psi_m[(*node, c)] = 1.0;
            }
            let mut psi_f = DMatrix::zeros(sensors.count(), 2);
            psi_f[(1, 0)] = 1.0;
            psi_f[(4, 1)] = 1.0;
            let jr = reduced_jacobian(&model, &state, &sensors, &psi_m, &psi_f);
            for (r, si) in [1usize, 4].iter().enumerate() {
                for (c, node) in [0usize, 5, 11].iter().enumerate() {
                    assert!((jr[(r, c)] - j[(*si, *node)]).abs() < 1e-12);
                }
            }

            // random orthonormal bases against the full-Jacobian oracle,
            // both adjoint (r_f <= r_m) and tangent (r_f > r_m) sweeps
            for (rm, rf) in [(4usize, 3usize), (2, 5)] {
                let gm = standard_normal_vector(d * rm, 71, rm as u64);
                let qm = nalgebra::QR::new(DMatrix::from_fn(d, rm, |i, jx| gm[jx * d + i])).q();
                let gf = standard_normal_vector(sensors.count() * rf, 72, rf as u64);
                let qf = nalgebra::QR::new(DMatrix::from_fn(sensors.count(), rf, |i, jx| {
                    gf[jx * sensors.count() + i]
                }))
                .q();
                let jr = reduced_jacobian(&model, &state, &sensors, &qm, &qf);
                let oracle = qf.transpose() * &j * &qm;
                assert!(
                    crate::linalg::rel_err_mat(&jr, &oracle) < 1e-10,
                    "reduced-jacobian mismatch"
                );
            }

            // empty output basis
            let jr = reduced_jacobian(
                &model,
                &state,
                &sensors,
                &DMatrix::zeros(d, 2),
                &DMatrix::zeros(sensors.count(), 0),
            );
            assert_eq!(jr.nrows(), 0);
            assert_eq!(jr.ncols(), 2);
        }
    }

    #[test]
    fn sensors_outside_domain_rejected() {
        let mesh = Mesh2D::new(4).unwrap();
        assert!(SensorGrid::new(&mesh, vec![[0.0, 0.5]]).is_err());
        assert!(SensorGrid::new(&mesh, vec![[0.5, 1.0]]).is_err());
    }
}
