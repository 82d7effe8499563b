//! Reduced-space neural surrogate: encoder, residual network, decoder,
//! with exact Jacobian evaluation by forward-mode tangent propagation.
//!
//! The network is tanh(input adapter) -> n_blocks residual blocks with
//! logistic-sigmoid inner activation -> tanh -> affine output adapter.

pub mod train;

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};
use crate::linalg::stream_rng;
use crate::prior::PriorModel;
use crate::reduce::{decode_output, encode_input, Metric, ReducedBasis};

pub use train::{train, LossRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetArchitecture {
    pub r_in: usize,
    pub r_out: usize,
    pub width: usize,
    pub n_blocks: usize,
}

impl NetArchitecture {
    pub fn new(r_in: usize, r_out: usize) -> Self {
        NetArchitecture { r_in, r_out, width: 100, n_blocks: 3 }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_blocks(mut self, n_blocks: usize) -> Self {
        self.n_blocks = n_blocks;
        self
    }

    pub fn parameter_count(&self) -> usize {
        let w = self.width;
        w * self.r_in + w                       // input adapter
            + self.n_blocks * (2 * w * w + w)   // blocks
            + self.r_out * w + self.r_out       // output adapter
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// All trainable tensors of the network.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub arch: NetArchitecture,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub blocks: Vec<ResBlock>,
    pub z_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

impl NetParams {
    pub fn zeros(arch: NetArchitecture) -> Self {
        let w = arch.width;
        NetParams {
            arch,
            a_in: DMatrix::zeros(w, arch.r_in),
            b_in: DVector::zeros(w),
            blocks: (0..arch.n_blocks)
                .map(|_| ResBlock {
                    w: DMatrix::zeros(w, w),
                    z: DMatrix::zeros(w, w),
                    b: DVector::zeros(w),
                })
                .collect(),
            z_out: DMatrix::zeros(arch.r_out, w),
            b_out: DVector::zeros(arch.r_out),
        }
    }

    /// Xavier-uniform weights, zero biases, seeded.
    pub fn xavier(arch: NetArchitecture, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0x1217);
        let mut fill = |m: &mut DMatrix<f64>| {
            let bound = (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
            for v in m.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        let mut p = NetParams::zeros(arch);
        fill(&mut p.a_in);
        for blk in &mut p.blocks {
            fill(&mut blk.w);
            fill(&mut blk.z);
        }
        fill(&mut p.z_out);
        p
    }

    /// Visits every parameter in declaration order.
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        self.a_in.iter().for_each(|&v| f(v));
        self.b_in.iter().for_each(|&v| f(v));
        for blk in &self.blocks {
            blk.w.iter().for_each(|&v| f(v));
            blk.z.iter().for_each(|&v| f(v));
            blk.b.iter().for_each(|&v| f(v));
        }
        self.z_out.iter().for_each(|&v| f(v));
        self.b_out.iter().for_each(|&v| f(v));
    }

    /// Zips mutably with another parameter set of the same architecture.
    pub fn zip_apply(&mut self, other: &NetParams, mut f: impl FnMut(&mut f64, f64)) {
        self.a_in.iter_mut().zip(other.a_in.iter()).for_each(|(a, &b)| f(a, b));
        self.b_in.iter_mut().zip(other.b_in.iter()).for_each(|(a, &b)| f(a, b));
        for (blk, oblk) in self.blocks.iter_mut().zip(&other.blocks) {
            blk.w.iter_mut().zip(oblk.w.iter()).for_each(|(a, &b)| f(a, b));
            blk.z.iter_mut().zip(oblk.z.iter()).for_each(|(a, &b)| f(a, b));
            blk.b.iter_mut().zip(oblk.b.iter()).for_each(|(a, &b)| f(a, b));
        }
        self.z_out.iter_mut().zip(other.z_out.iter()).for_each(|(a, &b)| f(a, b));
        self.b_out.iter_mut().zip(other.b_out.iter()).for_each(|(a, &b)| f(a, b));
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.parameter_count());
        self.for_each(|v| out.push(v));
        out
    }

    pub fn from_flat(arch: NetArchitecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.parameter_count() {
            return Err(OedError::DimensionMismatch {
                expected: arch.parameter_count(),
                got: flat.len(),
                context: "flattened network parameters",
            });
        }
        let mut p = NetParams::zeros(arch);
        let mut it = flat.iter().copied();
        let mut take = |v: &mut f64| *v = it.next().unwrap();
        p.a_in.iter_mut().for_each(&mut take);
        p.b_in.iter_mut().for_each(&mut take);
        for blk in &mut p.blocks {
            blk.w.iter_mut().for_each(&mut take);
            blk.z.iter_mut().for_each(&mut take);
            blk.b.iter_mut().for_each(&mut take);
        }
        p.z_out.iter_mut().for_each(&mut take);
        p.b_out.iter_mut().for_each(&mut take);
        Ok(p)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise dot products of two equally shaped matrices.
fn row_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.nrows());
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            out[i] += a[(i, j)] * b[(i, j)];
        }
    }
    out
}

/// Scales row i of `m` by `v[i]`.
fn scale_rows(m: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, j)] *= v[i];
        }
    }
    out
}

/// Forward intermediates cached for Jacobian propagation and backprop.
pub(crate) struct ForwardTrace {
    x: DVector<f64>,
    z: Vec<DVector<f64>>, // z_0 .. z_L
    s: Vec<DVector<f64>>, // sigmoid activations per block
    t: DVector<f64>,      // tanh(z_L)
    pub output: DVector<f64>,
    // tangent stacks, populated only when the Jacobian is requested
    g: Vec<DMatrix<f64>>, // G_0 .. G_L
    pub jacobian: Option<DMatrix<f64>>,
}

pub(crate) fn forward_trace(net: &NetParams, x: &DVector<f64>, with_jacobian: bool) -> ForwardTrace {
    let nb = net.arch.n_blocks;
    let a0 = &net.a_in * x + &net.b_in;
    let z0 = a0.map(f64::tanh);
    let mut g = Vec::new();
    if with_jacobian {
        let u0 = z0.map(|v| 1.0 - v * v);
        g.push(scale_rows(&net.a_in, &u0));
    }
    let mut z = Vec::with_capacity(nb + 1);
    z.push(z0);
    let mut s = Vec::with_capacity(nb);
    for blk in &net.blocks {
        let zl = z.last().unwrap();
        let al = &blk.z * zl + &blk.b;
        let sl = al.map(sigmoid);
        z.push(zl + &blk.w * &sl);
        if with_jacobian {
            let gl = g.last().unwrap();
            let d = sl.map(|v| v * (1.0 - v));
            let q = &blk.z * gl;
            g.push(gl + &blk.w * scale_rows(&q, &d));
        }
        s.push(sl);
    }
    let t = z.last().unwrap().map(f64::tanh);
    let output = &net.z_out * &t + &net.b_out;
    let jacobian = if with_jacobian {
        let u = t.map(|v| 1.0 - v * v);
        Some(&net.z_out * scale_rows(g.last().unwrap(), &u))
    } else {
        None
    };
    ForwardTrace { x: x.clone(), z, s, t, output, g, jacobian }
}

/// Network output for a single reduced input.
pub fn net_forward(net: &NetParams, beta: &DVector<f64>) -> DVector<f64> {
    forward_trace(net, beta, false).output
}

/// Batched forward over input columns.
pub fn net_forward_batch(net: &NetParams, betas: &DMatrix<f64>) -> DMatrix<f64> {
    let b = betas.ncols();
    let mut z = &net.a_in * betas;
    for j in 0..b {
        for i in 0..z.nrows() {
            z[(i, j)] = (z[(i, j)] + net.b_in[i]).tanh();
        }
    }
    for blk in &net.blocks {
        let mut a = &blk.z * &z;
        for j in 0..b {
            for i in 0..a.nrows() {
                a[(i, j)] = sigmoid(a[(i, j)] + blk.b[i]);
            }
        }
        z += &blk.w * a;
    }
    let t = z.map(f64::tanh);
    let mut out = &net.z_out * t;
    for j in 0..b {
        for i in 0..out.nrows() {
            out[(i, j)] += net.b_out[i];
        }
    }
    out
}

/// Exact Jacobian d Phi / d beta by forward-mode propagation.
pub fn net_jacobian(net: &NetParams, beta: &DVector<f64>) -> DMatrix<f64> {
    forward_trace(net, beta, true).jacobian.unwrap()
}

/// Backpropagates output and Jacobian adjoints through the trace.
/// `out_bar` is dL/d(output); `jac_bar` (if any) is dL/d(Jacobian).
/// Returns the parameter gradient.
pub(crate) fn backprop(
    net: &NetParams,
    trace: &ForwardTrace,
    out_bar: &DVector<f64>,
    jac_bar: Option<&DMatrix<f64>>,
) -> NetParams {
    let nb = net.arch.n_blocks;
    let mut grad = NetParams::zeros(net.arch);
    let t = &trace.t;
    let u = t.map(|v| 1.0 - v * v);

    // output adapter
    grad.b_out = out_bar.clone();
    grad.z_out = out_bar * t.transpose();
    let mut z_bar = u.component_mul(&(net.z_out.transpose() * out_bar));
    let mut g_bar: Option<DMatrix<f64>> = None;
    if let Some(jb) = jac_bar {
        let g_last = trace.g.last().expect("jacobian trace required");
        // J = Z_out diag(u) G_L
        let jgt = jb * g_last.transpose(); // r_out x width
        for j in 0..jgt.ncols() {
            for i in 0..jgt.nrows() {
                grad.z_out[(i, j)] += jgt[(i, j)] * u[j];
            }
        }
        let p_out = net.z_out.transpose() * jb; // width x r_in
        let u_bar = row_dots(&p_out, g_last);
        for i in 0..z_bar.len() {
            z_bar[i] += -2.0 * t[i] * u[i] * u_bar[i];
        }
        g_bar = Some(scale_rows(&p_out, &u));
    }

    // residual blocks, reverse order
    for l in (0..nb).rev() {
        let blk = &net.blocks[l];
        let gblk = &mut grad.blocks[l];
        let zl = &trace.z[l];
        let sl = &trace.s[l];
        let d = sl.map(|v| v * (1.0 - v));

        let s_bar = blk.w.transpose() * &z_bar;
        let mut a_bar = d.component_mul(&s_bar);
        gblk.w = &z_bar * sl.transpose();

        if let Some(gb) = g_bar.take() {
            let gl = &trace.g[l];
            let q = &blk.z * gl;
            let p = blk.w.transpose() * &gb;
            // second-order term through D_l = diag(sigmoid'(a_l))
            let pq = row_dots(&p, &q);
            for i in 0..a_bar.len() {
                a_bar[i] += pq[i] * d[i] * (1.0 - 2.0 * sl[i]);
            }
            // W_l also feeds the tangent recursion
            let dq = scale_rows(&q, &d);
            gblk.w += &gb * dq.transpose();
            let dp = scale_rows(&p, &d);
            gblk.z = &a_bar * zl.transpose() + &dp * gl.transpose();
            g_bar = Some(gb + blk.z.transpose() * dp);
        } else {
            gblk.z = &a_bar * zl.transpose();
        }
        gblk.b = a_bar.clone();
        z_bar = &z_bar + blk.z.transpose() * &a_bar;
    }

    // input adapter
    let z0 = &trace.z[0];
    let u0 = z0.map(|v| 1.0 - v * v);
    let mut a_bar = u0.component_mul(&z_bar);
    if let Some(gb) = &g_bar {
        let ga = row_dots(gb, &net.a_in);
        for i in 0..a_bar.len() {
            a_bar[i] += -2.0 * z0[i] * u0[i] * ga[i];
        }
        grad.a_in = &a_bar * trace.x.transpose() + scale_rows(gb, &u0);
    } else {
        grad.a_in = &a_bar * trace.x.transpose();
    }
    grad.b_in = a_bar;
    grad
}

/// The reduced forward map the Laplace-reduced machinery consumes: either
/// a trained network or an exact linear stand-in.
pub trait ReducedForward: Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, beta: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, beta: &DVector<f64>) -> DMatrix<f64>;
}

impl ReducedForward for NetParams {
    fn dim_in(&self) -> usize {
        self.arch.r_in
    }

    fn dim_out(&self) -> usize {
        self.arch.r_out
    }

    fn eval(&self, beta: &DVector<f64>) -> DVector<f64> {
        net_forward(self, beta)
    }

    fn jacobian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        net_jacobian(self, beta)
    }
}

/// Training provenance kept with a trained surrogate.
#[derive(Debug, Clone)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_jac: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss_record: Vec<LossRecord>,
}

/// Encoder + network + decoder.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub input_basis: ReducedBasis,
    pub output_basis: ReducedBasis,
    pub net: NetParams,
    pub meta: TrainMeta,
}

impl Surrogate {
    pub fn new(
        input_basis: ReducedBasis,
        output_basis: ReducedBasis,
        net: NetParams,
        meta: TrainMeta,
    ) -> Result<Self> {
        if input_basis.metric != Metric::PriorInverse || output_basis.metric != Metric::Euclidean {
            return Err(OedError::InvalidParameter(
                "surrogate needs a prior-metric input basis and a Euclidean output basis".into(),
            ));
        }
        if input_basis.rank() != net.arch.r_in || output_basis.rank() != net.arch.r_out {
            return Err(OedError::DimensionMismatch {
                expected: net.arch.r_in,
                got: input_basis.rank(),
                context: "surrogate basis ranks vs architecture",
            });
        }
        Ok(Surrogate { input_basis, output_basis, net, meta })
    }

    /// F_NN(m) at all candidate observables.
    pub fn forward(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        let beta = encode_input(&self.input_basis, m)?;
        decode_output(&self.output_basis, &net_forward(&self.net, &beta))
    }

    /// Full-space Jacobian Psi_F dPhi dual^T, materialized on demand.
    pub fn jacobian_full(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        let beta = encode_input(&self.input_basis, m)?;
        let jr = net_jacobian(&self.net, &beta);
        Ok(&self.output_basis.psi * jr * self.input_basis.dual().transpose())
    }
}

/// Surrogates also act as an observable map for diagnostics; the "state"
/// is just the encoded input.
impl crate::forward::ObservableMap for Surrogate {
    type State = DVector<f64>;

    fn param_dim(&self) -> usize {
        self.input_basis.dim()
    }

    fn obs_dim(&self) -> usize {
        self.output_basis.dim()
    }

    fn solve(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        encode_input(&self.input_basis, m)
    }

    fn observe(&self, beta: &DVector<f64>) -> DVector<f64> {
        decode_output(&self.output_basis, &net_forward(&self.net, beta))
            .expect("output basis is Euclidean by construction")
    }

    fn jvp(&self, beta: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let jr = net_jacobian(&self.net, beta);
        &self.output_basis.psi * (jr * (self.input_basis.dual().transpose() * v))
    }

    fn vjp(&self, beta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let jr = net_jacobian(&self.net, beta);
        self.input_basis.dual() * (jr.transpose() * (self.output_basis.psi.transpose() * w))
    }
}

/// Encodes a surrogate's view of the whitened input Jacobian,
/// d F_NN / d eta = Psi_F dPhi Phi_m^T where Phi_m = Gamma^{-1/2} Psi_m.
pub fn whitened_surrogate_jacobian(
    surrogate: &Surrogate,
    prior: &PriorModel,
    beta: &DVector<f64>,
) -> DMatrix<f64> {
    let jr = net_jacobian(&surrogate.net, beta);
    let psi = &surrogate.input_basis.psi;
    let mut phi = DMatrix::zeros(psi.nrows(), psi.ncols());
    for j in 0..psi.ncols() {
        phi.set_column(j, &prior.inv_sqrt_cov_apply(&psi.column(j).into_owned()));
    }
    &surrogate.output_basis.psi * jr * phi.transpose()
}
