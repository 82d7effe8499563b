//! Banded symmetric matrices, banded Cholesky, and dense eigen helpers.
//!
//! Every linear operator on the structured grid (mass, stiffness, state
//! operators, Newton Jacobians) is symmetric with lower bandwidth `n + 2`
//! under row-major node numbering, so one banded kernel serves the whole
//! library. Factorizations are O(d * bw^2), solves O(d * bw).

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};

/// Symmetric banded matrix stored by diagonal: `diag(k)[i] = A[i + k, i]`
/// for `k = 0..=bw`. Only the lower band is kept.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    dim: usize,
    bw: usize,
    // bands[k] has length dim - k
    bands: Vec<Vec<f64>>,
}

impl BandMatrix {
    pub fn zeros(dim: usize, bw: usize) -> Self {
        let bands = (0..=bw).map(|k| vec![0.0; dim - k]).collect();
        BandMatrix { dim, bw, bands }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = if i >= j { (j, i) } else { (i, j) };
        let k = hi - lo;
        if k > self.bw {
            0.0
        } else {
            self.bands[k][lo]
        }
    }

    /// Adds `v` to the (i, j) entry (and implicitly its mirror).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (lo, hi) = if i >= j { (j, i) } else { (i, j) };
        let k = hi - lo;
        assert!(k <= self.bw, "entry ({i},{j}) outside band {}", self.bw);
        self.bands[k][lo] += v;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (lo, hi) = if i >= j { (j, i) } else { (i, j) };
        let k = hi - lo;
        assert!(k <= self.bw);
        self.bands[k][lo] = v;
    }

    /// y = A x for the full symmetric matrix.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim);
        let mut y = DVector::zeros(self.dim);
        for i in 0..self.dim {
            y[i] += self.bands[0][i] * x[i];
        }
        for k in 1..=self.bw {
            let band = &self.bands[k];
            for i in 0..self.dim - k {
                let a = band[i];
                if a != 0.0 {
                    y[i + k] += a * x[i];
                    y[i] += a * x[i + k];
                }
            }
        }
        y
    }

    /// Symmetric elimination of Dirichlet rows/columns.
    ///
    /// For each constrained node c with value g: moves the column into the
    /// right-hand side (`rhs[i] -= A[i,c] * g`), zeroes row and column, sets
    /// the diagonal to 1 and `rhs[c] = g`. Keeps the matrix SPD.
    pub fn apply_dirichlet(&mut self, rhs: &mut DVector<f64>, constraints: &[(usize, f64)]) {
        let mut constrained = vec![false; self.dim];
        for &(c, _) in constraints {
            constrained[c] = true;
        }
        for &(c, g) in constraints {
            for k in 1..=self.bw {
                // entries (c, c-k) below-left and (c+k, c) below
                if c >= k {
                    let j = c - k;
                    let a = self.bands[k][j];
                    if a != 0.0 && !constrained[j] {
                        rhs[j] -= a * g;
                    }
                    self.bands[k][j] = 0.0;
                }
                if c + k < self.dim {
                    let a = self.bands[k][c];
                    if a != 0.0 && !constrained[c + k] {
                        rhs[c + k] -= a * g;
                    }
                    self.bands[k][c] = 0.0;
                }
            }
            self.bands[0][c] = 1.0;
            rhs[c] = g;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for k in 0..=self.bw {
            for i in 0..self.dim - k {
                m[(i + k, i)] = self.bands[k][i];
                m[(i, i + k)] = self.bands[k][i];
            }
        }
        m
    }

    /// Banded Cholesky A = L L^T. Fails on non-SPD input.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let mut l = self.clone();
        let n = self.dim;
        let bw = self.bw;
        for j in 0..n {
            let kmin = j.saturating_sub(bw);
            let mut d = l.bands[0][j];
            for k in kmin..j {
                let v = l.bands[j - k][k];
                d -= v * v;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(OedError::Factorization("banded Cholesky: matrix not SPD"));
            }
            let dj = d.sqrt();
            l.bands[0][j] = dj;
            let imax = (j + bw).min(n - 1);
            for i in j + 1..=imax {
                let kmin_i = i.saturating_sub(bw).max(kmin);
                let mut s = l.bands[i - j][j];
                for k in kmin_i..j {
                    s -= l.bands[i - k][k] * l.bands[j - k][k];
                }
                l.bands[i - j][j] = s / dj;
            }
        }
        Ok(BandCholesky { l })
    }
}

/// Lower-triangular banded Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    pub fn dim(&self) -> usize {
        self.l.dim
    }

    /// Solves L y = b (forward substitution).
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.dim;
        let bw = self.l.bw;
        let mut y = b.clone();
        for i in 0..n {
            let kmin = i.saturating_sub(bw);
            let mut s = y[i];
            for k in kmin..i {
                s -= self.l.bands[i - k][k] * y[k];
            }
            y[i] = s / self.l.bands[0][i];
        }
        y
    }

    /// Solves L^T y = b (backward substitution).
    pub fn solve_lower_t(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.dim;
        let bw = self.l.bw;
        let mut y = b.clone();
        for i in (0..n).rev() {
            let imax = (i + bw).min(n - 1);
            let mut s = y[i];
            for j in i + 1..=imax {
                s -= self.l.bands[j - i][i] * y[j];
            }
            y[i] = s / self.l.bands[0][i];
        }
        y
    }

    /// Solves A x = b with A = L L^T.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_lower_t(&self.solve_lower(b))
    }

    /// y = L x.
    pub fn mul_lower(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.l.dim;
        let bw = self.l.bw;
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let kmin = i.saturating_sub(bw);
            let mut s = 0.0;
            for k in kmin..=i {
                s += self.l.bands[i - k][k] * x[k];
            }
            y[i] = s;
        }
        y
    }

    /// y = L^T x.
    pub fn mul_lower_t(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.l.dim;
        let bw = self.l.bw;
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let jmax = (i + bw).min(n - 1);
            let mut s = 0.0;
            for j in i..=jmax {
                s += self.l.bands[j - i][i] * x[j];
            }
            y[i] = s;
        }
        y
    }
}

/// Eigenpairs of a dense symmetric matrix, sorted by nonincreasing eigenvalue.
pub fn sym_eig_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Double-pass randomized eigendecomposition of an SPD operator given by
/// a matvec closure. Oversampling 10, one power iteration.
pub fn randomized_sym_eig<F>(dim: usize, rank: usize, apply: F, seed: u64) -> (Vec<f64>, DMatrix<f64>)
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    use rand::Rng;
    use rand::SeedableRng;
    let k = (rank + 10).min(dim);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut omega = DMatrix::zeros(dim, k);
    for j in 0..k {
        for i in 0..dim {
            omega[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let apply_mat = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(dim, m.ncols());
        for j in 0..m.ncols() {
            let col = DVector::from_column_slice(m.column(j).as_slice());
            out.set_column(j, &apply(&col));
        }
        out
    };
    // one power iteration: Q = orth(A (A Omega))
    let y = apply_mat(&apply_mat(&omega));
    let q = nalgebra::QR::new(y).q();
    // second pass: B = Q^T A Q
    let aq = apply_mat(&q);
    let b = q.transpose() * aq;
    let b = (&b + b.transpose()) * 0.5;
    let (vals, vecs) = sym_eig_sorted(&b);
    let lifted = q * vecs;
    let r = rank.min(k);
    (
        vals[..r].to_vec(),
        lifted.columns(0, r).into_owned(),
    )
}

/// Deterministic per-(seed, stream) RNG. Streams keep parallel draws
/// reproducible regardless of evaluation order.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha12Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills a vector with standard normal draws from the given stream.
pub fn standard_normal_vector(dim: usize, seed: u64, stream: u64) -> DVector<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, stream);
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Relative error ||a - b|| / max(||b||, floor).
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd_band(dim: usize, bw: usize, seed: u64) -> BandMatrix {
        let mut rng = stream_rng(seed, 0);
        let mut b = BandMatrix::zeros(dim, bw);
        for k in 1..=bw {
            for i in 0..dim - k {
                b.set(i + k, i, rng.random_range(-0.5..0.5));
            }
        }
        // diagonally dominant
        for i in 0..dim {
            let mut s = 0.0;
            for j in 0..dim {
                if j != i {
                    s += b.get(i, j).abs();
                }
            }
            b.set(i, i, s + 1.0);
        }
        b
    }

    #[test]
    fn banded_cholesky_matches_dense_solve() {
        let a = random_spd_band(40, 5, 7);
        let chol = a.cholesky().unwrap();
        let x_true = standard_normal_vector(40, 1, 0);
        let b = a.mul_vec(&x_true);
        let x = chol.solve(&b);
        assert!(rel_err_vec(&x, &x_true) < 1e-11);
    }

    #[test]
    fn lower_mul_and_solve_invert() {
        let a = random_spd_band(25, 4, 3);
        let chol = a.cholesky().unwrap();
        let x = standard_normal_vector(25, 2, 1);
        let y = chol.mul_lower(&x);
        assert!(rel_err_vec(&chol.solve_lower(&y), &x) < 1e-12);
        let z = chol.mul_lower_t(&x);
        assert!(rel_err_vec(&chol.solve_lower_t(&z), &x) < 1e-12);
        // L L^T reproduces A
        let recon = chol.mul_lower(&chol.mul_lower_t(&x));
        assert!(rel_err_vec(&recon, &a.mul_vec(&x)) < 1e-12);
    }

    #[test]
    fn non_spd_rejected() {
        let mut a = BandMatrix::zeros(4, 1);
        a.set(0, 0, -1.0);
        a.set(1, 1, 1.0);
        a.set(2, 2, 1.0);
        a.set(3, 3, 1.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn dirichlet_elimination_solves_constrained_system() {
        let a = random_spd_band(12, 3, 11);
        let dense = a.to_dense();
        let rhs_raw = standard_normal_vector(12, 5, 2);
        let constraints = [(0usize, 2.0), (11usize, -1.0)];

        let mut ab = a.clone();
        let mut rhs = rhs_raw.clone();
        ab.apply_dirichlet(&mut rhs, &constraints);
        let u = ab.cholesky().unwrap().solve(&rhs);

        assert!((u[0] - 2.0).abs() < 1e-12);
        assert!((u[11] + 1.0).abs() < 1e-12);
        // free rows of the original system hold
        let res = &dense * &u - &rhs_raw;
        for i in 1..11 {
            assert!(res[i].abs() < 1e-10, "row {i}: {}", res[i]);
        }
    }

    #[test]
    fn sym_eig_sorted_descending_and_consistent() {
        let m0 = DMatrix::from_fn(8, 8, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0);
        let m = (&m0 + m0.transpose()) * 0.5;
        let (vals, vecs) = sym_eig_sorted(&m);
        for w in vals.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for (i, &lam) in vals.iter().enumerate() {
            let v = vecs.column(i).into_owned();
            assert!((&m * &v - &v * lam).norm() < 1e-10);
        }
    }

    #[test]
    fn randomized_eig_matches_dense_on_low_rank() {
        let g = DMatrix::from_fn(30, 3, |i, j| ((i + 2 * j + 1) as f64 * 0.1).sin());
        let a = &g * g.transpose();
        let (dense_vals, _) = sym_eig_sorted(&a);
        let (vals, vecs) = randomized_sym_eig(30, 3, |v| &a * v, 42);
        for i in 0..3 {
            assert!(
                (vals[i] - dense_vals[i]).abs() <= 1e-9 * dense_vals[0].max(1.0),
                "eig {i}: {} vs {}",
                vals[i],
                dense_vals[i]
            );
            let v = vecs.column(i).into_owned();
            assert!((&a * &v - &v * vals[i]).norm() < 1e-8 * dense_vals[0]);
        }
    }

    #[test]
    fn stream_rng_is_reproducible_and_stream_separated() {
        let a = standard_normal_vector(16, 9, 4);
        let b = standard_normal_vector(16, 9, 4);
        let c = standard_normal_vector(16, 9, 5);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
