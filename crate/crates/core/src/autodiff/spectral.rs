//! Power-iteration estimate of a weight matrix's largest singular value.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `uᵀ W v` for a row-major `W` with `cols` columns.
pub fn rayleigh_sigma(w: &[f64], cols: usize, u: &[f64], v: &[f64]) -> f64 {
    w.chunks_exact(cols)
        .zip(u)
        .map(|(row, ui)| ui * kernels::dot(row, v))
        .sum()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Persistent left/right singular-vector estimates for one weight.
///
/// The weight is viewed as a `rows × cols` matrix where `cols` is its last
/// dimension. For a linear layer stored `in × out` that is the weight matrix
/// itself; for a conv kernel stored `KH × KW × C_in × C_out` it is the
/// transpose of the usual `(C_out, C_in·KH·KW)` view, which has the same
/// singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralNormState {
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v }
    }

    pub fn for_weight(w: &Tensor, rng: &mut impl Rng) -> Self {
        Self::new(w.rows(), w.cols(), rng)
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        if self.u.len() != w.rows() || self.v.len() != w.cols() {
            return Err(Error::Shape {
                op: "power_iteration",
                lhs: vec![w.rows(), w.cols()],
                rhs: vec![self.u.len(), self.v.len()],
            });
        }
        Ok(())
    }

    /// Runs `iters` rounds of `v ← Wᵀu/‖·‖, u ← Wv/‖·‖`. Returns the new σ estimate.
    ///
    /// An all-zero weight leaves the vectors untouched.
    pub fn power_iterate(&mut self, w: &Tensor, iters: usize) -> Result<f64> {
        self.check(w)?;
        let cols = w.cols();
        let mut v_new = vec![0.0; cols];
        let mut u_new = vec![0.0; w.rows()];
        for _ in 0..iters {
            kernels::vec_mat(&self.u, w.data(), cols, &mut v_new);
            if normalize(&mut v_new) == 0.0 {
                return Ok(0.0);
            }
            for (ui, row) in u_new.iter_mut().zip(w.data().chunks_exact(cols)) {
                *ui = kernels::dot(row, &v_new);
            }
            if normalize(&mut u_new) == 0.0 {
                return Ok(0.0);
            }
            self.v.copy_from_slice(&v_new);
            self.u.copy_from_slice(&u_new);
        }
        Ok(self.sigma(w))
    }

    /// Lanczos on `WᵀW` for `iters` steps from the current `v`, with full
    /// reorthogonalization, then `v` ← top Ritz vector and `u` ← `Wv/‖Wv‖`.
    ///
    /// Each step costs one product with `W` and one with `Wᵀ`, like a power
    /// iteration, but the estimate converges far faster when the leading
    /// singular values are clustered, as they are for random weights.
    pub fn warm_start(&mut self, w: &Tensor, iters: usize) -> Result<f64> {
        self.check(w)?;
        let cols = w.cols();
        let gram = |x: &[f64]| {
            let wx: Vec<f64> = w.data().chunks_exact(cols).map(|row| kernels::dot(row, x)).collect();
            let mut out = vec![0.0; cols];
            kernels::vec_mat(&wx, w.data(), cols, &mut out);
            out
        };
        let mut q = self.v.clone();
        if normalize(&mut q) == 0.0 {
            return Ok(self.sigma(w));
        }
        let (mut basis, mut alpha, mut beta): (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) = Default::default();
        for _ in 0..iters.min(cols) {
            let mut z = gram(&q);
            alpha.push(kernels::dot(&q, &z));
            basis.push(q);
            for _ in 0..2 {
                for b in &basis {
                    let c = kernels::dot(b, &z);
                    z.iter_mut().zip(b).for_each(|(zi, bi)| *zi -= c * bi);
                }
            }
            let norm = normalize(&mut z);
            if norm <= 1e-12 * alpha.iter().fold(0.0f64, |m, a| m.max(a.abs())) || norm == 0.0 {
                break;
            }
            beta.push(norm);
            q = z;
        }
        let k = alpha.len();
        let t = DMatrix::from_fn(k, k, |i, j| match i.abs_diff(j) {
            0 => alpha[i],
            1 => beta[i.min(j)],
            _ => 0.0,
        });
        let eig = t.symmetric_eigen();
        let y = eig.eigenvectors.column(eig.eigenvalues.imax());
        let mut v = vec![0.0; cols];
        for (b, c) in basis.iter().zip(y.iter()) {
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi += c * bi);
        }
        normalize(&mut v);
        let mut u: Vec<f64> = w.data().chunks_exact(cols).map(|row| kernels::dot(row, &v)).collect();
        if normalize(&mut u) == 0.0 {
            return Ok(0.0);
        }
        self.u = u;
        self.v = v;
        Ok(self.sigma(w))
    }

    pub fn sigma(&self, w: &Tensor) -> f64 {
        rayleigh_sigma(w.data(), w.cols(), &self.u, &self.v)
    }

    /// `w / σ̂` outside any tape, or `w` unchanged when σ̂ is zero.
    pub fn normalized(&self, w: &Tensor) -> Result<Tensor> {
        self.check(w)?;
        let s = self.sigma(w);
        if s.abs() <= 1e-12 {
            log::warn!("spectral_normalize: zero weight matrix, skipping normalization");
            return Ok(w.clone());
        }
        let data = w.data().iter().map(|x| x / s).collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}
