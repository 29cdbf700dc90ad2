//! Dense complex linear algebra for small matrices (beamformer stacks stay
//! below ~64×64, channel counts below 8). Everything is hand-rolled and
//! deterministic: Cholesky for Hermitian solves, cyclic Jacobi for the
//! eigendecomposition, LU with partial pivoting for general systems.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative diagonal loading applied before factorization in
/// [`solve_hermitian`]: `1e-6 * tr(A)/D`. Mask-weighted covariance matrices
/// are routinely rank-deficient when masks saturate.
pub const DIAG_LOADING_EPS: f64 = 1e-6;

/// A square matrix with Hermitian symmetry enforced on construction.
#[derive(Debug, Clone)]
pub struct HermitianMatrix {
    entries: Array2<Complex64>,
}

impl HermitianMatrix {
    /// Symmetrize `A <- (A + A^H)/2` and wrap.
    pub fn new(a: Array2<Complex64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(Error::Shape(format!(
                "Hermitian matrix must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !a.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::Value("matrix contains non-finite entries".into()));
        }
        let d = a.nrows();
        let mut out = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] = (a[[i, j]] + a[[j, i]].conj()) * 0.5;
            }
        }
        Ok(HermitianMatrix { entries: out })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<Complex64> {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.entries[[i, i]].re).sum()
    }
}

/// Lower-triangular Cholesky factor, or `None` if a pivot is not positive.
fn cholesky(a: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let d = a.nrows();
    let mut l: Array2<Complex64> = Array2::zeros((d, d));
    for j in 0..d {
        let mut diag = a[[j, j]].re;
        for k in 0..j {
            diag -= l[[j, k]].norm_sqr();
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = Complex64::new(ljj, 0.0);
        for i in j + 1..d {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

/// Solve `L L^H X = B` given the Cholesky factor.
fn cholesky_solve(l: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let d = l.nrows();
    let r = b.ncols();
    let mut x = b.clone();
    // forward: L Y = B
    for col in 0..r {
        for i in 0..d {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        // backward: L^H X = Y
        for i in (0..d).rev() {
            let mut s = x[[i, col]];
            for k in i + 1..d {
                s -= l[[k, i]].conj() * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

fn frob(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Solve `A X = B` for Hermitian positive-definite `A`.
///
/// The factorization runs on `A + eps*tr(A)/D * I`; iterative refinement
/// against the original `A` then restores the residual to rounding level
/// whenever `A` itself is well-conditioned, so the loading only matters for
/// genuinely degenerate inputs.
pub fn solve_hermitian(a: &HermitianMatrix, b: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let d = a.dim();
    if b.nrows() != d {
        return Err(Error::Shape(format!(
            "rhs has {} rows, matrix is {d}x{d}",
            b.nrows()
        )));
    }
    if !b.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        return Err(Error::Value("rhs contains non-finite entries".into()));
    }
    let load = DIAG_LOADING_EPS * a.trace() / d as f64;
    let mut loaded = a.entries.clone();
    for i in 0..d {
        loaded[[i, i]] += Complex64::new(load, 0.0);
    }
    let l = cholesky(&loaded)
        .ok_or_else(|| Error::Singular(format!("Cholesky pivot failed for {d}x{d} matrix")))?;

    let mut x = cholesky_solve(&l, b);
    let b_norm = frob(b).max(f64::MIN_POSITIVE);
    let mut best_res = f64::INFINITY;
    for _ in 0..3 {
        let residual = b - &a.entries.dot(&x);
        let res_norm = frob(&residual) / b_norm;
        if res_norm <= 1e-13 || res_norm >= best_res {
            break;
        }
        best_res = res_norm;
        x = &x + &cholesky_solve(&l, &residual);
    }
    Ok(x)
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
/// Eigenvalues come back sorted descending; eigenvectors are the matching
/// columns and orthonormal to rounding.
pub fn eig_hermitian(a: &HermitianMatrix) -> Result<(Vec<f64>, Array2<Complex64>)> {
    let d = a.dim();
    let mut w = a.entries.clone();
    let mut v: Array2<Complex64> = Array2::eye(d);
    let scale = frob(&w).max(f64::MIN_POSITIVE);
    let max_sweeps = 100;

    for sweep in 0..=max_sweeps {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += w[[p, q]].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        if sweep == max_sweeps {
            return Err(Error::Convergence(max_sweeps));
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = w[[p, q]];
                let absb = apq.norm();
                if absb <= 1e-300 {
                    continue;
                }
                let phase = apq / absb; // e^{i phi}
                let app = w[[p, p]].re;
                let aqq = w[[q, q]].re;
                let tau = (aqq - app) / (2.0 * absb);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // J[p,p]=c, J[p,q]=s, J[q,p]=-s*conj(phase), J[q,q]=c*conj(phase)
                let jqp = -s * phase.conj();
                let jqq = c * phase.conj();
                // columns: B = W J
                for i in 0..d {
                    let wip = w[[i, p]];
                    let wiq = w[[i, q]];
                    w[[i, p]] = wip * c + wiq * jqp;
                    w[[i, q]] = wip * s + wiq * jqq;
                }
                // rows: W = J^H B
                for j in 0..d {
                    let wpj = w[[p, j]];
                    let wqj = w[[q, j]];
                    w[[p, j]] = wpj * c + wqj * jqp.conj();
                    w[[q, j]] = wpj * s + wqj * jqq.conj();
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = vip * c + viq * jqp;
                    v[[i, q]] = vip * s + viq * jqq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    let vals: Vec<f64> = (0..d).map(|i| w[[i, i]].re).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut sorted_vecs = Array2::zeros((d, d));
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..d {
            sorted_vecs[[i, new_col]] = v[[i, old_col]];
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// `log det A` for Hermitian positive-definite `A`, via the Cholesky
/// diagonal. No loading here: callers compare this against eigenvalue
/// products, so the factorization must see `A` itself.
pub fn logdet_hermitian(a: &HermitianMatrix) -> Result<f64> {
    let l = cholesky(&a.entries)
        .ok_or_else(|| Error::Singular("matrix not positive definite".into()))?;
    Ok(2.0 * (0..a.dim()).map(|i| l[[i, i]].re.ln()).sum::<f64>())
}

/// LU factorization with partial pivoting, kept for the general (non-
/// Hermitian) systems in the separation model: diagonalizer rows and
/// inverses, and `log|det Q|` for the likelihood.
pub struct Lu {
    lu: Array2<Complex64>,
    pivots: Vec<usize>,
    swaps: usize,
}

impl Lu {
    pub fn factor(a: &Array2<Complex64>) -> Result<Lu> {
        let d = a.nrows();
        if d != a.ncols() {
            return Err(Error::Shape("LU requires a square matrix".into()));
        }
        let mut lu = a.clone();
        let mut pivots = Vec::with_capacity(d);
        let mut swaps = 0;
        for col in 0..d {
            let mut best = col;
            let mut best_val = lu[[col, col]].norm();
            for row in col + 1..d {
                let v = lu[[row, col]].norm();
                if v > best_val {
                    best = row;
                    best_val = v;
                }
            }
            if best_val < 1e-300 {
                return Err(Error::Singular(format!("LU pivot ~0 at column {col}")));
            }
            if best != col {
                for j in 0..d {
                    let tmp = lu[[col, j]];
                    lu[[col, j]] = lu[[best, j]];
                    lu[[best, j]] = tmp;
                }
                swaps += 1;
            }
            pivots.push(best);
            let pivot = lu[[col, col]];
            for row in col + 1..d {
                let factor = lu[[row, col]] / pivot;
                lu[[row, col]] = factor;
                for j in col + 1..d {
                    let sub = factor * lu[[col, j]];
                    lu[[row, j]] -= sub;
                }
            }
        }
        Ok(Lu { lu, pivots, swaps })
    }

    pub fn solve_vec(&self, b: &[Complex64]) -> Vec<Complex64> {
        let d = self.lu.nrows();
        let mut x = b.to_vec();
        // the stored multipliers reflect every row interchange, so the
        // permutation must be applied in full before substitution
        for col in 0..d {
            x.swap(col, self.pivots[col]);
        }
        for col in 0..d {
            for row in col + 1..d {
                let sub = self.lu[[row, col]] * x[col];
                x[row] -= sub;
            }
        }
        for row in (0..d).rev() {
            for col in row + 1..d {
                let sub = self.lu[[row, col]] * x[col];
                x[row] -= sub;
            }
            x[row] /= self.lu[[row, row]];
        }
        x
    }

    pub fn inverse(&self) -> Array2<Complex64> {
        let d = self.lu.nrows();
        let mut inv = Array2::zeros((d, d));
        let mut e = vec![Complex64::new(0.0, 0.0); d];
        for col in 0..d {
            e.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            e[col] = Complex64::new(1.0, 0.0);
            let x = self.solve_vec(&e);
            for row in 0..d {
                inv[[row, col]] = x[row];
            }
        }
        inv
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.lu.nrows())
            .map(|i| self.lu[[i, i]].norm().ln())
            .sum()
    }

    pub fn det(&self) -> Complex64 {
        let sign = if self.swaps % 2 == 0 { 1.0 } else { -1.0 };
        (0..self.lu.nrows())
            .map(|i| self.lu[[i, i]])
            .fold(Complex64::new(sign, 0.0), |acc, v| acc * v)
    }
}
