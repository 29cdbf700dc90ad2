//! FastMNMF blind source separation with jointly diagonalizable spatial
//! covariances.
//!
//! Source PSDs factor as NMF (`lambda_{nft} = sum_k u_{nkf} v_{nkt}`) and
//! covariances as `G_nf = Q_f^{-1} Diag(g_n) Q_f^{-H}` with a shared
//! per-frequency diagonalizer. Fitting alternates multiplicative updates
//! of U, V, G with iterative-projection rows of Q; every sweep is monotone
//! in the diagonalized likelihood.

use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::stft::ComplexSpectrogram;

const PARAM_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct FastMnmfConfig {
    pub n_sources: usize,
    pub n_bases: usize,
    pub n_iter: usize,
    pub seed: u64,
}

impl Default for FastMnmfConfig {
    fn default() -> Self {
        FastMnmfConfig {
            n_sources: 5,
            n_bases: 16,
            n_iter: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FastMnmfModel {
    /// N×K×F nonnegative bases.
    pub u: Array3<f64>,
    /// N×K×T nonnegative activations.
    pub v: Array3<f64>,
    /// F×M×M diagonalizers.
    pub q: Array3<Complex64>,
    /// N×M frequency-invariant spatial gains.
    pub g: Array2<f64>,
}

impl FastMnmfModel {
    pub fn n_sources(&self) -> usize {
        self.u.dim().0
    }

    pub fn n_bases(&self) -> usize {
        self.u.dim().1
    }

    /// `lambda_{nft} = sum_k u_{nkf} v_{nkt}` as an N×F×T array.
    pub fn lambda(&self) -> Array3<f64> {
        let (n, k, f) = self.u.dim();
        let t = self.v.dim().2;
        let mut out = Array3::zeros((n, f, t));
        for ni in 0..n {
            // (F×K)·(K×T)
            let uf = self.u.index_axis(ndarray::Axis(0), ni);
            let vt = self.v.index_axis(ndarray::Axis(0), ni);
            let mut prod = Array2::zeros((f, t));
            for ki in 0..k {
                for fi in 0..f {
                    let u = uf[[ki, fi]];
                    for ti in 0..t {
                        prod[[fi, ti]] += u * vt[[ki, ti]];
                    }
                }
            }
            out.index_axis_mut(ndarray::Axis(0), ni).assign(&prod);
        }
        out
    }
}

/// Deterministic initialization: identity diagonalizers, circulant spatial
/// gains (`1` on the own channel, `0.01` elsewhere, rows normalized), and
/// seeded uniform(0.1, 1) NMF factors.
pub fn fastmnmf_init(x: &ComplexSpectrogram, config: &FastMnmfConfig) -> FastMnmfModel {
    let (n_bins, n_frames, m) = x.data.dim();
    let n = config.n_sources;
    let k = config.n_bases;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u = Array3::from_shape_fn((n, k, n_bins), |_| rng.gen_range(0.1..1.0));
    let v = Array3::from_shape_fn((n, k, n_frames), |_| rng.gen_range(0.1..1.0));
    let mut q = Array3::zeros((n_bins, m, m));
    for f in 0..n_bins {
        for i in 0..m {
            q[[f, i, i]] = Complex64::new(1.0, 0.0);
        }
    }
    let mut g = Array2::from_elem((n, m), 0.01);
    for ni in 0..n {
        g[[ni, ni % m]] = 1.0;
        let row_sum: f64 = (0..m).map(|mi| g[[ni, mi]]).sum();
        for mi in 0..m {
            g[[ni, mi]] /= row_sum;
        }
    }
    FastMnmfModel { u, v, q, g }
}

/// `|（Q_f x_ft)_m|^2` as F×T×M.
fn diagonalized_power(x: &ComplexSpectrogram, q: &Array3<Complex64>) -> Array3<f64> {
    let (n_bins, n_frames, m) = x.data.dim();
    let mut out = Array3::zeros((n_bins, n_frames, m));
    let rows: Vec<Array2<f64>> = (0..n_bins)
        .into_par_iter()
        .map(|f| {
            let mut xt = Array2::zeros((n_frames, m));
            for t in 0..n_frames {
                for mi in 0..m {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for mj in 0..m {
                        acc += q[[f, mi, mj]] * x.data[[f, t, mj]];
                    }
                    xt[[t, mi]] = acc.norm_sqr();
                }
            }
            xt
        })
        .collect();
    for (f, xt) in rows.into_iter().enumerate() {
        for t in 0..n_frames {
            for mi in 0..m {
                out[[f, t, mi]] = xt[[t, mi]];
            }
        }
    }
    out
}

/// `y_{ftm} = sum_n lambda_{nft} g_{nm}`.
fn model_power(lambda: &Array3<f64>, g: &Array2<f64>) -> Array3<f64> {
    let (n, f, t) = lambda.dim();
    let m = g.dim().1;
    let mut y = Array3::from_elem((f, t, m), 0.0);
    for ni in 0..n {
        for fi in 0..f {
            for ti in 0..t {
                let l = lambda[[ni, fi, ti]];
                for mi in 0..m {
                    y[[fi, ti, mi]] += l * g[[ni, mi]];
                }
            }
        }
    }
    y
}

/// Diagonalized log-likelihood plus the Gaussian normalizer:
/// `sum_f 2T log|det Q_f| - sum_{f,t,m}(xt/y + log y) - F T M log pi`.
pub fn log_likelihood(x: &ComplexSpectrogram, model: &FastMnmfModel) -> f64 {
    let (n_bins, n_frames, m) = x.data.dim();
    let xt = diagonalized_power(x, &model.q);
    let y = model_power(&model.lambda(), &model.g);
    let mut ll = 0.0;
    for f in 0..n_bins {
        let lu = match Lu::factor(&model.q.index_axis(ndarray::Axis(0), f).to_owned()) {
            Ok(lu) => lu,
            Err(_) => return f64::NEG_INFINITY,
        };
        ll += 2.0 * n_frames as f64 * lu.log_abs_det();
    }
    for f in 0..n_bins {
        for t in 0..n_frames {
            for mi in 0..m {
                let yv = y[[f, t, mi]];
                ll -= xt[[f, t, mi]] / yv + yv.ln();
            }
        }
    }
    ll - (n_bins * n_frames * m) as f64 * std::f64::consts::PI.ln()
}

/// Run `n_iter` monotone sweeps of the FastMNMF updates.
pub fn fastmnmf_fit(
    x: &ComplexSpectrogram,
    mut model: FastMnmfModel,
    n_iter: usize,
) -> Result<FastMnmfModel> {
    let (n_bins, n_frames, m) = x.data.dim();
    let (n, k, _) = model.u.dim();
    if n_frames < m {
        return Err(Error::Size(format!(
            "need at least M={m} frames for stable diagonalizer updates, got {n_frames}"
        )));
    }

    let mut xt = diagonalized_power(x, &model.q);
    for _ in 0..n_iter {
        let mut lambda = model.lambda();
        let mut y = model_power(&lambda, &model.g);

        // U update
        let (num, den) = mu_accumulators(&lambda, &model.g, &xt, &y);
        for ni in 0..n {
            for ki in 0..k {
                for fi in 0..n_bins {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for ti in 0..n_frames {
                        let vv = model.v[[ni, ki, ti]];
                        a += vv * num[[ni, fi, ti]];
                        b += vv * den[[ni, fi, ti]];
                    }
                    if b > 0.0 {
                        let val = model.u[[ni, ki, fi]] * (a / b).sqrt();
                        model.u[[ni, ki, fi]] = val.max(PARAM_FLOOR);
                    }
                }
            }
        }
        lambda = model.lambda();
        y = model_power(&lambda, &model.g);

        // V update
        let (num, den) = mu_accumulators(&lambda, &model.g, &xt, &y);
        for ni in 0..n {
            for ki in 0..k {
                for ti in 0..n_frames {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for fi in 0..n_bins {
                        let uu = model.u[[ni, ki, fi]];
                        a += uu * num[[ni, fi, ti]];
                        b += uu * den[[ni, fi, ti]];
                    }
                    if b > 0.0 {
                        let val = model.v[[ni, ki, ti]] * (a / b).sqrt();
                        model.v[[ni, ki, ti]] = val.max(PARAM_FLOOR);
                    }
                }
            }
        }
        lambda = model.lambda();
        y = model_power(&lambda, &model.g);

        // G update
        for ni in 0..n {
            for mi in 0..m {
                let mut a = 0.0;
                let mut b = 0.0;
                for fi in 0..n_bins {
                    for ti in 0..n_frames {
                        let l = lambda[[ni, fi, ti]];
                        let yv = y[[fi, ti, mi]];
                        a += l * xt[[fi, ti, mi]] / (yv * yv);
                        b += l / yv;
                    }
                }
                if b > 0.0 {
                    let val = model.g[[ni, mi]] * (a / b).sqrt();
                    model.g[[ni, mi]] = val.max(PARAM_FLOOR);
                }
            }
        }
        y = model_power(&lambda, &model.g);

        // iterative-projection rows of Q, then refresh the diagonalized power
        update_q(x, &mut model.q, &y)?;
        xt = diagonalized_power(x, &model.q);

        normalize(&mut model, &mut xt);

        let ll = quick_ll(&model, &xt, n_frames);
        if !ll.is_finite() {
            return Err(Error::Divergence(format!("log-likelihood became {ll}")));
        }
    }
    Ok(model)
}

/// Shared MU numerator/denominator terms:
/// `num_{nft} = sum_m g_{nm} xt_{ftm} / y_{ftm}^2`, `den_{nft} = sum_m g_{nm}/y_{ftm}`.
fn mu_accumulators(
    lambda: &Array3<f64>,
    g: &Array2<f64>,
    xt: &Array3<f64>,
    y: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let (n, n_bins, n_frames) = lambda.dim();
    let m = g.dim().1;
    let mut num = Array3::zeros((n, n_bins, n_frames));
    let mut den = Array3::zeros((n, n_bins, n_frames));
    for ni in 0..n {
        for fi in 0..n_bins {
            for ti in 0..n_frames {
                let mut a = 0.0;
                let mut b = 0.0;
                for mi in 0..m {
                    let yv = y[[fi, ti, mi]];
                    let gv = g[[ni, mi]];
                    a += gv * xt[[fi, ti, mi]] / (yv * yv);
                    b += gv / yv;
                }
                num[[ni, fi, ti]] = a;
                den[[ni, fi, ti]] = b;
            }
        }
    }
    (num, den)
}

fn update_q(x: &ComplexSpectrogram, q: &mut Array3<Complex64>, y: &Array3<f64>) -> Result<()> {
    let (n_bins, n_frames, m) = x.data.dim();
    let updated: Result<Vec<Array2<Complex64>>> = (0..n_bins)
        .into_par_iter()
        .map(|f| {
            let mut qf = q.index_axis(ndarray::Axis(0), f).to_owned();
            for mi in 0..m {
                // Phi = (1/T) sum_t x x^H / y_{ftm}
                let mut phi: Array2<Complex64> = Array2::zeros((m, m));
                for t in 0..n_frames {
                    let w = 1.0 / (y[[f, t, mi]] * n_frames as f64);
                    for i in 0..m {
                        let xi = x.data[[f, t, i]] * w;
                        for j in 0..m {
                            let add = xi * x.data[[f, t, j]].conj();
                            phi[[i, j]] += add;
                        }
                    }
                }
                let a = qf.dot(&phi);
                let lu = Lu::factor(&a)
                    .map_err(|_| Error::Singular(format!("Q update at bin {f}, row {mi}")))?;
                let mut e = vec![Complex64::new(0.0, 0.0); m];
                e[mi] = Complex64::new(1.0, 0.0);
                let qrow = lu.solve_vec(&e);
                // normalize so q^H Phi q = 1
                let mut quad = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for j in 0..m {
                        acc += phi[[i, j]] * qrow[j];
                    }
                    quad += qrow[i].conj() * acc;
                }
                let scale = quad.re.max(f64::MIN_POSITIVE).sqrt();
                for j in 0..m {
                    qf[[mi, j]] = (qrow[j] / scale).conj();
                }
            }
            Ok(qf)
        })
        .collect();
    for (f, qf) in updated?.into_iter().enumerate() {
        q.index_axis_mut(ndarray::Axis(0), f).assign(&qf);
    }
    Ok(())
}

/// Resolve scale ambiguities: per-frequency trace normalization of Q^H Q
/// absorbed into the bases, and G rows normalized to sum one.
fn normalize(model: &mut FastMnmfModel, xt: &mut Array3<f64>) {
    let (n_bins, mdim) = (model.q.dim().0, model.q.dim().1);
    let (n, k, _) = model.u.dim();
    let t = xt.dim().1;
    for f in 0..n_bins {
        let mut tr = 0.0;
        for i in 0..mdim {
            for j in 0..mdim {
                tr += model.q[[f, i, j]].norm_sqr();
            }
        }
        let mu = (tr / mdim as f64).max(f64::MIN_POSITIVE);
        let root = mu.sqrt();
        for i in 0..mdim {
            for j in 0..mdim {
                model.q[[f, i, j]] /= root;
            }
        }
        for ni in 0..n {
            for ki in 0..k {
                model.u[[ni, ki, f]] = (model.u[[ni, ki, f]] / mu).max(PARAM_FLOOR);
            }
        }
        for ti in 0..t {
            for mi in 0..mdim {
                xt[[f, ti, mi]] /= mu;
            }
        }
    }
    for ni in 0..n {
        let row_sum: f64 = (0..mdim).map(|mi| model.g[[ni, mi]]).sum();
        if row_sum > 0.0 {
            for mi in 0..mdim {
                model.g[[ni, mi]] = (model.g[[ni, mi]] / row_sum).max(PARAM_FLOOR);
            }
            for ki in 0..k {
                for fi in 0..model.u.dim().2 {
                    model.u[[ni, ki, fi]] =
                        (model.u[[ni, ki, fi]] * row_sum).max(PARAM_FLOOR);
                }
            }
        }
    }
}

/// Likelihood from the cached diagonalized power (used for the divergence
/// guard inside the sweep loop).
fn quick_ll(model: &FastMnmfModel, xt: &Array3<f64>, n_frames: usize) -> f64 {
    let (n_bins, _, m) = xt.dim();
    let y = model_power(&model.lambda(), &model.g);
    let mut ll = 0.0;
    for f in 0..n_bins {
        let lu = match Lu::factor(&model.q.index_axis(ndarray::Axis(0), f).to_owned()) {
            Ok(lu) => lu,
            Err(_) => return f64::NEG_INFINITY,
        };
        ll += 2.0 * n_frames as f64 * lu.log_abs_det();
    }
    for f in 0..n_bins {
        for t in 0..n_frames {
            for mi in 0..m {
                ll -= xt[[f, t, mi]] / y[[f, t, mi]] + y[[f, t, mi]].ln();
            }
        }
    }
    ll
}

/// Wiener-like separation: per source the multichannel estimate is
/// `Q^{-1} Diag(lambda_n g_n / y) Q x`; this returns its reference-channel
/// row as one single-channel spectrogram per source. The per-bin gains sum
/// to one over sources, so the outputs sum to the mixture reference
/// channel exactly.
pub fn fastmnmf_separate(
    x: &ComplexSpectrogram,
    model: &FastMnmfModel,
    ref_channel: usize,
) -> Result<Vec<Array2<Complex64>>> {
    let (n_bins, n_frames, m) = x.data.dim();
    let n = model.n_sources();
    let lambda = model.lambda();
    let mut out = vec![Array2::zeros((n_bins, n_frames)); n];
    for f in 0..n_bins {
        let qf = model.q.index_axis(ndarray::Axis(0), f).to_owned();
        let lu = Lu::factor(&qf)
            .map_err(|_| Error::Singular(format!("diagonalizer at bin {f}")))?;
        let qinv = lu.inverse();
        let mut y = vec![Complex64::new(0.0, 0.0); m];
        for t in 0..n_frames {
            for mi in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for mj in 0..m {
                    acc += qf[[mi, mj]] * x.data[[f, t, mj]];
                }
                y[mi] = acc;
            }
            for ni in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for mi in 0..m {
                    let mut denom = 0.0;
                    for nj in 0..n {
                        denom += lambda[[nj, f, t]] * model.g[[nj, mi]];
                    }
                    let gain = lambda[[ni, f, t]] * model.g[[ni, mi]] / denom;
                    acc += qinv[[ref_channel, mi]] * gain * y[mi];
                }
                out[ni][[f, t]] = acc;
            }
        }
    }
    Ok(out)
}

/// Per-source multichannel re-projection `Q^{-1} Diag(gain) Q x` for one
/// source; used to estimate a DOA for a separated signal.
pub fn reproject_source(
    x: &ComplexSpectrogram,
    model: &FastMnmfModel,
    source: usize,
) -> Result<ComplexSpectrogram> {
    let (n_bins, n_frames, m) = x.data.dim();
    let n = model.n_sources();
    let lambda = model.lambda();
    let mut out = Array3::zeros((n_bins, n_frames, m));
    for f in 0..n_bins {
        let qf = model.q.index_axis(ndarray::Axis(0), f).to_owned();
        let lu = Lu::factor(&qf)
            .map_err(|_| Error::Singular(format!("diagonalizer at bin {f}")))?;
        let qinv = lu.inverse();
        for t in 0..n_frames {
            let mut gained = vec![Complex64::new(0.0, 0.0); m];
            for mi in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for mj in 0..m {
                    acc += qf[[mi, mj]] * x.data[[f, t, mj]];
                }
                let mut denom = 0.0;
                for nj in 0..n {
                    denom += lambda[[nj, f, t]] * model.g[[nj, mi]];
                }
                gained[mi] = acc * (lambda[[source, f, t]] * model.g[[source, mi]] / denom);
            }
            for mi in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for mj in 0..m {
                    acc += qinv[[mi, mj]] * gained[mj];
                }
                out[[f, t, mi]] = acc;
            }
        }
    }
    Ok(ComplexSpectrogram {
        data: out,
        n_fft: x.n_fft,
        hop: x.hop,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DBFM";
const CHECKPOINT_VERSION: u32 = 1;

/// Write the model as a little-endian binary checkpoint
/// (layout documented in the README).
pub fn save_model(model: &FastMnmfModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (n, k, f) = model.u.dim();
    let t = model.v.dim().2;
    let m = model.g.dim().1;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [n, k, f, t, m] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in model.u.iter().chain(model.v.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.g.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in model.q.iter() {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FastMnmfModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format("truncated model checkpoint".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a FastMNMF checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    }
    let [n, k, f, t, m] = dims;
    let read_f64 = |off: &mut usize| -> Result<f64> {
        Ok(f64::from_le_bytes(take(off, 8)?.try_into().unwrap()))
    };
    let mut u = Array3::zeros((n, k, f));
    for v in u.iter_mut() {
        *v = read_f64(&mut off)?;
    }
    let mut v_arr = Array3::zeros((n, k, t));
    for v in v_arr.iter_mut() {
        *v = read_f64(&mut off)?;
    }
    let mut g = Array2::zeros((n, m));
    for v in g.iter_mut() {
        *v = read_f64(&mut off)?;
    }
    let mut q = Array3::zeros((f, m, m));
    for c in q.iter_mut() {
        let re = read_f64(&mut off)?;
        let im = read_f64(&mut off)?;
        *c = Complex64::new(re, im);
    }
    Ok(FastMnmfModel { u, v: v_arr, q, g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spec(seed: u64, f: usize, t: usize, m: usize) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexSpectrogram {
            data: Array3::from_shape_fn((f, t, m), |_| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }),
            n_fft: 2 * (f - 1),
            hop: (f - 1) / 2,
        }
    }

    #[test]
    fn init_matches_construction() {
        let x = random_spec(0, 5, 12, 2);
        let cfg = FastMnmfConfig {
            n_sources: 1,
            n_bases: 3,
            n_iter: 0,
            seed: 4,
        };
        let model = fastmnmf_init(&x, &cfg);
        let expect = 1.0 / 1.01;
        assert!((model.g[[0, 0]] - expect).abs() < 1e-12);
        assert!((model.g[[0, 1]] - 0.01 / 1.01).abs() < 1e-12);

        let again = fastmnmf_init(&x, &cfg);
        assert_eq!(model.u, again.u);
        assert_eq!(model.v, again.v);

        let lambda = model.lambda();
        assert!(lambda.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn zero_iterations_keep_model() {
        let x = random_spec(1, 5, 12, 2);
        let cfg = FastMnmfConfig {
            n_sources: 2,
            n_bases: 2,
            n_iter: 0,
            seed: 1,
        };
        let model = fastmnmf_init(&x, &cfg);
        let fitted = fastmnmf_fit(&x, model.clone(), 0).unwrap();
        assert_eq!(model.u, fitted.u);
        assert_eq!(model.v, fitted.v);
        assert_eq!(model.g, fitted.g);
        assert_eq!(model.q, fitted.q);
    }

    #[test]
    fn likelihood_monotone_and_improves() {
        for seed in 0..3u64 {
            let x = random_spec(10 + seed, 9, 40, 2);
            let cfg = FastMnmfConfig {
                n_sources: 2,
                n_bases: 3,
                n_iter: 0,
                seed,
            };
            let mut model = fastmnmf_init(&x, &cfg);
            let mut prev = log_likelihood(&x, &model);
            let first_sweep;
            model = fastmnmf_fit(&x, model, 1).unwrap();
            first_sweep = log_likelihood(&x, &model);
            prev = prev.max(first_sweep);
            let mut current = first_sweep;
            for _ in 0..20 {
                model = fastmnmf_fit(&x, model, 1).unwrap();
                current = log_likelihood(&x, &model);
                let tol = 1e-6 * prev.abs().max(1.0);
                assert!(
                    current >= prev - tol,
                    "seed {seed}: LL fell {prev} -> {current}"
                );
                prev = current;
            }
            assert!(current > first_sweep, "seed {seed}: no improvement");
        }
    }

    #[test]
    fn likelihood_matches_dense_covariance_oracle() {
        // brute-force evaluation of the mixture Gaussian with
        // G_nf = Q^{-1} Diag(g_n) Q^{-H} on a tiny instance
        let x = random_spec(3, 3, 5, 2);
        let cfg = FastMnmfConfig {
            n_sources: 2,
            n_bases: 2,
            n_iter: 0,
            seed: 8,
        };
        let mut model = fastmnmf_init(&x, &cfg);
        model = fastmnmf_fit(&x, model, 3).unwrap();

        let lambda = model.lambda();
        let mut naive = 0.0;
        for f in 0..3 {
            let qf = model.q.index_axis(ndarray::Axis(0), f).to_owned();
            let qinv = Lu::factor(&qf).unwrap().inverse();
            for t in 0..5 {
                // dense covariance sum_n lambda Q^{-1} diag(g) Q^{-H}
                let mut cov: Array2<Complex64> = Array2::zeros((2, 2));
                for ni in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let mut acc = Complex64::new(0.0, 0.0);
                            for mi in 0..2 {
                                acc += qinv[[i, mi]]
                                    * model.g[[ni, mi]]
                                    * qinv[[j, mi]].conj();
                            }
                            cov[[i, j]] += acc * lambda[[ni, f, t]];
                        }
                    }
                }
                let det = cov[[0, 0]] * cov[[1, 1]] - cov[[0, 1]] * cov[[1, 0]];
                let inv = [
                    [cov[[1, 1]] / det, -cov[[0, 1]] / det],
                    [-cov[[1, 0]] / det, cov[[0, 0]] / det],
                ];
                let xv = [x.data[[f, t, 0]], x.data[[f, t, 1]]];
                let mut quad = Complex64::new(0.0, 0.0);
                for i in 0..2 {
                    for j in 0..2 {
                        quad += xv[i].conj() * inv[i][j] * xv[j];
                    }
                }
                naive -= 2.0 * std::f64::consts::PI.ln() + det.norm().ln() + quad.re;
            }
        }
        let ours = log_likelihood(&x, &model);
        assert!(
            (ours - naive).abs() < 1e-8,
            "diagonalized {ours} vs dense {naive}"
        );
    }

    #[test]
    fn likelihood_invariant_to_compensated_rescale() {
        let x = random_spec(5, 4, 7, 2);
        let cfg = FastMnmfConfig {
            n_sources: 2,
            n_bases: 2,
            n_iter: 0,
            seed: 2,
        };
        let model = fastmnmf_init(&x, &cfg);
        let c = 3.7;
        let rescaled = FastMnmfModel {
            u: model.u.mapv(|v| v * c),
            v: model.v.clone(),
            q: model.q.clone(),
            g: model.g.mapv(|v| v / c),
        };
        let a = log_likelihood(&x, &model);
        let b = log_likelihood(&x, &rescaled);
        assert!((a - b).abs() < 1e-8 * a.abs());
    }

    #[test]
    fn single_bin_matched_variance_contribution() {
        // M=1, Q=1, N=1, lambda*g = |x|^2 gives -1 - log|x|^2 - log(pi) per bin
        let mut x = random_spec(6, 2, 2, 1);
        x.data.iter_mut().for_each(|c| *c += Complex64::new(1.5, 0.0));
        let (f, t) = (2, 2);
        let mut u = Array3::zeros((1, 1, f));
        let mut v = Array3::zeros((1, 1, t));
        u.fill(1.0);
        for ti in 0..t {
            v[[0, 0, ti]] = 1.0;
        }
        let mut q = Array3::zeros((f, 1, 1));
        for fi in 0..f {
            q[[fi, 0, 0]] = Complex64::new(1.0, 0.0);
        }
        let g = Array2::ones((1, 1));
        // per-bin lambda must equal |x|^2: set u per bin, v = 1 and check one bin at a time
        for fi in 0..f {
            for ti in 0..t {
                let p = x.data[[fi, ti, 0]].norm_sqr();
                let mut uu = u.clone();
                uu[[0, 0, fi]] = p;
                let model = FastMnmfModel {
                    u: uu,
                    v: v.clone(),
                    q: q.clone(),
                    g: g.clone(),
                };
                // isolate this bin by evaluating the model on a 1x1 slice
                let xs = ComplexSpectrogram {
                    data: Array3::from_shape_fn((1, 1, 1), |_| x.data[[fi, ti, 0]]),
                    n_fft: 2,
                    hop: 1,
                };
                let model1 = FastMnmfModel {
                    u: Array3::from_elem((1, 1, 1), p),
                    v: Array3::from_elem((1, 1, 1), 1.0),
                    q: Array3::from_elem((1, 1, 1), Complex64::new(1.0, 0.0)),
                    g: Array2::ones((1, 1)),
                };
                let ll = log_likelihood(&xs, &model1);
                let expect = -1.0 - p.ln() - std::f64::consts::PI.ln();
                assert!((ll - expect).abs() < 1e-10, "{ll} vs {expect}");
                let _ = model;
            }
        }
    }

    #[test]
    fn separation_partitions_reference_channel() {
        let x = random_spec(20, 6, 25, 3);
        let cfg = FastMnmfConfig {
            n_sources: 3,
            n_bases: 2,
            n_iter: 0,
            seed: 3,
        };
        let model = fastmnmf_fit(&x, fastmnmf_init(&x, &cfg), 5).unwrap();
        let parts = fastmnmf_separate(&x, &model, 1).unwrap();
        for f in 0..6 {
            for t in 0..25 {
                let sum: Complex64 = parts.iter().map(|p| p[[f, t]]).sum();
                let diff = (sum - x.data[[f, t, 1]]).norm();
                assert!(diff < 1e-9, "partition violated by {diff} at ({f},{t})");
            }
        }
    }

    #[test]
    fn single_source_passes_mixture_through() {
        let x = random_spec(21, 4, 10, 2);
        let cfg = FastMnmfConfig {
            n_sources: 1,
            n_bases: 2,
            n_iter: 0,
            seed: 5,
        };
        let model = fastmnmf_init(&x, &cfg);
        let parts = fastmnmf_separate(&x, &model, 0).unwrap();
        assert_eq!(parts.len(), 1);
        for f in 0..4 {
            for t in 0..10 {
                assert!((parts[0][[f, t]] - x.data[[f, t, 0]]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let x = random_spec(22, 4, 9, 2);
        let cfg = FastMnmfConfig {
            n_sources: 2,
            n_bases: 3,
            n_iter: 0,
            seed: 6,
        };
        let model = fastmnmf_fit(&x, fastmnmf_init(&x, &cfg), 2).unwrap();
        let dir = std::env::temp_dir().join("drybeam_fastmnmf_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model.u, back.u);
        assert_eq!(model.v, back.v);
        assert_eq!(model.g, back.g);
        assert_eq!(model.q, back.q);
    }
}
