//! MPDR and WPD beamforming: steering construction, mask-derived
//! statistics, closed-form filters, and filter application.
//!
//! The WPD filter stacks the current frame with delayed frames at lags
//! `{b..=L}`, so the stacked dimension is `(L-b+2)*M`. With `L < b` the tap
//! set degenerates to `{0}` and WPD reduces to plain MPDR weighting.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{solve_hermitian, HermitianMatrix};
use crate::stft::ComplexSpectrogram;
use crate::SOUND_SPEED;

/// Microphone positions in meters relative to the array center.
#[derive(Debug, Clone)]
pub struct ArrayGeometry {
    pub positions: Vec<[f64; 2]>,
    pub sample_rate: f64,
}

impl ArrayGeometry {
    /// Uniform circular array, mic `m` at azimuth `2*pi*m/M`.
    pub fn circular(n_mics: usize, radius: f64, sample_rate: f64) -> Self {
        let positions = (0..n_mics)
            .map(|m| {
                let theta = 2.0 * std::f64::consts::PI * m as f64 / n_mics as f64;
                [radius * theta.cos(), radius * theta.sin()]
            })
            .collect();
        ArrayGeometry {
            positions,
            sample_rate,
        }
    }

    pub fn n_mics(&self) -> usize {
        self.positions.len()
    }
}

/// Per-frequency array response toward one azimuth, unit gain at the
/// reference channel.
#[derive(Debug, Clone)]
pub struct SteeringVector {
    /// F×M.
    pub vectors: Array2<Complex64>,
    pub ref_channel: usize,
}

/// F×T time-frequency mask with entries in [0, 1].
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: Array2<f64>,
}

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Value("mask entries must lie in [0, 1]".into()));
        }
        Ok(Mask { values })
    }

    pub fn ones(f: usize, t: usize) -> Self {
        Mask {
            values: Array2::ones((f, t)),
        }
    }
}

/// Stacked dereverberation+denoising filter, one vector per frequency.
#[derive(Debug, Clone)]
pub struct WpdFilter {
    /// F×D with D = n_taps * M.
    pub weights: Array2<Complex64>,
    pub delay_b: usize,
    pub taps_l: usize,
    pub n_mics: usize,
}

/// Tap lags `{0} ∪ {b..=L}`; empty past range when L < b.
pub fn tap_lags(delay_b: usize, taps_l: usize) -> Vec<usize> {
    let mut lags = vec![0];
    if taps_l >= delay_b {
        lags.extend(delay_b..=taps_l);
    }
    lags
}

impl WpdFilter {
    pub fn lags(&self) -> Vec<usize> {
        tap_lags(self.delay_b, self.taps_l)
    }

    pub fn stacked_dim(&self) -> usize {
        self.lags().len() * self.n_mics
    }
}

/// Front-end beamformer configuration (paper-scale defaults b=3, L=8).
#[derive(Debug, Clone, Copy)]
pub struct WpdConfig {
    pub delay_b: usize,
    pub taps_l: usize,
    pub ref_channel: usize,
}

impl Default for WpdConfig {
    fn default() -> Self {
        WpdConfig {
            delay_b: 3,
            taps_l: 8,
            ref_channel: 0,
        }
    }
}

/// Far-field plane-wave steering vector for `doa` radians, normalized so
/// the reference channel response is exactly 1 at every frequency.
pub fn steering_from_doa(
    doa: f64,
    geometry: &ArrayGeometry,
    n_fft: usize,
    ref_channel: usize,
) -> SteeringVector {
    let m = geometry.n_mics();
    let n_bins = n_fft / 2 + 1;
    let u = [doa.cos(), doa.sin()];
    // projection delay: mics closer to the source hear the wave earlier
    let delays: Vec<f64> = geometry
        .positions
        .iter()
        .map(|p| -(p[0] * u[0] + p[1] * u[1]) / SOUND_SPEED)
        .collect();
    let mut vectors = Array2::zeros((n_bins, m));
    for f in 0..n_bins {
        let f_hz = f as f64 * geometry.sample_rate / n_fft as f64;
        for ch in 0..m {
            let phase = -2.0 * std::f64::consts::PI * f_hz * (delays[ch] - delays[ref_channel]);
            vectors[[f, ch]] = Complex64::new(phase.cos(), phase.sin());
        }
    }
    SteeringVector {
        vectors,
        ref_channel,
    }
}

/// Mask-derived WPD statistics.
pub struct MaskStatistics {
    /// F×T floored speech PSD.
    pub sigma2: Array2<f64>,
    /// F×D×D mask-weighted speech covariance (1/T normalized).
    pub r_bar: Array3<Complex64>,
    /// F×D×D PSD-weighted mixture covariance (unnormalized sum).
    pub k_bar: Array3<Complex64>,
    pub delay_b: usize,
    pub taps_l: usize,
}

/// Build the stacked observation for frequency `f` at frame `t`:
/// blocks `x_{f,t-lag}` for each tap lag, zeros before the signal start.
fn stacked_obs(
    x: &Array3<Complex64>,
    f: usize,
    t: usize,
    lags: &[usize],
    m: usize,
    out: &mut [Complex64],
) {
    for (i, &lag) in lags.iter().enumerate() {
        for ch in 0..m {
            out[i * m + ch] = if t >= lag {
                x[[f, t - lag, ch]]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    }
}

/// PSD floor relative to the mean masked power.
const PSD_FLOOR_REL: f64 = 1e-8;

/// Compute the WPD statistics from a mask: the floored speech PSD
/// `sigma2[f,t] = max(mean_m |w x|^2, floor)`, the mask-weighted speech
/// covariance `R[f]`, and the PSD-weighted mixture covariance `K[f]`.
pub fn mask_statistics(
    x: &ComplexSpectrogram,
    mask: &Mask,
    delay_b: usize,
    taps_l: usize,
) -> Result<MaskStatistics> {
    let (n_bins, n_frames, m) = x.data.dim();
    if mask.values.dim() != (n_bins, n_frames) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match spectrogram {:?}",
            mask.values.dim(),
            (n_bins, n_frames)
        )));
    }
    if n_frames <= taps_l {
        return Err(Error::Size(format!(
            "need more than {taps_l} frames, got {n_frames}"
        )));
    }
    let lags = tap_lags(delay_b, taps_l);
    let d = lags.len() * m;

    let mut sigma2 = Array2::zeros((n_bins, n_frames));
    for f in 0..n_bins {
        for t in 0..n_frames {
            let w = mask.values[[f, t]];
            let mut p = 0.0;
            for ch in 0..m {
                p += (w * x.data[[f, t, ch]]).norm_sqr();
            }
            sigma2[[f, t]] = p / m as f64;
        }
    }
    let mean_power = sigma2.iter().sum::<f64>() / (n_bins * n_frames) as f64;
    if mean_power <= 0.0 {
        return Err(Error::Degenerate(
            "mask-weighted power is identically zero".into(),
        ));
    }
    let floor = PSD_FLOOR_REL * mean_power;
    sigma2.mapv_inplace(|v| v.max(floor));

    let mut r_bar = Array3::zeros((n_bins, d, d));
    let mut k_bar = Array3::zeros((n_bins, d, d));
    let rows: Vec<(Array2<Complex64>, Array2<Complex64>)> = (0..n_bins)
        .into_par_iter()
        .map(|f| {
            let mut r: Array2<Complex64> = Array2::zeros((d, d));
            let mut k: Array2<Complex64> = Array2::zeros((d, d));
            let mut xb = vec![Complex64::new(0.0, 0.0); d];
            let mut sb = vec![Complex64::new(0.0, 0.0); d];
            for t in 0..n_frames {
                stacked_obs(&x.data, f, t, &lags, m, &mut xb);
                for (i, &lag) in lags.iter().enumerate() {
                    let w = if t >= lag { mask.values[[f, t - lag]] } else { 0.0 };
                    for ch in 0..m {
                        sb[i * m + ch] = xb[i * m + ch] * w;
                    }
                }
                let inv_sigma = 1.0 / sigma2[[f, t]];
                for i in 0..d {
                    for j in 0..=i {
                        let r_ij = sb[i] * sb[j].conj();
                        let k_ij = xb[i] * xb[j].conj() * inv_sigma;
                        r[[i, j]] += r_ij;
                        k[[i, j]] += k_ij;
                    }
                }
            }
            let t_norm = 1.0 / n_frames as f64;
            for i in 0..d {
                for j in 0..=i {
                    r[[i, j]] *= t_norm;
                    if i == j {
                        r[[i, j]] = Complex64::new(r[[i, j]].re, 0.0);
                        k[[i, j]] = Complex64::new(k[[i, j]].re, 0.0);
                    } else {
                        r[[j, i]] = r[[i, j]].conj();
                        k[[j, i]] = k[[i, j]].conj();
                    }
                }
            }
            (r, k)
        })
        .collect();
    for (f, (r, k)) in rows.into_iter().enumerate() {
        r_bar.index_axis_mut(ndarray::Axis(0), f).assign(&r);
        k_bar.index_axis_mut(ndarray::Axis(0), f).assign(&k);
    }

    Ok(MaskStatistics {
        sigma2,
        r_bar,
        k_bar,
        delay_b,
        taps_l,
    })
}

/// MPDR weights `w = K^{-1}a / (a^H K^{-1} a)` per frequency. Returns F×M.
pub fn mpdr_filter(
    k: &Array3<Complex64>,
    steering: &SteeringVector,
) -> Result<Array2<Complex64>> {
    let (n_bins, m, m2) = k.dim();
    if m != m2 || steering.vectors.dim() != (n_bins, m) {
        return Err(Error::Shape("SCM and steering dimensions disagree".into()));
    }
    let mut out = Array2::zeros((n_bins, m));
    for f in 0..n_bins {
        let kf = HermitianMatrix::new(k.index_axis(ndarray::Axis(0), f).to_owned())?;
        let a = Array2::from_shape_fn((m, 1), |(i, _)| steering.vectors[[f, i]]);
        let k_inv_a = solve_hermitian(&kf, &a)?;
        let mut denom = Complex64::new(0.0, 0.0);
        for i in 0..m {
            denom += a[[i, 0]].conj() * k_inv_a[[i, 0]];
        }
        if denom.norm() < 1e-300 {
            return Err(Error::Degenerate(format!(
                "a^H K^{{-1}} a vanished at bin {f}"
            )));
        }
        for i in 0..m {
            out[[f, i]] = k_inv_a[[i, 0]] / denom;
        }
    }
    Ok(out)
}

/// WPD filter `w = (K^{-1}R / tr(K^{-1}R)) u_q` per frequency.
pub fn wpd_filter(
    stats: &MaskStatistics,
    n_mics: usize,
    ref_channel: usize,
) -> Result<WpdFilter> {
    let (n_bins, d, _) = stats.k_bar.dim();
    if ref_channel >= n_mics {
        return Err(Error::Shape(format!(
            "reference channel {ref_channel} out of range for {n_mics} mics"
        )));
    }
    let weights: Result<Vec<Vec<Complex64>>> = (0..n_bins)
        .into_par_iter()
        .map(|f| {
            let kf = HermitianMatrix::new(stats.k_bar.index_axis(ndarray::Axis(0), f).to_owned())?;
            let rf = stats.r_bar.index_axis(ndarray::Axis(0), f).to_owned();
            let x = solve_hermitian(&kf, &rf)?;
            let mut tr = Complex64::new(0.0, 0.0);
            for i in 0..d {
                tr += x[[i, i]];
            }
            if tr.re <= 0.0 || tr.norm() < 1e-300 {
                return Err(Error::Degenerate(format!(
                    "tr(K^{{-1}}R) = {tr} not positive at bin {f}"
                )));
            }
            Ok((0..d).map(|i| x[[i, ref_channel]] / tr).collect())
        })
        .collect();
    let weights = weights?;
    let mut out = Array2::zeros((n_bins, d));
    for (f, row) in weights.into_iter().enumerate() {
        for (i, w) in row.into_iter().enumerate() {
            out[[f, i]] = w;
        }
    }
    Ok(WpdFilter {
        weights: out,
        delay_b: stats.delay_b,
        taps_l: stats.taps_l,
        n_mics,
    })
}

/// Apply a stacked filter: `d[f,t] = w_f^H xbar_{ft}` with zero-padded
/// history. Returns a single-channel F×T spectrogram.
pub fn apply_wpd(x: &ComplexSpectrogram, filter: &WpdFilter) -> Result<Array2<Complex64>> {
    let (n_bins, n_frames, m) = x.data.dim();
    if m != filter.n_mics || filter.weights.dim() != (n_bins, filter.stacked_dim()) {
        return Err(Error::Shape(format!(
            "filter ({:?}, {} mics) does not match spectrogram {:?}",
            filter.weights.dim(),
            filter.n_mics,
            x.data.dim()
        )));
    }
    let lags = filter.lags();
    let d = filter.stacked_dim();
    let mut out = Array2::zeros((n_bins, n_frames));
    let mut xb = vec![Complex64::new(0.0, 0.0); d];
    for f in 0..n_bins {
        for t in 0..n_frames {
            stacked_obs(&x.data, f, t, &lags, m, &mut xb);
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..d {
                acc += filter.weights[[f, i]].conj() * xb[i];
            }
            out[[f, t]] = acc;
        }
    }
    Ok(out)
}

/// Wrap per-frequency M-vector weights (e.g. MPDR output) as a tap-{0}
/// stacked filter so it can be applied with [`apply_wpd`].
pub fn single_tap_filter(weights: Array2<Complex64>, n_mics: usize) -> WpdFilter {
    WpdFilter {
        weights,
        delay_b: 1,
        taps_l: 0,
        n_mics,
    }
}
