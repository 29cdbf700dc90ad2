//! Forward/inverse STFT with square-root-Hann windows on both sides.
//!
//! The analysis uses reflection padding of `n_fft/2` at both ends so edge
//! frames carry full signal energy. The synthesis divides by the exact
//! window-square overlap envelope, which makes the round trip exact to
//! rounding for any hop that divides `n_fft`, and keeps both transforms
//! linear maps (the gradient engine relies on that).

use std::sync::Arc;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::TimeSignal;
use crate::error::{Error, Result};

/// F×T×M complex STFT coefficients plus the transform geometry.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// F×T×M, F = n_fft/2 + 1.
    pub data: Array3<Complex64>,
    pub n_fft: usize,
    pub hop: usize,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Copy out a single channel as an F×T array.
    pub fn channel(&self, m: usize) -> Array2<Complex64> {
        let (f, t, _) = self.data.dim();
        Array2::from_shape_fn((f, t), |(fi, ti)| self.data[[fi, ti, m]])
    }

    /// Wrap a single-channel F×T array.
    pub fn from_single(data: Array2<Complex64>, n_fft: usize, hop: usize) -> Self {
        let (f, t) = data.dim();
        let mut out = Array3::zeros((f, t, 1));
        for fi in 0..f {
            for ti in 0..t {
                out[[fi, ti, 0]] = data[[fi, ti]];
            }
        }
        ComplexSpectrogram {
            data: out,
            n_fft,
            hop,
        }
    }
}

/// STFT geometry. The paper-scale setting is 1024/256; tests run 256/64.
#[derive(Debug, Clone, Copy)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    /// Small configuration used throughout the test suite (F = 129).
    pub fn desk() -> Self {
        StftConfig { n_fft: 256, hop: 64 }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Periodic square-root-Hann window (a sine window).
pub(crate) fn sqrt_hann(n_fft: usize) -> Vec<f64> {
    (0..n_fft)
        .map(|n| {
            let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos());
            hann.sqrt()
        })
        .collect()
}

fn check_geometry(n_fft: usize, hop: usize) -> Result<()> {
    if n_fft == 0 || !n_fft.is_power_of_two() {
        return Err(Error::Size(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 || n_fft % hop != 0 {
        return Err(Error::Size(format!("hop {hop} must divide n_fft {n_fft}")));
    }
    Ok(())
}

/// Number of frames produced for a signal of `s` samples.
pub fn n_frames(s: usize, hop: usize) -> usize {
    s.div_ceil(hop) + 1
}

/// Reflection-pad `n_fft/2` on both ends, then zero-extend on the right so
/// exactly `n_frames` full frames fit.
fn pad_signal(x: &[f64], n_fft: usize, hop: usize) -> Result<Vec<f64>> {
    let half = n_fft / 2;
    let s = x.len();
    if s < half + 1 {
        return Err(Error::Size(format!(
            "signal of {s} samples is shorter than one frame after padding (need > {half})"
        )));
    }
    let t = n_frames(s, hop);
    let padded_len = (t - 1) * hop + n_fft;
    let mut padded = vec![0.0; padded_len];
    for i in 0..half {
        padded[i] = x[half - i];
    }
    padded[half..half + s].copy_from_slice(x);
    for j in 0..half {
        padded[half + s + j] = x[s - 2 - j];
    }
    Ok(padded)
}

/// Sum of squared synthesis windows at each padded sample position.
pub(crate) fn overlap_envelope(n_fft: usize, hop: usize, n_frames: usize) -> Vec<f64> {
    let w = sqrt_hann(n_fft);
    let mut env = vec![0.0; (n_frames - 1) * hop + n_fft];
    for t in 0..n_frames {
        for n in 0..n_fft {
            env[t * hop + n] += w[n] * w[n];
        }
    }
    env
}

/// Forward STFT: square-root-Hann analysis window, reflection padding,
/// one-sided spectrum of n_fft/2+1 bins, ceil(S/hop)+1 frames.
pub fn stft_forward(signal: &TimeSignal, n_fft: usize, hop: usize) -> Result<ComplexSpectrogram> {
    check_geometry(n_fft, hop)?;
    let n_bins = n_fft / 2 + 1;
    let s = signal.len();
    let m = signal.channels();
    let t_frames = n_frames(s, hop);
    let w = sqrt_hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let mut out = Array3::zeros((n_bins, t_frames, m));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for ch in 0..m {
        let x = signal.channel(ch);
        let padded = pad_signal(&x, n_fft, hop)?;
        for t in 0..t_frames {
            for n in 0..n_fft {
                buf[n] = Complex64::new(padded[t * hop + n] * w[n], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..n_bins {
                out[[f, t, ch]] = buf[f];
            }
        }
    }
    Ok(ComplexSpectrogram {
        data: out,
        n_fft,
        hop,
    })
}

/// Extend a one-sided spectrum to the full conjugate-symmetric length-N
/// spectrum, inverse-FFT, and keep the real part.
fn frame_from_bins(
    bins: &[Complex64],
    n_fft: usize,
    ifft: &Arc<dyn Fft<f64>>,
    scratch: &mut [Complex64],
) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    debug_assert_eq!(bins.len(), n_bins);
    scratch[0] = bins[0];
    scratch[n_fft / 2] = bins[n_fft / 2];
    for k in 1..n_fft / 2 {
        scratch[k] = bins[k];
        scratch[n_fft - k] = bins[k].conj();
    }
    ifft.process(scratch);
    let scale = 1.0 / n_fft as f64;
    scratch.iter().map(|c| c.re * scale).collect()
}

/// Inverse STFT for a single channel given as an F×T array.
pub(crate) fn istft_single(
    spec: &Array2<Complex64>,
    n_fft: usize,
    hop: usize,
    out_len: usize,
) -> Vec<f64> {
    let (n_bins, t_frames) = spec.dim();
    debug_assert_eq!(n_bins, n_fft / 2 + 1);
    let w = sqrt_hann(n_fft);
    let env = overlap_envelope(n_fft, hop, t_frames);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let mut acc = vec![0.0; env.len()];
    let mut scratch = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut bins = vec![Complex64::new(0.0, 0.0); n_bins];
    for t in 0..t_frames {
        for f in 0..n_bins {
            bins[f] = spec[[f, t]];
        }
        let frame = frame_from_bins(&bins, n_fft, &ifft, &mut scratch);
        for n in 0..n_fft {
            acc[t * hop + n] += frame[n] * w[n];
        }
    }
    let half = n_fft / 2;
    let mut out = vec![0.0; out_len];
    for (i, slot) in out.iter_mut().enumerate() {
        let p = half + i;
        if p < acc.len() && env[p] > 1e-12 {
            *slot = acc[p] / env[p];
        }
    }
    out
}

/// Adjoint of [`istft_single`] as a linear map: takes the cotangent of the
/// time signal and returns the conjugate cotangent of the spectrogram.
pub(crate) fn istft_adjoint_single(
    grad_out: &[f64],
    n_fft: usize,
    hop: usize,
    n_bins: usize,
    t_frames: usize,
) -> Array2<Complex64> {
    debug_assert_eq!(n_bins, n_fft / 2 + 1);
    let w = sqrt_hann(n_fft);
    let env = overlap_envelope(n_fft, hop, t_frames);
    let half = n_fft / 2;
    let mut g_acc = vec![0.0; env.len()];
    for (i, &g) in grad_out.iter().enumerate() {
        let p = half + i;
        if p < g_acc.len() && env[p] > 1e-12 {
            g_acc[p] = g / env[p];
        }
    }
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut out = Array2::zeros((n_bins, t_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let scale = 1.0 / (2.0 * n_fft as f64);
    for t in 0..t_frames {
        for n in 0..n_fft {
            buf[n] = Complex64::new(g_acc[t * hop + n] * w[n], 0.0);
        }
        fft.process(&mut buf);
        // fold the full-spectrum cotangent back onto the one-sided bins
        out[[0, t]] = buf[0] * scale;
        out[[n_fft / 2, t]] = buf[n_fft / 2] * scale;
        for k in 1..n_fft / 2 {
            out[[k, t]] = (buf[k] + buf[n_fft - k].conj()) * scale;
        }
    }
    out
}

/// Inverse STFT: square-root-Hann synthesis window, overlap-add, exact
/// envelope normalization, padding removed, truncated or zero-extended to
/// `out_len` samples.
pub fn stft_inverse(spec: &ComplexSpectrogram, out_len: usize) -> Result<TimeSignal> {
    check_geometry(spec.n_fft, spec.hop)?;
    if out_len == 0 {
        return Err(Error::Size("out_len must be positive".into()));
    }
    let m = spec.channels();
    let mut out = Array2::zeros((out_len, m));
    for ch in 0..m {
        let single = spec.channel(ch);
        let x = istft_single(&single, spec.n_fft, spec.hop, out_len);
        for (i, v) in x.into_iter().enumerate() {
            out[[i, ch]] = v;
        }
    }
    Ok(TimeSignal {
        samples: out,
        sample_rate: crate::SAMPLE_RATE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, s: usize, m: usize) -> TimeSignal {
        TimeSignal::new(Array2::from_shape_fn((s, m), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let sig = TimeSignal::new(Array2::zeros((500, 2))).unwrap();
        let spec = stft_forward(&sig, 256, 64).unwrap();
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
        let back = stft_inverse(&spec, 500).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_and_bins() {
        let sig = random_signal(&mut ChaCha8Rng::seed_from_u64(0), 1000, 1);
        let spec = stft_forward(&sig, 256, 64).unwrap();
        assert_eq!(spec.n_bins(), 129);
        assert_eq!(spec.n_frames(), 1000usize.div_ceil(64) + 1);
    }

    #[test]
    fn round_trip_error_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(s, m) in &[(256usize, 1usize), (1000, 2), (4096, 3), (700, 1)] {
            let sig = random_signal(&mut rng, s, m);
            let spec = stft_forward(&sig, 256, 64).unwrap();
            let back = stft_inverse(&spec, s).unwrap();
            let max_err = (&sig.samples - &back.samples)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_err < 1e-6, "round trip error {max_err}");
        }
    }

    #[test]
    fn matches_brute_force_dft_and_concentrates_energy() {
        // 16 kHz sinusoid at the center of bin k
        let n_fft = 256;
        let hop = 64;
        let k = 20;
        let fs = 16000.0;
        let freq = k as f64 * fs / n_fft as f64;
        let s = 2048;
        let sig = TimeSignal::new(Array2::from_shape_fn((s, 1), |(i, _)| {
            (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin()
        }))
        .unwrap();
        let spec = stft_forward(&sig, n_fft, hop).unwrap();

        // brute-force DFT oracle on one interior frame
        let x = sig.channel(0);
        let padded = pad_signal(&x, n_fft, hop).unwrap();
        let w = sqrt_hann(n_fft);
        let t = 10;
        for f in 0..spec.n_bins() {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..n_fft {
                let phase = -2.0 * std::f64::consts::PI * (f * n) as f64 / n_fft as f64;
                acc += padded[t * hop + n] * w[n] * Complex64::new(phase.cos(), phase.sin());
            }
            let diff = (acc - spec.data[[f, t, 0]]).norm();
            assert!(diff < 1e-9, "bin {f}: naive DFT differs by {diff}");
        }

        // >99% of per-frame energy within bins k-1..k+1 on frames fully
        // inside the signal (edge frames see the reflection fold, which
        // kinks the waveform and leaks a little)
        let half = n_fft / 2;
        let first_interior = half.div_ceil(hop);
        let last_interior = (s - half) / hop;
        assert!(last_interior > first_interior + 5);
        for t in first_interior..=last_interior {
            let energy = |f: usize| {
                let scale = if f == 0 || f == n_fft / 2 { 1.0 } else { 2.0 };
                scale * spec.data[[f, t, 0]].norm_sqr()
            };
            let total: f64 = (0..spec.n_bins()).map(energy).sum();
            let local: f64 = (k - 1..=k + 1).map(energy).sum();
            assert!(local / total > 0.99, "frame {t}: {}", local / total);
        }
    }

    #[test]
    fn inverse_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = stft_forward(&random_signal(&mut rng, 600, 1), 256, 64).unwrap();
        let b = stft_forward(&random_signal(&mut rng, 600, 1), 256, 64).unwrap();
        let alpha = 1.7;
        let beta = -0.3;
        let mut combo = a.clone();
        combo
            .data
            .iter_mut()
            .zip(b.data.iter())
            .for_each(|(ca, cb)| *ca = *ca * alpha + *cb * beta);
        let left = stft_inverse(&combo, 600).unwrap();
        let ia = stft_inverse(&a, 600).unwrap();
        let ib = stft_inverse(&b, 600).unwrap();
        let right = &ia.samples * alpha + &ib.samples * beta;
        let max_err = (&left.samples - &right)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(max_err < 1e-10, "linearity violated by {max_err}");
    }

    #[test]
    fn parseval_within_window_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_fft = 256;
        let hop = 64;
        let sig = random_signal(&mut rng, 16000, 1);
        let spec = stft_forward(&sig, n_fft, hop).unwrap();
        let mut spec_energy = 0.0;
        for f in 0..spec.n_bins() {
            let scale = if f == 0 || f == n_fft / 2 { 1.0 } else { 2.0 };
            for t in 0..spec.n_frames() {
                spec_energy += scale * spec.data[[f, t, 0]].norm_sqr();
            }
        }
        // squared analysis windows at hop h overlap-sum to n_fft/(2h)
        let overlap = n_fft as f64 / (2.0 * hop as f64);
        let ratio = spec_energy / (n_fft as f64 * overlap * sig.energy());
        assert!((0.99..=1.01).contains(&ratio), "energy ratio {ratio}");
    }

    #[test]
    fn too_short_signal_rejected() {
        let sig = TimeSignal::new(Array2::zeros((64, 1))).unwrap();
        assert!(matches!(
            stft_forward(&sig, 256, 64),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn zero_out_len_rejected() {
        let sig = TimeSignal::new(Array2::zeros((500, 1))).unwrap();
        let spec = stft_forward(&sig, 256, 64).unwrap();
        assert!(matches!(stft_inverse(&spec, 0), Err(Error::Size(_))));
    }

    #[test]
    fn istft_adjoint_matches_directional_derivative() {
        // <g, istft(c + eps*d)> - <g, istft(c)> ~= eps * 2 Re <adj(g), d>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n_fft = 64;
        let hop = 16;
        let n_bins = 33;
        let t_frames = 12;
        let out_len = 150;
        let c = Array2::from_shape_fn((n_bins, t_frames), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let d = Array2::from_shape_fn((n_bins, t_frames), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let g: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let dot = |y: &[f64]| -> f64 { y.iter().zip(&g).map(|(a, b)| a * b).sum() };
        let eps = 1e-6;
        let mut c_plus = c.clone();
        c_plus.iter_mut().zip(d.iter()).for_each(|(a, b)| *a += b * eps);
        let mut c_minus = c.clone();
        c_minus.iter_mut().zip(d.iter()).for_each(|(a, b)| *a -= b * eps);
        let numeric = (dot(&istft_single(&c_plus, n_fft, hop, out_len))
            - dot(&istft_single(&c_minus, n_fft, hop, out_len)))
            / (2.0 * eps);

        let adj = istft_adjoint_single(&g, n_fft, hop, n_bins, t_frames);
        let analytic: f64 = adj
            .iter()
            .zip(d.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
            * 2.0;
        assert!(
            (numeric - analytic).abs() < 1e-7,
            "numeric {numeric} vs analytic {analytic}"
        );
    }
}
