//! Blind dereverberation by weighted prediction error: late reverberation
//! is modeled as a linear prediction from frames delayed by `b..=L` and
//! subtracted, with the speech PSD re-estimated between iterations.

use ndarray::{Array2, Array4};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{solve_hermitian, HermitianMatrix};
use crate::stft::ComplexSpectrogram;

#[derive(Debug, Clone, Copy)]
pub struct WpeConfig {
    pub delay_b: usize,
    pub taps_l: usize,
    pub n_iter: usize,
    /// Absolute PSD floor; `None` floors at `1e-8 *` mean input power.
    pub psd_floor: Option<f64>,
}

impl Default for WpeConfig {
    fn default() -> Self {
        WpeConfig {
            delay_b: 3,
            taps_l: 13,
            n_iter: 3,
            psd_floor: None,
        }
    }
}

/// Per-frequency prediction filters, one M×M matrix per lag `b..=L`.
#[derive(Debug, Clone)]
pub struct WpeFilter {
    /// F × (L-b+1) × M × M.
    pub taps: Array4<Complex64>,
    pub delay_b: usize,
    pub taps_l: usize,
}

impl WpeFilter {
    pub fn n_taps(&self) -> usize {
        self.taps_l - self.delay_b + 1
    }
}

pub struct WpeOutput {
    pub dry: ComplexSpectrogram,
    pub filter: WpeFilter,
    /// Maximum-likelihood objective after each iteration:
    /// `sum |d|^2/sigma^2 + M log sigma^2`, non-increasing.
    pub objective: Vec<f64>,
}

const PSD_FLOOR_REL: f64 = 1e-8;

/// Iterative WPE. Each iteration re-estimates the speech PSD from the
/// current dry estimate (floored), solves the per-frequency weighted
/// normal equations for the stacked prediction filter, and subtracts the
/// predicted late reverberation.
pub fn wpe_dereverb(x: &ComplexSpectrogram, config: &WpeConfig) -> Result<WpeOutput> {
    let WpeConfig {
        delay_b: b,
        taps_l: l,
        n_iter,
        psd_floor,
    } = *config;
    if b < 1 || b > l {
        return Err(Error::Size(format!("need 1 <= b <= L, got b={b}, L={l}")));
    }
    if n_iter < 1 {
        return Err(Error::Size("n_iter must be at least 1".into()));
    }
    let (n_bins, n_frames, m) = x.data.dim();
    if n_frames <= l {
        return Err(Error::Size(format!(
            "need more than L={l} frames, got {n_frames}"
        )));
    }
    let n_taps = l - b + 1;
    let p_dim = n_taps * m;

    let mean_power = x.data.iter().map(|c| c.norm_sqr()).sum::<f64>()
        / (n_bins * n_frames * m) as f64;
    let floor = psd_floor.unwrap_or(PSD_FLOOR_REL * mean_power).max(f64::MIN_POSITIVE);

    let mut dry = x.data.clone();
    let mut filter: Array4<Complex64> = Array4::zeros((n_bins, n_taps, m, m));
    let mut objective = Vec::with_capacity(n_iter);

    for _ in 0..n_iter {
        // PSD from the current dry estimate, channel-averaged and floored
        let mut sigma2 = Array2::zeros((n_bins, n_frames));
        for f in 0..n_bins {
            for t in 0..n_frames {
                let mut p = 0.0;
                for ch in 0..m {
                    p += dry[[f, t, ch]].norm_sqr();
                }
                sigma2[[f, t]] = (p / m as f64).max(floor);
            }
        }

        let per_freq: Result<Vec<(Array2<Complex64>, Array2<Complex64>, f64)>> = (0..n_bins)
            .into_par_iter()
            .map(|f| {
                // weighted normal equations over the stacked past
                let mut r: Array2<Complex64> = Array2::zeros((p_dim, p_dim));
                let mut p_mat: Array2<Complex64> = Array2::zeros((p_dim, m));
                let mut past = vec![Complex64::new(0.0, 0.0); p_dim];
                for t in 0..n_frames {
                    fill_past(&x.data, f, t, b, n_taps, m, &mut past);
                    let w = 1.0 / sigma2[[f, t]];
                    for i in 0..p_dim {
                        let xi_w = past[i] * w;
                        for j in 0..=i {
                            let add = xi_w * past[j].conj();
                            r[[i, j]] += add;
                        }
                        for ch in 0..m {
                            p_mat[[i, ch]] += xi_w * x.data[[f, t, ch]].conj();
                        }
                    }
                }
                for i in 0..p_dim {
                    for j in 0..i {
                        r[[j, i]] = r[[i, j]].conj();
                    }
                    r[[i, i]] = Complex64::new(r[[i, i]].re, 0.0);
                }
                let rh = HermitianMatrix::new(r)?;
                let w_f = solve_hermitian(&rh, &p_mat)?;

                // subtract the predicted late reverberation
                let mut dry_f = Array2::zeros((n_frames, m));
                let mut obj = 0.0;
                for t in 0..n_frames {
                    fill_past(&x.data, f, t, b, n_taps, m, &mut past);
                    let mut frame_power = 0.0;
                    for ch in 0..m {
                        let mut pred = Complex64::new(0.0, 0.0);
                        for i in 0..p_dim {
                            pred += w_f[[i, ch]].conj() * past[i];
                        }
                        let d = x.data[[f, t, ch]] - pred;
                        dry_f[[t, ch]] = d;
                        frame_power += d.norm_sqr();
                    }
                    obj += frame_power / sigma2[[f, t]] + m as f64 * sigma2[[f, t]].ln();
                }
                Ok((w_f, dry_f, obj))
            })
            .collect();

        let mut obj_total = 0.0;
        for (f, (w_f, dry_f, obj)) in per_freq?.into_iter().enumerate() {
            for tap in 0..n_taps {
                for i in 0..m {
                    for j in 0..m {
                        filter[[f, tap, i, j]] = w_f[[tap * m + i, j]];
                    }
                }
            }
            for t in 0..n_frames {
                for ch in 0..m {
                    dry[[f, t, ch]] = dry_f[[t, ch]];
                }
            }
            obj_total += obj;
        }
        objective.push(obj_total);
    }

    Ok(WpeOutput {
        dry: ComplexSpectrogram {
            data: dry,
            n_fft: x.n_fft,
            hop: x.hop,
        },
        filter: WpeFilter {
            taps: filter,
            delay_b: b,
            taps_l: l,
        },
        objective,
    })
}

/// Stack `x_{f,t-b} .. x_{f,t-L}` with zeros before the signal start.
fn fill_past(
    x: &ndarray::Array3<Complex64>,
    f: usize,
    t: usize,
    b: usize,
    n_taps: usize,
    m: usize,
    out: &mut [Complex64],
) {
    for tap in 0..n_taps {
        let lag = b + tap;
        for ch in 0..m {
            out[tap * m + ch] = if t >= lag {
                x[[f, t - lag, ch]]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white_spec(rng: &mut ChaCha8Rng, f: usize, t: usize, m: usize) -> ComplexSpectrogram {
        ComplexSpectrogram {
            data: Array3::from_shape_fn((f, t, m), |_| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }),
            n_fft: 2 * (f - 1),
            hop: (f - 1) / 2,
        }
    }

    /// Temporally correlated spectrogram: AR(1) over frames.
    fn colored_spec(rng: &mut ChaCha8Rng, f: usize, t: usize, m: usize) -> ComplexSpectrogram {
        let mut data = Array3::zeros((f, t, m));
        for fi in 0..f {
            for ch in 0..m {
                let mut prev = Complex64::new(0.0, 0.0);
                for ti in 0..t {
                    let inn = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    prev = prev * 0.85 + inn;
                    data[[fi, ti, ch]] = prev;
                }
            }
        }
        ComplexSpectrogram {
            data,
            n_fft: 2 * (f - 1),
            hop: (f - 1) / 2,
        }
    }

    #[test]
    fn white_input_leaves_signal_nearly_untouched() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = white_spec(&mut rng, 2, 8000, 2);
            let out = wpe_dereverb(
                &x,
                &WpeConfig {
                    delay_b: 1,
                    taps_l: 2,
                    n_iter: 2,
                    psd_floor: None,
                },
            )
            .unwrap();
            // taps stay small
            for f in 0..2 {
                for tap in 0..out.filter.n_taps() {
                    let norm: f64 = (0..2)
                        .flat_map(|i| (0..2).map(move |j| (i, j)))
                        .map(|(i, j)| out.filter.taps[[f, tap, i, j]].norm_sqr())
                        .sum::<f64>()
                        .sqrt();
                    assert!(norm < 0.1, "seed {seed} f={f} tap {tap}: norm {norm}");
                }
            }
            // output close to input
            let num: f64 = (&out.dry.data - &x.data).iter().map(|c| c.norm_sqr()).sum();
            let den: f64 = x.data.iter().map(|c| c.norm_sqr()).sum();
            let rel = (num / den).sqrt();
            assert!(rel < 0.05, "seed {seed}: relative change {rel}");
        }
    }

    #[test]
    fn objective_non_increasing_on_colored_input() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = colored_spec(&mut rng, 5, 400, 2);
            let out = wpe_dereverb(
                &x,
                &WpeConfig {
                    delay_b: 2,
                    taps_l: 5,
                    n_iter: 5,
                    psd_floor: None,
                },
            )
            .unwrap();
            for w in out.objective.windows(2) {
                let tol = 1e-6 * w[0].abs().max(1.0);
                assert!(
                    w[1] <= w[0] + tol,
                    "seed {seed}: objective rose {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn ols_oracle_with_unit_psd() {
        // with a huge constant floor the weights are uniform, so one WPE
        // iteration must match plain least-squares linear prediction
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = colored_spec(&mut rng, 3, 120, 2);
        let (b, l, m) = (2usize, 3usize, 2usize);
        let out = wpe_dereverb(
            &x,
            &WpeConfig {
                delay_b: b,
                taps_l: l,
                n_iter: 1,
                psd_floor: Some(1e12),
            },
        )
        .unwrap();

        let n_taps = l - b + 1;
        let p_dim = n_taps * m;
        for f in 0..3 {
            // independent brute-force normal equations (unweighted)
            let mut r = Array2::<Complex64>::zeros((p_dim, p_dim));
            let mut p = Array2::<Complex64>::zeros((p_dim, m));
            for t in 0..120 {
                let mut past = vec![Complex64::new(0.0, 0.0); p_dim];
                fill_past(&x.data, f, t, b, n_taps, m, &mut past);
                for i in 0..p_dim {
                    for j in 0..p_dim {
                        let add = past[i] * past[j].conj();
                        r[[i, j]] += add;
                    }
                    for ch in 0..m {
                        p[[i, ch]] += past[i] * x.data[[f, t, ch]].conj();
                    }
                }
            }
            // solve with the general LU path (independent of solve_hermitian)
            let lu = crate::linalg::Lu::factor(&r).unwrap();
            for ch in 0..m {
                let rhs: Vec<Complex64> = (0..p_dim).map(|i| p[[i, ch]]).collect();
                let w = lu.solve_vec(&rhs);
                for tap in 0..n_taps {
                    for i in 0..m {
                        let got = out.filter.taps[[f, tap, i, ch]];
                        let diff = (got - w[tap * m + i]).norm();
                        assert!(diff < 1e-6, "f={f} tap={tap} [{i},{ch}]: diff {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = colored_spec(&mut rng, 4, 200, 2);
        let c = Complex64::new(0.3, -1.2);
        let scaled = ComplexSpectrogram {
            data: x.data.mapv(|v| v * c),
            n_fft: x.n_fft,
            hop: x.hop,
        };
        let cfg = WpeConfig {
            delay_b: 1,
            taps_l: 3,
            n_iter: 2,
            psd_floor: None,
        };
        let a = wpe_dereverb(&x, &cfg).unwrap();
        let b = wpe_dereverb(&scaled, &cfg).unwrap();
        let max_tap_diff = a
            .filter
            .taps
            .iter()
            .zip(b.filter.taps.iter())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0f64, f64::max);
        assert!(max_tap_diff < 1e-8, "filter moved by {max_tap_diff}");
        let max_out_diff = a
            .dry
            .data
            .iter()
            .zip(b.dry.data.iter())
            .map(|(p, q)| (p * c - q).norm())
            .fold(0.0f64, f64::max);
        assert!(max_out_diff < 1e-8, "output not equivariant: {max_out_diff}");
    }

    #[test]
    fn single_tap_when_l_equals_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = colored_spec(&mut rng, 3, 80, 2);
        let out = wpe_dereverb(
            &x,
            &WpeConfig {
                delay_b: 3,
                taps_l: 3,
                n_iter: 1,
                psd_floor: None,
            },
        )
        .unwrap();
        assert_eq!(out.filter.n_taps(), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = white_spec(&mut rng, 3, 50, 2);
        assert!(wpe_dereverb(
            &x,
            &WpeConfig {
                delay_b: 5,
                taps_l: 3,
                n_iter: 1,
                psd_floor: None
            }
        )
        .is_err());
        assert!(wpe_dereverb(
            &x,
            &WpeConfig {
                delay_b: 1,
                taps_l: 60,
                n_iter: 1,
                psd_floor: None
            }
        )
        .is_err());
        assert!(wpe_dereverb(
            &x,
            &WpeConfig {
                delay_b: 1,
                taps_l: 3,
                n_iter: 0,
                psd_floor: None
            }
        )
        .is_err());
    }
}
