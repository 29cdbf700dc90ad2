//! Miniature 2D image-source room simulator.
//!
//! Produces multichannel mixtures, per-source direct+early reference
//! signals (a resimulation of the same room at RT60 = 0.25 s), and
//! ground-truth azimuths. Wall absorption follows Sabine's formula applied
//! to the 2D room (area over perimeter); image delays land on the sample
//! grid through an 8-tap windowed-sinc interpolator.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::audio_io::{read_wav, TimeSignal};
use crate::beamform::ArrayGeometry;
use crate::error::{Error, Result};
use crate::kv::{self, KvFile};
use crate::{SAMPLE_RATE, SOUND_SPEED};

/// RT60 used when resimulating the direct+early reference signals.
pub const RT60_EARLY: f64 = 0.25;

const MAX_IMAGE_ORDER: usize = 30;

#[derive(Debug, Clone)]
pub enum SourceSignal {
    /// WAV file on disk (first channel is used).
    File(PathBuf),
    /// Seeded amplitude-modulated multi-tone generator.
    Synthetic(u64),
    /// Unit impulse at t = 0.
    Impulse,
}

#[derive(Debug, Clone)]
pub struct SourceSpec {
    pub position: [f64; 2],
    pub signal: SourceSignal,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub room_w: f64,
    pub room_h: f64,
    pub array_center: [f64; 2],
    pub array_radius: f64,
    pub n_mics: usize,
    pub sources: Vec<SourceSpec>,
    pub rt60: f64,
    /// Noise mixing level; `f64::INFINITY` disables noise entirely.
    pub snr_db: f64,
    pub seed: u64,
    pub duration_s: f64,
}

impl SceneSpec {
    pub fn geometry(&self) -> ArrayGeometry {
        ArrayGeometry::circular(self.n_mics, self.array_radius, SAMPLE_RATE as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    /// S×M mixture: reverberant sources plus scaled diffuse noise.
    pub mixture: TimeSignal,
    /// Per-source S×M direct+early references.
    pub references: Vec<TimeSignal>,
    /// Per-source azimuth in [0, 2pi).
    pub doas: Vec<f64>,
}

/// Sabine absorption for the 2D room, clamped away from 0 and 1.
fn sabine_absorption(room_w: f64, room_h: f64, rt60: f64) -> f64 {
    let area = room_w * room_h;
    let perimeter = 2.0 * (room_w + room_h);
    (0.1611 * area / (perimeter * rt60)).clamp(1e-4, 0.9999)
}

/// 8-tap windowed-sinc deposit of a pulse with fractional delay.
fn add_pulse(rir: &mut Vec<f64>, delay_samples: f64, gain: f64) {
    let base = delay_samples.floor() as isize;
    for k in -3..=4isize {
        let idx = base + k;
        if idx < 0 {
            continue;
        }
        let t = idx as f64 - delay_samples;
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * t).sin() / (std::f64::consts::PI * t)
        };
        let window = 0.5 * (1.0 + (std::f64::consts::PI * t / 4.0).cos());
        let idx = idx as usize;
        if idx >= rir.len() {
            rir.resize(idx + 1, 0.0);
        }
        rir[idx] += gain * sinc * window;
    }
}

/// Room impulse response from `source` to `mic` via the 2D image-source
/// model. Gains follow `(1-alpha)^(order/2) / distance`.
fn image_source_rir(
    room_w: f64,
    room_h: f64,
    source: [f64; 2],
    mic: [f64; 2],
    rt60: f64,
) -> Vec<f64> {
    let alpha = sabine_absorption(room_w, room_h, rt60);
    let max_order = ((rt60 * SOUND_SPEED / room_w.min(room_h)).ceil() as usize)
        .clamp(1, MAX_IMAGE_ORDER);
    let fs = SAMPLE_RATE as f64;
    let mut rir = Vec::new();
    let m_range = (max_order as isize + 1) / 2 + 1;
    for qx in 0..2isize {
        for mx in -m_range..=m_range {
            let order_x = (mx - qx).unsigned_abs() + mx.unsigned_abs();
            if order_x > max_order {
                continue;
            }
            let img_x = (1 - 2 * qx) as f64 * source[0] + 2.0 * mx as f64 * room_w;
            for qy in 0..2isize {
                for my in -m_range..=m_range {
                    let order = order_x + (my - qy).unsigned_abs() + my.unsigned_abs();
                    if order > max_order {
                        continue;
                    }
                    let img_y = (1 - 2 * qy) as f64 * source[1] + 2.0 * my as f64 * room_h;
                    let dist = ((img_x - mic[0]).powi(2) + (img_y - mic[1]).powi(2))
                        .sqrt()
                        .max(0.01);
                    let gain = (1.0 - alpha).powf(order as f64 / 2.0) / dist;
                    let delay = dist / SOUND_SPEED * fs;
                    add_pulse(&mut rir, delay, gain);
                }
            }
        }
    }
    rir
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Linear convolution via FFT, truncated to `out_len`.
pub(crate) fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    let full = a.len() + b.len() - 1;
    let n = next_pow2(full);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = a
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    let mut fb: Vec<Complex64> = b
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < full { fa[i].re * scale } else { 0.0 })
        .collect()
}

/// Amplitude-modulated multi-tone "speech-like" test signal: five
/// harmonics with seeded random phases under a 4 Hz modulation envelope.
pub fn synthetic_source(id: u64, seed: u64, n_samples: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(id));
    let fs = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(120.0..260.0);
    let phases: Vec<f64> = (0..5)
        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let mod_phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let mut out: Vec<f64> = (0..n_samples)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * 4.0 * t + mod_phase).cos());
            let mut v = 0.0;
            for (h, phi) in phases.iter().enumerate() {
                let harmonic = (h + 1) as f64;
                v += (2.0 * std::f64::consts::PI * f0 * harmonic * t + phi).sin() / harmonic;
            }
            env * v
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
    let norm = 0.5 / peak;
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

fn resolve_source_signal(spec: &SourceSpec, scene: &SceneSpec, n_samples: usize) -> Result<Vec<f64>> {
    match &spec.signal {
        SourceSignal::File(path) => {
            let sig = read_wav(path)?;
            let mut out = vec![0.0; n_samples];
            for (i, slot) in out.iter_mut().enumerate() {
                if i < sig.len() {
                    *slot = sig.samples[[i, 0]];
                }
            }
            Ok(out)
        }
        SourceSignal::Synthetic(id) => Ok(synthetic_source(*id, scene.seed, n_samples)),
        SourceSignal::Impulse => {
            let mut out = vec![0.0; n_samples];
            out[0] = 1.0;
            Ok(out)
        }
    }
}

fn validate(spec: &SceneSpec) -> Result<()> {
    if spec.sources.is_empty() {
        return Err(Error::Spec("scene has no sources".into()));
    }
    if spec.n_mics < 2 {
        return Err(Error::Spec("need at least 2 microphones".into()));
    }
    if spec.rt60 <= 0.0 {
        return Err(Error::Spec("rt60 must be positive".into()));
    }
    if spec.duration_s <= 0.0 {
        return Err(Error::Spec("duration must be positive".into()));
    }
    let inside = |p: [f64; 2]| p[0] > 0.0 && p[0] < spec.room_w && p[1] > 0.0 && p[1] < spec.room_h;
    for s in &spec.sources {
        if !inside(s.position) {
            return Err(Error::Spec(format!(
                "source at {:?} lies outside the {}x{} room",
                s.position, spec.room_w, spec.room_h
            )));
        }
    }
    let c = spec.array_center;
    if !inside([c[0] - spec.array_radius, c[1] - spec.array_radius])
        || !inside([c[0] + spec.array_radius, c[1] + spec.array_radius])
    {
        return Err(Error::Spec("array does not fit inside the room".into()));
    }
    Ok(())
}

/// Render one source through the room at the given RT60. Returns S×M.
fn render_source(
    scene: &SceneSpec,
    dry: &[f64],
    position: [f64; 2],
    rt60: f64,
) -> Array2<f64> {
    let geometry = scene.geometry();
    let s = dry.len();
    let mut out = Array2::zeros((s, scene.n_mics));
    for (m, offset) in geometry.positions.iter().enumerate() {
        let mic = [
            scene.array_center[0] + offset[0],
            scene.array_center[1] + offset[1],
        ];
        let rir = image_source_rir(scene.room_w, scene.room_h, position, mic, rt60);
        let wet = fft_convolve(dry, &rir, s);
        for (i, v) in wet.into_iter().enumerate() {
            out[[i, m]] = v;
        }
    }
    out
}

/// Run the image-source simulation for a scene.
pub fn simulate(scene: &SceneSpec) -> Result<SimResult> {
    validate(scene)?;
    let n_samples = (scene.duration_s * SAMPLE_RATE as f64).round() as usize;

    let mut sum_reverb: Array2<f64> = Array2::zeros((n_samples, scene.n_mics));
    let mut references = Vec::with_capacity(scene.sources.len());
    let mut doas = Vec::with_capacity(scene.sources.len());
    for src in &scene.sources {
        let dry = resolve_source_signal(src, scene, n_samples)?;
        let wet = render_source(scene, &dry, src.position, scene.rt60);
        sum_reverb += &wet;
        let early = render_source(scene, &dry, src.position, RT60_EARLY);
        references.push(TimeSignal {
            samples: early,
            sample_rate: SAMPLE_RATE,
        });
        let dx = src.position[0] - scene.array_center[0];
        let dy = src.position[1] - scene.array_center[1];
        doas.push(dy.atan2(dx).rem_euclid(2.0 * std::f64::consts::PI));
    }

    let mixture = if scene.snr_db.is_infinite() && scene.snr_db > 0.0 {
        sum_reverb
    } else {
        let noise = diffuse_noise(n_samples, scene.n_mics, scene.seed);
        let target = TimeSignal {
            samples: sum_reverb,
            sample_rate: SAMPLE_RATE,
        };
        mix_at_snr(&target, &noise, scene.snr_db)?.samples
    };

    Ok(SimResult {
        mixture: TimeSignal {
            samples: mixture,
            sample_rate: SAMPLE_RATE,
        },
        references,
        doas,
    })
}

/// Independent white Gaussian noise per channel, smoothed once by
/// averaging each channel with its circular neighbors.
fn diffuse_noise(n_samples: usize, n_mics: usize, seed: u64) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xD1FFu64 << 32));
    let raw = Array2::from_shape_fn((n_samples, n_mics), |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let mut smoothed = Array2::zeros((n_samples, n_mics));
    for i in 0..n_samples {
        for m in 0..n_mics {
            let prev = (m + n_mics - 1) % n_mics;
            let next = (m + 1) % n_mics;
            smoothed[[i, m]] = (raw[[i, prev]] + raw[[i, m]] + raw[[i, next]]) / 3.0;
        }
    }
    TimeSignal {
        samples: smoothed,
        sample_rate: SAMPLE_RATE,
    }
}

/// `target + g * noise` with `g` chosen so the target-to-scaled-noise energy
/// ratio equals `snr_db`. Infinite SNR returns the target unchanged.
pub fn mix_at_snr(target: &TimeSignal, noise: &TimeSignal, snr_db: f64) -> Result<TimeSignal> {
    if target.samples.dim() != noise.samples.dim() {
        return Err(Error::Shape(format!(
            "target {:?} vs noise {:?}",
            target.samples.dim(),
            noise.samples.dim()
        )));
    }
    let noise_energy = noise.energy();
    if noise_energy <= 0.0 {
        return Err(Error::Value("noise has zero energy".into()));
    }
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(target.clone());
    }
    let gain = (target.energy() / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(TimeSignal {
        samples: &target.samples + &(&noise.samples * gain),
        sample_rate: target.sample_rate,
    })
}

/// Parse a scene manifest: `key = value` lines with one `source = x y signal`
/// line per source. Relative WAV paths resolve against `base_dir`.
pub fn parse_scene(text: &str, base_dir: &Path) -> Result<SceneSpec> {
    let file = KvFile::parse(text)?;
    let pairs = &file.globals;
    let require = |key: &str| {
        kv::get(pairs, key).ok_or_else(|| Error::Spec(format!("missing scene key {key:?}")))
    };

    let mut sources = Vec::new();
    for pair in kv::get_all(pairs, "source") {
        let tokens: Vec<&str> = pair.value.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Parse {
                line: pair.line,
                msg: "source needs `x y signal`".into(),
            });
        }
        let parse_coord = |tok: &str| -> Result<f64> {
            tok.parse().map_err(|_| Error::Parse {
                line: pair.line,
                msg: format!("bad coordinate {tok:?}"),
            })
        };
        let signal = if let Some(id) = tokens[2].strip_prefix("synthetic:") {
            SourceSignal::Synthetic(id.parse().map_err(|_| Error::Parse {
                line: pair.line,
                msg: format!("bad synthetic id {:?}", tokens[2]),
            })?)
        } else if tokens[2] == "impulse" {
            SourceSignal::Impulse
        } else {
            let p = PathBuf::from(tokens[2]);
            SourceSignal::File(if p.is_absolute() { p } else { base_dir.join(p) })
        };
        sources.push(SourceSpec {
            position: [parse_coord(tokens[0])?, parse_coord(tokens[1])?],
            signal,
        });
    }

    let center_pair = require("array_center")?;
    let center: Vec<f64> = kv::parse_list(center_pair)?;
    if center.len() != 2 {
        return Err(Error::Parse {
            line: center_pair.line,
            msg: "array_center needs two coordinates".into(),
        });
    }

    Ok(SceneSpec {
        room_w: kv::parse_f64(require("room_w")?)?,
        room_h: kv::parse_f64(require("room_h")?)?,
        array_center: [center[0], center[1]],
        array_radius: kv::parse_f64(require("array_radius")?)?,
        n_mics: kv::parse_typed(require("n_mics")?)?,
        sources,
        rt60: kv::parse_f64(require("rt60")?)?,
        snr_db: kv::get(pairs, "snr_db").map(kv::parse_f64).transpose()?.unwrap_or(f64::INFINITY),
        seed: kv::get(pairs, "seed").map(kv::parse_typed).transpose()?.unwrap_or(0),
        duration_s: kv::get(pairs, "duration_s")
            .map(kv::parse_f64)
            .transpose()?
            .unwrap_or(2.0),
    })
}
