//! DOA-conditioned time-frequency mask estimator.
//!
//! A per-bin MLP over a ±C-frame feature context, modulated by a small
//! attractor network that maps the target direction to per-unit scales and
//! shifts after the first hidden layer. Deliberately desk-scale: it trains
//! in seconds while keeping the mask contract `omega = F(X, phi)`.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::beamform::{steering_from_doa, ArrayGeometry, Mask};
use crate::error::{Error, Result};
use crate::stft::ComplexSpectrogram;

const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskNetConfig {
    pub n_mics: usize,
    /// Hidden width of both feature layers and the attractor.
    pub hidden: usize,
    /// Context radius in frames on each side.
    pub context: usize,
}

impl MaskNetConfig {
    pub fn new(n_mics: usize) -> Self {
        MaskNetConfig {
            n_mics,
            hidden: 64,
            context: 2,
        }
    }

    /// Per-bin feature size: M log magnitudes, 2(M-1) phase-difference
    /// components, one delay-sum log magnitude.
    pub fn feat_dim(&self) -> usize {
        3 * self.n_mics - 1
    }

    pub fn input_dim(&self) -> usize {
        self.feat_dim() * (2 * self.context + 1)
    }
}

/// All trainable parameters. The flat layout (used by the optimizer, the
/// gradient engine, and the checkpoint format) is the field order below,
/// each array row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskNetParams {
    pub config: MaskNetConfig,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array1<f64>,
    pub b3: f64,
    pub wa: Array2<f64>,
    pub ba: Array1<f64>,
    pub wg: Array2<f64>,
    pub bg: Array1<f64>,
    pub wb: Array2<f64>,
    pub bb: Array1<f64>,
}

impl MaskNetParams {
    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init(config: MaskNetConfig, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let d_in = config.input_dim();
        let mut mat = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let w1 = mat(h, d_in);
        let w2 = mat(h, h);
        let w3_m = mat(1, h);
        let wa = mat(h, 2);
        let wg = mat(h, h);
        let wb = mat(h, h);
        MaskNetParams {
            config,
            w1,
            b1: Array1::zeros(h),
            w2,
            b2: Array1::zeros(h),
            w3: w3_m.row(0).to_owned(),
            b3: 0.0,
            wa,
            ba: Array1::zeros(h),
            wg,
            bg: Array1::zeros(h),
            wb,
            bb: Array1::zeros(h),
        }
    }

    pub fn zeros(config: MaskNetConfig) -> Self {
        let h = config.hidden;
        let d_in = config.input_dim();
        MaskNetParams {
            config,
            w1: Array2::zeros((h, d_in)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, h)),
            b2: Array1::zeros(h),
            w3: Array1::zeros(h),
            b3: 0.0,
            wa: Array2::zeros((h, 2)),
            ba: Array1::zeros(h),
            wg: Array2::zeros((h, h)),
            bg: Array1::zeros(h),
            wb: Array2::zeros((h, h)),
            bb: Array1::zeros(h),
        }
    }

    pub fn flat_len(&self) -> usize {
        let h = self.config.hidden;
        let d_in = self.config.input_dim();
        h * d_in + h + h * h + h + h + 1 + h * 2 + h + h * h + h + h * h + h
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.push(self.b3);
        out.extend(self.wa.iter());
        out.extend(self.ba.iter());
        out.extend(self.wg.iter());
        out.extend(self.bg.iter());
        out.extend(self.wb.iter());
        out.extend(self.bb.iter());
        out
    }

    pub fn from_flat(config: MaskNetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = MaskNetParams::zeros(config);
        if flat.len() != p.flat_len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                p.flat_len()
            )));
        }
        let mut it = flat.iter().copied();
        let fill2 = |a: &mut Array2<f64>, it: &mut dyn Iterator<Item = f64>| {
            for v in a.iter_mut() {
                *v = it.next().unwrap();
            }
        };
        fill2(&mut p.w1, &mut it);
        for v in p.b1.iter_mut() {
            *v = it.next().unwrap();
        }
        fill2(&mut p.w2, &mut it);
        for v in p.b2.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in p.w3.iter_mut() {
            *v = it.next().unwrap();
        }
        p.b3 = it.next().unwrap();
        fill2(&mut p.wa, &mut it);
        for v in p.ba.iter_mut() {
            *v = it.next().unwrap();
        }
        fill2(&mut p.wg, &mut it);
        for v in p.bg.iter_mut() {
            *v = it.next().unwrap();
        }
        fill2(&mut p.wb, &mut it);
        for v in p.bb.iter_mut() {
            *v = it.next().unwrap();
        }
        Ok(p)
    }
}

/// Per-bin features: log channel magnitudes, inter-channel phase
/// differences against channel 0 as cos/sin, and the log magnitude of the
/// delay-sum beamformer steered at `doa`. Returns F×T×feat_dim.
pub fn extract_features(
    x: &ComplexSpectrogram,
    doa: f64,
    geometry: &ArrayGeometry,
) -> Result<Array3<f64>> {
    let (n_bins, n_frames, m) = x.data.dim();
    if m < 2 {
        return Err(Error::Size("feature extraction needs at least 2 channels".into()));
    }
    if geometry.n_mics() != m {
        return Err(Error::Shape("geometry does not match spectrogram".into()));
    }
    let steering = steering_from_doa(doa, geometry, x.n_fft, 0);
    let feat_dim = 3 * m - 1;
    let mut out = Array3::zeros((n_bins, n_frames, feat_dim));
    for f in 0..n_bins {
        for t in 0..n_frames {
            for ch in 0..m {
                out[[f, t, ch]] = (x.data[[f, t, ch]].norm() + LOG_FLOOR).ln();
            }
            let x0 = x.data[[f, t, 0]];
            for ch in 1..m {
                let z = x.data[[f, t, ch]] * x0.conj();
                let n = z.norm();
                let (c, s) = if n > 1e-300 { (z.re / n, z.im / n) } else { (1.0, 0.0) };
                out[[f, t, m + 2 * (ch - 1)]] = c;
                out[[f, t, m + 2 * (ch - 1) + 1]] = s;
            }
            let mut dsb = num_complex::Complex64::new(0.0, 0.0);
            for ch in 0..m {
                let a = steering.vectors[[f, ch]];
                dsb += x.data[[f, t, ch]] * a.conj() / a.norm();
            }
            dsb /= m as f64;
            out[[f, t, feat_dim - 1]] = (dsb.norm() + LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Stack features over the ±C context into the network input matrix,
/// one column per (f, t) bin with column index `f * T + t`. Frames beyond
/// the edges contribute zeros.
pub fn context_input(features: &Array3<f64>, context: usize) -> Array2<f64> {
    let (n_bins, n_frames, feat_dim) = features.dim();
    let d_in = feat_dim * (2 * context + 1);
    let mut z = Array2::zeros((d_in, n_bins * n_frames));
    for f in 0..n_bins {
        for t in 0..n_frames {
            let col = f * n_frames + t;
            for (ci, off) in (-(context as isize)..=context as isize).enumerate() {
                let tt = t as isize + off;
                if tt < 0 || tt >= n_frames as isize {
                    continue;
                }
                for d in 0..feat_dim {
                    z[[ci * feat_dim + d, col]] = features[[f, tt as usize, d]];
                }
            }
        }
    }
    z
}

/// Attractor conditioning: map `[cos doa, sin doa]` to per-unit scale and
/// shift vectors.
pub fn attractor(params: &MaskNetParams, doa: f64) -> (Array1<f64>, Array1<f64>) {
    let h = params.config.hidden;
    let input = [doa.cos(), doa.sin()];
    let mut hidden = Array1::zeros(h);
    for i in 0..h {
        let pre = params.wa[[i, 0]] * input[0] + params.wa[[i, 1]] * input[1] + params.ba[i];
        hidden[i] = pre.tanh();
    }
    let gamma = params.wg.dot(&hidden) + &params.bg;
    let beta = params.wb.dot(&hidden) + &params.bb;
    (gamma, beta)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Forward pass: features -> mask in (0, 1).
pub fn masknet_forward(
    params: &MaskNetParams,
    features: &Array3<f64>,
    doa: f64,
) -> Result<Mask> {
    let (n_bins, n_frames, feat_dim) = features.dim();
    if feat_dim != params.config.feat_dim() {
        return Err(Error::Shape(format!(
            "feature dim {feat_dim} does not match config ({})",
            params.config.feat_dim()
        )));
    }
    let z = context_input(features, params.config.context);
    let (gamma, beta) = attractor(params, doa);

    let mut h1 = params.w1.dot(&z);
    for (mut col, _) in h1.axis_iter_mut(ndarray::Axis(1)).zip(0..) {
        for i in 0..params.config.hidden {
            col[i] = (col[i] + params.b1[i]).tanh();
            col[i] = gamma[i] * col[i] + beta[i];
        }
    }
    let mut h2 = params.w2.dot(&h1);
    for mut col in h2.axis_iter_mut(ndarray::Axis(1)) {
        for i in 0..params.config.hidden {
            col[i] = (col[i] + params.b2[i]).tanh();
        }
    }
    let logits = params.w3.dot(&h2);
    let mut mask = Array2::zeros((n_bins, n_frames));
    for f in 0..n_bins {
        for t in 0..n_frames {
            mask[[f, t]] = sigmoid(logits[f * n_frames + t] + params.b3);
        }
    }
    Ok(Mask { values: mask })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DBMN";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian binary parameter checkpoint (layout in the README).
pub fn save_params(params: &MaskNetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [
        params.config.n_mics,
        params.config.hidden,
        params.config.context,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in params.to_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<MaskNetParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a mask estimator checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let config = MaskNetConfig {
        n_mics: dim(0),
        hidden: dim(1),
        context: dim(2),
    };
    let flat: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MaskNetParams::from_flat(config, &flat)
}
