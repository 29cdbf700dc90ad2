//! Run-time adaptation: mint pseudo ground-truth from WPE + FastMNMF,
//! quality-gate it, estimate DOAs, and fine-tune the mask estimator with a
//! replay buffer of pretraining data.
//!
//! The dual-process contract: enhancement reads parameter snapshots from a
//! [`ParamStore`] while a single fine-tuning writer swaps in complete
//! parameter sets atomically.

use std::sync::{Arc, RwLock};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::TimeSignal;
use crate::autodiff::{loss_and_grad, AdamState, BatchItem, DiffConfig, ADAM_WEIGHT_DECAY};
use crate::beamform::{apply_wpd, mask_statistics, wpd_filter, ArrayGeometry, Mask, WpdConfig};
use crate::doa::doa_music;
use crate::error::{Error, Result};
use crate::fastmnmf::{fastmnmf_fit, fastmnmf_init, fastmnmf_separate, reproject_source, FastMnmfConfig};
use crate::masknet::{extract_features, masknet_forward, MaskNetParams};
use crate::metrics::{si_sdr, METRIC_CAP_DB};
use crate::stft::{stft_forward, stft_inverse, ComplexSpectrogram, StftConfig};
use crate::wpe::{wpe_dereverb, WpeConfig};
use crate::SAMPLE_RATE;

/// One quality-gated training example minted at run time.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    /// Spectrogram of the raw observed mixture window.
    pub mixture: ComplexSpectrogram,
    /// Pseudo ground-truth speech (single channel, window length).
    pub d_ref: TimeSignal,
    /// Pseudo ground-truth azimuth.
    pub doa: f64,
    /// Scorer output in dB; at least `alpha` by construction.
    pub quality: f64,
}

/// Quality scorer for separated candidates. The paper's learned
/// non-intrusive scorer is out of scope; `Oracle` scores against known
/// references (usable in simulation), `Heuristic` is fully blind.
#[derive(Debug, Clone)]
pub enum Scorer {
    /// Intrusive SI-SDR against the best-matching reference signal.
    Oracle { references: Vec<TimeSignal> },
    /// Blind dominance ratio against the other separated sources.
    Heuristic,
    /// Fixed score for every candidate (gate always open or closed).
    Constant(f64),
}

impl Scorer {
    pub fn score(
        &self,
        candidate: &TimeSignal,
        window_start: usize,
        others: &[TimeSignal],
    ) -> f64 {
        match self {
            Scorer::Oracle { references } => references
                .iter()
                .map(|r| {
                    let window = r.window(window_start, candidate.len());
                    oracle_scorer(candidate, &window).unwrap_or(-METRIC_CAP_DB)
                })
                .fold(-METRIC_CAP_DB, f64::max),
            Scorer::Heuristic => heuristic_scorer(candidate, others),
            Scorer::Constant(v) => *v,
        }
    }
}

/// Intrusive scale-invariant SDR of a candidate against a reference.
pub fn oracle_scorer(candidate: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    si_sdr(candidate, reference)
}

const HEURISTIC_EPS: f64 = 1e-8;

/// Blind quality proxy: the candidate's energy against the strongest
/// component of it that the other separated sources explain. Identical
/// candidates score ~0 dB (full mutual leakage); a lone candidate scores
/// high.
pub fn heuristic_scorer(candidate: &TimeSignal, others: &[TimeSignal]) -> f64 {
    let energy = candidate.energy();
    let mut leak: f64 = 0.0;
    for other in others {
        let other_energy = other.energy();
        if other_energy <= 0.0 {
            continue;
        }
        let dot: f64 = candidate
            .samples
            .iter()
            .zip(other.samples.iter())
            .map(|(a, b)| a * b)
            .sum();
        leak = leak.max(dot * dot / other_energy);
    }
    (10.0 * (energy / (HEURISTIC_EPS + leak)).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

/// Back-end configuration for label minting and fine-tuning.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    /// Non-overlapping analysis window in seconds.
    pub window_s: f64,
    /// Quality gate in dB.
    pub alpha_db: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub doa_grid_deg: f64,
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    pub mnmf: FastMnmfConfig,
    pub wpd: WpdConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            window_s: 30.0,
            alpha_db: 10.0,
            steps: 50,
            lr: 4e-5,
            batch: 4,
            seed: 0,
            doa_grid_deg: 1.0,
            stft: StftConfig::default(),
            wpe: WpeConfig::default(),
            mnmf: FastMnmfConfig::default(),
            wpd: WpdConfig::default(),
        }
    }
}

impl AdaptConfig {
    /// Desk-scale settings used by the test suite: 4 s windows, 256-point
    /// STFT, small separation model.
    pub fn desk() -> Self {
        AdaptConfig {
            window_s: 4.0,
            steps: 20,
            stft: StftConfig::desk(),
            mnmf: FastMnmfConfig {
                n_sources: 3,
                n_bases: 4,
                n_iter: 30,
                seed: 0,
            },
            ..AdaptConfig::default()
        }
    }
}

/// Mask-based WPD enhancement of one window. Returns the beamformed
/// single-channel spectrogram and the mask that produced it.
pub fn enhance(
    params: &MaskNetParams,
    x: &ComplexSpectrogram,
    doa: f64,
    geometry: &ArrayGeometry,
    wpd: &WpdConfig,
) -> Result<(Array2<Complex64>, Mask)> {
    let feats = extract_features(x, doa, geometry)?;
    let mask = masknet_forward(params, &feats, doa)?;
    let stats = mask_statistics(x, &mask, wpd.delay_b, wpd.taps_l)?;
    let filter = wpd_filter(&stats, x.channels(), wpd.ref_channel)?;
    Ok((apply_wpd(x, &filter)?, mask))
}

/// Dereverberate, separate, score, gate, and attach DOAs for every
/// non-overlapping window of the mixture. Windows shorter than
/// `window_s` at the tail are dropped; zero full windows is an empty
/// result, not an error.
pub fn mint_pseudo_labels(
    mixture: &TimeSignal,
    scorer: &Scorer,
    config: &AdaptConfig,
    geometry: &ArrayGeometry,
) -> Result<Vec<PseudoLabel>> {
    let win = (config.window_s * SAMPLE_RATE as f64).round() as usize;
    if win == 0 {
        return Err(Error::Size("window must span at least one sample".into()));
    }
    let n_windows = mixture.len() / win;
    let mut labels = Vec::new();
    for w in 0..n_windows {
        let start = w * win;
        let window = mixture.window(start, win);
        let x = stft_forward(&window, config.stft.n_fft, config.stft.hop)?;

        let dry = wpe_dereverb(&x, &config.wpe)?.dry;
        let mut mnmf_cfg = config.mnmf;
        mnmf_cfg.seed = config.mnmf.seed.wrapping_add(w as u64 * 7919);
        let model = fastmnmf_fit(&dry, fastmnmf_init(&dry, &mnmf_cfg), mnmf_cfg.n_iter)?;
        let separated = fastmnmf_separate(&dry, &model, config.wpd.ref_channel)?;

        let candidates: Vec<TimeSignal> = separated
            .iter()
            .map(|spec| {
                stft_inverse(
                    &ComplexSpectrogram::from_single(
                        spec.clone(),
                        config.stft.n_fft,
                        config.stft.hop,
                    ),
                    win,
                )
            })
            .collect::<Result<_>>()?;

        for (n, candidate) in candidates.iter().enumerate() {
            let others: Vec<TimeSignal> = candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != n)
                .map(|(_, c)| c.clone())
                .collect();
            let quality = scorer.score(candidate, start, &others);
            if quality < config.alpha_db {
                continue;
            }
            let projected = reproject_source(&dry, &model, n)?;
            let doa = doa_music(&projected, geometry, 1, config.doa_grid_deg)?[0];
            labels.push(PseudoLabel {
                mixture: x.clone(),
                d_ref: candidate.clone(),
                doa,
                quality,
            });
        }
    }
    Ok(labels)
}

/// Deterministic shuffled-cycle index sampler.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.shuffle();
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }
}

/// Batch composition: half pseudo labels, half replay, with at least one
/// replay item whenever the batch has room for it and replay exists.
pub(crate) fn plan_batches(
    n_labels: usize,
    n_replay: usize,
    batch: usize,
    steps: usize,
    seed: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let replay_per_batch = if n_replay == 0 || batch < 2 {
        0
    } else {
        (batch / 2).max(1)
    };
    let labels_per_batch = batch - replay_per_batch;
    let mut label_sampler = Sampler::new(n_labels, seed.wrapping_add(1));
    let mut replay_sampler = Sampler::new(n_replay.max(1), seed.wrapping_add(2));
    (0..steps)
        .map(|_| {
            let labels = (0..labels_per_batch).map(|_| label_sampler.next()).collect();
            let replay = (0..replay_per_batch).map(|_| replay_sampler.next()).collect();
            (labels, replay)
        })
        .collect()
}

/// Supervised training on a fixed pool of triples (used for pretraining).
pub fn train(
    params: &MaskNetParams,
    items: &[BatchItem],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    wpd: &WpdConfig,
    geometry: &ArrayGeometry,
) -> Result<MaskNetParams> {
    if items.is_empty() {
        return Err(Error::Size("training pool is empty".into()));
    }
    let config = DiffConfig {
        wpd: *wpd,
        geometry: geometry.clone(),
    };
    let mut sampler = Sampler::new(items.len(), seed);
    let mut state = AdamState::new(params.flat_len());
    let mut current = params.clone();
    for _ in 0..steps {
        let batch_items: Vec<BatchItem> = (0..batch.max(1))
            .map(|_| items[sampler.next()].clone())
            .collect();
        let (_, grad) = loss_and_grad(&current, &batch_items, &config)?;
        current = state.step(&current, &grad, lr, ADAM_WEIGHT_DECAY);
    }
    Ok(current)
}

/// Fine-tune on pseudo labels with a replay buffer. Each batch mixes both
/// pools; an empty replay buffer is allowed but logged.
pub fn fine_tune(
    params: &MaskNetParams,
    labels: &[PseudoLabel],
    replay: &[BatchItem],
    config: &AdaptConfig,
    geometry: &ArrayGeometry,
) -> Result<MaskNetParams> {
    if labels.is_empty() {
        return Err(Error::Size("no pseudo labels to fine-tune on".into()));
    }
    if replay.is_empty() {
        log::warn!("fine-tuning without replay data; adaptation may drift");
    }
    let diff_config = DiffConfig {
        wpd: config.wpd,
        geometry: geometry.clone(),
    };
    let label_items: Vec<BatchItem> = labels
        .iter()
        .map(|l| BatchItem {
            x: l.mixture.clone(),
            doa: l.doa,
            d_ref: l.d_ref.clone(),
        })
        .collect();
    let plan = plan_batches(
        label_items.len(),
        replay.len(),
        config.batch.max(1),
        config.steps,
        config.seed,
    );
    let mut state = AdamState::new(params.flat_len());
    let mut current = params.clone();
    for (label_idx, replay_idx) in plan {
        let mut batch_items: Vec<BatchItem> = Vec::with_capacity(config.batch);
        batch_items.extend(label_idx.into_iter().map(|i| label_items[i].clone()));
        batch_items.extend(replay_idx.into_iter().map(|i| replay[i].clone()));
        let (_, grad) = loss_and_grad(&current, &batch_items, &diff_config)?;
        current = state.step(&current, &grad, config.lr, ADAM_WEIGHT_DECAY);
    }
    Ok(current)
}

/// Atomic parameter hand-off between the fine-tuning writer and
/// enhancement readers: readers always see a complete parameter set.
pub struct ParamStore {
    inner: RwLock<Arc<MaskNetParams>>,
}

impl ParamStore {
    pub fn new(params: MaskNetParams) -> Self {
        ParamStore {
            inner: RwLock::new(Arc::new(params)),
        }
    }

    pub fn snapshot(&self) -> Arc<MaskNetParams> {
        self.inner.read().expect("store poisoned").clone()
    }

    pub fn swap(&self, params: MaskNetParams) {
        *self.inner.write().expect("store poisoned") = Arc::new(params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masknet::MaskNetConfig;
    use ndarray::Array2;
    use rand::Rng;

    fn sig(seed: u64, len: usize) -> TimeSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSignal::new(Array2::from_shape_fn((len, 1), |_| rng.gen_range(-0.5..0.5))).unwrap()
    }

    #[test]
    fn oracle_scorer_reference_cases() {
        let r = sig(1, 200);
        assert_eq!(oracle_scorer(&r, &r).unwrap(), METRIC_CAP_DB);
        let doubled = TimeSignal::new(&r.samples * 2.0).unwrap();
        assert_eq!(oracle_scorer(&doubled, &r).unwrap(), METRIC_CAP_DB);

        // near-orthogonal random pair scores far below zero
        let other = sig(2, 200);
        let dot: f64 = r
            .samples
            .iter()
            .zip(other.samples.iter())
            .map(|(a, b)| a * b)
            .sum();
        let orth = TimeSignal::new(&other.samples - &(&r.samples * (dot / r.energy()))).unwrap();
        assert!(oracle_scorer(&orth, &r).unwrap() <= -40.0);
    }

    #[test]
    fn heuristic_scorer_reference_cases() {
        let c = sig(3, 300);
        let lone = heuristic_scorer(&c, &[]);
        assert!(lone > 40.0, "lone candidate scored {lone}");

        let twin = heuristic_scorer(&c, &[c.clone()]);
        assert!(twin.abs() < 0.5, "identical candidates scored {twin}");

        let other = sig(4, 300);
        let distinct = heuristic_scorer(&c, &[other]);
        assert!(distinct > twin);
    }

    #[test]
    fn batch_plan_always_holds_replay() {
        let plan = plan_batches(5, 7, 4, 20, 9);
        assert_eq!(plan.len(), 20);
        for (labels, replay) in &plan {
            assert_eq!(labels.len() + replay.len(), 4);
            assert!(!replay.is_empty());
            assert!(!labels.is_empty());
        }
        // deterministic
        assert_eq!(
            plan_batches(5, 7, 4, 20, 9)
                .iter()
                .map(|(a, b)| (a.clone(), b.clone()))
                .collect::<Vec<_>>(),
            plan
        );
        // no replay pool: batches are labels only
        for (labels, replay) in plan_batches(5, 0, 4, 8, 1) {
            assert_eq!(labels.len(), 4);
            assert!(replay.is_empty());
        }
    }

    #[test]
    fn param_store_swaps_complete_snapshots() {
        let cfg = MaskNetConfig {
            n_mics: 2,
            hidden: 4,
            context: 0,
        };
        let store = Arc::new(ParamStore::new(MaskNetParams::init(cfg, 0)));
        let writer = {
            let store = store.clone();
            std::thread::spawn(move || {
                for seed in 1..50u64 {
                    store.swap(MaskNetParams::init(cfg, seed));
                }
            })
        };
        let reader = {
            let store = store.clone();
            std::thread::spawn(move || {
                for _ in 0..200 {
                    let snap = store.snapshot();
                    // a torn update would break the flat length invariant
                    assert_eq!(snap.to_flat().len(), snap.flat_len());
                }
            })
        };
        writer.join().unwrap();
        reader.join().unwrap();
    }

    #[test]
    fn constant_scorer_gates() {
        // tiny scene so the pipeline runs fast
        let scene = crate::metrics::random_scene(3, 2, 0.3, f64::INFINITY, 1.0, 4, 0.05);
        let sim = crate::roomsim::simulate(&scene).unwrap();
        let geometry = scene.geometry();
        let mut cfg = AdaptConfig::desk();
        cfg.window_s = 0.5;
        cfg.mnmf.n_sources = 2;
        cfg.mnmf.n_iter = 3;
        cfg.wpe.n_iter = 1;
        cfg.wpe.taps_l = 5;

        let closed = mint_pseudo_labels(
            &sim.mixture,
            &Scorer::Constant(f64::NEG_INFINITY),
            &cfg,
            &geometry,
        )
        .unwrap();
        assert!(closed.is_empty());

        let open = mint_pseudo_labels(
            &sim.mixture,
            &Scorer::Constant(f64::INFINITY),
            &cfg,
            &geometry,
        )
        .unwrap();
        let n_windows = sim.mixture.len() / 8000;
        assert_eq!(open.len(), 2 * n_windows);

        // gate monotonicity with a real scorer
        let refs: Vec<TimeSignal> = sim
            .references
            .iter()
            .map(|r| {
                TimeSignal::new(Array2::from_shape_fn((r.len(), 1), |(s, _)| {
                    r.samples[[s, 0]]
                }))
                .unwrap()
            })
            .collect();
        let mut lo = cfg.clone();
        lo.alpha_db = -10.0;
        let mut hi = cfg.clone();
        hi.alpha_db = 5.0;
        let scorer = Scorer::Oracle { references: refs };
        let n_lo = mint_pseudo_labels(&sim.mixture, &scorer, &lo, &geometry)
            .unwrap()
            .len();
        let n_hi = mint_pseudo_labels(&sim.mixture, &scorer, &hi, &geometry)
            .unwrap()
            .len();
        assert!(n_hi <= n_lo, "raising alpha grew the label set: {n_lo} -> {n_hi}");
    }
}
