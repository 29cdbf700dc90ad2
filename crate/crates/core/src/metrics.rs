//! SDR / SI-SDR metrics and the miniature experiment harness.
//!
//! `run_experiment` drives the whole pipeline from a manifest: pretrain the
//! mask estimator on matched scenes, then per condition mint pseudo labels
//! on a held-in mixture, fine-tune, and report held-out SI-SDR/SDR before
//! and after adaptation as a CSV table.

use std::fmt::Write as _;

use crate::adapt::{self, AdaptConfig, Scorer};
use crate::audio_io::TimeSignal;
use crate::error::{Error, Result};
use crate::kv::{self, KvFile};
use crate::masknet::{MaskNetConfig, MaskNetParams};
use crate::roomsim::{simulate, SceneSpec, SourceSignal, SourceSpec};
use crate::stft::{stft_forward, stft_inverse};

/// Caps keep the tables finite when the estimate matches the reference.
pub const METRIC_CAP_DB: f64 = 200.0;

fn flat_energy(x: &TimeSignal) -> f64 {
    x.energy()
}

fn check_pair(est: &TimeSignal, reference: &TimeSignal) -> Result<()> {
    if est.samples.dim() != reference.samples.dim() {
        return Err(Error::Shape(format!(
            "estimate {:?} vs reference {:?}",
            est.samples.dim(),
            reference.samples.dim()
        )));
    }
    Ok(())
}

/// Scale-invariant SDR: project the estimate onto the reference and
/// compare target energy with residual energy. Capped at ±200 dB.
pub fn si_sdr(est: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    check_pair(est, reference)?;
    let ref_energy = flat_energy(reference);
    if ref_energy <= 0.0 {
        return Err(Error::Value("reference has zero energy".into()));
    }
    let dot: f64 = est
        .samples
        .iter()
        .zip(reference.samples.iter())
        .map(|(a, b)| a * b)
        .sum();
    let scale = dot / ref_energy;
    let target_energy = scale * scale * ref_energy;
    let err_energy: f64 = est
        .samples
        .iter()
        .zip(reference.samples.iter())
        .map(|(a, b)| {
            let e = a - scale * b;
            e * e
        })
        .sum();
    if err_energy <= 0.0 {
        return Ok(METRIC_CAP_DB);
    }
    Ok((10.0 * (target_energy / err_energy).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB))
}

/// Plain SDR without projection: `10 log10(|est|^2 / |est - ref|^2)`.
pub fn sdr(est: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    check_pair(est, reference)?;
    let num = flat_energy(est);
    let den: f64 = est
        .samples
        .iter()
        .zip(reference.samples.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if den <= 0.0 {
        return Ok(METRIC_CAP_DB);
    }
    Ok((10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB))
}

/// One experiment condition parsed from a `[condition]` block.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub rt60: f64,
    pub snr_db: f64,
    pub n_speakers: usize,
    pub seeds: Vec<u64>,
}

/// Full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentManifest {
    pub conditions: Vec<Condition>,
    pub budgets_s: Vec<f64>,
    pub n_mics: usize,
    pub array_radius: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub pretrain_scenes: usize,
    pub pretrain_steps: usize,
    pub pretrain_rt60: f64,
    pub pretrain_snr_db: f64,
    pub pretrain_lr: f64,
    pub clip_s: f64,
    pub eval_scenes: usize,
    pub hidden: usize,
    pub context: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha_db: f64,
    pub window_s: f64,
    pub mnmf_sources: usize,
    pub mnmf_bases: usize,
    pub mnmf_iters: usize,
    pub seed: u64,
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let file = KvFile::parse(text)?;
        let g = &file.globals;
        let get_f64 = |key: &str, default: f64| -> Result<f64> {
            kv::get(g, key).map(kv::parse_f64).transpose().map(|v| v.unwrap_or(default))
        };
        let get_usize = |key: &str, default: usize| -> Result<usize> {
            kv::get(g, key)
                .map(kv::parse_typed::<usize>)
                .transpose()
                .map(|v| v.unwrap_or(default))
        };
        let budgets_s = match kv::get(g, "budgets_s") {
            Some(pair) => kv::parse_list(pair)?,
            None => vec![8.0],
        };
        let mut conditions = Vec::new();
        for section in &file.sections {
            if section.name != "condition" {
                return Err(Error::Parse {
                    line: section.line,
                    msg: format!("unknown section {:?}", section.name),
                });
            }
            let p = &section.pairs;
            let name = kv::get(p, "name")
                .map(|pair| pair.value.clone())
                .unwrap_or_else(|| format!("condition_{}", conditions.len()));
            let seeds = match kv::get(p, "seeds") {
                Some(pair) => kv::parse_list(pair)?,
                None => vec![0],
            };
            let sec_f64 = |key: &str, default: f64| -> Result<f64> {
                kv::get(p, key).map(kv::parse_f64).transpose().map(|v| v.unwrap_or(default))
            };
            conditions.push(Condition {
                name,
                rt60: sec_f64("rt60", 0.5)?,
                snr_db: sec_f64("snr_db", f64::INFINITY)?,
                n_speakers: kv::get(p, "n_speakers")
                    .map(kv::parse_typed::<usize>)
                    .transpose()?
                    .unwrap_or(2),
                seeds,
            });
        }
        Ok(ExperimentManifest {
            conditions,
            budgets_s,
            n_mics: get_usize("n_mics", 4)?,
            array_radius: get_f64("array_radius", 0.05)?,
            n_fft: get_usize("n_fft", 256)?,
            hop: get_usize("hop", 64)?,
            pretrain_scenes: get_usize("pretrain_scenes", 20)?,
            pretrain_steps: get_usize("pretrain_steps", 30)?,
            pretrain_rt60: get_f64("pretrain_rt60", 0.3)?,
            pretrain_snr_db: get_f64("pretrain_snr_db", 20.0)?,
            pretrain_lr: get_f64("pretrain_lr", 3e-3)?,
            clip_s: get_f64("clip_s", 1.0)?,
            eval_scenes: get_usize("eval_scenes", 3)?,
            hidden: get_usize("hidden", 32)?,
            context: get_usize("context", 1)?,
            steps: get_usize("steps", 20)?,
            lr: get_f64("lr", 4e-5)?,
            batch: get_usize("batch", 4)?,
            alpha_db: get_f64("alpha", 10.0)?,
            window_s: get_f64("window_s", 4.0)?,
            mnmf_sources: get_usize("mnmf_sources", 3)?,
            mnmf_bases: get_usize("mnmf_bases", 4)?,
            mnmf_iters: get_usize("mnmf_iters", 30)?,
            seed: kv::get(g, "seed").map(kv::parse_typed).transpose()?.unwrap_or(0),
        })
    }

    fn adapt_config(&self) -> AdaptConfig {
        let mut cfg = AdaptConfig::desk();
        cfg.stft.n_fft = self.n_fft;
        cfg.stft.hop = self.hop;
        cfg.window_s = self.window_s;
        cfg.alpha_db = self.alpha_db;
        cfg.steps = self.steps;
        cfg.lr = self.lr;
        cfg.batch = self.batch;
        cfg.mnmf.n_sources = self.mnmf_sources;
        cfg.mnmf.n_bases = self.mnmf_bases;
        cfg.mnmf.n_iter = self.mnmf_iters;
        cfg
    }
}

/// Deterministic random scene: speakers on a ring around the array with
/// angular separation, distinct synthetic signals per (scene, speaker).
pub fn random_scene(
    scene_seed: u64,
    n_speakers: usize,
    rt60: f64,
    snr_db: f64,
    duration_s: f64,
    n_mics: usize,
    array_radius: f64,
) -> SceneSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(scene_seed.wrapping_mul(0xA24B_1D67));
    let room_w = rng.gen_range(5.0..7.0);
    let room_h = rng.gen_range(4.0..6.0);
    let center = [
        room_w / 2.0 + rng.gen_range(-0.3..0.3),
        room_h / 2.0 + rng.gen_range(-0.3..0.3),
    ];
    let base_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let sources = (0..n_speakers)
        .map(|i| {
            let angle = base_angle
                + i as f64 * std::f64::consts::TAU / n_speakers as f64
                + rng.gen_range(-0.2..0.2);
            let dist = rng.gen_range(1.0..1.8);
            let pos = [
                (center[0] + dist * angle.cos()).clamp(0.3, room_w - 0.3),
                (center[1] + dist * angle.sin()).clamp(0.3, room_h - 0.3),
            ];
            SourceSpec {
                position: pos,
                signal: SourceSignal::Synthetic(scene_seed.wrapping_mul(31).wrapping_add(i as u64)),
            }
        })
        .collect();
    SceneSpec {
        room_w,
        room_h,
        array_center: center,
        array_radius,
        n_mics,
        sources,
        rt60,
        snr_db,
        seed: scene_seed,
        duration_s,
    }
}

/// Simulate a scene and emit one training triple per source:
/// (mixture spectrogram, true DOA, direct+early reference at the beamformer
/// reference channel).
pub fn scene_triples(
    scene: &SceneSpec,
    n_fft: usize,
    hop: usize,
    ref_channel: usize,
) -> Result<Vec<crate::autodiff::BatchItem>> {
    let sim = simulate(scene)?;
    let x = stft_forward(&sim.mixture, n_fft, hop)?;
    let mut out = Vec::new();
    for (i, reference) in sim.references.iter().enumerate() {
        let d_ref = TimeSignal::new(
            ndarray::Array2::from_shape_fn((reference.len(), 1), |(s, _)| {
                reference.samples[[s, ref_channel]]
            }),
        )?;
        out.push(crate::autodiff::BatchItem {
            x: x.clone(),
            doa: sim.doas[i],
            d_ref,
        });
    }
    Ok(out)
}

/// Run a manifest and return the result table as CSV text. Deterministic:
/// the same manifest produces byte-identical output.
pub fn run_experiment(manifest: &ExperimentManifest) -> Result<String> {
    let base_cfg = manifest.adapt_config();
    let mask_config = MaskNetConfig {
        n_mics: manifest.n_mics,
        hidden: manifest.hidden,
        context: manifest.context,
    };
    let geometry = crate::beamform::ArrayGeometry::circular(
        manifest.n_mics,
        manifest.array_radius,
        crate::SAMPLE_RATE as f64,
    );

    // pretraining on matched scenes, shared by all rows
    let mut pretrain_items = Vec::new();
    for i in 0..manifest.pretrain_scenes {
        let scene = random_scene(
            manifest.seed.wrapping_add(1000 + i as u64),
            2,
            manifest.pretrain_rt60,
            manifest.pretrain_snr_db,
            manifest.clip_s,
            manifest.n_mics,
            manifest.array_radius,
        );
        pretrain_items.extend(scene_triples(
            &scene,
            manifest.n_fft,
            manifest.hop,
            base_cfg.wpd.ref_channel,
        )?);
    }
    let params0 = adapt::train(
        &MaskNetParams::init(mask_config, manifest.seed),
        &pretrain_items,
        manifest.pretrain_steps,
        manifest.pretrain_lr,
        manifest.batch,
        manifest.seed,
        &base_cfg.wpd,
        &geometry,
    )?;

    let mut csv = String::from(
        "condition,budget_s,seed,si_sdr_before,si_sdr_after,sdr_before,sdr_after\n",
    );
    for condition in &manifest.conditions {
        for &budget in &manifest.budgets_s {
            for &seed in &condition.seeds {
                let row = run_row(manifest, &base_cfg, condition, budget, seed, &params0)?;
                writeln!(
                    csv,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    condition.name, budget, seed, row.0, row.1, row.2, row.3
                )
                .unwrap();
            }
        }
    }
    Ok(csv)
}

fn run_row(
    manifest: &ExperimentManifest,
    base_cfg: &AdaptConfig,
    condition: &Condition,
    budget_s: f64,
    seed: u64,
    params0: &MaskNetParams,
) -> Result<(f64, f64, f64, f64)> {
    let mut cfg = base_cfg.clone();
    cfg.seed = seed;

    // held-in mixture for adaptation
    let row_seed = seed
        .wrapping_mul(0x9E37_79B9)
        .wrapping_add(condition.name.bytes().map(u64::from).sum::<u64>());
    let adapt_scene = random_scene(
        row_seed,
        condition.n_speakers,
        condition.rt60,
        condition.snr_db,
        budget_s,
        manifest.n_mics,
        manifest.array_radius,
    );
    let sim = simulate(&adapt_scene)?;
    let geometry = adapt_scene.geometry();
    let references: Vec<TimeSignal> = sim
        .references
        .iter()
        .map(|r| {
            TimeSignal::new(ndarray::Array2::from_shape_fn((r.len(), 1), |(s, _)| {
                r.samples[[s, cfg.wpd.ref_channel]]
            }))
            .unwrap()
        })
        .collect();
    let scorer = Scorer::Oracle { references };
    let labels = adapt::mint_pseudo_labels(&sim.mixture, &scorer, &cfg, &geometry)?;

    let params1 = if labels.is_empty() {
        params0.clone()
    } else {
        // replay buffer: fresh matched-condition triples, deterministic
        let mut replay = Vec::new();
        for i in 0..2 {
            let scene = random_scene(
                manifest.seed.wrapping_add(5000 + i),
                2,
                manifest.pretrain_rt60,
                manifest.pretrain_snr_db,
                manifest.clip_s,
                manifest.n_mics,
                manifest.array_radius,
            );
            replay.extend(scene_triples(
                &scene,
                manifest.n_fft,
                manifest.hop,
                cfg.wpd.ref_channel,
            )?);
        }
        adapt::fine_tune(params0, &labels, &replay, &cfg, &geometry)?
    };

    // held-out evaluation in the same condition
    let mut totals = (0.0, 0.0, 0.0, 0.0);
    for e in 0..manifest.eval_scenes {
        let scene = random_scene(
            row_seed.wrapping_add(777 + e as u64),
            condition.n_speakers,
            condition.rt60,
            condition.snr_db,
            manifest.clip_s.max(1.0),
            manifest.n_mics,
            manifest.array_radius,
        );
        let eval_sim = simulate(&scene)?;
        let x = stft_forward(&eval_sim.mixture, manifest.n_fft, manifest.hop)?;
        let reference = TimeSignal::new(ndarray::Array2::from_shape_fn(
            (eval_sim.references[0].len(), 1),
            |(s, _)| eval_sim.references[0].samples[[s, cfg.wpd.ref_channel]],
        ))?;
        let enhance = |params: &MaskNetParams| -> Result<TimeSignal> {
            let (spec, _) = adapt::enhance(params, &x, eval_sim.doas[0], &scene.geometry(), &cfg.wpd)?;
            stft_inverse(
                &crate::stft::ComplexSpectrogram::from_single(spec, manifest.n_fft, manifest.hop),
                reference.len(),
            )
        };
        let before = enhance(params0)?;
        let after = enhance(&params1)?;
        totals.0 += si_sdr(&before, &reference)?;
        totals.1 += si_sdr(&after, &reference)?;
        totals.2 += sdr(&before, &reference)?;
        totals.3 += sdr(&after, &reference)?;
    }
    let n = manifest.eval_scenes as f64;
    Ok((totals.0 / n, totals.1 / n, totals.2 / n, totals.3 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn sig(v: Vec<f64>) -> TimeSignal {
        TimeSignal::new(Array2::from_shape_fn((v.len(), 1), |(i, _)| v[i])).unwrap()
    }

    #[test]
    fn si_sdr_reference_cases() {
        let r = sig(vec![0.5, -0.25, 0.8, 0.1]);
        assert_eq!(si_sdr(&r, &r).unwrap(), METRIC_CAP_DB);
        let scaled = TimeSignal::new(&r.samples * 3.0).unwrap();
        assert_eq!(si_sdr(&scaled, &r).unwrap(), METRIC_CAP_DB);

        // orthogonal noise of equal energy puts the metric at 0 dB
        let r = sig(vec![1.0, 0.0]);
        let est = sig(vec![1.0, 1.0]);
        let v = si_sdr(&est, &r).unwrap();
        assert!(v.abs() < 1e-9, "{v}");

        // exact scale invariance
        let r = sig(vec![0.3, 0.9, -0.4]);
        let est = sig(vec![0.35, 0.7, -0.1]);
        let a = si_sdr(&est, &r).unwrap();
        let b = si_sdr(&TimeSignal::new(&est.samples * 7.3).unwrap(), &r).unwrap();
        assert!((a - b).abs() < 1e-9);

        let zero = sig(vec![0.0, 0.0, 0.0]);
        assert!(matches!(si_sdr(&est, &zero), Err(Error::Value(_))));
    }

    #[test]
    fn sdr_reference_cases() {
        let est = TimeSignal::new(array![[1.0], [0.0]]).unwrap();
        let r = TimeSignal::new(array![[0.0], [1.0]]).unwrap();
        let v = sdr(&est, &r).unwrap();
        assert!((v - (-10.0 * 2f64.log10())).abs() < 1e-4, "{v}");
        assert_eq!(sdr(&r, &r).unwrap(), METRIC_CAP_DB);

        // negated sdr equals sdr_loss for well-separated inputs
        let est = sig(vec![0.9, -0.3, 0.2, 0.5]);
        let r = sig(vec![0.1, 0.4, -0.6, 0.8]);
        let loss = crate::autodiff::sdr_loss(&est, &r).unwrap();
        assert!((loss + sdr(&est, &r).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn both_metrics_decrease_under_noise() {
        let r = sig((0..64).map(|i| (i as f64 * 0.37).sin()).collect());
        let noisy = TimeSignal::new(
            &r.samples
                + &Array2::from_shape_fn((64, 1), |(i, _)| if i % 2 == 0 { 0.05 } else { -0.05 }),
        )
        .unwrap();
        assert!(si_sdr(&noisy, &r).unwrap() < si_sdr(&r, &r).unwrap());
        assert!(sdr(&noisy, &r).unwrap() < sdr(&r, &r).unwrap());
    }

    #[test]
    fn manifest_parses_conditions() {
        let m = ExperimentManifest::parse(
            "seed = 3\nbudgets_s = 4 8\n[condition]\nname = hall\nrt60 = 0.9\nseeds = 1 2\n",
        )
        .unwrap();
        assert_eq!(m.conditions.len(), 1);
        assert_eq!(m.conditions[0].name, "hall");
        assert_eq!(m.conditions[0].seeds, vec![1, 2]);
        assert_eq!(m.budgets_s, vec![4.0, 8.0]);
    }

    #[test]
    fn empty_condition_list_gives_header_only() {
        let m = ExperimentManifest::parse("pretrain_scenes = 1\npretrain_steps = 1\n").unwrap();
        let csv = run_experiment(&m).unwrap();
        assert_eq!(
            csv,
            "condition,budget_s,seed,si_sdr_before,si_sdr_after,sdr_before,sdr_after\n"
        );
    }
}
