//! Multichannel speech dereverberation and denoising toolkit.
//!
//! The crate covers the full chain from simulated room recordings to an
//! adaptively fine-tuned neural beamformer:
//!
//! * [`audio_io`] — 16 kHz WAV reading/writing and the [`TimeSignal`] type
//! * [`stft`] — forward/inverse STFT with perfect reconstruction
//! * [`linalg`] — small dense complex Hermitian solvers and eigendecomposition
//! * [`roomsim`] — miniature 2D image-source room simulator
//! * [`wpe`] — weighted-prediction-error blind dereverberation
//! * [`beamform`] — MPDR and WPD beamforming from time-frequency masks
//! * [`fastmnmf`] — FastMNMF blind source separation
//! * [`doa`] — wideband MUSIC azimuth estimation
//! * [`masknet`] — DOA-conditioned trainable mask estimator
//! * [`autodiff`] — reverse-mode gradients through the WPD enhancement graph
//! * [`adapt`] — run-time pseudo-label minting and fine-tuning
//! * [`metrics`] — SDR/SI-SDR metrics and the experiment harness

pub mod adapt;
pub mod audio_io;
pub mod autodiff;
pub mod beamform;
pub mod doa;
pub mod error;
pub mod fastmnmf;
pub mod kv;
pub mod linalg;
pub mod masknet;
pub mod metrics;
pub mod roomsim;
pub mod stft;
pub mod wpe;

pub use adapt::{AdaptConfig, PseudoLabel, Scorer};
pub use audio_io::TimeSignal;
pub use beamform::{ArrayGeometry, Mask, SteeringVector, WpdConfig, WpdFilter};
pub use error::{Error, Result};
pub use fastmnmf::{FastMnmfConfig, FastMnmfModel};
pub use masknet::{MaskNetConfig, MaskNetParams};
pub use roomsim::{SceneSpec, SimResult, SourceSpec};
pub use stft::{ComplexSpectrogram, StftConfig};
pub use wpe::{WpeConfig, WpeFilter, WpeOutput};

/// Speed of sound in air, m/s. Shared by the simulator, steering
/// construction, and MUSIC.
pub const SOUND_SPEED: f64 = 343.0;

/// The only sample rate the toolkit operates at.
pub const SAMPLE_RATE: u32 = 16_000;
