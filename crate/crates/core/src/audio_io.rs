//! Multichannel 16 kHz audio I/O.
//!
//! Only two encodings are accepted on read (PCM16 and IEEE float32) and
//! exactly one is produced on write (IEEE float32), so a write/read round
//! trip is bit-exact. There is no resampling: a file at any other rate is
//! rejected.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// A multichannel time-domain signal, samples × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    /// S×M matrix of amplitudes, nominal range [-1, 1].
    pub samples: Array2<f64>,
    /// Always 16000 in this toolkit.
    pub sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Size(format!(
                "signal must have at least one sample and one channel, got {}x{}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::Value("signal contains non-finite samples".into()));
        }
        Ok(TimeSignal {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    /// Number of samples per channel.
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Number of channels.
    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }

    /// Borrow one channel as a contiguous vector.
    pub fn channel(&self, m: usize) -> Vec<f64> {
        self.samples.column(m).to_vec()
    }

    /// Total energy over all channels.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Copy out the sample range `[start, start+len)`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> TimeSignal {
        let mut out = Array2::zeros((len, self.channels()));
        for i in 0..len {
            if start + i < self.len() {
                for m in 0..self.channels() {
                    out[[i, m]] = self.samples[[start + i, m]];
                }
            }
        }
        TimeSignal {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;

/// Read a 16 kHz RIFF/WAVE file (PCM16 or IEEE float32).
///
/// PCM16 samples are scaled by 1/32768; float32 samples are taken as-is.
pub fn read_wav(path: impl AsRef<Path>) -> Result<TimeSignal> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<TimeSignal> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;

    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_end = (off + 8 + size).min(bytes.len());
        let body = &bytes[off + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        off = off + 8 + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;

    if rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            found: rate,
            expected: SAMPLE_RATE,
        });
    }
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    let channels = channels as usize;

    let samples: Vec<f64> = match (format, bits) {
        (FMT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (FMT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (f, b) => {
            return Err(Error::Format(format!(
                "unsupported encoding: format tag {f}, {b} bits"
            )))
        }
    };

    let frames = samples.len() / channels;
    if frames == 0 {
        return Err(Error::Size("empty data chunk".into()));
    }
    let mut out = Array2::zeros((frames, channels));
    for (i, frame) in samples.chunks_exact(channels).enumerate() {
        for (m, &v) in frame.iter().enumerate() {
            out[[i, m]] = v;
        }
    }
    Ok(TimeSignal {
        samples: out,
        sample_rate: SAMPLE_RATE,
    })
}

/// Write an IEEE float32 WAV file. `read_wav(write_wav(x)) == x` exactly
/// whenever the samples fit in f32 (which they do for everything this
/// toolkit produces: f32 round-trips through f64 losslessly).
pub fn write_wav(signal: &TimeSignal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !signal.samples.iter().all(|v| v.is_finite()) {
        return Err(Error::Value("refusing to write non-finite samples".into()));
    }
    let frames = signal.len();
    let channels = signal.channels();
    let data_len = (frames * channels * 4) as u32;

    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&FMT_IEEE_FLOAT.to_le_bytes());
    buf.extend_from_slice(&(channels as u16).to_le_bytes());
    buf.extend_from_slice(&signal.sample_rate.to_le_bytes());
    let byte_rate = signal.sample_rate * channels as u32 * 4;
    buf.extend_from_slice(&byte_rate.to_le_bytes());
    buf.extend_from_slice(&((channels * 4) as u16).to_le_bytes());
    buf.extend_from_slice(&32u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..frames {
        for m in 0..channels {
            buf.extend_from_slice(&(signal.samples[[i, m]] as f32).to_le_bytes());
        }
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("drybeam_audio_io_tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    /// Hand-assemble a PCM16 WAV without going through write_wav.
    fn pcm16_bytes(rate: u32, channels: u16, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut buf = Vec::new();
        buf.extend_from_slice(b"RIFF");
        buf.extend_from_slice(&(36 + data_len).to_le_bytes());
        buf.extend_from_slice(b"WAVE");
        buf.extend_from_slice(b"fmt ");
        buf.extend_from_slice(&16u32.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&channels.to_le_bytes());
        buf.extend_from_slice(&rate.to_le_bytes());
        buf.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        buf.extend_from_slice(&(channels * 2).to_le_bytes());
        buf.extend_from_slice(&16u16.to_le_bytes());
        buf.extend_from_slice(b"data");
        buf.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        buf
    }

    #[test]
    fn pcm16_scaling() {
        let p = tmp("scale.wav");
        fs::write(&p, pcm16_bytes(16000, 1, &[16384])).unwrap();
        let sig = read_wav(&p).unwrap();
        assert_eq!(sig.samples, array![[0.5]]);
    }

    #[test]
    fn pcm16_linear_for_all_values() {
        let vals: Vec<i16> = vec![i16::MIN, -1, 0, 1, 12345, i16::MAX];
        let p = tmp("linear.wav");
        fs::write(&p, pcm16_bytes(16000, 1, &vals)).unwrap();
        let sig = read_wav(&p).unwrap();
        for (i, &v) in vals.iter().enumerate() {
            assert_eq!(sig.samples[[i, 0]], v as f64 / 32768.0);
        }
    }

    #[test]
    fn two_channel_shape_preserved() {
        let samples: Vec<i16> = (0..320).map(|i| i as i16).collect();
        let p = tmp("twoch.wav");
        fs::write(&p, pcm16_bytes(16000, 2, &samples)).unwrap();
        let sig = read_wav(&p).unwrap();
        assert_eq!(sig.samples.dim(), (160, 2));
        // interleaving: frame i = (2i, 2i+1)
        assert_eq!(sig.samples[[3, 0]], 6.0 / 32768.0);
        assert_eq!(sig.samples[[3, 1]], 7.0 / 32768.0);
    }

    #[test]
    fn wrong_rate_rejected() {
        let p = tmp("rate.wav");
        fs::write(&p, pcm16_bytes(44100, 1, &[0])).unwrap();
        match read_wav(&p) {
            Err(Error::SampleRate { found: 44100, .. }) => {}
            other => panic!("expected rate error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_encoding_rejected() {
        // format tag 6 = a-law
        let mut bytes = pcm16_bytes(16000, 1, &[0]);
        bytes[20] = 6;
        let p = tmp("alaw.wav");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format(_))));
    }

    #[test]
    fn float_round_trip_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples =
            Array2::from_shape_fn((1000, 3), |_| f64::from(rng.gen_range(-1.0f32..1.0)));
        let sig = TimeSignal::new(samples).unwrap();
        let p = tmp("rt.wav");
        write_wav(&sig, &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(sig.samples, back.samples);
    }

    #[test]
    fn single_zero_sample() {
        let sig = TimeSignal::new(array![[0.0]]).unwrap();
        let p = tmp("zero.wav");
        write_wav(&sig, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        // 44-byte canonical header followed by one zero float
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[44..48], &[0, 0, 0, 0]);
        assert_eq!(read_wav(&p).unwrap().samples, array![[0.0]]);
    }

    #[test]
    fn nan_rejected_on_write() {
        let sig = TimeSignal {
            samples: array![[f64::NAN]],
            sample_rate: SAMPLE_RATE,
        };
        assert!(matches!(
            write_wav(&sig, tmp("nan.wav")),
            Err(Error::Value(_))
        ));
        assert!(TimeSignal::new(array![[f64::NAN]]).is_err());
    }
}
