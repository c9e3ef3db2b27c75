//! Log-Mel filterbank features.
//!
//! Defaults produce 80 log-Mel bins from 25 ms windows every 10 ms at
//! 16 kHz: a periodic Hann window over 400 samples, zero-padded to a
//! 512-point FFT, power spectrum, HTK-scale triangular filters spanning
//! 0 Hz to Nyquist, and a natural log with a 1e-10 floor.

mod archive;
mod audio;
mod logmel;

use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use archive::{read_record, read_record_header, FeatureArchive, Location};
pub use audio::{read_pcm, sample_count};
pub use logmel::{compute_logmel, hz_to_mel, mel_to_hz, LogMelExtractor, MelFilterbank};

use crate::manifest::{AudioRef, Utterance};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("audio too short: {samples} samples, need at least {window}")]
    AudioTooShort { samples: usize, window: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
    #[error("{path}: expected {expected} Hz audio, found {found} Hz")]
    SampleRate {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: expected mono audio, found {channels} channels")]
    Channels { path: PathBuf, channels: u16 },
    #[error("{path} @ {offset}: checksum mismatch")]
    ChecksumMismatch { path: PathBuf, offset: u64 },
    #[error("{path} @ {offset}: corrupt record ({reason})")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("{path} @ {offset}: record holds {found:?}, expected {expected:?}")]
    IdMismatch {
        path: PathBuf,
        offset: u64,
        expected: String,
        found: String,
    },
    #[error("feature dimension mismatch: {0} vs {1} bins")]
    DimensionMismatch(usize, usize),
    #[error("feature matrix must have at least one frame")]
    Empty,
}

impl FeatureError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        FeatureError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic Hann.
    #[default]
    Hann,
    /// Periodic Hamming.
    Hamming,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MelScale {
    /// `2595 * log10(1 + f / 700)`
    #[default]
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
    pub window: WindowKind,
    pub mel_scale: MelScale,
    /// Per-utterance mean/variance normalization of each bin.
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: 16_000,
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
            window: WindowKind::Hann,
            mel_scale: MelScale::Htk,
            cmvn: false,
        }
    }
}

impl FeatureConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms / 1000.0 * f64::from(self.sample_rate_hz)).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms / 1000.0 * f64::from(self.sample_rate_hz)).round() as usize
    }

    /// Smallest power of two holding one window.
    pub fn fft_size(&self) -> usize {
        self.win_samples().next_power_of_two()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |msg: String| Err(FeatureError::InvalidConfig(msg));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if !(self.win_ms.is_finite()
            && self.win_ms > 0.0
            && self.hop_ms.is_finite()
            && self.hop_ms > 0.0)
        {
            return bad("win_ms and hop_ms must be positive".into());
        }
        if self.hop_ms > self.win_ms {
            return bad(format!(
                "hop_ms {} exceeds win_ms {}",
                self.hop_ms, self.win_ms
            ));
        }
        if self.win_samples() == 0 || self.hop_samples() == 0 {
            return bad("window or hop rounds to zero samples".into());
        }
        if !(self.log_floor.is_finite() && self.log_floor > 0.0) {
            return bad("log_floor must be a small positive number".into());
        }
        Ok(())
    }
}

/// Number of whole windows that fit in `n_samples`.
pub fn frame_count(n_samples: usize, cfg: &FeatureConfig) -> usize {
    let win = cfg.win_samples();
    if n_samples < win {
        0
    } else {
        1 + (n_samples - win) / cfg.hop_samples()
    }
}

/// A T×F matrix of features, row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    n_frames: usize,
    n_bins: usize,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, n_frames: usize, n_bins: usize) -> Result<Self, FeatureError> {
        if n_frames == 0 || n_bins == 0 {
            return Err(FeatureError::Empty);
        }
        if data.len() != n_frames * n_bins {
            return Err(FeatureError::InvalidConfig(format!(
                "{} values do not form a {n_frames}x{n_bins} matrix",
                data.len()
            )));
        }
        Ok(FeatureMatrix {
            data,
            n_frames,
            n_bins,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.data[t * self.n_bins + f]
    }

    /// Stacks matrices along the time axis, in order.
    pub fn concat_time(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix, FeatureError> {
        let first = parts.first().ok_or(FeatureError::Empty)?;
        let n_bins = first.n_bins;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            if p.n_bins != n_bins {
                return Err(FeatureError::DimensionMismatch(n_bins, p.n_bins));
            }
            data.extend_from_slice(&p.data);
        }
        let n_frames = data.len() / n_bins;
        Ok(FeatureMatrix {
            data,
            n_frames,
            n_bins,
        })
    }
}

/// Result of [`load_or_compute`].
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub features: FeatureMatrix,
    /// Set when the manifest frame count disagreed with the features.
    pub mismatch: Option<FrameMismatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameMismatch {
    pub manifest: usize,
    pub actual: usize,
}

impl Loaded {
    /// Overwrites the utterance frame count with the real one.
    pub fn reconcile(&self, utt: &mut Utterance) {
        utt.n_frames = self.features.n_frames();
    }
}

/// Returns features for `utt`, from `cache` when present there.
///
/// Archive references are read in place. File references are decoded and
/// computed, then stored into `cache` if one is given. A frame count that
/// disagrees with the manifest is logged and reported; the loaded value wins.
pub fn load_or_compute(
    utt: &Utterance,
    extractor: &LogMelExtractor,
    cache: Option<&FeatureArchive>,
) -> Result<Loaded, FeatureError> {
    let features = match cache.map(|c| c.get(&utt.id)).transpose()?.flatten() {
        Some(hit) => hit,
        None => match &utt.audio_ref {
            AudioRef::Archive { shard, offset } => {
                let (id, features) = read_record(shard, *offset)?;
                if id != utt.id {
                    return Err(FeatureError::IdMismatch {
                        path: shard.clone(),
                        offset: *offset,
                        expected: utt.id.clone(),
                        found: id,
                    });
                }
                features
            }
            AudioRef::File(path) => {
                let pcm = read_pcm(path, extractor.config().sample_rate_hz)?;
                let features = extractor.compute(&pcm)?;
                if let Some(cache) = cache {
                    cache.put(&utt.id, &features)?;
                }
                features
            }
        },
    };
    let mismatch = (features.n_frames() != utt.n_frames).then(|| {
        log::warn!(
            "{}: manifest says {} frames, features have {}; using {}",
            utt.id,
            utt.n_frames,
            features.n_frames(),
            features.n_frames()
        );
        FrameMismatch {
            manifest: utt.n_frames,
            actual: features.n_frames(),
        }
    });
    Ok(Loaded { features, mismatch })
}

/// Frame count of `utt` without computing features: read from the archive
/// record header, or derived from the audio sample count.
pub fn probe_frames(
    utt: &Utterance,
    cfg: &FeatureConfig,
    cache: Option<&FeatureArchive>,
) -> Result<usize, FeatureError> {
    if let Some(loc) = cache.and_then(|c| c.location(&utt.id)) {
        let path = cache.unwrap().shard_path(&loc);
        return Ok(read_record_header(&path, loc.offset)?.1);
    }
    match &utt.audio_ref {
        AudioRef::Archive { shard, offset } => Ok(read_record_header(shard, *offset)?.1),
        AudioRef::File(path) => Ok(frame_count(sample_count(path)?, cfg)),
    }
}
