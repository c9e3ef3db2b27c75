use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{frame_count, FeatureConfig, FeatureError, FeatureMatrix, MelScale, WindowKind};

pub fn hz_to_mel(hz: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
        MelScale::Slaney => {
            let f_sp = 200.0 / 3.0;
            let min_log_hz = 1000.0;
            let min_log_mel = min_log_hz / f_sp;
            let logstep = 6.4f64.ln() / 27.0;
            if hz >= min_log_hz {
                min_log_mel + (hz / min_log_hz).ln() / logstep
            } else {
                hz / f_sp
            }
        }
    }
}

pub fn mel_to_hz(mel: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
        MelScale::Slaney => {
            let f_sp = 200.0 / 3.0;
            let min_log_hz = 1000.0;
            let min_log_mel = min_log_hz / f_sp;
            let logstep = 6.4f64.ln() / 27.0;
            if mel >= min_log_mel {
                min_log_hz * (logstep * (mel - min_log_mel)).exp()
            } else {
                f_sp * mel
            }
        }
    }
}

/// Triangular filters over the non-negative FFT bins, stored sparsely.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    n_fft_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> MelFilterbank {
        let fft_size = cfg.fft_size();
        let n_fft_bins = fft_size / 2 + 1;
        let sr = f64::from(cfg.sample_rate_hz);
        let mel_lo = hz_to_mel(0.0, cfg.mel_scale);
        let mel_hi = hz_to_mel(sr / 2.0, cfg.mel_scale);
        let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + step * i as f64, cfg.mel_scale))
            .collect();

        let mut filters = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_fft_bins {
                let f = k as f64 * sr / fft_size as f64;
                let w = ((f - lo) / (center - lo))
                    .min((hi - f) / (hi - center))
                    .max(0.0);
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            filters.push((start.unwrap_or(0), weights));
        }
        MelFilterbank {
            filters,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            n_fft_bins,
        }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Peak frequency of each filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense weight of FFT bin `k` in filter `m`.
    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (start, w) = &self.filters[m];
        if k < *start {
            0.0
        } else {
            w.get(k - start).copied().unwrap_or(0.0)
        }
    }

    pub fn n_fft_bins(&self) -> usize {
        self.n_fft_bins
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// A reusable extractor: FFT plan, window and filterbank built once.
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<LogMelExtractor, FeatureError> {
        cfg.validate()?;
        let n = cfg.win_samples();
        let window = (0..n)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n as f64;
                match cfg.window {
                    WindowKind::Hann => 0.5 - 0.5 * phase.cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size());
        let bank = MelFilterbank::new(&cfg);
        Ok(LogMelExtractor {
            cfg,
            window,
            fft,
            bank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    fn frame_power(
        &self,
        frame: &[f32],
        buf: &mut [Complex<f64>],
        scratch: &mut [Complex<f64>],
        power: &mut [f64],
    ) {
        for (b, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            *b = Complex::new(f64::from(x) * w, 0.0);
        }
        for b in &mut buf[frame.len()..] {
            *b = Complex::new(0.0, 0.0);
        }
        self.fft.process_with_scratch(buf, scratch);
        for (p, x) in power.iter_mut().zip(buf.iter()) {
            *p = x.norm_sqr();
        }
    }

    /// Power spectrum `|X(k)|²`, `k = 0..=fft_size/2`, of frame `t`.
    pub fn power_spectrum(&self, pcm: &[f32], t: usize) -> Vec<f64> {
        let start = t * self.cfg.hop_samples();
        let frame = &pcm[start..start + self.cfg.win_samples()];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size()];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.bank.n_fft_bins()];
        self.frame_power(frame, &mut buf, &mut scratch, &mut power);
        power
    }

    pub fn compute(&self, pcm: &[f32]) -> Result<FeatureMatrix, FeatureError> {
        let win = self.cfg.win_samples();
        if pcm.len() < win {
            return Err(FeatureError::AudioTooShort {
                samples: pcm.len(),
                window: win,
            });
        }
        if let Some(i) = pcm.iter().position(|x| !x.is_finite()) {
            return Err(FeatureError::NonFinite(i));
        }
        let hop = self.cfg.hop_samples();
        let n_frames = frame_count(pcm.len(), &self.cfg);
        let n_bins = self.cfg.n_mels;

        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size()];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.bank.n_fft_bins()];
        let mut energies = vec![0.0; n_bins];
        let mut data = Vec::with_capacity(n_frames * n_bins);
        for t in 0..n_frames {
            let frame = &pcm[t * hop..t * hop + win];
            self.frame_power(frame, &mut buf, &mut scratch, &mut power);
            self.bank.apply(&power, &mut energies);
            data.extend(
                energies
                    .iter()
                    .map(|e| (e + self.cfg.log_floor).ln() as f32),
            );
        }
        if self.cfg.cmvn {
            normalize_bins(&mut data, n_frames, n_bins);
        }
        FeatureMatrix::new(data, n_frames, n_bins)
    }
}

fn normalize_bins(data: &mut [f32], n_frames: usize, n_bins: usize) {
    for f in 0..n_bins {
        let column = || (0..n_frames).map(|t| f64::from(data[t * n_bins + f]));
        let mean = column().sum::<f64>() / n_frames as f64;
        let var = column().map(|x| (x - mean).powi(2)).sum::<f64>() / n_frames as f64;
        let std = var.sqrt().max(1e-8);
        for t in 0..n_frames {
            let x = &mut data[t * n_bins + f];
            *x = ((f64::from(*x) - mean) / std) as f32;
        }
    }
}

/// One-shot extraction; prefer [`LogMelExtractor`] when processing many clips.
pub fn compute_logmel(pcm: &[f32], cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    LogMelExtractor::new(cfg.clone())?.compute(pcm)
}
