//! Fixtures shared by the integration tests: synthetic corpora, WAV writing
//! and a naive log-Mel reference.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use concat_augment::augment::Framed;
use concat_augment::manifest::{AudioRef, Target, Utterance};
use rand::Rng;

/// A bare length for batching tests.
pub struct Len(pub usize);

impl Framed for Len {
    fn n_frames(&self) -> usize {
        self.0
    }
}

pub fn utt(id: &str, n_frames: usize, tokens: &[u32], speaker: Option<&str>) -> Utterance {
    Utterance {
        id: id.to_string(),
        audio_ref: AudioRef::File(PathBuf::from(format!("{id}.wav"))),
        n_frames,
        target: Target::Tokens(tokens.to_vec()),
        speaker_id: speaker.map(str::to_string),
        src_text: None,
    }
}

/// Utterances `u0..u{n}` with lengths from `frames` and speakers `spk{i % speakers}`.
pub fn synthetic_utts(
    n: usize,
    speakers: usize,
    mut frames: impl FnMut(usize) -> usize,
) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let spk = format!("spk{}", i % speakers.max(1));
            let tokens = [i as u32 % 997 + 2, i as u32 % 13 + 2];
            utt(
                &format!("u{i:06}"),
                frames(i),
                &tokens,
                (speakers > 0).then_some(spk.as_str()),
            )
        })
        .collect()
}

/// Writes a token-mode manifest whose audio fields point at `<id>.wav`.
pub fn write_manifest(path: &Path, utts: &[Utterance]) {
    let mut text = String::from("id\taudio\tn_frames\ttgt_text\tspeaker\n");
    for u in utts {
        let Target::Tokens(t) = &u.target else {
            panic!("token targets only")
        };
        let tgt: Vec<String> = t.iter().map(u32::to_string).collect();
        writeln!(
            text,
            "{}\t{}.wav\t{}\t{}\t{}",
            u.id,
            u.id,
            u.n_frames,
            tgt.join(" "),
            u.speaker_id.as_deref().unwrap_or("")
        )
        .unwrap();
    }
    std::fs::write(path, text).unwrap();
}

pub fn write_wav(path: &Path, pcm: &[f32]) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &x in pcm {
        w.write_sample((x.clamp(-1.0, 1.0) * 32767.0) as i16)
            .unwrap();
    }
    w.finalize().unwrap();
}

pub fn frames_for(samples: usize) -> usize {
    if samples < 400 {
        0
    } else {
        1 + (samples - 400) / 160
    }
}

/// A corpus of `n` noisy tone clips with lengths drawn from `samples`,
/// written as WAV files next to a manifest. Returns the manifest path.
pub fn wav_corpus<R: Rng>(
    dir: &Path,
    n: usize,
    speakers: usize,
    rng: &mut R,
    samples: std::ops::RangeInclusive<usize>,
) -> PathBuf {
    let mut utts = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(samples.clone());
        let freq = rng.random_range(100.0..4000.0f32);
        let pcm: Vec<f32> = (0..len)
            .map(|s| {
                0.3 * (2.0 * std::f32::consts::PI * freq * s as f32 / 16_000.0).sin()
                    + rng.random_range(-0.05..0.05f32)
            })
            .collect();
        let id = format!("w{i:05}");
        write_wav(&dir.join(format!("{id}.wav")), &pcm);
        let spk = format!("s{}", i % speakers.max(1));
        let tokens: Vec<u32> = (0..rng.random_range(1..6))
            .map(|_| rng.random_range(2..500))
            .collect();
        utts.push(utt(
            &id,
            frames_for(len),
            &tokens,
            (speakers > 0).then_some(spk.as_str()),
        ));
    }
    let path = dir.join("train.tsv");
    write_manifest(&path, &utts);
    path
}

/// Reference extractor: periodic Hann, zero-padded O(N²) DFT, HTK triangles
/// evaluated directly in Hz, natural log. 16 kHz, 400/160 samples, 512 bins.
pub struct NaiveLogMel {
    n_mels: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    window: Vec<f64>,
    edges: Vec<f64>,
}

pub const N_FFT: usize = 512;
const WIN: usize = 400;
const HOP: usize = 160;
const SR: f64 = 16_000.0;

impl NaiveLogMel {
    pub fn new(n_mels: usize) -> Self {
        let cos = (0..N_FFT)
            .map(|i| (2.0 * PI * i as f64 / N_FFT as f64).cos())
            .collect();
        let sin = (0..N_FFT)
            .map(|i| (2.0 * PI * i as f64 / N_FFT as f64).sin())
            .collect();
        let window = (0..WIN)
            .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / WIN as f64).cos()))
            .collect();
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(SR / 2.0);
        let edges = (0..n_mels + 2)
            .map(|i| inv(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        NaiveLogMel {
            n_mels,
            cos,
            sin,
            window,
            edges,
        }
    }

    pub fn frames(&self, n: usize) -> usize {
        frames_for(n)
    }

    pub fn power(&self, pcm: &[f32], t: usize) -> Vec<f64> {
        let x: Vec<f64> = (0..WIN)
            .map(|n| f64::from(pcm[t * HOP + n]) * self.window[n])
            .collect();
        (0..=N_FFT / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let idx = (k * n) % N_FFT;
                    re += v * self.cos[idx];
                    im -= v * self.sin[idx];
                }
                re * re + im * im
            })
            .collect()
    }

    pub fn triangle(&self, m: usize, f: f64) -> f64 {
        let (a, b, c) = (self.edges[m], self.edges[m + 1], self.edges[m + 2]);
        if f <= a || f >= c {
            0.0
        } else if f <= b {
            (f - a) / (b - a)
        } else {
            (c - f) / (c - b)
        }
    }

    pub fn center(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    /// Pre-log filter energies, one row per frame.
    pub fn energies(&self, pcm: &[f32]) -> Vec<Vec<f64>> {
        (0..self.frames(pcm.len()))
            .map(|t| {
                let p = self.power(pcm, t);
                (0..self.n_mels)
                    .map(|m| {
                        p.iter()
                            .enumerate()
                            .map(|(k, pk)| pk * self.triangle(m, k as f64 * SR / N_FFT as f64))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn logmel(&self, pcm: &[f32]) -> Vec<Vec<f64>> {
        self.energies(pcm)
            .into_iter()
            .map(|row| row.into_iter().map(|e| (e + 1e-10).ln()).collect())
            .collect()
    }
}

pub fn sine(freq: f64, n: usize, amp: f64) -> Vec<f32> {
    (0..n)
        .map(|i| (amp * (2.0 * PI * freq * i as f64 / SR).sin()) as f32)
        .collect()
}

/// Removes every `timings` object so reports from separate runs compare equal.
pub fn strip_timings(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("timings");
            map.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

/// All regular files under `dir`, relative paths sorted.
pub fn tree(dir: &Path) -> Vec<PathBuf> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
