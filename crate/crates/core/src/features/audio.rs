use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use hound::{SampleFormat, WavReader};

use super::FeatureError;

fn is_wav(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn open_wav(
    path: &Path,
    sample_rate: Option<u32>,
) -> Result<WavReader<BufReader<File>>, FeatureError> {
    let reader = WavReader::open(path).map_err(|source| FeatureError::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FeatureError::Channels {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if let Some(expected) = sample_rate {
        if spec.sample_rate != expected {
            return Err(FeatureError::SampleRate {
                path: path.to_path_buf(),
                expected,
                found: spec.sample_rate,
            });
        }
    }
    Ok(reader)
}

/// Decodes mono audio at `sample_rate` into samples in [-1, 1].
///
/// `.wav` files go through the RIFF decoder; anything else is read as raw
/// signed 16-bit little-endian PCM.
pub fn read_pcm(path: &Path, sample_rate: u32) -> Result<Vec<f32>, FeatureError> {
    let wav_err = |source| FeatureError::Wav {
        path: path.to_path_buf(),
        source,
    };
    if is_wav(path) {
        let reader = open_wav(path, Some(sample_rate))?;
        let spec = reader.spec();
        match spec.sample_format {
            SampleFormat::Float => reader
                .into_samples::<f32>()
                .collect::<Result<_, _>>()
                .map_err(wav_err),
            SampleFormat::Int => {
                let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<Result<_, _>>()
                    .map_err(wav_err)
            }
        }
    } else {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| FeatureError::io(path, e))?;
        Ok(bytes
            .chunks_exact(2)
            .map(|b| f32::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
            .collect())
    }
}

/// Number of samples in an audio file, from its header or size.
pub fn sample_count(path: &Path) -> Result<usize, FeatureError> {
    if is_wav(path) {
        Ok(open_wav(path, None)?.duration() as usize)
    } else {
        let len = std::fs::metadata(path)
            .map_err(|e| FeatureError::io(path, e))?
            .len();
        Ok((len / 2) as usize)
    }
}
