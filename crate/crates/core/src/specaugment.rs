//! SpecAugment frequency and time masking (no time warping).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::features::FeatureMatrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskPolicy {
    /// Maximum frequency-mask width in bins.
    pub freq_param: usize,
    /// Maximum time-mask width in frames.
    pub time_param: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    pub mask_value: f32,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            freq_param: 27,
            time_param: 100,
            n_freq_masks: 2,
            n_time_masks: 2,
            mask_value: 0.0,
        }
    }
}

impl MaskPolicy {
    pub fn disabled() -> Self {
        MaskPolicy {
            n_freq_masks: 0,
            n_time_masks: 0,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.n_freq_masks == 0 && self.n_time_masks == 0
    }

    /// Checks the policy against a feature dimension.
    pub fn validate(&self, n_bins: usize) -> Result<(), String> {
        if self.freq_param > n_bins {
            return Err(format!(
                "frequency mask width {} exceeds {} bins",
                self.freq_param, n_bins
            ));
        }
        if !self.mask_value.is_finite() {
            return Err("mask value must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Frequency,
    Time,
}

/// Half-open span `[start, start + width)` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: Axis,
    pub start: usize,
    pub width: usize,
}

/// Stream for the masks of one instance in one epoch.
pub fn mask_stream(seed: u64, epoch: u64, instance: u64) -> ChaCha8Rng {
    rng::keyed(seed, Purpose::SpecAugment, epoch, instance)
}

fn draw<R: Rng>(rng: &mut R, axis: Axis, max_width: usize, extent: usize) -> Mask {
    let width = rng.random_range(0..=max_width.min(extent));
    let start = rng.random_range(0..=extent - width);
    Mask { axis, start, width }
}

/// Like [`apply_masks`], also returning the spans that were drawn.
pub fn apply_masks_traced<R: Rng>(
    feat: &FeatureMatrix,
    pol: &MaskPolicy,
    rng: &mut R,
) -> (FeatureMatrix, Vec<Mask>) {
    let (n_frames, n_bins) = (feat.n_frames(), feat.n_bins());
    let mut masks = Vec::with_capacity(pol.n_freq_masks + pol.n_time_masks);
    for _ in 0..pol.n_freq_masks {
        masks.push(draw(rng, Axis::Frequency, pol.freq_param, n_bins));
    }
    for _ in 0..pol.n_time_masks {
        masks.push(draw(rng, Axis::Time, pol.time_param, n_frames));
    }
    let mut out = feat.clone();
    let data = out.as_mut_slice();
    for m in &masks {
        match m.axis {
            Axis::Frequency => {
                for row in data.chunks_exact_mut(n_bins) {
                    row[m.start..m.start + m.width].fill(pol.mask_value);
                }
            }
            Axis::Time => data[m.start * n_bins..(m.start + m.width) * n_bins].fill(pol.mask_value),
        }
    }
    (out, masks)
}

/// Masks `n_freq_masks` bands of up to `freq_param` bins and `n_time_masks`
/// spans of up to `time_param` frames. Widths are uniform including zero;
/// the input is left untouched.
pub fn apply_masks<R: Rng>(feat: &FeatureMatrix, pol: &MaskPolicy, rng: &mut R) -> FeatureMatrix {
    apply_masks_traced(feat, pol, rng).0
}
