//! Concatenation-based data augmentation for speech-to-text training.
//!
//! The pipeline reads a TSV manifest, extracts log-Mel features, builds a
//! fresh seed-keyed concatenation plan at the start of every epoch (self
//! repetition, same-speaker pairs, or random pairs), merges the augmented
//! instances with the originals, drops anything longer than the frame limit,
//! packs the survivors into padded batches under a frame budget, applies
//! SpecAugment, and writes the batches in a little-endian binary format.

pub mod augment;
pub mod batching;
pub mod features;
pub mod manifest;
pub mod pipeline;
pub mod rng;
pub mod specaugment;
