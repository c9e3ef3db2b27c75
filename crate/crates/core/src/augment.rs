//! Temporal concatenation of training instances.
//!
//! At the start of every epoch a fresh [`EpochPlan`] is drawn over the whole
//! corpus: each eligible utterance becomes the anchor of exactly one new
//! instance, concatenated with partners chosen by the [`StrategyKind`].
//! Features are stacked along the time axis and targets are joined in the
//! same order. Token targets are joined without any separator; text targets
//! are joined with a single space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::features::{FeatureError, FeatureMatrix};
use crate::manifest::{SpeakerIndex, Target, Utterance};
use crate::rng::{self, Purpose};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("cannot plan an epoch over an empty corpus")]
    EmptyCorpus,
    #[error("the speaker strategy needs a speaker index")]
    MissingSpeakerIndex,
    #[error("the speaker strategy needs speaker labels, but no utterance has one")]
    NoSpeakerLabels,
    #[error("speaker index covers {index} utterances, corpus has {corpus}")]
    IndexMismatch { index: usize, corpus: usize },
    #[error("invalid arity {arity} for {kind}")]
    InvalidArity { kind: StrategyKind, arity: usize },
    #[error("unknown strategy {0:?} (expected self, speaker or random)")]
    UnknownStrategy(String),
    #[error("max_frames must be at least 1")]
    InvalidMaxFrames,
    #[error("cannot concatenate token and text targets")]
    MixedTargets,
    #[error("loading features of {id}: {source}")]
    Load { id: String, source: FeatureError },
    #[error("concatenating features: {0}")]
    Concat(FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum StrategyKind {
    /// Repeat the utterance once.
    CatSelf,
    /// Pair with other utterances of the same speaker.
    CatSpeaker,
    /// Pair with utterances drawn from the whole corpus.
    CatRandom,
}

impl StrategyKind {
    fn code(self) -> u64 {
        match self {
            StrategyKind::CatSelf => 1,
            StrategyKind::CatSpeaker => 2,
            StrategyKind::CatRandom => 3,
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            StrategyKind::CatSelf => "self",
            StrategyKind::CatSpeaker => "speaker",
            StrategyKind::CatRandom => "random",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for StrategyKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self" | "CatSelf" => Ok(StrategyKind::CatSelf),
            "speaker" | "CatSpeaker" => Ok(StrategyKind::CatSpeaker),
            "random" | "CatRandom" => Ok(StrategyKind::CatRandom),
            other => Err(AugmentError::UnknownStrategy(other.to_string())),
        }
    }
}

/// A strategy and its arity: the number of utterances per new instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub arity: usize,
}

impl Strategy {
    pub fn new(kind: StrategyKind, arity: usize) -> Result<Strategy, AugmentError> {
        let ok = match kind {
            StrategyKind::CatSelf => arity == 2,
            StrategyKind::CatSpeaker | StrategyKind::CatRandom => arity >= 2,
        };
        if !ok {
            return Err(AugmentError::InvalidArity { kind, arity });
        }
        Ok(Strategy { kind, arity })
    }

    pub fn pairs(kind: StrategyKind) -> Strategy {
        Strategy { kind, arity: 2 }
    }

    fn partners(&self) -> usize {
        self.arity - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    /// Speaker strategy: the anchor is its speaker's only utterance.
    SingletonSpeaker,
    /// Speaker strategy: the anchor has no speaker label.
    Speakerless,
    /// Speaker strategy: fewer other utterances than partners needed.
    SpeakerGroupTooSmall,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::SingletonSpeaker => "singleton-speaker",
            ExclusionReason::Speakerless => "speakerless",
            ExclusionReason::SpeakerGroupTooSmall => "speaker-group-too-small",
        }
    }
}

/// One planned instance, as indices into the utterance list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry<'a> {
    pub anchor: usize,
    pub partners: &'a [usize],
}

impl PlanEntry<'_> {
    /// Anchor followed by partners, the order features are stacked in.
    pub fn constituents(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor).chain(self.partners.iter().copied())
    }
}

/// The pairings for one epoch, before any features are loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: u64,
    pub seed: u64,
    pub strategy: Strategy,
    anchors: Vec<usize>,
    partners: Vec<usize>,
    excluded: Vec<(usize, ExclusionReason)>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn entry(&self, i: usize) -> PlanEntry<'_> {
        let m = self.strategy.partners();
        PlanEntry {
            anchor: self.anchors[i],
            partners: &self.partners[i * m..(i + 1) * m],
        }
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = PlanEntry<'_>> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    pub fn excluded(&self) -> &[(usize, ExclusionReason)] {
        &self.excluded
    }

    /// Sum of manifest frame counts over the constituents of entry `i`.
    pub fn entry_frames(&self, i: usize, utts: &[Utterance]) -> usize {
        self.entry(i).constituents().map(|c| utts[c].n_frames).sum()
    }

    /// Canonical little-endian encoding, used to compare plans byte for byte.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            8 * (6 + self.anchors.len() + self.partners.len() + 2 * self.excluded.len()),
        );
        let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
        put(self.epoch);
        put(self.seed);
        put(self.strategy.kind.code());
        put(self.strategy.arity as u64);
        put(self.anchors.len() as u64);
        for e in self.entries() {
            for c in e.constituents() {
                put(c as u64);
            }
        }
        put(self.excluded.len() as u64);
        for (i, reason) in &self.excluded {
            put(*i as u64);
            put(*reason as u64);
        }
        out
    }
}

/// Draws `count` distinct values from `0..pool` other than `skip`, or with
/// repetition when the pool is too small to avoid it.
fn draw_excluding<R: Rng>(
    rng: &mut R,
    pool: usize,
    skip: usize,
    count: usize,
    out: &mut Vec<usize>,
) {
    let start = out.len();
    let others = pool - 1;
    for _ in 0..count {
        loop {
            let r = rng.random_range(0..others);
            let v = if r >= skip { r + 1 } else { r };
            if others < count || !out[start..].contains(&v) {
                out.push(v);
                break;
            }
        }
    }
}

/// Draws the concatenation plan for one epoch.
///
/// Every utterance is an anchor exactly once unless the strategy excludes it.
/// The random stream is keyed by `(seed, epoch, strategy)`, so a rerun gives
/// the same plan and consecutive epochs give different ones.
pub fn plan_epoch(
    utts: &[Utterance],
    index: Option<&SpeakerIndex>,
    strategy: Strategy,
    seed: u64,
    epoch: u64,
) -> Result<EpochPlan, AugmentError> {
    if utts.is_empty() {
        return Err(AugmentError::EmptyCorpus);
    }
    let n = utts.len();
    let m = strategy.partners();
    let mut plan = EpochPlan {
        epoch,
        seed,
        strategy,
        anchors: Vec::with_capacity(n),
        partners: Vec::with_capacity(n * m),
        excluded: Vec::new(),
    };
    let stream = strategy.kind.code() << 32 | strategy.arity as u64;
    let mut rng = rng::keyed(seed, Purpose::Plan, epoch, stream);

    match strategy.kind {
        StrategyKind::CatSelf => {
            for i in 0..n {
                plan.anchors.push(i);
                plan.partners.extend(std::iter::repeat_n(i, m));
            }
        }
        StrategyKind::CatRandom => {
            for i in 0..n {
                plan.anchors.push(i);
                if n == 1 {
                    plan.partners.extend(std::iter::repeat_n(i, m));
                } else {
                    draw_excluding(&mut rng, n, i, m, &mut plan.partners);
                }
            }
        }
        StrategyKind::CatSpeaker => {
            let index = index.ok_or(AugmentError::MissingSpeakerIndex)?;
            if index.len() != n {
                return Err(AugmentError::IndexMismatch {
                    index: index.len(),
                    corpus: n,
                });
            }
            if index.groups().is_empty() {
                return Err(AugmentError::NoSpeakerLabels);
            }
            let mut picks = Vec::with_capacity(m);
            for i in 0..n {
                let Some((members, pos)) = index.membership(i) else {
                    plan.excluded.push((i, ExclusionReason::Speakerless));
                    continue;
                };
                if members.len() == 1 {
                    plan.excluded.push((i, ExclusionReason::SingletonSpeaker));
                    continue;
                }
                if members.len() - 1 < m {
                    plan.excluded
                        .push((i, ExclusionReason::SpeakerGroupTooSmall));
                    continue;
                }
                picks.clear();
                draw_excluding(&mut rng, members.len(), pos, m, &mut picks);
                plan.anchors.push(i);
                plan.partners.extend(picks.iter().map(|&p| members[p]));
            }
        }
    }
    Ok(plan)
}

/// Joins targets in order: tokens back to back, text with single spaces.
pub fn concat_targets<'a>(
    parts: impl IntoIterator<Item = &'a Target>,
) -> Result<Target, AugmentError> {
    let mut parts = parts.into_iter();
    let mut out = parts.next().cloned().ok_or(AugmentError::MixedTargets)?;
    for p in parts {
        match (&mut out, p) {
            (Target::Tokens(acc), Target::Tokens(t)) => acc.extend_from_slice(t),
            (Target::Text(acc), Target::Text(t)) => {
                acc.push(' ');
                acc.push_str(t);
            }
            _ => return Err(AugmentError::MixedTargets),
        }
    }
    Ok(out)
}

/// A concatenated instance with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInstance {
    pub constituents: Vec<String>,
    pub strategy: StrategyKind,
    pub features: FeatureMatrix,
    pub target: Target,
}

impl AugmentedInstance {
    pub fn n_frames(&self) -> usize {
        self.features.n_frames()
    }
}

/// Stacks the constituents' features along time and joins their targets.
///
/// `load` is called once per distinct constituent.
pub fn materialize<F>(
    entry: PlanEntry<'_>,
    utts: &[Utterance],
    load: F,
    strategy: StrategyKind,
) -> Result<AugmentedInstance, AugmentError>
where
    F: Fn(usize) -> Result<FeatureMatrix, FeatureError>,
{
    let order: Vec<usize> = entry.constituents().collect();
    let mut loaded: Vec<(usize, FeatureMatrix)> = Vec::with_capacity(order.len());
    for &c in &order {
        if loaded.iter().any(|(i, _)| *i == c) {
            continue;
        }
        let m = load(c).map_err(|source| AugmentError::Load {
            id: utts[c].id.clone(),
            source,
        })?;
        loaded.push((c, m));
    }
    let parts: Vec<&FeatureMatrix> = order
        .iter()
        .map(|c| &loaded.iter().find(|(i, _)| i == c).unwrap().1)
        .collect();
    let features = FeatureMatrix::concat_time(&parts).map_err(AugmentError::Concat)?;
    let target = concat_targets(order.iter().map(|&c| &utts[c].target))?;
    Ok(AugmentedInstance {
        constituents: order.iter().map(|&c| utts[c].id.clone()).collect(),
        strategy,
        features,
        target,
    })
}

/// Anything with a length in frames.
pub trait Framed {
    fn n_frames(&self) -> usize;
}

impl Framed for AugmentedInstance {
    fn n_frames(&self) -> usize {
        self.features.n_frames()
    }
}

impl Framed for Utterance {
    fn n_frames(&self) -> usize {
        self.n_frames
    }
}

impl<T: Framed> Framed for &T {
    fn n_frames(&self) -> usize {
        (**self).n_frames()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CombineOptions {
    pub max_frames: usize,
    /// When false the originals are left out (augmented-only ablation).
    pub include_original: bool,
}

impl Default for CombineOptions {
    fn default() -> Self {
        CombineOptions {
            max_frames: 3000,
            include_original: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub kept: usize,
    pub dropped: usize,
    pub kept_frames: usize,
    pub dropped_frames: usize,
}

impl FilterCounts {
    fn record(&mut self, frames: usize, keep: bool) {
        if keep {
            self.kept += 1;
            self.kept_frames += frames;
        } else {
            self.dropped += 1;
            self.dropped_frames += frames;
        }
    }
}

/// Survivors of [`combine_and_filter`]: originals first, then augmented.
#[derive(Debug, Clone, PartialEq)]
pub struct Combined<T> {
    pub instances: Vec<T>,
    pub original: FilterCounts,
    pub augmented: FilterCounts,
}

impl<T> Combined<T> {
    /// Index in `instances` where the augmented part starts.
    pub fn augmented_start(&self) -> usize {
        self.original.kept
    }
}

/// Merges originals and augmented instances, dropping every instance longer
/// than `opts.max_frames`.
pub fn combine<T: Framed>(
    original: Vec<T>,
    augmented: Vec<T>,
    opts: CombineOptions,
) -> Result<Combined<T>, AugmentError> {
    if opts.max_frames == 0 {
        return Err(AugmentError::InvalidMaxFrames);
    }
    let mut out = Combined {
        instances: Vec::with_capacity(
            original.len() * usize::from(opts.include_original) + augmented.len(),
        ),
        original: FilterCounts::default(),
        augmented: FilterCounts::default(),
    };
    if opts.include_original {
        for inst in original {
            let frames = inst.n_frames();
            let keep = frames <= opts.max_frames;
            out.original.record(frames, keep);
            if keep {
                out.instances.push(inst);
            }
        }
    }
    for inst in augmented {
        let frames = inst.n_frames();
        let keep = frames <= opts.max_frames;
        out.augmented.record(frames, keep);
        if keep {
            out.instances.push(inst);
        }
    }
    Ok(out)
}

/// `original ∪ augmented`, without instances longer than `max_frames`.
pub fn combine_and_filter<T: Framed>(
    original: Vec<T>,
    augmented: Vec<T>,
    max_frames: usize,
) -> Result<Combined<T>, AugmentError> {
    combine(
        original,
        augmented,
        CombineOptions {
            max_frames,
            include_original: true,
        },
    )
}
