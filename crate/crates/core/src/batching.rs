//! Frame-budget batching and the batch wire format.
//!
//! Batches are packed greedily from a keyed shuffle of the instances,
//! optionally stable-sorted into 100-frame length buckets first, and closed
//! as soon as the next instance would push the batch over its frame budget.
//! The batch order is shuffled again with the same stream.
//!
//! Encoded batch (all integers u32 little-endian):
//!
//! ```text
//! "CABX" | version | B | T_max | F | B*T_max*F f32 features
//!        | pad_id | B x (target_len, target_len x token)
//!        | B x feature_len | crc32 of all preceding bytes
//! ```

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::augment::Framed;
use crate::features::FeatureMatrix;
use crate::rng::{self, Purpose};

pub const MAGIC: &[u8; 4] = b"CABX";
pub const FORMAT_VERSION: u32 = 1;
pub const BUCKET_WIDTH: usize = 100;
/// Padding symbol for targets, the conventional fairseq dictionary slot.
pub const DEFAULT_PAD_ID: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("instance {index} has {frames} frames, more than the budget of {budget}")]
    OverBudget {
        index: usize,
        frames: usize,
        budget: usize,
    },
    #[error("budget must be at least 1 frame")]
    ZeroBudget,
    #[error("cannot collate an empty group")]
    EmptyGroup,
    #[error("instance {index} has {found} feature bins, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed batch: {0}")]
    Malformed(String),
    #[error("batch checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// `B * T_max <= budget`
    #[default]
    Padded,
    /// `sum of true frames <= budget`
    TrueFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchOptions {
    pub budget_frames: usize,
    pub mode: BudgetMode,
    pub bucketing: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            budget_frames: 40_000,
            mode: BudgetMode::Padded,
            bucketing: true,
        }
    }
}

/// Batch composition for one epoch, as indices into the instance list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochStream {
    pub seed: u64,
    pub epoch: u64,
    pub batches: Vec<Vec<usize>>,
}

impl EpochStream {
    /// `(padded cells, true cells)` in frames, counting `B * T_max` per batch.
    pub fn frame_totals(&self, lengths: &[usize]) -> (usize, usize) {
        self.batches.iter().fold((0, 0), |(padded, real), b| {
            let t_max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            let sum: usize = b.iter().map(|&i| lengths[i]).sum();
            (padded + b.len() * t_max, real + sum)
        })
    }

    /// `(padded - true) / padded`, zero for an empty stream.
    pub fn padding_waste(&self, lengths: &[usize]) -> f64 {
        let (padded, real) = self.frame_totals(lengths);
        if padded == 0 {
            0.0
        } else {
            (padded - real) as f64 / padded as f64
        }
    }
}

/// Packs instances into batches under the frame budget.
pub fn make_batches<T: Framed>(
    instances: &[T],
    opts: &BatchOptions,
    seed: u64,
    epoch: u64,
) -> Result<EpochStream, BatchError> {
    let budget = opts.budget_frames;
    if budget == 0 {
        return Err(BatchError::ZeroBudget);
    }
    let lengths: Vec<usize> = instances.iter().map(Framed::n_frames).collect();
    if let Some((index, &frames)) = lengths.iter().enumerate().find(|(_, &l)| l > budget) {
        return Err(BatchError::OverBudget {
            index,
            frames,
            budget,
        });
    }

    let mut rng = rng::keyed(seed, Purpose::Batching, epoch, 0);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    if opts.bucketing {
        order.sort_by_key(|&i| lengths[i] / BUCKET_WIDTH);
    }

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut t_max, mut sum) = (0usize, 0usize);
    for i in order {
        let len = lengths[i];
        let fits = match opts.mode {
            BudgetMode::Padded => (current.len() + 1) * t_max.max(len) <= budget,
            BudgetMode::TrueFrames => sum + len <= budget,
        };
        if !fits {
            batches.push(std::mem::take(&mut current));
            t_max = 0;
            sum = 0;
        }
        current.push(i);
        t_max = t_max.max(len);
        sum += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(EpochStream {
        seed,
        epoch,
        batches,
    })
}

/// One instance ready for collation.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// The utterance id, or the constituent ids of a concatenation.
    pub provenance: Vec<String>,
    pub features: FeatureMatrix,
    pub target: Vec<u32>,
}

impl Framed for Instance {
    fn n_frames(&self) -> usize {
        self.features.n_frames()
    }
}

/// A padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B x T_max x F`, zero-padded in time.
    pub features: Vec<f32>,
    pub max_frames: usize,
    pub n_bins: usize,
    pub feature_lengths: Vec<u32>,
    /// `B x L_max`, padded with `pad_id`.
    pub targets: Vec<u32>,
    pub max_target_len: usize,
    pub target_lengths: Vec<u32>,
    pub pad_id: u32,
    /// Not part of the wire format.
    pub instance_ids: Vec<Vec<String>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_lengths.is_empty()
    }

    pub fn padded_frames(&self) -> usize {
        self.len() * self.max_frames
    }

    pub fn true_frames(&self) -> usize {
        self.feature_lengths.iter().map(|&l| l as usize).sum()
    }

    /// Features and target of item `i` with padding stripped.
    pub fn item(&self, i: usize) -> (FeatureMatrix, Vec<u32>) {
        let frames = self.feature_lengths[i] as usize;
        let start = i * self.max_frames * self.n_bins;
        let feats = self.features[start..start + frames * self.n_bins].to_vec();
        let t_start = i * self.max_target_len;
        let target = self.targets[t_start..t_start + self.target_lengths[i] as usize].to_vec();
        (
            FeatureMatrix::new(feats, frames, self.n_bins).expect("lengths are at least 1"),
            target,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let b = self.len();
        let token_total: usize = self.target_lengths.iter().map(|&l| l as usize).sum();
        let mut out = Vec::with_capacity(28 + 4 * (self.features.len() + token_total + 2 * b));
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(u32::from_le_bytes(*MAGIC));
        put(FORMAT_VERSION);
        put(b as u32);
        put(self.max_frames as u32);
        put(self.n_bins as u32);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pad_id.to_le_bytes());
        for i in 0..b {
            let len = self.target_lengths[i];
            out.extend_from_slice(&len.to_le_bytes());
            let start = i * self.max_target_len;
            for t in &self.targets[start..start + len as usize] {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        for l in &self.feature_lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Batch, BatchError> {
        let malformed = |m: &str| BatchError::Malformed(m.to_string());
        if bytes.len() < 4 + 24 {
            return Err(malformed("truncated header"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(BatchError::ChecksumMismatch);
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(BatchError::Malformed(format!(
                "unsupported version {version}"
            )));
        }
        let b = cur.u32()? as usize;
        let max_frames = cur.u32()? as usize;
        let n_bins = cur.u32()? as usize;
        let cells = b
            .checked_mul(max_frames)
            .and_then(|x| x.checked_mul(n_bins))
            .filter(|&c| c.checked_mul(4).is_some_and(|bytes| bytes <= body.len()))
            .ok_or_else(|| malformed("feature block larger than record"))?;
        let features = cur
            .take(cells * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let pad_id = cur.u32()?;
        let mut seqs = Vec::with_capacity(b);
        for _ in 0..b {
            let len = cur.u32()? as usize;
            let toks: Vec<u32> = (0..len).map(|_| cur.u32()).collect::<Result<_, _>>()?;
            seqs.push(toks);
        }
        let feature_lengths: Vec<u32> = (0..b).map(|_| cur.u32()).collect::<Result<_, _>>()?;
        if cur.pos != body.len() {
            return Err(malformed("trailing bytes"));
        }
        if feature_lengths.iter().any(|&l| l as usize > max_frames) {
            return Err(malformed("feature length exceeds T_max"));
        }
        let max_target_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = vec![pad_id; b * max_target_len];
        for (i, s) in seqs.iter().enumerate() {
            targets[i * max_target_len..i * max_target_len + s.len()].copy_from_slice(s);
        }
        Ok(Batch {
            features,
            max_frames,
            n_bins,
            feature_lengths,
            target_lengths: seqs.iter().map(|s| s.len() as u32).collect(),
            targets,
            max_target_len,
            pad_id,
            instance_ids: Vec::new(),
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BatchError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| BatchError::Malformed("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BatchError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Zero-pads features to the longest instance and targets with `pad_id`.
pub fn pad_and_collate(group: &[Instance], pad_id: u32) -> Result<Batch, BatchError> {
    let first = group.first().ok_or(BatchError::EmptyGroup)?;
    let n_bins = first.features.n_bins();
    if let Some((index, inst)) = group
        .iter()
        .enumerate()
        .find(|(_, g)| g.features.n_bins() != n_bins)
    {
        return Err(BatchError::DimensionMismatch {
            index,
            expected: n_bins,
            found: inst.features.n_bins(),
        });
    }
    let max_frames = group.iter().map(|g| g.features.n_frames()).max().unwrap();
    let max_target_len = group.iter().map(|g| g.target.len()).max().unwrap();
    let mut features = vec![0.0f32; group.len() * max_frames * n_bins];
    let mut targets = vec![pad_id; group.len() * max_target_len];
    for (i, g) in group.iter().enumerate() {
        let f = g.features.as_slice();
        let start = i * max_frames * n_bins;
        features[start..start + f.len()].copy_from_slice(f);
        targets[i * max_target_len..i * max_target_len + g.target.len()].copy_from_slice(&g.target);
    }
    Ok(Batch {
        features,
        max_frames,
        n_bins,
        feature_lengths: group.iter().map(|g| g.features.n_frames() as u32).collect(),
        targets,
        max_target_len,
        target_lengths: group.iter().map(|g| g.target.len() as u32).collect(),
        pad_id,
        instance_ids: group.iter().map(|g| g.provenance.clone()).collect(),
    })
}

/// Writes one length-prefixed (u64 LE) record of a batch stream.
pub fn write_stream_record<W: Write>(w: &mut W, record: &[u8]) -> io::Result<()> {
    w.write_all(&(record.len() as u64).to_le_bytes())?;
    w.write_all(record)
}

/// Reads a whole batch stream back.
pub fn read_stream<R: Read>(mut r: R) -> Result<Vec<Batch>, BatchError> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 8];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut record = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut record)?;
        out.push(Batch::decode(&record)?);
    }
    Ok(out)
}
