//! The per-epoch loop: plan, combine and filter, batch, materialize, mask,
//! emit.
//!
//! Filtering and batching only need frame counts, so both happen before any
//! feature is loaded. Batches are then materialized by a worker pool and
//! handed to a single writer through an ordered window of bounded size; the
//! dispatcher stalls while the window is full, so at most `window` batches
//! are resident at once and the output order never depends on scheduling.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, Sender};
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{
    self, combine, AugmentError, CombineOptions, Combined, EpochPlan, Framed, Strategy,
    StrategyKind,
};
use crate::batching::{self, BatchError, BatchOptions, EpochStream, Instance, DEFAULT_PAD_ID};
use crate::features::{
    self, load_or_compute, FeatureArchive, FeatureConfig, FeatureError, FeatureMatrix,
    LogMelExtractor,
};
use crate::manifest::{
    build_speaker_index, parse_manifest, AudioRef, CorpusMode, IngestReport, ManifestError,
    RowDiagnostic, SpeakerIndex, Utterance,
};
use crate::specaugment::{apply_masks, mask_stream, MaskPolicy};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "CONCAT_AUGMENT_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A fatal error together with whatever had been reported up to it.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: PipelineError,
    pub partial: Option<Box<AuditReport>>,
}

impl From<PipelineError> for RunFailure {
    fn from(error: PipelineError) -> Self {
        RunFailure {
            error,
            partial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmitMode {
    /// One file per batch under `epoch-NNN/`.
    #[default]
    Files,
    /// One `epoch-NNN.cabx` stream of u64-length-prefixed records.
    Stream,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub mode: CorpusMode,
    pub features: FeatureConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: u64,
    pub combine: CombineOptions,
    pub batch: BatchOptions,
    pub specaugment: Option<MaskPolicy>,
    pub pad_id: u32,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/report.json`.
    pub report_path: Option<PathBuf>,
    /// Defaults to `<out_dir>/features`.
    pub cache_dir: Option<PathBuf>,
    pub emit: EmitMode,
    /// 0 picks the number of available cores.
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            manifest: manifest.into(),
            mode: CorpusMode::default(),
            features: FeatureConfig::default(),
            strategy: Strategy::pairs(StrategyKind::CatRandom),
            seed: 0,
            epochs: 1,
            combine: CombineOptions::default(),
            batch: BatchOptions::default(),
            specaugment: None,
            pad_id: DEFAULT_PAD_ID,
            out_dir: out_dir.into(),
            report_path: None,
            cache_dir: None,
            emit: EmitMode::default(),
            workers: 0,
        }
    }

    pub fn report_path(&self) -> PathBuf {
        self.report_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("report.json"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("features"))
    }

    pub fn worker_count(&self) -> usize {
        let from_env = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok());
        match from_env.filter(|&n| n > 0) {
            Some(n) => n,
            None if self.workers > 0 => self.workers,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.manifest.is_file() {
            return Err(PipelineError::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        self.features.validate()?;
        Strategy::new(self.strategy.kind, self.strategy.arity)?;
        if self.combine.max_frames == 0 {
            return Err(AugmentError::InvalidMaxFrames.into());
        }
        if self.batch.budget_frames == 0 {
            return Err(BatchError::ZeroBudget.into());
        }
        if let Some(p) = &self.specaugment {
            p.validate(self.features.n_mels)
                .map_err(PipelineError::Config)?;
        }
        Ok(())
    }
}

/// Accepted utterances with audio paths resolved against the manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub index: SpeakerIndex,
    pub ingest: IngestReport,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl Corpus {
    fn new(utterances: Vec<Utterance>, diagnostics: Vec<RowDiagnostic>) -> Corpus {
        let index = build_speaker_index(&utterances);
        let parsed = crate::manifest::ParsedManifest {
            utterances,
            diagnostics,
        };
        let ingest = parsed.report(&index);
        Corpus {
            utterances: parsed.utterances,
            index,
            ingest,
            diagnostics: parsed.diagnostics,
        }
    }
}

pub fn load_corpus(path: &Path, mode: CorpusMode) -> Result<Corpus, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let parsed = parse_manifest(BufReader::new(file), mode)?;
    for d in &parsed.diagnostics {
        log::warn!(
            "{}:{}: skipped row{}: {}",
            path.display(),
            d.line,
            d.id.as_ref().map(|i| format!(" {i}")).unwrap_or_default(),
            d.reason
        );
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let utterances = parsed
        .utterances
        .into_iter()
        .map(|mut u| {
            u.audio_ref = u.audio_ref.resolve(base);
            u
        })
        .collect();
    Ok(Corpus::new(utterances, parsed.diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Index into the utterance list.
    Original(usize),
    /// Index into the epoch plan.
    Augmented(usize),
}

/// A filter/batching candidate: where it comes from and how long it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub source: Source,
    pub n_frames: usize,
}

impl Framed for Candidate {
    fn n_frames(&self) -> usize {
        self.n_frames
    }
}

/// Everything decided for an epoch before features are touched.
#[derive(Debug, Clone)]
pub struct EpochAssembly {
    pub plan: EpochPlan,
    pub combined: Combined<Candidate>,
    pub stream: EpochStream,
    pub timings: StageTimings,
}

impl EpochAssembly {
    pub fn lengths(&self) -> Vec<usize> {
        self.combined.instances.iter().map(|c| c.n_frames).collect()
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Plans, filters and packs one epoch from frame counts alone.
pub fn assemble_epoch(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    epoch: u64,
) -> Result<EpochAssembly, PipelineError> {
    let utts = &corpus.utterances;
    let t = Instant::now();
    let plan = augment::plan_epoch(utts, Some(&corpus.index), cfg.strategy, cfg.seed, epoch)?;
    let plan_ms = millis(t);

    let t = Instant::now();
    let original: Vec<Candidate> = utts
        .iter()
        .enumerate()
        .map(|(i, u)| Candidate {
            source: Source::Original(i),
            n_frames: u.n_frames,
        })
        .collect();
    let augmented: Vec<Candidate> = (0..plan.len())
        .map(|i| Candidate {
            source: Source::Augmented(i),
            n_frames: plan.entry_frames(i, utts),
        })
        .collect();
    let combined = combine(original, augmented, cfg.combine)?;
    let filter_ms = millis(t);

    let t = Instant::now();
    let stream = batching::make_batches(&combined.instances, &cfg.batch, cfg.seed, epoch)?;
    let batch_ms = millis(t);
    Ok(EpochAssembly {
        plan,
        combined,
        stream,
        timings: StageTimings {
            plan_ms,
            filter_ms,
            batch_ms,
            emit_ms: 0.0,
        },
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub plan_ms: f64,
    pub filter_ms: f64,
    pub batch_ms: f64,
    pub emit_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BySource {
    pub original: usize,
    pub augmented: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub planned: usize,
    pub materialized: usize,
    pub materialization_failures: usize,
    pub original_failures: usize,
    pub excluded_by_strategy: usize,
    pub exclusion_reasons: BTreeMap<&'static str, usize>,
    pub dropped_by_filter: BySource,
    pub dropped_frames: BySource,
    pub emitted: BySource,
    pub emitted_instances: usize,
    pub batch_count: usize,
    pub padding_waste: f64,
    pub total_frames_emitted: usize,
    pub strategy_histogram: BTreeMap<String, usize>,
    pub timings: StageTimings,
}

impl EpochReport {
    fn planned(a: &EpochAssembly) -> EpochReport {
        let mut reasons = BTreeMap::new();
        for (_, r) in a.plan.excluded() {
            *reasons.entry(r.as_str()).or_default() += 1;
        }
        let c = &a.combined;
        let lengths = a.lengths();
        let (_, true_frames) = a.stream.frame_totals(&lengths);
        let mut report = EpochReport {
            epoch: a.plan.epoch,
            planned: a.plan.len(),
            materialized: a.plan.len(),
            materialization_failures: 0,
            original_failures: 0,
            excluded_by_strategy: a.plan.excluded().len(),
            exclusion_reasons: reasons,
            dropped_by_filter: BySource {
                original: c.original.dropped,
                augmented: c.augmented.dropped,
            },
            dropped_frames: BySource {
                original: c.original.dropped_frames,
                augmented: c.augmented.dropped_frames,
            },
            emitted: BySource {
                original: c.original.kept,
                augmented: c.augmented.kept,
            },
            emitted_instances: c.instances.len(),
            batch_count: a.stream.batches.len(),
            padding_waste: a.stream.padding_waste(&lengths),
            total_frames_emitted: true_frames,
            strategy_histogram: BTreeMap::new(),
            timings: a.timings.clone(),
        };
        report.fill_histogram(a.plan.strategy.kind);
        report
    }

    fn fill_histogram(&mut self, kind: StrategyKind) {
        self.strategy_histogram.clear();
        if self.emitted.original > 0 {
            self.strategy_histogram
                .insert("original".into(), self.emitted.original);
        }
        if self.emitted.augmented > 0 {
            self.strategy_histogram
                .insert(kind.to_string(), self.emitted.augmented);
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Totals {
    pub instances: usize,
    pub frames: usize,
    pub batches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSettings {
    pub command: &'static str,
    pub manifest: String,
    pub mode: CorpusMode,
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: u64,
    pub max_frames: usize,
    pub include_original: bool,
    pub batch: BatchOptions,
    pub specaugment: Option<MaskPolicy>,
    pub features: FeatureConfig,
    pub emit: EmitMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnusableUtterance {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub settings: RunSettings,
    pub ingest: IngestReport,
    /// Utterances whose manifest frame count was corrected from the audio.
    pub frame_reconciliations: usize,
    /// Utterances dropped before planning because no features could be made.
    pub unusable: Vec<UnusableUtterance>,
    pub epochs: Vec<EpochReport>,
    pub totals: Totals,
    pub timings: RunTimings,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunTimings {
    pub ingest_ms: f64,
    pub features_ms: f64,
    pub total_ms: f64,
}

impl AuditReport {
    fn new(cfg: &PipelineConfig, command: &'static str, ingest: IngestReport) -> AuditReport {
        AuditReport {
            settings: RunSettings {
                command,
                manifest: cfg.manifest.display().to_string(),
                mode: cfg.mode,
                strategy: cfg.strategy,
                seed: cfg.seed,
                epochs: cfg.epochs,
                max_frames: cfg.combine.max_frames,
                include_original: cfg.combine.include_original,
                batch: cfg.batch,
                specaugment: cfg.specaugment,
                features: cfg.features.clone(),
                emit: cfg.emit,
            },
            ingest,
            frame_reconciliations: 0,
            unusable: Vec::new(),
            epochs: Vec::new(),
            totals: Totals::default(),
            timings: RunTimings::default(),
        }
    }

    fn push_epoch(&mut self, e: EpochReport) {
        self.totals.instances += e.emitted_instances;
        self.totals.frames += e.total_frames_emitted;
        self.totals.batches += e.batch_count;
        self.epochs.push(e);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} {}: {} utterances accepted, {} skipped, {} epochs\n",
            self.settings.command,
            self.settings.strategy.kind,
            self.ingest.accepted,
            self.ingest.skipped,
            self.epochs.len()
        );
        for e in &self.epochs {
            s.push_str(&format!(
                "  epoch {}: planned {}, excluded {}, filtered {}+{}, emitted {} instances / {} frames in {} batches, padding waste {:.2}%\n",
                e.epoch,
                e.planned,
                e.excluded_by_strategy,
                e.dropped_by_filter.original,
                e.dropped_by_filter.augmented,
                e.emitted_instances,
                e.total_frames_emitted,
                e.batch_count,
                e.padding_waste * 100.0
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_json()).map_err(io_err(path))
    }
}

/// Plans every epoch from manifest frame counts without loading audio.
pub fn audit(cfg: &PipelineConfig) -> Result<AuditReport, RunFailure> {
    let start = Instant::now();
    cfg.validate()?;
    let corpus = load_corpus(&cfg.manifest, cfg.mode)?;
    let mut report = AuditReport::new(cfg, "audit", corpus.ingest.clone());
    report.timings.ingest_ms = millis(start);
    for epoch in 0..cfg.epochs {
        match assemble_epoch(&corpus, cfg, epoch) {
            Ok(a) => report.push_epoch(EpochReport::planned(&a)),
            Err(error) => {
                return Err(RunFailure {
                    error,
                    partial: Some(Box::new(report)),
                })
            }
        }
    }
    report.timings.total_ms = millis(start);
    Ok(report)
}

/// Makes sure every utterance has features in the cache and corrects frame
/// counts that disagree with the manifest. Utterances that cannot be loaded
/// are removed from the corpus.
fn warm_cache(
    corpus: Corpus,
    extractor: &LogMelExtractor,
    cache: &FeatureArchive,
    pool: &rayon::ThreadPool,
    report: &mut AuditReport,
) -> Result<Corpus, PipelineError> {
    const CHUNK: usize = 256;
    let cfg = extractor.config();
    let mut kept = Vec::with_capacity(corpus.utterances.len());
    for chunk in corpus.utterances.chunks(CHUNK) {
        let results: Vec<Result<(Option<FeatureMatrix>, usize), FeatureError>> =
            pool.install(|| {
                chunk
                    .par_iter()
                    .map(|u| {
                        let stored = cache.contains(&u.id)
                            || matches!(u.audio_ref, AudioRef::Archive { .. });
                        if stored {
                            features::probe_frames(u, cfg, Some(cache)).map(|t| (None, t))
                        } else {
                            let AudioRef::File(path) = &u.audio_ref else {
                                unreachable!()
                            };
                            let pcm = features::read_pcm(path, cfg.sample_rate_hz)?;
                            let m = extractor.compute(&pcm)?;
                            let t = m.n_frames();
                            Ok((Some(m), t))
                        }
                    })
                    .collect()
            });
        for (u, result) in chunk.iter().zip(results) {
            match result {
                Ok((computed, frames)) => {
                    if let Some(m) = computed {
                        cache.put(&u.id, &m)?;
                    }
                    let mut u = u.clone();
                    if frames != u.n_frames {
                        log::warn!(
                            "{}: manifest says {} frames, audio gives {}; using {}",
                            u.id,
                            u.n_frames,
                            frames,
                            frames
                        );
                        report.frame_reconciliations += 1;
                        u.n_frames = frames;
                    }
                    kept.push(u);
                }
                Err(e) => {
                    log::warn!("{}: unusable, dropped from corpus: {e}", u.id);
                    report.unusable.push(UnusableUtterance {
                        id: u.id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    cache.flush()?;
    Ok(Corpus::new(kept, corpus.diagnostics))
}

struct Emitted {
    bytes: Vec<u8>,
    provenance: Vec<Vec<String>>,
    frames: Vec<u32>,
    padded: usize,
    original: usize,
    augmented: usize,
}

#[derive(Default)]
struct Failures {
    original: usize,
    augmented: usize,
}

struct EpochContext<'a> {
    corpus: &'a Corpus,
    cfg: &'a PipelineConfig,
    assembly: &'a EpochAssembly,
    extractor: &'a LogMelExtractor,
    cache: &'a FeatureArchive,
}

impl EpochContext<'_> {
    fn load(&self, i: usize) -> Result<FeatureMatrix, FeatureError> {
        load_or_compute(&self.corpus.utterances[i], self.extractor, Some(self.cache))
            .map(|l| l.features)
    }

    fn materialize(&self, slot: usize) -> Result<Instance, AugmentError> {
        let utts = &self.corpus.utterances;
        let (provenance, mut features, target) = match self.assembly.combined.instances[slot].source
        {
            Source::Original(i) => {
                let f = self.load(i).map_err(|source| AugmentError::Load {
                    id: utts[i].id.clone(),
                    source,
                })?;
                (vec![utts[i].id.clone()], f, utts[i].target.symbols())
            }
            Source::Augmented(e) => {
                let plan = &self.assembly.plan;
                let inst = augment::materialize(
                    plan.entry(e),
                    utts,
                    |i| self.load(i),
                    plan.strategy.kind,
                )?;
                (inst.constituents, inst.features, inst.target.symbols())
            }
        };
        let expected = self.assembly.combined.instances[slot].n_frames;
        if features.n_frames() != expected {
            return Err(AugmentError::Load {
                id: provenance.join("+"),
                source: FeatureError::Corrupt {
                    path: self.cache.dir().to_path_buf(),
                    offset: 0,
                    reason: format!("expected {expected} frames, loaded {}", features.n_frames()),
                },
            });
        }
        if let Some(policy) = &self.cfg.specaugment {
            let mut rng = mask_stream(self.cfg.seed, self.assembly.plan.epoch, slot as u64);
            features = apply_masks(&features, policy, &mut rng);
        }
        Ok(Instance {
            provenance,
            features,
            target,
        })
    }

    fn build(&self, batch: &[usize]) -> Result<(Option<Emitted>, Failures), PipelineError> {
        let mut failures = Failures::default();
        let mut group = Vec::with_capacity(batch.len());
        let (mut original, mut augmented) = (0, 0);
        for &slot in batch {
            let is_original = matches!(
                self.assembly.combined.instances[slot].source,
                Source::Original(_)
            );
            match self.materialize(slot) {
                Ok(inst) => {
                    if is_original {
                        original += 1;
                    } else {
                        augmented += 1;
                    }
                    group.push(inst);
                }
                Err(e) => {
                    log::warn!("epoch {}: dropping instance: {e}", self.assembly.plan.epoch);
                    if is_original {
                        failures.original += 1;
                    } else {
                        failures.augmented += 1;
                    }
                }
            }
        }
        if group.is_empty() {
            return Ok((None, failures));
        }
        let batch = batching::pad_and_collate(&group, self.cfg.pad_id)?;
        Ok((
            Some(Emitted {
                bytes: batch.encode(),
                frames: batch.feature_lengths.clone(),
                padded: batch.padded_frames(),
                provenance: batch.instance_ids,
                original,
                augmented,
            }),
            failures,
        ))
    }
}

enum Sink {
    Files(PathBuf),
    Stream(BufWriter<File>, PathBuf),
}

struct Writer {
    sink: Sink,
    provenance: BufWriter<File>,
    provenance_path: PathBuf,
    written: usize,
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    batch: usize,
    frames: &'a [u32],
    instances: &'a [Vec<String>],
}

impl Writer {
    fn create(cfg: &PipelineConfig, epoch: u64) -> Result<Writer, PipelineError> {
        let name = format!("epoch-{epoch:03}");
        let sink = match cfg.emit {
            EmitMode::Files => {
                let dir = cfg.out_dir.join(&name);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                }
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                Sink::Files(dir)
            }
            EmitMode::Stream => {
                let path = cfg.out_dir.join(format!("{name}.cabx"));
                let f = File::create(&path).map_err(io_err(&path))?;
                Sink::Stream(BufWriter::new(f), path)
            }
        };
        let provenance_path = cfg.out_dir.join(format!("{name}.provenance.jsonl"));
        let f = File::create(&provenance_path).map_err(io_err(&provenance_path))?;
        Ok(Writer {
            sink,
            provenance: BufWriter::new(f),
            provenance_path,
            written: 0,
        })
    }

    fn write(&mut self, e: &Emitted) -> Result<(), PipelineError> {
        match &mut self.sink {
            Sink::Files(dir) => {
                let path = dir.join(format!("batch-{:05}.cabx", self.written));
                fs::write(&path, &e.bytes).map_err(io_err(&path))?;
            }
            Sink::Stream(w, path) => {
                batching::write_stream_record(w, &e.bytes).map_err(io_err(path))?
            }
        }
        let line = ProvenanceLine {
            batch: self.written,
            frames: &e.frames,
            instances: &e.provenance,
        };
        serde_json::to_writer(&mut self.provenance, &line).expect("provenance serializes");
        writeln!(self.provenance).map_err(io_err(&self.provenance_path))?;
        self.written += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<(), PipelineError> {
        if let Sink::Stream(w, path) = &mut self.sink {
            w.flush().map_err(io_err(path))?;
        }
        self.provenance
            .flush()
            .map_err(io_err(&self.provenance_path))
    }
}

#[derive(Default)]
struct EmitStats {
    batches: usize,
    original: usize,
    augmented: usize,
    true_frames: usize,
    padded_frames: usize,
    failures: Failures,
}

fn emit_epoch(ctx: &EpochContext<'_>, workers: usize) -> Result<EmitStats, PipelineError> {
    let batches = &ctx.assembly.stream.batches;
    let window = (2 * workers).max(2);
    let mut writer = Writer::create(ctx.cfg, ctx.assembly.plan.epoch)?;
    let mut stats = EmitStats::default();

    std::thread::scope(|s| -> Result<(), PipelineError> {
        let (job_tx, job_rx): (Sender<usize>, Receiver<usize>) = bounded(window);
        let (done_tx, done_rx) = bounded(window);
        let (credit_tx, credit_rx) = bounded::<()>(window);
        for _ in 0..window {
            credit_tx.send(()).unwrap();
        }

        s.spawn(move || {
            for seq in 0..batches.len() {
                if credit_rx.recv().is_err() || job_tx.send(seq).is_err() {
                    break;
                }
            }
        });
        for _ in 0..workers {
            let job_rx = job_rx.clone();
            let done_tx = done_tx.clone();
            s.spawn(move || {
                for seq in job_rx {
                    let result = ctx.build(&batches[seq]);
                    let failed = result.is_err();
                    if done_tx.send((seq, result)).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(job_rx);
        drop(done_tx);

        let mut pending = BTreeMap::new();
        let mut next = 0;
        while next < batches.len() {
            let Ok((seq, result)) = done_rx.recv() else {
                return Err(PipelineError::Config("worker pool stopped early".into()));
            };
            pending.insert(seq, result);
            while let Some(result) = pending.remove(&next) {
                let (emitted, failures) = result?;
                stats.failures.original += failures.original;
                stats.failures.augmented += failures.augmented;
                if let Some(e) = emitted {
                    writer.write(&e)?;
                    stats.batches += 1;
                    stats.original += e.original;
                    stats.augmented += e.augmented;
                    stats.true_frames += e.frames.iter().map(|&f| f as usize).sum::<usize>();
                    stats.padded_frames += e.padded;
                }
                next += 1;
                let _ = credit_tx.send(());
            }
        }
        Ok(())
    })?;
    writer.finish()?;
    Ok(stats)
}

/// Runs every epoch and writes batches, provenance and the report.
pub fn run(cfg: &PipelineConfig) -> Result<AuditReport, RunFailure> {
    let start = Instant::now();
    cfg.validate()?;
    let corpus = load_corpus(&cfg.manifest, cfg.mode)?;
    let mut report = AuditReport::new(cfg, "run", corpus.ingest.clone());
    report.timings.ingest_ms = millis(start);

    let result = run_epochs(cfg, corpus, &mut report, start);
    let written = report.write(&cfg.report_path());
    match (result, written) {
        (Ok(()), Ok(())) => Ok(report),
        (Err(error), _) | (Ok(()), Err(error)) => Err(RunFailure {
            error,
            partial: Some(Box::new(report)),
        }),
    }
}

fn run_epochs(
    cfg: &PipelineConfig,
    corpus: Corpus,
    report: &mut AuditReport,
    start: Instant,
) -> Result<(), PipelineError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let workers = cfg.worker_count();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let extractor = LogMelExtractor::new(cfg.features.clone())?;
    let cache = FeatureArchive::open(cfg.cache_dir())?;

    let t = Instant::now();
    let corpus = warm_cache(corpus, &extractor, &cache, &pool, report)?;
    report.timings.features_ms = millis(t);
    if corpus.utterances.is_empty() {
        return Err(AugmentError::EmptyCorpus.into());
    }

    for epoch in 0..cfg.epochs {
        let assembly = assemble_epoch(&corpus, cfg, epoch)?;
        let mut epoch_report = EpochReport::planned(&assembly);
        let ctx = EpochContext {
            corpus: &corpus,
            cfg,
            assembly: &assembly,
            extractor: &extractor,
            cache: &cache,
        };
        let t = Instant::now();
        let stats = emit_epoch(&ctx, workers)?;
        epoch_report.timings.emit_ms = millis(t);

        epoch_report.materialization_failures = stats.failures.augmented;
        epoch_report.original_failures = stats.failures.original;
        epoch_report.materialized = assembly.plan.len() - stats.failures.augmented;
        epoch_report.emitted = BySource {
            original: stats.original,
            augmented: stats.augmented,
        };
        epoch_report.emitted_instances = stats.original + stats.augmented;
        epoch_report.batch_count = stats.batches;
        epoch_report.total_frames_emitted = stats.true_frames;
        epoch_report.padding_waste = if stats.padded_frames == 0 {
            0.0
        } else {
            (stats.padded_frames - stats.true_frames) as f64 / stats.padded_frames as f64
        };
        epoch_report.fill_histogram(cfg.strategy.kind);
        report.push_epoch(epoch_report);
    }
    report.timings.total_ms = millis(start);
    Ok(())
}
