//! Training manifest ingestion.
//!
//! Manifests are UTF-8, tab-separated, with a header row. Columns are looked
//! up by name so their order is free:
//!
//! | column     | required | meaning                                         |
//! |------------|----------|-------------------------------------------------|
//! | `id`       | yes      | unique utterance id                             |
//! | `audio`    | yes      | audio file path, or `shard:offset` into a feature archive |
//! | `n_frames` | yes      | number of 10 ms feature frames                  |
//! | `tgt_text` | yes      | target tokens or text, depending on [`CorpusMode`] |
//! | `speaker`  | no       | speaker id; empty means unknown                 |
//! | `src_text` | no       | carried through untouched                       |
//!
//! Fields may not contain tabs or newlines; there is no quoting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

pub const REQUIRED_COLUMNS: [&str; 4] = ["id", "audio", "n_frames", "tgt_text"];

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest header is missing required column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("manifest has no header row")]
    EmptyInput,
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("field {field:?} of utterance {id:?} contains a tab or newline")]
    UnencodableField { id: String, field: &'static str },
    #[error("unknown corpus mode {0:?} (expected tokens, text or asr-normalized)")]
    UnknownMode(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How `tgt_text` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusMode {
    /// Whitespace-separated non-negative integer token ids.
    Tokens,
    /// Text kept verbatim.
    #[default]
    Text,
    /// Text passed through [`normalize_target`].
    AsrNormalized,
}

impl FromStr for CorpusMode {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tokens" => Ok(CorpusMode::Tokens),
            "text" => Ok(CorpusMode::Text),
            "asr-normalized" => Ok(CorpusMode::AsrNormalized),
            other => Err(ManifestError::UnknownMode(other.to_string())),
        }
    }
}

/// A target sequence, opaque to everything downstream of the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Tokens(Vec<u32>),
    Text(String),
}

impl Target {
    /// Length in tokens, or in Unicode scalar values for text.
    pub fn len(&self) -> usize {
        match self {
            Target::Tokens(t) => t.len(),
            Target::Text(s) => s.chars().count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Symbols as emitted into batches: token ids, or code points for text.
    pub fn symbols(&self) -> Vec<u32> {
        match self {
            Target::Tokens(t) => t.clone(),
            Target::Text(s) => s.chars().map(u32::from).collect(),
        }
    }

    fn to_field(&self) -> String {
        match self {
            Target::Tokens(t) => {
                let parts: Vec<String> = t.iter().map(u32::to_string).collect();
                parts.join(" ")
            }
            Target::Text(s) => s.clone(),
        }
    }
}

/// Where an utterance's signal lives.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AudioRef {
    /// WAV file, or raw 16-bit little-endian mono PCM for any other extension.
    File(PathBuf),
    /// A record inside a feature archive shard, at a byte offset.
    Archive { shard: PathBuf, offset: u64 },
}

impl AudioRef {
    pub fn parse(field: &str) -> AudioRef {
        if let Some((path, offset)) = field.rsplit_once(':') {
            if !path.is_empty() && !offset.is_empty() && offset.bytes().all(|b| b.is_ascii_digit())
            {
                if let Ok(offset) = offset.parse() {
                    return AudioRef::Archive {
                        shard: PathBuf::from(path),
                        offset,
                    };
                }
            }
        }
        AudioRef::File(PathBuf::from(field))
    }

    /// Joins relative paths onto `base` (usually the manifest's directory).
    pub fn resolve(&self, base: &Path) -> AudioRef {
        match self {
            AudioRef::File(p) => AudioRef::File(base.join(p)),
            AudioRef::Archive { shard, offset } => AudioRef::Archive {
                shard: base.join(shard),
                offset: *offset,
            },
        }
    }
}

impl fmt::Display for AudioRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioRef::File(p) => write!(f, "{}", p.display()),
            AudioRef::Archive { shard, offset } => write!(f, "{}:{}", shard.display(), offset),
        }
    }
}

/// One accepted manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub audio_ref: AudioRef,
    pub n_frames: usize,
    pub target: Target,
    pub speaker_id: Option<String>,
    pub src_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SkipReason {
    FieldCount { expected: usize, found: usize },
    EmptyId,
    UnparseableFrames { value: String },
    NonPositiveFrames { value: i64 },
    EmptyTarget,
    BadToken { value: String },
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::FieldCount { expected, found } => {
                write!(f, "expected {expected} fields, found {found}")
            }
            SkipReason::EmptyId => write!(f, "empty id"),
            SkipReason::UnparseableFrames { value } => write!(f, "unparseable n_frames {value:?}"),
            SkipReason::NonPositiveFrames { value } => {
                write!(f, "n_frames must be >= 1, got {value}")
            }
            SkipReason::EmptyTarget => write!(f, "empty target"),
            SkipReason::BadToken { value } => write!(f, "invalid token id {value:?}"),
        }
    }
}

/// Why a data row was not accepted. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowDiagnostic {
    pub line: usize,
    pub id: Option<String>,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedManifest {
    pub utterances: Vec<Utterance>,
    pub diagnostics: Vec<RowDiagnostic>,
}

/// Summary written as JSON after ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub skipped: usize,
    pub speakerless: usize,
    pub singleton_speakers: usize,
}

impl ParsedManifest {
    pub fn report(&self, index: &SpeakerIndex) -> IngestReport {
        IngestReport {
            accepted: self.utterances.len(),
            skipped: self.diagnostics.len(),
            speakerless: index.speakerless().len(),
            singleton_speakers: index.singletons().count(),
        }
    }
}

struct Columns {
    id: usize,
    audio: usize,
    n_frames: usize,
    tgt_text: usize,
    speaker: Option<usize>,
    src_text: Option<usize>,
    width: usize,
}

impl Columns {
    fn from_header(line: &str) -> Result<Columns, ManifestError> {
        let names: Vec<&str> = line.split('\t').map(str::trim).collect();
        let find = |name: &str| names.iter().position(|n| *n == name);
        let missing: Vec<String> = REQUIRED_COLUMNS
            .iter()
            .filter(|c| find(c).is_none())
            .map(|c| c.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(ManifestError::MissingColumns(missing));
        }
        Ok(Columns {
            id: find("id").unwrap(),
            audio: find("audio").unwrap(),
            n_frames: find("n_frames").unwrap(),
            tgt_text: find("tgt_text").unwrap(),
            speaker: find("speaker"),
            src_text: find("src_text"),
            width: names.len(),
        })
    }
}

fn parse_target(field: &str, mode: CorpusMode) -> Result<Target, SkipReason> {
    let target = match mode {
        CorpusMode::Tokens => {
            let mut tokens = Vec::new();
            for tok in field.split_whitespace() {
                let id = tok.parse::<u32>().map_err(|_| SkipReason::BadToken {
                    value: tok.to_string(),
                })?;
                tokens.push(id);
            }
            Target::Tokens(tokens)
        }
        CorpusMode::Text => {
            if field.trim().is_empty() {
                return Err(SkipReason::EmptyTarget);
            }
            Target::Text(field.to_string())
        }
        CorpusMode::AsrNormalized => Target::Text(normalize_target(field)),
    };
    if target.is_empty() {
        return Err(SkipReason::EmptyTarget);
    }
    Ok(target)
}

fn parse_frames(field: &str) -> Result<usize, SkipReason> {
    let value: i64 = field
        .trim()
        .parse()
        .map_err(|_| SkipReason::UnparseableFrames {
            value: field.to_string(),
        })?;
    if value <= 0 {
        return Err(SkipReason::NonPositiveFrames { value });
    }
    usize::try_from(value).map_err(|_| SkipReason::UnparseableFrames {
        value: field.to_string(),
    })
}

/// Parses a manifest. Bad rows are skipped with a diagnostic; header
/// problems and duplicate ids are fatal.
pub fn parse_manifest<R: BufRead>(
    reader: R,
    mode: CorpusMode,
) -> Result<ParsedManifest, ManifestError> {
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            None => return Err(ManifestError::EmptyInput),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let cols = Columns::from_header(header.trim_end_matches('\r'))?;

    let mut out = ParsedManifest::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        let line_no = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let id = fields.get(cols.id).map(|s| s.trim().to_string());
        if let Some(id) = id.as_ref().filter(|s| !s.is_empty()) {
            if !seen.insert(id.clone()) {
                return Err(ManifestError::DuplicateId(id.clone()));
            }
        }
        let mut skip = |reason: SkipReason| {
            out.diagnostics.push(RowDiagnostic {
                line: line_no,
                id: id.clone().filter(|s| !s.is_empty()),
                reason,
            });
        };
        if fields.len() != cols.width {
            skip(SkipReason::FieldCount {
                expected: cols.width,
                found: fields.len(),
            });
            continue;
        }
        let id = fields[cols.id].trim();
        if id.is_empty() {
            skip(SkipReason::EmptyId);
            continue;
        }
        let n_frames = match parse_frames(fields[cols.n_frames]) {
            Ok(n) => n,
            Err(reason) => {
                skip(reason);
                continue;
            }
        };
        let target = match parse_target(fields[cols.tgt_text], mode) {
            Ok(t) => t,
            Err(reason) => {
                skip(reason);
                continue;
            }
        };
        let optional = |col: Option<usize>| {
            col.map(|c| fields[c].trim())
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        out.utterances.push(Utterance {
            id: id.to_string(),
            audio_ref: AudioRef::parse(fields[cols.audio].trim()),
            n_frames,
            target,
            speaker_id: optional(cols.speaker),
            src_text: optional(cols.src_text),
        });
    }
    Ok(out)
}

/// Writes utterances in the format [`parse_manifest`] reads.
pub fn write_manifest<W: Write>(mut w: W, utts: &[Utterance]) -> Result<(), ManifestError> {
    let with_src = utts.iter().any(|u| u.src_text.is_some());
    let mut header = String::from("id\taudio\tn_frames\ttgt_text\tspeaker");
    if with_src {
        header.push_str("\tsrc_text");
    }
    writeln!(w, "{header}")?;
    for u in utts {
        let audio = u.audio_ref.to_string();
        let target = u.target.to_field();
        let speaker = u.speaker_id.clone().unwrap_or_default();
        let src = u.src_text.clone().unwrap_or_default();
        let mut fields = vec![
            ("id", u.id.as_str()),
            ("audio", audio.as_str()),
            ("tgt_text", target.as_str()),
            ("speaker", speaker.as_str()),
        ];
        if with_src {
            fields.push(("src_text", src.as_str()));
        }
        for (name, value) in &fields {
            if value.contains(['\t', '\n', '\r']) {
                return Err(ManifestError::UnencodableField {
                    id: u.id.clone(),
                    field: name,
                });
            }
        }
        write!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            u.id, audio, u.n_frames, target, speaker
        )?;
        if with_src {
            write!(w, "\t{src}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Punctuation removed by [`normalize_target`] in addition to ASCII punctuation.
pub const EXTRA_PUNCTUATION: [char; 10] = ['«', '»', '¿', '¡', '–', '—', '‘', '’', '“', '”'];

pub fn is_removed_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCTUATION.contains(&c)
}

/// Lowercases, strips the fixed punctuation set and collapses whitespace.
///
/// The punctuation set is ASCII punctuation plus [`EXTRA_PUNCTUATION`]; it
/// does not depend on locale. Apostrophes are removed like any other mark,
/// so `l'eau` becomes `leau`.
pub fn normalize_target(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        let before = out.len();
        if before > 0 {
            out.push(' ');
        }
        let start = out.len();
        out.extend(word.chars().filter(|c| !is_removed_punctuation(*c)));
        if out.len() == start {
            out.truncate(before);
        }
    }
    out
}

/// Utterances grouped by exact speaker id.
///
/// Groups keep manifest order both among themselves (by first appearance)
/// and within each group. Members are indices into the utterance list the
/// index was built from.
#[derive(Debug, Clone, Default)]
pub struct SpeakerIndex {
    groups: Vec<SpeakerGroup>,
    by_name: HashMap<String, usize>,
    membership: Vec<Option<(usize, usize)>>,
    speakerless: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerGroup {
    pub speaker: String,
    pub members: Vec<usize>,
}

impl SpeakerIndex {
    pub fn build(utts: &[Utterance]) -> SpeakerIndex {
        let mut index = SpeakerIndex {
            membership: Vec::with_capacity(utts.len()),
            ..Default::default()
        };
        for (i, u) in utts.iter().enumerate() {
            match &u.speaker_id {
                None => {
                    index.speakerless.push(i);
                    index.membership.push(None);
                }
                Some(spk) => {
                    let g = *index.by_name.entry(spk.clone()).or_insert_with(|| {
                        index.groups.push(SpeakerGroup {
                            speaker: spk.clone(),
                            members: Vec::new(),
                        });
                        index.groups.len() - 1
                    });
                    let members = &mut index.groups[g].members;
                    index.membership.push(Some((g, members.len())));
                    members.push(i);
                }
            }
        }
        index
    }

    pub fn groups(&self) -> &[SpeakerGroup] {
        &self.groups
    }

    pub fn group(&self, speaker: &str) -> Option<&[usize]> {
        self.by_name
            .get(speaker)
            .map(|&g| self.groups[g].members.as_slice())
    }

    /// The group holding utterance `utt` and its position within it.
    pub fn membership(&self, utt: usize) -> Option<(&[usize], usize)> {
        self.membership
            .get(utt)
            .copied()
            .flatten()
            .map(|(g, pos)| (self.groups[g].members.as_slice(), pos))
    }

    pub fn speakerless(&self) -> &[usize] {
        &self.speakerless
    }

    /// Speakers with exactly one utterance.
    pub fn singletons(&self) -> impl Iterator<Item = &str> {
        self.groups
            .iter()
            .filter(|g| g.members.len() == 1)
            .map(|g| g.speaker.as_str())
    }

    /// Number of utterances the index was built over.
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }
}

pub fn build_speaker_index(utts: &[Utterance]) -> SpeakerIndex {
    SpeakerIndex::build(utts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "id\taudio\tn_frames\ttgt_text\tspeaker\n";

    fn parse(text: &str, mode: CorpusMode) -> Result<ParsedManifest, ManifestError> {
        parse_manifest(text.as_bytes(), mode)
    }

    fn utt(id: &str, speaker: Option<&str>) -> Utterance {
        Utterance {
            id: id.into(),
            audio_ref: AudioRef::File(format!("{id}.wav").into()),
            n_frames: 10,
            target: Target::Tokens(vec![1]),
            speaker_id: speaker.map(String::from),
            src_text: None,
        }
    }

    #[test]
    fn single_row() {
        let m = parse(
            &format!("{HEADER}u1\ta.wav\t120\t5 6 7\tspk_a\n"),
            CorpusMode::Tokens,
        )
        .unwrap();
        assert_eq!(
            m.utterances,
            vec![Utterance {
                id: "u1".into(),
                audio_ref: AudioRef::File("a.wav".into()),
                n_frames: 120,
                target: Target::Tokens(vec![5, 6, 7]),
                speaker_id: Some("spk_a".into()),
                src_text: None,
            }]
        );
        assert!(m.diagnostics.is_empty());
    }

    #[test]
    fn header_only() {
        let m = parse(HEADER, CorpusMode::Text).unwrap();
        assert!(m.utterances.is_empty());
        assert!(m.diagnostics.is_empty());
    }

    #[test]
    fn negative_frames_skipped() {
        let rows =
            "u1\ta\t10\tx\ts\nu2\ta\t11\tx\ts\nu3\ta\t-3\tx\ts\nu4\ta\t12\tx\ts\nu5\ta\t13\tx\ts\n";
        let m = parse(&format!("{HEADER}{rows}"), CorpusMode::Text).unwrap();
        assert_eq!(m.utterances.len(), 4);
        assert_eq!(
            m.diagnostics,
            vec![RowDiagnostic {
                line: 4,
                id: Some("u3".into()),
                reason: SkipReason::NonPositiveFrames { value: -3 },
            }]
        );
        let ids: Vec<_> = m.utterances.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(ids, ["u1", "u2", "u4", "u5"]);
    }

    #[test]
    fn row_level_errors() {
        let rows = "a\tx\tzero\tt\t\nb\tx\t0\tt\t\nc\tx\t5\t \t\nd\tx\t5\tt\n\tx\t5\tt\t\n";
        let m = parse(&format!("{HEADER}{rows}"), CorpusMode::Text).unwrap();
        assert!(m.utterances.is_empty());
        let reasons: Vec<_> = m.diagnostics.iter().map(|d| d.reason.clone()).collect();
        assert_eq!(
            reasons,
            vec![
                SkipReason::UnparseableFrames {
                    value: "zero".into()
                },
                SkipReason::NonPositiveFrames { value: 0 },
                SkipReason::EmptyTarget,
                SkipReason::FieldCount {
                    expected: 5,
                    found: 4
                },
                SkipReason::EmptyId,
            ]
        );
    }

    #[test]
    fn bad_token_skipped() {
        let m = parse(&format!("{HEADER}u1\ta\t5\t1 two\t\n"), CorpusMode::Tokens).unwrap();
        assert_eq!(
            m.diagnostics[0].reason,
            SkipReason::BadToken {
                value: "two".into()
            }
        );
    }

    #[test]
    fn missing_columns_named() {
        match parse("id\taudio\tspeaker\n", CorpusMode::Text) {
            Err(ManifestError::MissingColumns(cols)) => assert_eq!(cols, ["n_frames", "tgt_text"]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse("", CorpusMode::Text),
            Err(ManifestError::EmptyInput)
        ));
    }

    #[test]
    fn duplicate_id_is_fatal() {
        let text = format!("{HEADER}u1\ta\t5\tx\t\nu1\tb\t6\ty\t\n");
        match parse(&text, CorpusMode::Text) {
            Err(ManifestError::DuplicateId(id)) => assert_eq!(id, "u1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn column_order_is_free() {
        let text = "speaker\ttgt_text\tn_frames\textra\taudio\tid\r\nbob\tHi there\t7\t?\tshard-0.bin:128\tq\r\n";
        let m = parse(text, CorpusMode::AsrNormalized).unwrap();
        let u = &m.utterances[0];
        assert_eq!(u.id, "q");
        assert_eq!(u.target, Target::Text("hi there".into()));
        assert_eq!(
            u.audio_ref,
            AudioRef::Archive {
                shard: "shard-0.bin".into(),
                offset: 128
            }
        );
        assert_eq!(u.speaker_id.as_deref(), Some("bob"));
    }

    #[test]
    fn empty_speaker_is_absent() {
        let m = parse(&format!("{HEADER}u1\ta\t5\tx\t\n"), CorpusMode::Text).unwrap();
        assert_eq!(m.utterances[0].speaker_id, None);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_target("Hello, World!"), "hello world");
        assert_eq!(normalize_target("¿Qué tal?"), "qué tal");
        assert_eq!(normalize_target("A  B\tC"), "a b c");
        assert_eq!(normalize_target("  «Ça va» — oui ! "), "ça va oui");
        assert_eq!(normalize_target("l'eau"), "leau");
        assert_eq!(normalize_target("“Straße”"), "straße");
        assert_eq!(normalize_target("..."), "");
    }

    #[test]
    fn asr_normalized_rows_with_only_punctuation_are_empty() {
        let m = parse(
            &format!("{HEADER}u1\ta\t5\t?!\t\n"),
            CorpusMode::AsrNormalized,
        )
        .unwrap();
        assert_eq!(m.diagnostics[0].reason, SkipReason::EmptyTarget);
    }

    #[test]
    fn speaker_index_partition() {
        let utts = vec![
            utt("u1", Some("a")),
            utt("u2", Some("a")),
            utt("u3", Some("b")),
        ];
        let idx = build_speaker_index(&utts);
        assert_eq!(idx.group("a"), Some(&[0, 1][..]));
        assert_eq!(idx.group("b"), Some(&[2][..]));
        assert_eq!(idx.singletons().collect::<Vec<_>>(), ["b"]);
        assert_eq!(idx.membership(1), Some((&[0, 1][..], 1)));
        assert!(build_speaker_index(&[]).groups().is_empty());
    }

    #[test]
    fn speakerless_excluded_from_groups() {
        let utts = vec![utt("u1", None), utt("u2", Some("a"))];
        let idx = build_speaker_index(&utts);
        assert_eq!(idx.speakerless(), &[0]);
        assert_eq!(idx.membership(0), None);
        let m = ParsedManifest {
            utterances: utts,
            diagnostics: vec![],
        };
        assert_eq!(
            m.report(&idx),
            IngestReport {
                accepted: 2,
                skipped: 0,
                speakerless: 1,
                singleton_speakers: 1
            }
        );
    }

    #[test]
    fn thousand_utterances_over_ten_speakers() {
        let utts: Vec<_> = (0..1000)
            .map(|i| {
                let spk = (i * 7919 % 10).to_string();
                utt(
                    &format!("u{i}"),
                    if i % 13 == 0 {
                        None
                    } else {
                        Some(spk.as_str())
                    },
                )
            })
            .collect();
        let idx = build_speaker_index(&utts);
        let grouped: usize = idx.groups().iter().map(|g| g.members.len()).sum();
        let expected_grouped = (0..1000).filter(|i| i % 13 != 0).count();
        assert_eq!(grouped, expected_grouped);
        assert_eq!(grouped + idx.speakerless().len(), 1000);
        for g in idx.groups() {
            assert!(g
                .members
                .iter()
                .all(|&m| utts[m].speaker_id.as_deref() == Some(g.speaker.as_str())));
        }
    }

    fn arb_utterance() -> impl Strategy<Value = Utterance> {
        (
            "[a-z0-9_]{1,8}",
            "[a-z/]{1,10}(\\.wav|:[0-9]{1,5})",
            1usize..100_000,
            prop_oneof![prop::collection::vec(0u32..50_000, 1..20).prop_map(Target::Tokens),],
            prop::option::of("[a-z]{1,4}"),
        )
            .prop_map(|(id, audio, n_frames, target, speaker_id)| Utterance {
                id,
                audio_ref: AudioRef::parse(&audio),
                n_frames,
                target,
                speaker_id,
                src_text: None,
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_target(&s);
            prop_assert_eq!(normalize_target(&once), once.clone());
            prop_assert_eq!(once.to_lowercase(), once.clone());
            prop_assert!(!once.chars().any(is_removed_punctuation));
        }

        #[test]
        fn write_then_parse_is_identity(mut utts in prop::collection::vec(arb_utterance(), 0..30)) {
            let mut seen = HashSet::new();
            utts.retain(|u| seen.insert(u.id.clone()));
            let mut buf = Vec::new();
            write_manifest(&mut buf, &utts).unwrap();
            let parsed = parse_manifest(buf.as_slice(), CorpusMode::Tokens).unwrap();
            prop_assert!(parsed.diagnostics.is_empty());
            prop_assert_eq!(parsed.utterances, utts);
        }

        #[test]
        fn speaker_partition_counts(speakers in prop::collection::vec(prop::option::of(0u8..6), 0..200)) {
            let utts: Vec<_> = speakers
                .iter()
                .enumerate()
                .map(|(i, s)| utt(&i.to_string(), s.map(|s| s.to_string()).as_deref()))
                .collect();
            let idx = build_speaker_index(&utts);
            let grouped: usize = idx.groups().iter().map(|g| g.members.len()).sum();
            prop_assert_eq!(grouped + idx.speakerless().len(), utts.len());
        }
    }
}
