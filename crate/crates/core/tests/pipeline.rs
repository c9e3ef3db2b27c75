mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use concat_augment::augment::{plan_epoch, AugmentError, Strategy, StrategyKind};
use concat_augment::batching::{read_stream, Batch};
use concat_augment::features::FeatureArchive;
use concat_augment::manifest::{build_speaker_index, CorpusMode};
use concat_augment::pipeline::{self, load_corpus, EmitMode, PipelineConfig, PipelineError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(manifest: &Path, out: &Path, kind: StrategyKind) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(manifest, out);
    cfg.mode = CorpusMode::Tokens;
    cfg.strategy = Strategy::pairs(kind);
    cfg.seed = 7;
    cfg.workers = 2;
    cfg
}

fn batches(out: &Path, epoch: u64) -> Vec<Batch> {
    let dir = out.join(format!("epoch-{epoch:03}"));
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let provenance =
        fs::read_to_string(out.join(format!("epoch-{epoch:03}.provenance.jsonl"))).unwrap();
    let lines: Vec<serde_json::Value> = provenance
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), files.len());
    files
        .iter()
        .zip(lines)
        .map(|(p, line)| {
            let mut b = Batch::decode(&fs::read(p).unwrap()).unwrap();
            b.instance_ids = serde_json::from_value(line["instances"].clone()).unwrap();
            b
        })
        .collect()
}

#[test]
fn two_utterances_self_concat_emit_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = common::wav_corpus(dir.path(), 2, 1, &mut rng, 3000..=6000);
    let out = dir.path().join("out");
    let report = pipeline::run(&config(&m, &out, StrategyKind::CatSelf)).unwrap();
    let e = &report.epochs[0];
    assert_eq!(e.emitted_instances, 4);
    assert_eq!((e.emitted.original, e.emitted.augmented), (2, 2));

    let items: Vec<Vec<String>> = batches(&out, 0)
        .into_iter()
        .flat_map(|b| b.instance_ids)
        .collect();
    assert_eq!(items.len(), 4);
    for ids in items.iter().filter(|ids| ids.len() > 1) {
        assert_eq!(ids[0], ids[1]);
    }
    assert!(out.join("report.json").is_file());
    assert!(out.join("epoch-000.provenance.jsonl").is_file());
}

#[test]
fn batches_hold_concatenated_features_and_targets() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = common::wav_corpus(dir.path(), 12, 3, &mut rng, 2000..=9000);
    let out = dir.path().join("out");
    let cfg = config(&m, &out, StrategyKind::CatSpeaker);
    pipeline::run(&cfg).unwrap();

    let corpus = load_corpus(&m, CorpusMode::Tokens).unwrap();
    let cache = FeatureArchive::open(cfg.cache_dir()).unwrap();
    let by_id = |id: &str| corpus.utterances.iter().find(|u| u.id == id).unwrap();
    let mut seen = 0;
    for batch in batches(&out, 0) {
        for (i, ids) in batch.instance_ids.iter().enumerate() {
            let (feat, target) = batch.item(i);
            let parts: Vec<_> = ids
                .iter()
                .map(|id| cache.get(id).unwrap().unwrap())
                .collect();
            let expected: Vec<f32> = parts.iter().flat_map(|p| p.as_slice().to_vec()).collect();
            assert_eq!(feat.as_slice(), expected.as_slice());
            let tokens: Vec<u32> = ids
                .iter()
                .flat_map(|id| by_id(id).target.symbols())
                .collect();
            assert_eq!(target, tokens);
            if ids.len() == 2 {
                assert_eq!(by_id(&ids[0]).speaker_id, by_id(&ids[1]).speaker_id);
            }
            seen += 1;
        }
    }
    assert_eq!(seen, 24);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = common::wav_corpus(dir.path(), 40, 4, &mut rng, 1000..=20_000);
    let run = |name: &str, workers: usize| {
        let out = dir.path().join(name);
        let mut cfg = config(&m, &out, StrategyKind::CatRandom);
        cfg.epochs = 2;
        cfg.workers = workers;
        cfg.batch.budget_frames = 1500;
        cfg.combine.max_frames = 1500;
        cfg.specaugment = Some(Default::default());
        pipeline::run(&cfg).unwrap();
        out
    };
    let a = run("a", 1);
    let b = run("b", 4);
    let files = common::tree(&a);
    assert_eq!(files, common::tree(&b));
    for f in files.iter().filter(|f| !f.starts_with("features")) {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        if f.ends_with("report.json") {
            let mut x: serde_json::Value = serde_json::from_slice(&x).unwrap();
            let mut y: serde_json::Value = serde_json::from_slice(&y).unwrap();
            common::strip_timings(&mut x);
            common::strip_timings(&mut y);
            x["settings"]["manifest"] = y["settings"]["manifest"].clone();
            assert_eq!(x, y);
        } else {
            assert!(x == y, "{} differs", f.display());
        }
    }
}

#[test]
fn stream_mode_carries_the_same_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = common::wav_corpus(dir.path(), 20, 2, &mut rng, 1000..=8000);
    let files_out = dir.path().join("files");
    let stream_out = dir.path().join("stream");
    let mut cfg = config(&m, &files_out, StrategyKind::CatRandom);
    cfg.batch.budget_frames = 600;
    cfg.combine.max_frames = 600;
    pipeline::run(&cfg).unwrap();
    cfg.out_dir = stream_out.clone();
    cfg.emit = EmitMode::Stream;
    pipeline::run(&cfg).unwrap();

    let streamed = read_stream(fs::File::open(stream_out.join("epoch-000.cabx")).unwrap()).unwrap();
    let mut filed = batches(&files_out, 0);
    assert!(filed.len() > 1);
    filed.iter_mut().for_each(|b| b.instance_ids.clear());
    assert_eq!(streamed, filed);
}

#[test]
fn report_totals_match_independent_recount() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let utts = common::synthetic_utts(1000, 50, |_| rng.random_range(50..2200));
    let m = dir.path().join("train.tsv");
    common::write_manifest(&m, &utts);
    let mut cfg = config(&m, &dir.path().join("out"), StrategyKind::CatRandom);
    cfg.epochs = 3;
    let report = pipeline::audit(&cfg).unwrap();

    for e in &report.epochs {
        let plan = plan_epoch(&utts, None, cfg.strategy, cfg.seed, e.epoch).unwrap();
        let orig: usize = utts.iter().map(|u| u.n_frames).sum();
        let pairs: Vec<usize> = plan
            .entries()
            .map(|en| en.constituents().map(|c| utts[c].n_frames).sum())
            .collect();
        let filtered: usize = pairs.iter().filter(|&&f| f > 3000).sum();
        assert_eq!(
            e.total_frames_emitted,
            orig + pairs.iter().sum::<usize>() - filtered
        );
        let dropped = pairs.iter().filter(|&&f| f > 3000).count();
        assert_eq!(e.dropped_by_filter.augmented, dropped);
        assert_eq!(e.emitted_instances, 1000 + plan.len() - dropped);
        assert_eq!(e.planned, e.materialized + e.materialization_failures);
    }
}

#[test]
fn audit_and_run_agree_on_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = common::wav_corpus(dir.path(), 60, 6, &mut rng, 400..=40_000);
    let mut cfg = config(&m, &dir.path().join("out"), StrategyKind::CatSpeaker);
    cfg.combine.max_frames = 300;
    cfg.epochs = 2;
    let audited = pipeline::audit(&cfg).unwrap();
    let ran = pipeline::run(&cfg).unwrap();
    assert_eq!(ran.frame_reconciliations, 0);
    for (a, r) in audited.epochs.iter().zip(&ran.epochs) {
        assert_eq!(a.planned, r.planned);
        assert_eq!(a.excluded_by_strategy, r.excluded_by_strategy);
        assert_eq!(a.dropped_by_filter, r.dropped_by_filter);
        assert_eq!(a.emitted, r.emitted);
        assert_eq!(a.batch_count, r.batch_count);
        assert_eq!(a.total_frames_emitted, r.total_frames_emitted);
        assert!(a.dropped_by_filter.augmented > 0);
    }
}

#[test]
fn wrong_manifest_frames_are_reconciled() {
    let dir = tempfile::tempdir().unwrap();
    common::write_wav(&dir.path().join("a.wav"), &common::sine(440.0, 19_120, 0.3));
    common::write_wav(&dir.path().join("b.wav"), &common::sine(880.0, 8_000, 0.3));
    let m = dir.path().join("train.tsv");
    fs::write(
        &m,
        "id\taudio\tn_frames\ttgt_text\na\ta.wav\t120\t5 6\nb\tb.wav\t48\t7\n",
    )
    .unwrap();
    let report = pipeline::run(&config(
        &m,
        &dir.path().join("out"),
        StrategyKind::CatRandom,
    ))
    .unwrap();
    assert_eq!(report.frame_reconciliations, 1);
    // 118 + 48 for each original plus two pairs of 166
    assert_eq!(report.epochs[0].total_frames_emitted, 166 * 3);
}

#[test]
fn unreadable_audio_is_dropped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    common::write_wav(&dir.path().join("a.wav"), &common::sine(440.0, 4000, 0.3));
    common::write_wav(&dir.path().join("b.wav"), &common::sine(440.0, 4000, 0.3));
    common::write_wav(
        &dir.path().join("short.wav"),
        &common::sine(440.0, 100, 0.3),
    );
    let m = dir.path().join("train.tsv");
    fs::write(&m, "id\taudio\tn_frames\ttgt_text\na\ta.wav\t23\t5\nb\tb.wav\t23\t6\nshort\tshort.wav\t1\t7\ngone\tgone.wav\t10\t8\n").unwrap();
    let report = pipeline::run(&config(
        &m,
        &dir.path().join("out"),
        StrategyKind::CatRandom,
    ))
    .unwrap();
    let mut ids: Vec<_> = report.unusable.iter().map(|u| u.id.as_str()).collect();
    ids.sort();
    assert_eq!(ids, ["gone", "short"]);
    assert_eq!(report.epochs[0].emitted_instances, 4);
}

#[test]
fn speakerless_manifest_rejects_speaker_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let utts = common::synthetic_utts(10, 0, |_| 100);
    assert!(build_speaker_index(&utts).groups().is_empty());
    let m = dir.path().join("train.tsv");
    common::write_manifest(&m, &utts);
    let cfg = config(&m, &dir.path().join("out"), StrategyKind::CatSpeaker);
    let err = pipeline::audit(&cfg).unwrap_err();
    assert!(matches!(
        err.error,
        PipelineError::Augment(AugmentError::NoSpeakerLabels)
    ));

    let status = Command::new(env!("CARGO_BIN_EXE_concat-augment"))
        .args([
            "audit",
            "--mode",
            "tokens",
            "--strategy",
            "speaker",
            "--manifest",
        ])
        .arg(&m)
        .arg("--out")
        .arg(dir.path().join("cli"))
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("speaker"));
}

#[test]
fn cli_audit_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let utts = common::synthetic_utts(200, 10, |i| 100 + i * 7);
    let m = dir.path().join("train.tsv");
    common::write_manifest(&m, &utts);
    let out = dir.path().join("cli");
    let result = Command::new(env!("CARGO_BIN_EXE_concat-augment"))
        .args([
            "audit",
            "--mode",
            "tokens",
            "--strategy",
            "random",
            "--seed",
            "7",
            "--epochs",
            "2",
        ])
        .arg("--manifest")
        .arg(&m)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(String::from_utf8_lossy(&result.stdout).contains("epoch 1"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["ingest"]["accepted"], 200);
}

#[test]
fn cli_rejects_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let result = Command::new(env!("CARGO_BIN_EXE_concat-augment"))
        .args(["run", "--manifest"])
        .arg(dir.path().join("nope.tsv"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!result.status.success());
}
