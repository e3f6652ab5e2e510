use std::fs;
use std::path::{Path, PathBuf};

use narrel_core::config::PipelineConfig;
use narrel_core::corpus::{build_examples, deduplicate, parse_episode, CleaningRules, DialogueEntry, Pair};
use narrel_core::pipeline::{Pipeline, PipelineError};
use narrel_core::training::Split;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus")
}

fn fixture(name: &str) -> String {
    fs::read_to_string(fixture_dir().join("starlog").join(name)).unwrap()
}

fn small_config(out: &Path) -> PipelineConfig {
    let corpus = fixture_dir();
    let overrides = vec![
        format!("corpus_dir={:?}", corpus.display().to_string()),
        format!("out_dir={:?}", out.display().to_string()),
        "split.min_per_pair=2".into(),
        "split.top_k=4".into(),
        "split.train_fraction=0.75".into(),
        "model.d_model=8".into(),
        "model.n_layers=1".into(),
        "model.n_heads=2".into(),
        "model.d_ff=16".into(),
        "model.max_len=48".into(),
        "train.epochs=2".into(),
        "train.batch_size=4".into(),
        "eval.shuffles=10".into(),
        "eval.downsample_trials=3".into(),
    ];
    PipelineConfig::resolve(None, &overrides).unwrap()
}

#[test]
fn fixture_episode_one_parses_exactly() {
    let parsed = parse_episode(&fixture("s01e01.txt"), "starlog", "s01e01", &CleaningRules::default());
    assert_eq!(parsed.skipped_lines, 6);
    let entries = deduplicate(parsed.episode.entries);
    assert_eq!(
        entries,
        vec![
            DialogueEntry::new("KANE", "Report, commander."),
            DialogueEntry::new("CORTEZ", "Sensors show nothing, sir. The board is dark. Still dark."),
            DialogueEntry::new("KANE", "Then we wait. And we listen."),
            DialogueEntry::new("ODA", "Captain, a signal!"),
            DialogueEntry::new("KANE", "On screen."),
        ]
    );
}

#[test]
fn fixture_episode_two_parses_exactly() {
    let parsed = parse_episode(&fixture("s01e02.txt"), "starlog", "s01e02", &CleaningRules::default());
    assert_eq!(parsed.skipped_lines, 3);
    let entries = deduplicate(parsed.episode.entries);
    let speakers: Vec<&str> = entries.iter().map(|e| e.speaker.as_str()).collect();
    assert_eq!(speakers, ["ODA", "KANE", "ODA", "KANE", "CORTEZ", "KANE"]);
    assert_eq!(entries[2].text, "Trying. Got it!");
}

#[test]
fn fixture_episode_three_keeps_apostrophes_and_clock_times() {
    let parsed = parse_episode(&fixture("s01e03.txt"), "starlog", "s01e03", &CleaningRules::default());
    assert_eq!(parsed.skipped_lines, 2);
    let ep = parsed.episode;
    assert_eq!(ep.entries[1], DialogueEntry::new("T'PRELL", "All systems nominal. We arrive at 12:30 hours."));
    assert_eq!(ep.entries[2].speaker, "R2 UNIT");

    let examples = build_examples(&ep);
    assert_eq!(examples.len(), 3);
    let ex = &examples[1];
    assert_eq!(ex.pair(), Pair::new("T'PRELL", "R2 UNIT"));
    assert_eq!(ex.span_text(ex.subject_span), "T'PRELL");
    assert_eq!(ex.span_text(ex.object_span), "R2 UNIT");
    assert_eq!(ex.context, "T'PRELL: All systems nominal. We arrive at 12:30 hours. R2 UNIT: Beep.");
}

#[test]
fn parse_stage_totals_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_config(dir.path()));
    let s = p.parse().unwrap();
    let per_episode: Vec<(usize, usize, usize, usize)> =
        s.episodes.iter().map(|e| (e.entries, e.merged, e.examples, e.skipped_lines)).collect();
    assert_eq!(per_episode, [(5, 1, 4, 6), (6, 1, 5, 3), (4, 0, 3, 2)]);
    assert_eq!(s.examples, 12);
    assert_eq!(s.skipped_lines, 11);
    assert!(s.malformed_files.is_empty());
    // labels.csv sits at the corpus root and is not an episode
    assert_eq!(s.episodes.len(), 3);
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_config(dir.path()));
    let err = p.build().unwrap_err();
    assert!(matches!(err, PipelineError::Missing { stage: "parse", .. }), "{err}");
    assert!(err.to_string().contains("run `narrel parse` first"));

    p.parse().unwrap();
    p.build().unwrap();
    let err = p.eval().unwrap_err();
    assert!(err.to_string().contains("missing checkpoint for mode"), "{err}");
    assert!(err.to_string().contains("run `narrel train` first"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

fn run_all(out: &Path) {
    let p = Pipeline::new(small_config(out));
    p.parse().unwrap();
    let b = p.build().unwrap();
    assert_eq!(b.dropped_pairs, 3);
    assert_eq!(b.dropped_examples, 3);
    assert_eq!(b.validation_pairs, 4);
    let trained = p.train().unwrap();
    assert_eq!(trained.len(), 2);
    for t in &trained {
        assert!(t.initial_train_loss.is_finite() && t.final_train_loss.is_finite());
        assert!(t.curve.iter().any(|r| r.epoch == 2 && r.split == Split::Train));
    }
    p.embed().unwrap();
    let evals = p.eval().unwrap();
    for e in &evals {
        let c = e.evaluation.character.overall;
        assert!((-1.0..=1.0).contains(&c), "{c}");
        assert_eq!(e.shuffled_baseline.len(), 10);
        // KANE<->CORTEZ and KANE<->ODA are both present in both directions
        assert_eq!(e.reflections.len(), 4);
    }
    p.report().unwrap();
}

const ARTIFACTS: &[&str] = &[
    "config.toml",
    "examples.jsonl",
    "episodes.csv",
    "length_hist.csv",
    "parse_summary.json",
    "split_train.jsonl",
    "split_test.jsonl",
    "split_validation.jsonl",
    "split_stats.csv",
    "vocab.txt",
    "build_summary.json",
    "model_em.ckpt",
    "model_inv.ckpt",
    "loss_em.csv",
    "loss_inv.csv",
    "train_em.json",
    "train_inv.json",
    "embeddings_em.csv",
    "embeddings_inv.csv",
    "scores_em.csv",
    "scores_inv.csv",
    "composite_em.csv",
    "composite_inv.csv",
    "clusters_em.csv",
    "clusters_inv.csv",
    "eval_em.json",
    "eval_inv.json",
    "summary.csv",
    "clusters.csv",
    "histogram.csv",
];

#[test]
fn end_to_end_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path());
    let first: Vec<Vec<u8>> = ARTIFACTS
        .iter()
        .map(|name| fs::read(dir.path().join(name)).unwrap_or_else(|e| panic!("{name}: {e}")))
        .collect();
    for name in ARTIFACTS {
        fs::remove_file(dir.path().join(name)).unwrap();
    }
    run_all(dir.path());
    for (name, before) in ARTIFACTS.iter().zip(&first) {
        let after = fs::read(dir.path().join(name)).unwrap();
        assert!(&after == before, "{name} differs between runs");
    }

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("# narrel config="));
    let lines: Vec<&str> = summary.lines().skip(1).collect();
    assert!(lines[0].starts_with("model,character,cluster,composite"));
    assert_eq!(lines.len(), 3);
}
