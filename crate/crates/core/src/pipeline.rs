//! On-disk pipeline stages: parse, synth, build, train, embed, eval, report.
//!
//! Every text artifact starts with a `# narrel config=<hash> seed=<seed>` line.
//! Readers skip leading lines that start with `# `.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, PipelineConfig, Precision};
use crate::corpus::{
    build_examples, build_validation, deduplicate, filter_and_split, pair_counts, parse_episode, serialize_episode,
    CleaningRules, CorpusError, Pair, RelationExample, SplitStats,
};
use crate::encoder::{Encoder, EncoderError};
use crate::evaluation::{
    composite_embeddings, cosine_distance, downsample_stability, embed_examples, evaluate_embeddings,
    shuffled_baseline, ClusterLabeling, ClusterSpread, DistanceMatrix, EvalError, Evaluation,
};
use crate::real::Real;
use crate::synth::{generate, PlantedPair, SynthError, SynthProfile};
use crate::tokenizer::{build_vocab, encoded_length, TokenizerError, Vocab};
use crate::training::{train, LossMode, LossRecord, PairIndex, Split, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {what}: run `narrel {stage}` first ({path})")]
    Missing {
        what: String,
        stage: &'static str,
        path: PathBuf,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
}

impl PipelineError {
    /// 1 for usage and configuration problems, 2 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_required(path: &Path, what: &str, stage: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::Missing {
            what: what.to_string(),
            stage,
            path: path.to_path_buf(),
        });
    }
    fs::read_to_string(path).map_err(io_err(path))
}

/// Text after the leading `# ` header lines.
fn strip_header(text: &str) -> &str {
    let mut rest = text;
    while rest.starts_with("# ") {
        rest = rest.find('\n').map_or("", |i| &rest[i + 1..]);
    }
    rest
}

fn csv_text<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("UTF-8 fields")
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &str, stage: &'static str) -> Result<Vec<T>> {
    let text = read_required(path, what, stage)?;
    strip_header(&text)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| PipelineError::Data {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str, stage: &'static str) -> Result<T> {
    let text = read_required(path, what, stage)?;
    serde_json::from_str(strip_header(&text)).map_err(|e| PipelineError::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub show_id: String,
    pub episode_id: String,
    pub entries: usize,
    pub merged: usize,
    pub examples: usize,
    pub skipped_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub episodes: Vec<EpisodeRecord>,
    pub examples: usize,
    pub skipped_lines: usize,
    pub malformed_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub profile: SynthProfile,
    pub seed: u64,
    pub episodes: usize,
    pub planted_coverage: f64,
    pub pairs: Vec<PlantedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub stats: Vec<SplitStats>,
    pub dropped_pairs: usize,
    pub dropped_examples: usize,
    pub validation_pairs: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: LossMode,
    pub best_epoch: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_test_loss: Option<f64>,
    pub inverse_coverage: f64,
    pub curve: Vec<LossRecord>,
}

/// Cosine similarity between the composites of a pair and its reverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub pair: Pair,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: LossMode,
    pub evaluation: Evaluation,
    pub shuffled_baseline: Vec<f64>,
    pub shuffled_median: Option<f64>,
    /// Per-cluster spread under down-sampling, or the reason it failed.
    pub downsample: std::result::Result<Vec<ClusterSpread>, String>,
    pub reflections: Vec<Reflection>,
    /// Share of reversible pairs whose composites point in opposite directions.
    pub reflection_negative_fraction: Option<f64>,
}

fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Cosine similarities between composite(A, B) and composite(B, A) for each
/// pair whose reverse is present, in pair order.
pub fn reflections<T: Real>(embeddings: &[ndarray::Array1<T>], pairs: &[Pair]) -> Vec<Reflection> {
    let mut groups: BTreeMap<Pair, Vec<ndarray::Array1<T>>> = BTreeMap::new();
    for (e, p) in embeddings.iter().zip(pairs) {
        groups.entry(p.clone()).or_default().push(e.clone());
    }
    let composites = composite_embeddings(&groups);
    composites
        .iter()
        .filter_map(|(p, v)| {
            composites.get(&p.reversed()).map(|w| Reflection {
                pair: p.clone(),
                cosine: 1.0 - cosine_distance(v.view(), w.view()).as_f64(),
            })
        })
        .collect()
}

/// The pipeline stages over one resolved configuration.
pub struct Pipeline {
    pub config: PipelineConfig,
    stamp: String,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let stamp = config.stamp();
        Self { config, stamp }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn stamped(&self, body: &str) -> String {
        format!("# {}\n{body}", self.stamp)
    }

    fn write_stamped(&self, path: &Path, body: &str) -> Result<()> {
        write_file(path, self.stamped(body).as_bytes())
    }

    fn write_json<S: Serialize>(&self, path: &Path, value: &S) -> Result<()> {
        let body = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.write_stamped(path, &body)
    }

    fn write_jsonl<S: Serialize>(&self, path: &Path, items: &[S]) -> Result<()> {
        let mut body = String::new();
        for item in items {
            body.push_str(&serde_json::to_string(item).expect("serializable"));
            body.push('\n');
        }
        self.write_stamped(path, &body)
    }

    fn record_config(&self) -> Result<()> {
        self.write_stamped(&self.out("config.toml"), &self.config.to_toml())
    }

    fn rules(&self) -> Result<CleaningRules> {
        match &self.config.rules {
            Some(path) => Ok(CleaningRules::parse(&fs::read_to_string(path).map_err(io_err(path))?)),
            None => Ok(CleaningRules::default()),
        }
    }

    /// Parses every `<corpus>/<show>/<episode>.txt` (and top-level `.txt`
    /// files, attributed to a show named after the corpus directory).
    pub fn parse(&self) -> Result<ParseSummary> {
        let dir = &self.config.corpus_dir;
        if !dir.is_dir() {
            return Err(PipelineError::Io {
                path: dir.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
            });
        }
        let rules = self.rules()?;
        let root_show = dir.file_name().map_or("corpus".into(), |n| n.to_string_lossy().into_owned());

        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for entry in sorted_entries(dir)? {
            if entry.is_dir() {
                let show = entry.file_name().expect("entry has name").to_string_lossy().into_owned();
                files.extend(
                    sorted_entries(&entry)?
                        .into_iter()
                        .filter(|p| is_episode_file(p))
                        .map(|p| (show.clone(), p)),
                );
            } else if is_episode_file(&entry) {
                files.push((root_show.clone(), entry));
            }
        }

        let mut examples = Vec::new();
        let mut episodes = Vec::new();
        let mut malformed = Vec::new();
        let mut skipped_total = 0;
        for (show, path) in files {
            let episode_id = path.file_stem().expect("file has stem").to_string_lossy().into_owned();
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let Ok(text) = String::from_utf8(bytes) else {
                log::warn!("{}: not UTF-8, skipped", path.display());
                malformed.push(path.display().to_string());
                continue;
            };
            let parsed = parse_episode(&text, &show, &episode_id, &rules);
            let mut episode = parsed.episode;
            let raw_entries = episode.entries.len();
            episode.entries = deduplicate(episode.entries);
            let built = build_examples(&episode);
            skipped_total += parsed.skipped_lines;
            episodes.push(EpisodeRecord {
                show_id: show,
                episode_id,
                entries: episode.entries.len(),
                merged: raw_entries - episode.entries.len(),
                examples: built.len(),
                skipped_lines: parsed.skipped_lines,
            });
            examples.extend(built);
        }
        if episodes.is_empty() {
            log::warn!("no episodes found under {}", dir.display());
        }

        self.record_config()?;
        self.write_jsonl(&self.out("examples.jsonl"), &examples)?;
        let rows = episodes.iter().map(|e| {
            [
                e.show_id.clone(),
                e.episode_id.clone(),
                e.entries.to_string(),
                e.merged.to_string(),
                e.examples.to_string(),
                e.skipped_lines.to_string(),
            ]
        });
        self.write_stamped(
            &self.out("episodes.csv"),
            &csv_text(&["show_id", "episode_id", "entries", "merged", "examples", "skipped_lines"], rows),
        )?;
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for ex in &examples {
            *hist.entry(encoded_length(ex)).or_default() += 1;
        }
        self.write_stamped(
            &self.out("length_hist.csv"),
            &csv_text(&["length", "count"], hist.iter().map(|(l, c)| [l.to_string(), c.to_string()])),
        )?;
        let summary = ParseSummary {
            examples: examples.len(),
            skipped_lines: skipped_total,
            malformed_files: malformed,
            episodes,
        };
        self.write_json(&self.out("parse_summary.json"), &summary)?;
        Ok(summary)
    }

    /// Writes a planted-structure corpus and its labels into the corpus directory.
    pub fn synth(&self) -> Result<SynthSummary> {
        let profile = self.config.synth_profile();
        let corpus = generate(&profile)?;
        let dir = &self.config.corpus_dir;
        let show_dir = dir.join(&corpus.show_id);
        if show_dir.exists() {
            fs::remove_dir_all(&show_dir).map_err(io_err(&show_dir))?;
        }
        for ep in &corpus.episodes {
            let path = show_dir.join(format!("{}.txt", ep.episode_id));
            self.write_stamped(&path, &serialize_episode(ep))?;
        }
        self.write_stamped(&dir.join("labels.csv"), &corpus.labeling().to_csv())?;
        let summary = SynthSummary {
            seed: profile.seed,
            profile,
            episodes: corpus.episodes.len(),
            planted_coverage: corpus.planted_coverage(),
            pairs: corpus.pairs,
        };
        self.write_json(&dir.join("synth.json"), &summary)?;
        Ok(summary)
    }

    /// Filters, splits, selects validation pairs and builds the vocabulary.
    pub fn build(&self) -> Result<BuildSummary> {
        let examples: Vec<RelationExample> =
            read_jsonl(&self.out("examples.jsonl"), "parsed examples", "parse")?;
        let s = &self.config.split;
        let mut splits = filter_and_split(&examples, s.min_per_pair, s.train_fraction, self.config.stage_seed("split"))?;
        if splits.is_empty() {
            log::warn!("every pair has fewer than {} examples; splits are empty", s.min_per_pair);
        }
        let kept: Vec<RelationExample> = splits.train.iter().chain(&splits.test).cloned().collect();
        let distinct = pair_counts(&kept).len();
        if distinct > 0 {
            let top_k = if s.top_k > distinct {
                log::warn!("top_k {} exceeds the {distinct} kept pairs; using all of them", s.top_k);
                distinct
            } else {
                s.top_k
            };
            splits.validation = build_validation(&kept, top_k, &s.excluded()?)?;
        }

        self.record_config()?;
        for (name, part) in [
            ("train", &splits.train),
            ("test", &splits.test),
            ("validation", &splits.validation),
        ] {
            self.write_jsonl(&self.out(&format!("split_{name}.jsonl")), part)?;
        }
        let stats = splits.stats();
        let rows = stats
            .iter()
            .map(|st| [st.split.clone(), st.count.to_string(), st.mean_length.to_string()]);
        self.write_stamped(&self.out("split_stats.csv"), &csv_text(&["split", "count", "mean_length"], rows))?;

        let vocab_size = if splits.train.is_empty() {
            0
        } else {
            let vocab = build_vocab(&splits.train, self.config.vocab_size)?;
            self.write_stamped(&self.out("vocab.txt"), &vocab.to_text())?;
            vocab.len()
        };
        let summary = BuildSummary {
            stats,
            dropped_pairs: splits.dropped_pairs,
            dropped_examples: splits.dropped_examples,
            validation_pairs: pair_counts(&splits.validation).len(),
            vocab_size,
        };
        self.write_json(&self.out("build_summary.json"), &summary)?;
        Ok(summary)
    }

    fn split(&self, name: &str) -> Result<Vec<RelationExample>> {
        read_jsonl(&self.out(&format!("split_{name}.jsonl")), &format!("{name} split"), "build")
    }

    fn vocab(&self) -> Result<Vocab> {
        let path = self.out("vocab.txt");
        let text = read_required(&path, "vocabulary", "build")?;
        Ok(Vocab::from_text(strip_header(&text))?)
    }

    pub fn checkpoint_path(&self, mode: LossMode) -> PathBuf {
        self.out(&format!("model_{}.ckpt", mode.name()))
    }

    fn load_model<T: Real>(&self, mode: LossMode) -> Result<Encoder<T>> {
        let path = self.checkpoint_path(mode);
        if !path.exists() {
            return Err(PipelineError::Missing {
                what: format!("checkpoint for mode {mode}"),
                stage: "train",
                path,
            });
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        checkpoint::from_bytes(&bytes).map_err(|source| PipelineError::Checkpoint { path, source })
    }

    /// Trains one model per configured mode and keeps its best checkpoint.
    pub fn train(&self) -> Result<Vec<TrainSummary>> {
        match self.config.precision {
            Precision::F32 => self.train_as::<f32>(),
            Precision::F64 => self.train_as::<f64>(),
        }
    }

    fn train_as<T: Real>(&self) -> Result<Vec<TrainSummary>> {
        let train_split = self.split("train")?;
        let test_split = self.split("test")?;
        if train_split.is_empty() {
            return Err(TrainError::EmptyTrainSplit.into());
        }
        let vocab = self.vocab()?;
        let coverage = PairIndex::build(&train_split).inverse_coverage();
        self.record_config()?;

        let mut summaries = Vec::new();
        for &mode in &self.config.modes {
            let cfg = self.config.train_config(mode);
            let model = Encoder::<T>::init(self.config.encoder_config(vocab.len()))?;
            let outcome = train(model, &vocab, &train_split, &test_split, &cfg)?;
            let ckpt = checkpoint::to_bytes(&outcome.best, &self.stamp);
            write_file(&self.checkpoint_path(mode), &ckpt)?;

            let rows = outcome
                .curve
                .iter()
                .map(|r| [r.epoch.to_string(), r.split.name().to_string(), r.mean_loss.to_string()]);
            self.write_stamped(
                &self.out(&format!("loss_{}.csv", mode.name())),
                &csv_text(&["epoch", "split", "mean_loss"], rows),
            )?;
            let last_epoch = cfg.epochs;
            let summary = TrainSummary {
                mode,
                best_epoch: outcome.best_epoch,
                initial_train_loss: outcome.loss_at(0, Split::Train).unwrap_or(f64::NAN),
                final_train_loss: outcome.loss_at(last_epoch, Split::Train).unwrap_or(f64::NAN),
                best_test_loss: outcome.loss_at(outcome.best_epoch, Split::Test),
                inverse_coverage: coverage,
                curve: outcome.curve,
            };
            self.write_json(&self.out(&format!("train_{}.json", mode.name())), &summary)?;
            summaries.push(summary);
        }
        Ok(summaries)
    }

    /// Writes unmasked validation embeddings for every mode.
    pub fn embed(&self) -> Result<()> {
        match self.config.precision {
            Precision::F32 => self.embed_as::<f32>(),
            Precision::F64 => self.embed_as::<f64>(),
        }
    }

    fn embed_as<T: Real>(&self) -> Result<()> {
        let validation = self.split("validation")?;
        let vocab = self.vocab()?;
        for &mode in &self.config.modes {
            let model = self.load_model::<T>(mode)?;
            let embeddings = embed_examples(&model, &vocab, &validation)?;
            let d = model.config().d_model;
            let mut header = vec!["id".to_string(), "subject".into(), "object".into()];
            header.extend((0..d).map(|i| format!("e{i}")));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows = validation.iter().zip(&embeddings).map(|(ex, e)| {
                let mut row = vec![ex.id.clone(), ex.subject.clone(), ex.object.clone()];
                row.extend(e.iter().map(|x| x.to_string()));
                row
            });
            self.write_stamped(
                &self.out(&format!("embeddings_{}.csv", mode.name())),
                &csv_text(&header, rows),
            )?;
        }
        Ok(())
    }

    fn labeling(&self) -> Result<ClusterLabeling> {
        let path = self.config.labels_path();
        if !path.exists() {
            return Err(PipelineError::Missing {
                what: "cluster labels".into(),
                stage: "synth",
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(ClusterLabeling::from_csv(&text)?)
    }

    /// Scores every mode's validation embeddings in the three labeling modes.
    pub fn eval(&self) -> Result<Vec<EvalSummary>> {
        match self.config.precision {
            Precision::F32 => self.eval_as::<f32>(),
            Precision::F64 => self.eval_as::<f64>(),
        }
    }

    fn eval_as<T: Real>(&self) -> Result<Vec<EvalSummary>> {
        let validation = self.split("validation")?;
        let vocab = self.vocab()?;
        let labeling = self.labeling()?;
        let e = &self.config.eval;
        let mut out = Vec::new();
        for &mode in &self.config.modes {
            let model = self.load_model::<T>(mode)?;
            let embeddings = embed_examples(&model, &vocab, &validation)?;
            let pairs: Vec<Pair> = validation.iter().map(RelationExample::pair).collect();
            let ids: Vec<String> = validation.iter().map(|x| x.id.clone()).collect();
            let evaluation = evaluate_embeddings(&embeddings, &pairs, &ids, &labeling, e.metric)?;

            let dist = DistanceMatrix::new(&embeddings, e.metric);
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.stage_seed(&format!("shuffle:{}", mode.name())));
            let baseline = shuffled_baseline(&dist, &evaluation.character.labels, e.shuffles, &mut rng)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.stage_seed(&format!("downsample:{}", mode.name())));
            let downsample = downsample_stability(
                &embeddings,
                &evaluation.cluster.labels,
                e.downsample_fraction,
                e.downsample_trials,
                &mut rng,
            )
            .map_err(|err| {
                log::warn!("[{mode}] down-sampling: {err}");
                err.to_string()
            });
            let refl = reflections(&embeddings, &pairs);
            let negative = refl.iter().filter(|r| r.cosine < 0.0).count();
            let summary = EvalSummary {
                mode,
                shuffled_median: median(&baseline),
                shuffled_baseline: baseline,
                downsample,
                reflection_negative_fraction: (!refl.is_empty()).then(|| negative as f64 / refl.len() as f64),
                reflections: refl,
                evaluation,
            };
            self.write_eval_files(&summary, &validation, &labeling)?;
            out.push(summary);
        }
        Ok(out)
    }

    fn write_eval_files(&self, s: &EvalSummary, validation: &[RelationExample], labeling: &ClusterLabeling) -> Result<()> {
        let name = s.mode.name();
        let ev = &s.evaluation;
        let rows = validation.iter().enumerate().map(|(i, ex)| {
            [
                ex.id.clone(),
                ex.subject.clone(),
                ex.object.clone(),
                labeling.get(&ex.pair()).map_or(String::new(), |c| c.to_string()),
                ev.character.samples[i].to_string(),
                ev.cluster.samples[i].to_string(),
            ]
        });
        self.write_stamped(
            &self.out(&format!("scores_{name}.csv")),
            &csv_text(&["id", "subject", "object", "cluster", "character_score", "cluster_score"], rows),
        )?;
        let cosines: BTreeMap<&Pair, f64> = s.reflections.iter().map(|r| (&r.pair, r.cosine)).collect();
        let rows = ev.pairs.iter().enumerate().map(|(i, p)| {
            [
                p.subject.clone(),
                p.object.clone(),
                ev.composite.labels[i].to_string(),
                ev.composite.samples[i].to_string(),
                cosines.get(p).map_or(String::new(), |c| c.to_string()),
            ]
        });
        self.write_stamped(
            &self.out(&format!("composite_{name}.csv")),
            &csv_text(&["subject", "object", "cluster", "composite_score", "reverse_cosine"], rows),
        )?;
        self.write_stamped(&self.out(&format!("clusters_{name}.csv")), &cluster_table_csv(&[(s.mode, ev)]))?;
        self.write_json(&self.out(&format!("eval_{name}.json")), s)
    }

    /// Side-by-side tables and histogram data for every evaluated mode.
    pub fn report(&self) -> Result<()> {
        let mut evals = Vec::new();
        let mut trains = Vec::new();
        for &mode in &self.config.modes {
            let e: EvalSummary = read_json(
                &self.out(&format!("eval_{}.json", mode.name())),
                &format!("evaluation for mode {mode}"),
                "eval",
            )?;
            let t: TrainSummary = read_json(
                &self.out(&format!("train_{}.json", mode.name())),
                &format!("training summary for mode {mode}"),
                "train",
            )?;
            evals.push(e);
            trains.push(t);
        }

        let rows = evals.iter().zip(&trains).map(|(e, t)| {
            let ev = &e.evaluation;
            [
                e.mode.to_string(),
                ev.character.overall.to_string(),
                ev.cluster.overall.to_string(),
                ev.composite.overall.to_string(),
                opt(t.best_test_loss),
                opt(e.shuffled_median),
                opt(e.reflection_negative_fraction),
            ]
        });
        self.write_stamped(
            &self.out("summary.csv"),
            &csv_text(
                &[
                    "model",
                    "character",
                    "cluster",
                    "composite",
                    "test_loss",
                    "shuffled_character_median",
                    "reflection_negative_fraction",
                ],
                rows,
            ),
        )?;
        let pairs: Vec<(LossMode, &Evaluation)> = evals.iter().map(|e| (e.mode, &e.evaluation)).collect();
        self.write_stamped(&self.out("clusters.csv"), &cluster_table_csv(&pairs))?;

        const BINS: usize = 20;
        let mut rows = Vec::new();
        for e in &evals {
            for report in [&e.evaluation.character, &e.evaluation.cluster, &e.evaluation.composite] {
                let mut counts = [0usize; BINS];
                for &s in &report.samples {
                    let b = (((s + 1.0) / 2.0 * BINS as f64).floor() as isize).clamp(0, BINS as isize - 1);
                    counts[b as usize] += 1;
                }
                for (b, c) in counts.iter().enumerate() {
                    let lo = -1.0 + 2.0 * b as f64 / BINS as f64;
                    let hi = -1.0 + 2.0 * (b + 1) as f64 / BINS as f64;
                    rows.push([
                        e.mode.to_string(),
                        report.mode.name().to_string(),
                        lo.to_string(),
                        hi.to_string(),
                        c.to_string(),
                    ]);
                }
            }
        }
        self.write_stamped(
            &self.out("histogram.csv"),
            &csv_text(&["model", "mode", "bin_low", "bin_high", "count"], rows),
        )
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn cluster_table_csv(evals: &[(LossMode, &Evaluation)]) -> String {
    let rows = evals.iter().flat_map(|(mode, ev)| {
        ev.rows.iter().map(move |r| {
            [
                mode.to_string(),
                r.cluster.to_string(),
                r.size_fraction.to_string(),
                r.cluster_mean.to_string(),
                r.cluster_variance.to_string(),
                r.composite_mean.to_string(),
                r.composite_variance.to_string(),
                r.improved_by_composition.to_string(),
            ]
        })
    });
    csv_text(
        &[
            "model",
            "cluster",
            "size_fraction",
            "cluster_mean",
            "cluster_sample_variance",
            "composite_mean",
            "composite_sample_variance",
            "improved_by_composition",
        ],
        rows,
    )
}

fn is_episode_file(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e == "txt")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lines_are_stripped() {
        assert_eq!(strip_header("# a\n# b\nx\n# c\n"), "x\n# c\n");
        assert_eq!(strip_header("#\nx"), "#\nx");
        assert_eq!(strip_header("# only"), "");
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        let text = csv_text(&["a", "b"], [["x,y".to_string(), "q\"".to_string()]]);
        assert_eq!(text, "a,b\n\"x,y\",\"q\"\"\"\n");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Usage("x".into()).exit_code(), 1);
        let missing = PipelineError::Missing {
            what: "checkpoint for mode inv".into(),
            stage: "train",
            path: "out/model_inv.ckpt".into(),
        };
        assert_eq!(missing.exit_code(), 2);
        assert!(missing.to_string().starts_with("missing checkpoint"));
    }
}
