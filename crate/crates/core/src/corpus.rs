//! Screenplay parsing, relation-statement construction and dataset splits.
//!
//! A screenplay episode is a sequence of `SPEAKER: utterance` lines. After
//! merging consecutive lines of the same speaker, every pair of adjacent
//! entries yields one [`RelationExample`] whose subject is the first speaker
//! and whose object is the second.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("train fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("top_k = {top_k} exceeds the {distinct} distinct ordered pairs")]
    TopKTooLarge { top_k: usize, distinct: usize },
}

/// An ordered (subject, object) character pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub subject: String,
    pub object: String,
}

impl Pair {
    pub fn new(subject: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            object: object.into(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.object.clone(), self.subject.clone())
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}>", self.subject, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueEntry {
    pub speaker: String,
    pub text: String,
}

impl DialogueEntry {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub show_id: String,
    pub episode_id: String,
    pub entries: Vec<DialogueEntry>,
}

/// Line filters applied before speaker recognition.
///
/// The text format is one directive per line. A bare line is a prefix whose
/// matching lines are dropped; `stop:<prefix>` drops the matching line and
/// everything after it (afterword blocks). Blank lines and lines starting
/// with `//` are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleaningRules {
    pub drop_prefixes: Vec<String>,
    pub stop_prefixes: Vec<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        let drops = [
            "#",
            "CUT TO",
            "FADE IN",
            "FADE OUT",
            "FADE TO",
            "DISSOLVE TO",
            "SMASH CUT",
            "[",
            "(",
        ];
        Self {
            drop_prefixes: drops.iter().map(|s| s.to_string()).collect(),
            stop_prefixes: vec!["<Back".to_string()],
        }
    }
}

impl CleaningRules {
    pub fn none() -> Self {
        Self {
            drop_prefixes: Vec::new(),
            stop_prefixes: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Self {
        let mut rules = Self::none();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            match line.strip_prefix("stop:") {
                Some(prefix) => rules.stop_prefixes.push(prefix.trim().to_string()),
                None => rules.drop_prefixes.push(line.to_string()),
            }
        }
        rules
    }

    fn drops(&self, line: &str) -> bool {
        self.drop_prefixes.iter().any(|p| line.starts_with(p.as_str()))
    }

    fn stops(&self, line: &str) -> bool {
        self.stop_prefixes.iter().any(|p| line.starts_with(p.as_str()))
    }
}

/// Result of parsing one raw episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedEpisode {
    pub episode: Episode,
    /// Non-blank lines that did not contribute to any entry.
    pub skipped_lines: usize,
}

fn speaker_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"^([\p{Lu}\p{Nd}][\p{Lu}\p{Nd}' ]*):(.*)$").expect("valid speaker regex")
    })
}

/// Splits `NAME: text` lines; the name must hold at least one uppercase letter.
fn speaker_line(line: &str) -> Option<(String, &str)> {
    let caps = speaker_pattern().captures(line)?;
    let name = caps.get(1)?.as_str();
    if !name.chars().any(char::is_uppercase) {
        return None;
    }
    let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
    Some((name, caps.get(2).map_or("", |m| m.as_str()).trim()))
}

pub fn parse_episode(
    raw: &str,
    show_id: &str,
    episode_id: &str,
    rules: &CleaningRules,
) -> ParsedEpisode {
    let mut entries = Vec::new();
    let mut current: Option<DialogueEntry> = None;
    let mut skipped = 0usize;
    let mut stopped = false;

    let mut close = |current: &mut Option<DialogueEntry>, skipped: &mut usize| {
        if let Some(entry) = current.take() {
            if entry.text.is_empty() {
                *skipped += 1;
            } else {
                entries.push(entry);
            }
        }
    };

    for line in raw.lines() {
        let line = line.trim();
        if stopped {
            if !line.is_empty() {
                skipped += 1;
            }
            continue;
        }
        if line.is_empty() {
            close(&mut current, &mut skipped);
            continue;
        }
        if rules.stops(line) {
            close(&mut current, &mut skipped);
            stopped = true;
            skipped += 1;
            continue;
        }
        if rules.drops(line) {
            skipped += 1;
            continue;
        }
        if let Some((speaker, text)) = speaker_line(line) {
            close(&mut current, &mut skipped);
            current = Some(DialogueEntry::new(speaker, text));
        } else if let Some(entry) = current.as_mut() {
            if !entry.text.is_empty() {
                entry.text.push(' ');
            }
            entry.text.push_str(line);
        } else {
            skipped += 1;
        }
    }
    close(&mut current, &mut skipped);

    ParsedEpisode {
        episode: Episode {
            show_id: show_id.to_string(),
            episode_id: episode_id.to_string(),
            entries,
        },
        skipped_lines: skipped,
    }
}

/// Renders entries back to `SPEAKER: text` lines, the inverse of [`parse_episode`].
pub fn serialize_episode(episode: &Episode) -> String {
    let mut out = String::new();
    for entry in &episode.entries {
        out.push_str(&entry.speaker);
        out.push_str(": ");
        out.push_str(&entry.text);
        out.push('\n');
    }
    out
}

/// Merges runs of consecutive entries by the same speaker, joining texts with a space.
pub fn deduplicate(entries: Vec<DialogueEntry>) -> Vec<DialogueEntry> {
    let mut out: Vec<DialogueEntry> = Vec::with_capacity(entries.len());
    for entry in entries {
        match out.last_mut() {
            Some(last) if last.speaker == entry.speaker => {
                last.text.push(' ');
                last.text.push_str(&entry.text);
            }
            _ => out.push(entry),
        }
    }
    out
}

/// One relation statement: context text plus ordered subject/object mentions.
///
/// Spans are `(start, end)` character offsets into `context`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationExample {
    pub id: String,
    pub context: String,
    pub subject: String,
    pub object: String,
    pub subject_span: (usize, usize),
    pub object_span: (usize, usize),
    pub show_id: String,
    pub episode_id: String,
}

impl RelationExample {
    pub fn pair(&self) -> Pair {
        Pair::new(self.subject.clone(), self.object.clone())
    }

    /// Text covered by a character span.
    pub fn span_text(&self, span: (usize, usize)) -> String {
        self.context
            .chars()
            .skip(span.0)
            .take(span.1.saturating_sub(span.0))
            .collect()
    }
}

/// Builds one example per adjacent entry pair of an already deduplicated episode.
pub fn build_examples(episode: &Episode) -> Vec<RelationExample> {
    episode
        .entries
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (first, second) = (&w[0], &w[1]);
            let context = format!(
                "{}: {} {}: {}",
                first.speaker, first.text, second.speaker, second.text
            );
            let subject_len = first.speaker.chars().count();
            let object_start = subject_len + 2 + first.text.chars().count() + 1;
            RelationExample {
                id: format!("{}/{}#{}", episode.show_id, episode.episode_id, i),
                context,
                subject: first.speaker.clone(),
                object: second.speaker.clone(),
                subject_span: (0, subject_len),
                object_span: (object_start, object_start + second.speaker.chars().count()),
                show_id: episode.show_id.clone(),
                episode_id: episode.episode_id.clone(),
            }
        })
        .collect()
}

pub fn pair_counts<'a>(examples: impl IntoIterator<Item = &'a RelationExample>) -> BTreeMap<Pair, usize> {
    let mut counts = BTreeMap::new();
    for ex in examples {
        *counts.entry(ex.pair()).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub count: usize,
    pub mean_length: f64,
}

impl SplitStats {
    pub fn of(split: &str, examples: &[RelationExample]) -> Self {
        let mean_length = if examples.is_empty() {
            0.0
        } else {
            examples.iter().map(tokenizer::encoded_length).sum::<usize>() as f64
                / examples.len() as f64
        };
        Self {
            split: split.to_string(),
            count: examples.len(),
            mean_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<RelationExample>,
    pub test: Vec<RelationExample>,
    pub validation: Vec<RelationExample>,
    /// Pairs removed by the minimum-count filter.
    pub dropped_pairs: usize,
    pub dropped_examples: usize,
}

impl DatasetSplits {
    /// True when the filter removed every example.
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.test.is_empty()
    }

    pub fn stats(&self) -> Vec<SplitStats> {
        let total: Vec<RelationExample> = self.train.iter().chain(&self.test).cloned().collect();
        vec![
            SplitStats::of("train", &self.train),
            SplitStats::of("test", &self.test),
            SplitStats::of("total", &total),
            SplitStats::of("validation", &self.validation),
        ]
    }
}

/// Drops pairs with fewer than `min_per_pair` examples, then shuffles and splits.
pub fn filter_and_split(
    examples: &[RelationExample],
    min_per_pair: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplits, CorpusError> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(CorpusError::InvalidFraction(train_fraction));
    }
    let counts = pair_counts(examples);
    let mut kept: Vec<RelationExample> = examples
        .iter()
        .filter(|ex| counts[&ex.pair()] >= min_per_pair)
        .cloned()
        .collect();
    let dropped_pairs = counts.values().filter(|&&c| c < min_per_pair).count();
    let dropped_examples = examples.len() - kept.len();
    if kept.is_empty() && !examples.is_empty() {
        log::warn!("every ordered pair has fewer than {min_per_pair} examples; splits are empty");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kept.shuffle(&mut rng);
    let n_train = (kept.len() as f64 * train_fraction).round() as usize;
    let test = kept.split_off(n_train.min(kept.len()));
    Ok(DatasetSplits {
        train: kept,
        test,
        validation: Vec::new(),
        dropped_pairs,
        dropped_examples,
    })
}

/// Pairs ranked by example count (descending), ties by pair (ascending).
pub fn ranked_pairs(examples: &[RelationExample]) -> Vec<(Pair, usize)> {
    let mut ranked: Vec<(Pair, usize)> = pair_counts(examples).into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// All examples of the `top_k` most prolific ordered pairs, minus excluded pairs.
pub fn build_validation(
    examples: &[RelationExample],
    top_k: usize,
    excluded_pairs: &[Pair],
) -> Result<Vec<RelationExample>, CorpusError> {
    let ranked = ranked_pairs(examples);
    if top_k > ranked.len() {
        return Err(CorpusError::TopKTooLarge {
            top_k,
            distinct: ranked.len(),
        });
    }
    let selected: Vec<&Pair> = ranked[..top_k]
        .iter()
        .map(|(p, _)| p)
        .filter(|p| !excluded_pairs.contains(p))
        .collect();
    Ok(examples
        .iter()
        .filter(|ex| selected.contains(&&ex.pair()))
        .cloned()
        .collect())
}
