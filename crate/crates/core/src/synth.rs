//! Planted-structure corpora with known pair identities and relationship clusters.
//!
//! Every ordered pair belongs to a template family. Within a family the
//! "lead" role and the "reply" role draw on disjoint word pools, and the
//! cluster id records which role the subject plays: `2f + 1` when the subject
//! leads, `2f + 2` when it replies. A reversible couple alternates lines in
//! one scene, so its two directions see the same text with the roles swapped.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueEntry, Episode, Pair};
use crate::evaluation::ClusterLabeling;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthProfile {
    /// Number of ordered pairs.
    pub n_pairs: usize,
    /// Target share of examples whose reversed pair also occurs.
    pub reversible: f64,
    /// Number of template clusters; must be even.
    pub n_clusters: usize,
    /// Examples per reversible ordered pair.
    pub examples_per_pair: usize,
    /// Mean words per utterance.
    pub words_per_line: f64,
    /// Gamma shape of the utterance-length distribution.
    pub length_shape: f64,
    /// Share of words drawn from the speaker's role pool.
    pub role_rate: f64,
    /// Share of words drawn from the speaker's own idiolect.
    pub idiolect_rate: f64,
    /// Set by the caller; not part of the serialized profile.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            n_pairs: 12,
            reversible: 0.9,
            n_clusters: 6,
            examples_per_pair: 200,
            words_per_line: 6.0,
            length_shape: 3.0,
            role_rate: 0.6,
            idiolect_rate: 0.2,
            seed: 0,
        }
    }
}

const MAX_SCENE_EXCHANGES: usize = 20;
const ROLE_WORDS: usize = 12;
const IDIOLECT_WORDS: usize = 3;
const FILLER_WORDS: usize = 200;

impl SynthProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidProfile(m.to_string()));
        if self.n_pairs < 2 {
            return bad("n_pairs must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.reversible) {
            return bad("reversible must lie in [0, 1]");
        }
        if self.n_clusters < 2 || !self.n_clusters.is_multiple_of(2) {
            return bad("n_clusters must be even and at least 2");
        }
        if self.n_clusters > self.n_pairs {
            return bad("n_clusters cannot exceed n_pairs");
        }
        if self.examples_per_pair == 0 {
            return bad("examples_per_pair must be positive");
        }
        if self.words_per_line.is_nan() || self.words_per_line < 1.0 {
            return bad("words_per_line must be at least 1");
        }
        if self.length_shape.is_nan() || self.length_shape <= 0.0 {
            return bad("length_shape must be positive");
        }
        if !(self.role_rate >= 0.0 && self.idiolect_rate >= 0.0 && self.role_rate + self.idiolect_rate <= 1.0) {
            return bad("role_rate and idiolect_rate must be non-negative and sum to at most 1");
        }
        Ok(())
    }

    /// Ordered pairs that belong to reversible couples (always even).
    pub fn reversible_pairs(&self) -> usize {
        let mut r = 2 * ((self.reversible * self.n_pairs as f64 / 2.0).floor() as usize);
        if r == self.n_pairs && self.reversible < 1.0 && r >= 2 {
            r -= 2;
        }
        r
    }

    /// Examples per one-way pair, sized so the inverse coverage matches `reversible`.
    pub fn one_way_examples(&self) -> usize {
        let r = self.reversible_pairs();
        let one_way = self.n_pairs - r;
        if one_way == 0 {
            return 0;
        }
        if r == 0 {
            return self.examples_per_pair;
        }
        let f = self.reversible;
        let n = (r * self.examples_per_pair) as f64 * (1.0 - f) / (f * one_way as f64);
        (n.round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub pair: Pair,
    pub cluster: usize,
    pub reversible: bool,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub show_id: String,
    pub episodes: Vec<Episode>,
    pub pairs: Vec<PlantedPair>,
}

impl SynthCorpus {
    pub fn labeling(&self) -> ClusterLabeling {
        ClusterLabeling {
            clusters: self.pairs.iter().map(|p| (p.pair.clone(), p.cluster)).collect(),
        }
    }

    /// Share of examples whose reversed pair also has examples.
    pub fn planted_coverage(&self) -> f64 {
        let total: usize = self.pairs.iter().map(|p| p.examples).sum();
        let rev: usize = self.pairs.iter().filter(|p| p.reversible).map(|p| p.examples).sum();
        rev as f64 / total as f64
    }
}

struct Lexicon {
    lead: Vec<Vec<String>>,
    reply: Vec<Vec<String>>,
    filler: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], VOWELS[rng.gen_range(0..VOWELS.len())]))
        .collect()
}

fn fresh_words(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>, n: usize, syllables: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Speaker<'a> {
    name: &'a str,
    role: &'a [String],
    idiolect: &'a [String],
}

fn line(rng: &mut ChaCha8Rng, p: &SynthProfile, lex: &Lexicon, who: &Speaker<'_>) -> String {
    let lengths = Gamma::new(p.length_shape, p.words_per_line / p.length_shape).expect("validated profile");
    let n = (lengths.sample(rng).round() as usize).max(1);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let pool = if u < p.role_rate {
            who.role
        } else if u < p.role_rate + p.idiolect_rate {
            who.idiolect
        } else {
            &lex.filler
        };
        words.push(pool[rng.gen_range(0..pool.len())].as_str());
    }
    let end = [".", "?", "!"][rng.gen_range(0..3)];
    format!("{}{end}", words.join(" "))
}

/// Generates the corpus for `profile`; identical profiles give identical corpora.
pub fn generate(profile: &SynthProfile) -> Result<SynthCorpus, SynthError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let families = profile.n_clusters / 2;
    let mut used = BTreeSet::new();
    let lex = Lexicon {
        lead: (0..families).map(|_| fresh_words(&mut rng, &mut used, ROLE_WORDS, 3)).collect(),
        reply: (0..families).map(|_| fresh_words(&mut rng, &mut used, ROLE_WORDS, 3)).collect(),
        filler: fresh_words(&mut rng, &mut used, FILLER_WORDS, 2),
    };

    let r = profile.reversible_pairs();
    let couples = r / 2;
    let one_way = profile.n_pairs - r;
    let one_way_n = profile.one_way_examples();

    let mut episodes = Vec::new();
    let mut pairs = Vec::new();
    let show_id = "synth".to_string();

    for (unit, kind) in (0..couples).map(|u| (u, true)).chain((0..one_way).map(|u| (couples + u, false))) {
        let family = unit % families;
        let lead = fresh_words(&mut rng, &mut used, 1, 2).remove(0).to_uppercase();
        let reply = fresh_words(&mut rng, &mut used, 1, 2).remove(0).to_uppercase();
        let lead_words = fresh_words(&mut rng, &mut used, IDIOLECT_WORDS, 3);
        let reply_words = fresh_words(&mut rng, &mut used, IDIOLECT_WORDS, 3);
        let lead_speaker = Speaker {
            name: &lead,
            role: &lex.lead[family],
            idiolect: &lead_words,
        };
        let reply_speaker = Speaker {
            name: &reply,
            role: &lex.reply[family],
            idiolect: &reply_words,
        };

        if kind {
            let mut remaining = profile.examples_per_pair;
            let mut scene = 0;
            while remaining > 0 {
                let m = remaining.min(MAX_SCENE_EXCHANGES);
                let mut entries = Vec::with_capacity(2 * m + 1);
                for _ in 0..m {
                    entries.push(DialogueEntry::new(lead_speaker.name, line(&mut rng, profile, &lex, &lead_speaker)));
                    entries.push(DialogueEntry::new(reply_speaker.name, line(&mut rng, profile, &lex, &reply_speaker)));
                }
                entries.push(DialogueEntry::new(lead_speaker.name, line(&mut rng, profile, &lex, &lead_speaker)));
                episodes.push(Episode {
                    show_id: show_id.clone(),
                    episode_id: format!("c{unit:02}_s{scene:02}"),
                    entries,
                });
                remaining -= m;
                scene += 1;
            }
            pairs.push(PlantedPair {
                pair: Pair::new(&lead, &reply),
                cluster: 2 * family + 1,
                reversible: true,
                examples: profile.examples_per_pair,
            });
            pairs.push(PlantedPair {
                pair: Pair::new(&reply, &lead),
                cluster: 2 * family + 2,
                reversible: true,
                examples: profile.examples_per_pair,
            });
        } else {
            // one-way pairs alternate which role the subject plays
            let subject_leads = (unit / families).is_multiple_of(2);
            let (first, second) = if subject_leads {
                (&lead_speaker, &reply_speaker)
            } else {
                (&reply_speaker, &lead_speaker)
            };
            for scene in 0..one_way_n {
                episodes.push(Episode {
                    show_id: show_id.clone(),
                    episode_id: format!("o{unit:02}_s{scene:03}"),
                    entries: vec![
                        DialogueEntry::new(first.name, line(&mut rng, profile, &lex, first)),
                        DialogueEntry::new(second.name, line(&mut rng, profile, &lex, second)),
                    ],
                });
            }
            pairs.push(PlantedPair {
                pair: Pair::new(first.name, second.name),
                cluster: 2 * family + if subject_leads { 1 } else { 2 },
                reversible: false,
                examples: one_way_n,
            });
        }
    }

    Ok(SynthCorpus {
        show_id,
        episodes,
        pairs,
    })
}

/// Examples per ordered pair in the generated episodes.
pub fn realized_counts(corpus: &SynthCorpus) -> BTreeMap<Pair, usize> {
    let examples: Vec<_> = corpus.episodes.iter().flat_map(crate::corpus::build_examples).collect();
    crate::corpus::pair_counts(&examples)
}
