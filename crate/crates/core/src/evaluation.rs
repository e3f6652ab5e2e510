//! Cosine silhouette scoring of relation embeddings against ground-truth clusters.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Pair, RelationExample};
use crate::encoder::{Encoder, EncoderError};
use crate::real::Real;
use crate::tokenizer::{encode, TokenizerError, Vocab};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("silhouette needs at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("{embeddings} embeddings but {labels} labels")]
    LengthMismatch { embeddings: usize, labels: usize },
    #[error("no cluster label for pair {0}")]
    Unlabeled(Pair),
    #[error("nothing to evaluate")]
    Empty,
    #[error("down-sampling fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("down-sampling trial {trial} emptied cluster {label}")]
    EmptiedCluster { trial: usize, label: usize },
    #[error("labeling file line {line}: {reason}")]
    BadLabeling { line: usize, reason: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    /// Diagnostic only; dot-product embeddings are compared by angle.
    Euclidean,
}

fn norm<T: Real>(v: ArrayView1<'_, T>) -> T {
    v.dot(&v).sqrt()
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`; 1 when either vector has zero norm.
pub fn cosine_distance<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::one();
    }
    let cos = (a.dot(&b) / (na * nb)).max(-T::one()).min(T::one());
    T::one() - cos
}

/// Symmetric pairwise distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix<T> {
    n: usize,
    data: Vec<T>,
    /// Vectors with zero norm (their cosine distances are all 1).
    pub zero_norm: usize,
}

impl<T: Real> DistanceMatrix<T> {
    pub fn new(embeddings: &[Array1<T>], metric: Metric) -> Self {
        let n = embeddings.len();
        let norms: Vec<T> = embeddings.iter().map(|e| norm(e.view())).collect();
        let zero_norm = norms.iter().filter(|&&x| x == T::zero()).count();
        if zero_norm > 0 {
            log::warn!("{zero_norm} zero-norm embeddings; their cosine distances default to 1");
        }
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = match metric {
                    Metric::Cosine if norms[i] == T::zero() || norms[j] == T::zero() => T::one(),
                    Metric::Cosine => {
                        let cos = embeddings[i].dot(&embeddings[j]) / (norms[i] * norms[j]);
                        T::one() - cos.max(-T::one()).min(T::one())
                    }
                    Metric::Euclidean => {
                        let diff = &embeddings[i] - &embeddings[j];
                        diff.dot(&diff).sqrt()
                    }
                };
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data, zero_norm }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }
}

/// Per-sample silhouettes for the samples `subset` of `dist`.
///
/// Samples alone in their cluster score 0, as do samples with `a = b = 0`.
fn silhouette_subset<T: Real>(
    dist: &DistanceMatrix<T>,
    labels: &[usize],
    subset: &[usize],
) -> Result<Vec<T>, EvalError> {
    let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in subset {
        let next = dense.len();
        dense.entry(labels[i]).or_insert(next);
    }
    if dense.len() < 2 {
        return Err(EvalError::TooFewClusters(dense.len()));
    }
    let ids: Vec<usize> = subset.iter().map(|&i| dense[&labels[i]]).collect();
    let mut counts = vec![0usize; dense.len()];
    for &c in &ids {
        counts[c] += 1;
    }

    let mut scores = Vec::with_capacity(subset.len());
    let mut sums = vec![T::zero(); dense.len()];
    for (pos, &i) in subset.iter().enumerate() {
        sums.fill(T::zero());
        for (other, &j) in subset.iter().enumerate() {
            if other != pos {
                sums[ids[other]] += dist.get(i, j);
            }
        }
        let own = ids[pos];
        if counts[own] < 2 {
            scores.push(T::zero());
            continue;
        }
        let a = sums[own] / T::of((counts[own] - 1) as f64);
        let b = (0..dense.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / T::of(counts[c] as f64))
            .fold(T::infinity(), T::min);
        let denom = a.max(b);
        scores.push(if denom > T::zero() { (b - a) / denom } else { T::zero() });
    }
    Ok(scores)
}

/// Per-sample silhouette scores from a precomputed distance matrix.
pub fn silhouette_samples<T: Real>(
    dist: &DistanceMatrix<T>,
    labels: &[usize],
) -> Result<Vec<T>, EvalError> {
    if dist.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            embeddings: dist.len(),
            labels: labels.len(),
        });
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    silhouette_subset(dist, labels, &all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Each ordered pair is its own cluster.
    Character,
    /// Examples labeled by ground-truth cluster.
    Cluster,
    /// Per-pair mean embeddings labeled by ground-truth cluster.
    Composite,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 3] = [ScoreMode::Character, ScoreMode::Cluster, ScoreMode::Composite];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Character => "character",
            ScoreMode::Cluster => "cluster",
            ScoreMode::Composite => "composite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub label: usize,
    pub size: usize,
    pub mean: f64,
    /// Sample variance (n - 1 denominator); 0 for a single member.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteReport {
    pub mode: ScoreMode,
    pub overall: f64,
    /// Standard deviation of the per-sample scores.
    pub std_dev: f64,
    pub clusters: Vec<ClusterScore>,
    pub samples: Vec<f64>,
    pub labels: Vec<usize>,
    pub zero_norm: usize,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

impl SilhouetteReport {
    pub fn from_scores(mode: ScoreMode, samples: Vec<f64>, labels: Vec<usize>, zero_norm: usize) -> Self {
        let mut by_label: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (&s, &l) in samples.iter().zip(&labels) {
            by_label.entry(l).or_default().push(s);
        }
        let clusters = by_label
            .into_iter()
            .map(|(label, scores)| {
                let (mean, variance) = mean_var(&scores);
                ClusterScore {
                    label,
                    size: scores.len(),
                    mean,
                    variance,
                }
            })
            .collect();
        let (overall, var) = if samples.is_empty() { (0.0, 0.0) } else { mean_var(&samples) };
        Self {
            mode,
            overall,
            std_dev: var.sqrt(),
            clusters,
            samples,
            labels,
            zero_norm,
        }
    }

    pub fn cluster(&self, label: usize) -> Option<&ClusterScore> {
        self.clusters.iter().find(|c| c.label == label)
    }
}

/// Cosine silhouette of `embeddings` under `labels`.
pub fn silhouette<T: Real>(
    embeddings: &[Array1<T>],
    labels: &[usize],
    mode: ScoreMode,
) -> Result<SilhouetteReport, EvalError> {
    silhouette_with(embeddings, labels, mode, Metric::Cosine)
}

pub fn silhouette_with<T: Real>(
    embeddings: &[Array1<T>],
    labels: &[usize],
    mode: ScoreMode,
    metric: Metric,
) -> Result<SilhouetteReport, EvalError> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            embeddings: embeddings.len(),
            labels: labels.len(),
        });
    }
    let dist = DistanceMatrix::new(embeddings, metric);
    let scores = silhouette_samples(&dist, labels)?;
    Ok(SilhouetteReport::from_scores(
        mode,
        scores.into_iter().map(Real::as_f64).collect(),
        labels.to_vec(),
        dist.zero_norm,
    ))
}

/// Mean silhouette under `shuffles` random permutations of `labels`.
pub fn shuffled_baseline<T: Real, R: Rng + ?Sized>(
    dist: &DistanceMatrix<T>,
    labels: &[usize],
    shuffles: usize,
    rng: &mut R,
) -> Result<Vec<f64>, EvalError> {
    let mut permuted = labels.to_vec();
    (0..shuffles)
        .map(|_| {
            permuted.shuffle(rng);
            let scores = silhouette_samples(dist, &permuted)?;
            Ok(scores.iter().map(|s| s.as_f64()).sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

/// Arithmetic mean of the raw embeddings in each group.
pub fn composite_embeddings<K: Ord + Clone, T: Real>(
    groups: &BTreeMap<K, Vec<Array1<T>>>,
) -> BTreeMap<K, Array1<T>> {
    groups
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| {
            let mut sum = Array1::zeros(v[0].len());
            for e in v {
                sum += e;
            }
            (k.clone(), sum / T::of(v.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpread {
    pub label: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub trials: Vec<f64>,
}

impl ClusterSpread {
    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-cluster silhouette means over `trials` uniform subsamples of
/// `round(fraction * n)` points.
pub fn downsample_stability<T: Real, R: Rng + ?Sized>(
    embeddings: &[Array1<T>],
    labels: &[usize],
    fraction: f64,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<ClusterSpread>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::BadFraction(fraction));
    }
    if embeddings.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            embeddings: embeddings.len(),
            labels: labels.len(),
        });
    }
    let dist = DistanceMatrix::new(embeddings, Metric::Cosine);
    let n = labels.len();
    let keep = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let all_labels: BTreeSet<usize> = labels.iter().copied().collect();
    let mut per_cluster: BTreeMap<usize, Vec<f64>> = all_labels.iter().map(|&l| (l, Vec::new())).collect();

    for trial in 0..trials {
        let mut subset = index::sample(rng, n, keep).into_vec();
        subset.sort_unstable();
        let present: BTreeSet<usize> = subset.iter().map(|&i| labels[i]).collect();
        if let Some(&label) = all_labels.difference(&present).next() {
            return Err(EvalError::EmptiedCluster { trial, label });
        }
        let scores = silhouette_subset(&dist, labels, &subset)?;
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (&i, s) in subset.iter().zip(scores) {
            let e = sums.entry(labels[i]).or_insert((0.0, 0));
            e.0 += s.as_f64();
            e.1 += 1;
        }
        for (label, (sum, count)) in sums {
            per_cluster.get_mut(&label).expect("known label").push(sum / count as f64);
        }
    }

    Ok(per_cluster
        .into_iter()
        .map(|(label, trials)| {
            let mut sorted = trials.clone();
            sorted.sort_by(f64::total_cmp);
            let median = match sorted.len() {
                0 => f64::NAN,
                m if m % 2 == 1 => sorted[m / 2],
                m => 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]),
            };
            ClusterSpread {
                label,
                min: sorted.first().copied().unwrap_or(f64::NAN),
                median,
                max: sorted.last().copied().unwrap_or(f64::NAN),
                trials,
            }
        })
        .collect())
}

/// Ground-truth cluster ids for ordered pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterLabeling {
    pub clusters: BTreeMap<Pair, usize>,
}

impl ClusterLabeling {
    /// Parses `subject,object,cluster_id` rows. `#` lines and a header row are skipped.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut clusters = BTreeMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| EvalError::BadLabeling {
                line: e.position().map_or(0, |p| p.line() as usize),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: &str| EvalError::BadLabeling {
                line,
                reason: reason.to_string(),
            };
            if record.get(0) == Some("subject") {
                continue;
            }
            if record.len() != 3 {
                return Err(bad("expected subject,object,cluster_id"));
            }
            let id: usize = record[2].parse().map_err(|_| bad("cluster_id is not an integer"))?;
            if clusters.insert(Pair::new(&record[0], &record[1]), id).is_some() {
                return Err(bad("duplicate pair"));
            }
        }
        Ok(Self { clusters })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subject", "object", "cluster_id"]).expect("in-memory write");
        for (pair, id) in &self.clusters {
            w.write_record([pair.subject.as_str(), pair.object.as_str(), &id.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("UTF-8 input")
    }

    pub fn get(&self, pair: &Pair) -> Option<usize> {
        self.clusters.get(pair).copied()
    }
}

/// One row of the per-cluster breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    /// Share of labeled pairs in this cluster.
    pub size_fraction: f64,
    pub cluster_mean: f64,
    pub cluster_variance: f64,
    pub composite_mean: f64,
    pub composite_variance: f64,
    pub improved_by_composition: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub character: SilhouetteReport,
    pub cluster: SilhouetteReport,
    pub composite: SilhouetteReport,
    pub rows: Vec<ClusterRow>,
    /// Ordered pairs in label order for the character and composite modes.
    pub pairs: Vec<Pair>,
    /// Example ids in sample order.
    pub example_ids: Vec<String>,
}

impl Evaluation {
    pub fn report(&self, mode: ScoreMode) -> &SilhouetteReport {
        match mode {
            ScoreMode::Character => &self.character,
            ScoreMode::Cluster => &self.cluster,
            ScoreMode::Composite => &self.composite,
        }
    }
}

/// Scores embeddings (one per example, ordered pair given per example) in all three modes.
pub fn evaluate_embeddings<T: Real>(
    embeddings: &[Array1<T>],
    pairs: &[Pair],
    example_ids: &[String],
    labeling: &ClusterLabeling,
    metric: Metric,
) -> Result<Evaluation, EvalError> {
    if embeddings.is_empty() {
        return Err(EvalError::Empty);
    }
    if embeddings.len() != pairs.len() {
        return Err(EvalError::LengthMismatch {
            embeddings: embeddings.len(),
            labels: pairs.len(),
        });
    }
    let distinct: Vec<Pair> = pairs.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let pair_label: BTreeMap<&Pair, usize> = distinct.iter().enumerate().map(|(i, p)| (p, i)).collect();
    let cluster_of = |p: &Pair| labeling.get(p).ok_or_else(|| EvalError::Unlabeled(p.clone()));

    let character_labels: Vec<usize> = pairs.iter().map(|p| pair_label[p]).collect();
    let cluster_labels = pairs.iter().map(cluster_of).collect::<Result<Vec<_>, _>>()?;

    let mut groups: BTreeMap<Pair, Vec<Array1<T>>> = BTreeMap::new();
    for (e, p) in embeddings.iter().zip(pairs) {
        groups.entry(p.clone()).or_default().push(e.clone());
    }
    let composites = composite_embeddings(&groups);
    let composite_vecs: Vec<Array1<T>> = composites.values().cloned().collect();
    let composite_labels = composites.keys().map(cluster_of).collect::<Result<Vec<_>, _>>()?;

    let character = silhouette_with(embeddings, &character_labels, ScoreMode::Character, metric)?;
    let cluster = silhouette_with(embeddings, &cluster_labels, ScoreMode::Cluster, metric)?;
    let composite = silhouette_with(&composite_vecs, &composite_labels, ScoreMode::Composite, metric)?;

    let rows = cluster
        .clusters
        .iter()
        .map(|c| {
            let comp = composite.cluster(c.label);
            let n_pairs = composite_labels.iter().filter(|&&l| l == c.label).count();
            let composite_mean = comp.map_or(f64::NAN, |s| s.mean);
            ClusterRow {
                cluster: c.label,
                size_fraction: n_pairs as f64 / composite_labels.len() as f64,
                cluster_mean: c.mean,
                cluster_variance: c.variance,
                composite_mean,
                composite_variance: comp.map_or(f64::NAN, |s| s.variance),
                improved_by_composition: composite_mean > c.mean,
            }
        })
        .collect();

    Ok(Evaluation {
        character,
        cluster,
        composite,
        rows,
        pairs: distinct,
        example_ids: example_ids.to_vec(),
    })
}

/// Unmasked embeddings of `examples`.
pub fn embed_examples<T: Real>(
    model: &Encoder<T>,
    vocab: &Vocab,
    examples: &[RelationExample],
) -> Result<Vec<Array1<T>>, EvalError> {
    // mask_prob is 0, so the generator is never consulted for a decision
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    examples
        .iter()
        .map(|ex| {
            let enc = encode(ex, vocab, 0.0, model.config().max_len, &mut rng)?;
            Ok(model.embed(&enc)?)
        })
        .collect()
}

/// Embeds validation examples with masking disabled and scores all three modes.
pub fn evaluate<T: Real>(
    model: &Encoder<T>,
    vocab: &Vocab,
    validation: &[RelationExample],
    labeling: &ClusterLabeling,
    metric: Metric,
) -> Result<Evaluation, EvalError> {
    let embeddings = embed_examples(model, vocab, validation)?;
    let pairs: Vec<Pair> = validation.iter().map(RelationExample::pair).collect();
    let ids: Vec<String> = validation.iter().map(|e| e.id.clone()).collect();
    evaluate_embeddings(&embeddings, &pairs, &ids, labeling, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n^2) silhouette written from the definition, without the distance matrix.
    fn brute_force(points: &[Array1<f64>], labels: &[usize]) -> Vec<f64> {
        let cos = |a: &Array1<f64>, b: &Array1<f64>| {
            let na = a.dot(a).sqrt();
            let nb = b.dot(b).sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
            }
        };
        let clusters: BTreeSet<usize> = labels.iter().copied().collect();
        (0..points.len())
            .map(|i| {
                let mean_to = |c: usize| {
                    let others: Vec<f64> = (0..points.len())
                        .filter(|&j| j != i && labels[j] == c)
                        .map(|j| cos(&points[i], &points[j]))
                        .collect();
                    (others.iter().sum::<f64>(), others.len())
                };
                let (own_sum, own_n) = mean_to(labels[i]);
                if own_n == 0 {
                    return 0.0;
                }
                let a = own_sum / own_n as f64;
                let b = clusters
                    .iter()
                    .filter(|&&c| c != labels[i])
                    .map(|&c| {
                        let (s, n) = mean_to(c);
                        s / n as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                if a.max(b) == 0.0 {
                    0.0
                } else {
                    (b - a) / a.max(b)
                }
            })
            .collect()
    }

    #[test]
    fn cosine_distance_cases() {
        let a = array![1.0f64, 2.0, -0.5];
        assert!(cosine_distance(a.view(), a.view()).abs() < 1e-12);
        assert!((cosine_distance(a.view(), (-&a).view()) - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 1.0);
        assert_eq!(cosine_distance(array![0.0, 0.0].view(), array![0.0, 1.0].view()), 1.0);
    }

    #[test]
    fn separated_identical_clusters_score_one() {
        let pts = vec![array![1.0, 0.0], array![1.0, 0.0], array![0.0, 1.0], array![0.0, 1.0]];
        let r = silhouette(&pts, &[0, 0, 1, 1], ScoreMode::Cluster).unwrap();
        assert!(r.samples.iter().all(|&s| s == 1.0));
        assert_eq!(r.overall, 1.0);
    }

    #[test]
    fn identical_points_score_zero() {
        let pts = vec![array![1.0, 1.0]; 4];
        let r = silhouette(&pts, &[0, 0, 1, 1], ScoreMode::Cluster).unwrap();
        assert!(r.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn singleton_scores_zero_and_one_cluster_errors() {
        let pts = vec![array![1.0, 0.0], array![0.9, 0.1], array![0.0, 1.0]];
        let r = silhouette(&pts, &[0, 0, 1], ScoreMode::Cluster).unwrap();
        assert_eq!(r.samples[2], 0.0);
        assert_eq!(r.cluster(1).unwrap().variance, 0.0);
        assert_eq!(
            silhouette(&pts, &[4, 4, 4], ScoreMode::Cluster).unwrap_err(),
            EvalError::TooFewClusters(1)
        );
    }

    #[test]
    fn six_points_three_clusters_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Array1<f64>> = (0..6)
            .map(|_| Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let r = silhouette(&pts, &labels, ScoreMode::Cluster).unwrap();
        for (a, b) in r.samples.iter().zip(brute_force(&pts, &labels)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> {
        (2usize..40, 2usize..6).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 5), n),
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(0.01f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_scale_invariant((pts, labels, scales) in instance()) {
            prop_assume!(labels.iter().collect::<BTreeSet<_>>().len() >= 2);
            let pts: Vec<Array1<f64>> = pts.into_iter().map(Array1::from).collect();
            let r = silhouette(&pts, &labels, ScoreMode::Cluster).unwrap();
            let oracle = brute_force(&pts, &labels);
            for (a, b) in r.samples.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(a));
            }
            let scaled: Vec<Array1<f64>> = pts.iter().zip(&scales).map(|(p, s)| p * *s).collect();
            let r2 = silhouette(&scaled, &labels, ScoreMode::Cluster).unwrap();
            for (a, b) in r.samples.iter().zip(&r2.samples) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let mean = r.samples.iter().sum::<f64>() / r.samples.len() as f64;
            prop_assert!((r.overall - mean).abs() < 1e-12);
            for c in &r.clusters {
                let members: Vec<f64> = r.samples.iter().zip(&labels).filter(|(_, &l)| l == c.label).map(|(s, _)| *s).collect();
                prop_assert!((c.mean - members.iter().sum::<f64>() / members.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composites() {
        let mut groups = BTreeMap::new();
        groups.insert("solo", vec![array![1.0, 2.0]]);
        groups.insert("pair", vec![array![1.0, -3.0], array![-1.0, 3.0]]);
        groups.insert("three", vec![array![1.0, 0.0], array![2.0, 3.0], array![0.0, 3.0]]);
        let c = composite_embeddings(&groups);
        assert_eq!(c["solo"], array![1.0, 2.0]);
        assert_eq!(c["pair"], array![0.0, 0.0]);
        assert_eq!(c["three"], array![1.0, 2.0]);
    }

    #[test]
    fn constructed_geometry_modes() {
        // pairs AB, CD in cluster 1 share a direction; EF, GH in cluster 2 share another
        let dir1 = array![1.0, 0.0, 0.0];
        let dir2 = array![0.0, 1.0, 0.0];
        let mut emb = Vec::new();
        let mut pairs = Vec::new();
        for (p, d) in [(("A", "B"), &dir1), (("C", "D"), &dir1), (("E", "F"), &dir2), (("G", "H"), &dir2)] {
            for _ in 0..3 {
                emb.push(d.clone());
                pairs.push(Pair::new(p.0, p.1));
            }
        }
        let labeling = ClusterLabeling::from_csv("# h\nsubject,object,cluster_id\nA,B,1\nC,D,1\nE,F,2\nG,H,2\n").unwrap();
        let ids: Vec<String> = (0..emb.len()).map(|i| i.to_string()).collect();
        let ev = evaluate_embeddings(&emb, &pairs, &ids, &labeling, Metric::Cosine).unwrap();
        assert!(ev.character.samples.iter().all(|&s| s == 0.0));
        assert!(ev.cluster.samples.iter().all(|&s| s == 1.0));
        assert!(ev.composite.samples.iter().all(|&s| s == 1.0));
        assert_eq!(ev.rows.len(), 2);
        assert_eq!(ev.rows[0].size_fraction, 0.5);

        let missing = ClusterLabeling::from_csv("A,B,1\n").unwrap();
        assert_eq!(
            evaluate_embeddings(&emb, &pairs, &ids, &missing, Metric::Cosine).unwrap_err(),
            EvalError::Unlabeled(Pair::new("C", "D"))
        );
    }

    #[test]
    fn labeling_parse_errors() {
        assert!(matches!(ClusterLabeling::from_csv("A,B\n"), Err(EvalError::BadLabeling { line: 1, .. })));
        assert!(matches!(ClusterLabeling::from_csv("A,B,x\n"), Err(EvalError::BadLabeling { .. })));
        assert!(matches!(ClusterLabeling::from_csv("A,B,1\nA,B,2\n"), Err(EvalError::BadLabeling { line: 2, .. })));
        let l = ClusterLabeling::from_csv("A,B,3\nB,A,4\n").unwrap();
        assert_eq!(ClusterLabeling::from_csv(&l.to_csv()).unwrap(), l);
    }

    fn two_blobs(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Array1<f64>>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let base = if c == 0 { array![1.0, 0.0, 0.0] } else { array![0.0, 1.0, 0.0] };
            pts.push(base + Array1::from_shape_fn(3, |_| rng.gen_range(-0.02..0.02)));
            labels.push(c);
        }
        (pts, labels)
    }

    #[test]
    fn full_fraction_has_no_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pts, labels) = two_blobs(20, &mut rng);
        let spread = downsample_stability(&pts, &labels, 1.0, 5, &mut rng).unwrap();
        assert!(spread.iter().all(|s| s.width() == 0.0 && s.trials.len() == 5));
    }

    #[test]
    fn separated_clusters_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pts, labels) = two_blobs(40, &mut rng);
        let spread = downsample_stability(&pts, &labels, 0.5, 20, &mut rng).unwrap();
        assert!(spread.iter().all(|s| s.trials.iter().all(|&t| t > 0.9)));
    }

    #[test]
    fn singleton_heavy_labeling_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pts, _) = two_blobs(10, &mut rng);
        let labels: Vec<usize> = (0..10).collect();
        let err = downsample_stability(&pts, &labels, 0.5, 20, &mut rng).unwrap_err();
        assert!(matches!(err, EvalError::EmptiedCluster { .. }));
        assert_eq!(
            downsample_stability(&pts, &labels, 0.0, 1, &mut rng).unwrap_err(),
            EvalError::BadFraction(0.0)
        );
    }

    #[test]
    fn shuffled_labels_score_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (pts, labels) = two_blobs(40, &mut rng);
        let dist = DistanceMatrix::new(&pts, Metric::Cosine);
        let base = shuffled_baseline(&dist, &labels, 20, &mut rng).unwrap();
        let real = silhouette_samples(&dist, &labels).unwrap().iter().sum::<f64>() / 40.0;
        assert!(base.iter().all(|&b| b < real));
    }
}
