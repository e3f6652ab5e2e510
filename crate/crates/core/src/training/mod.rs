//! Contrastive training of the relation encoder.

pub mod loss;
pub mod sampler;

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{pair_loss, prob_inverse, prob_same, LossMode, PairLoss, Relation};
pub use sampler::{nce_sample, PairBatch, PairIndex, SamplerError};

use crate::encoder::{embedding_upstream, relation_embedding, Encoder, EncoderError, Params};
use crate::optim::{AdamW, AdamWConfig};
use crate::real::Real;
use crate::corpus::RelationExample;
use crate::tokenizer::{encode, TokenizedExample, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_anchor: usize,
    pub mask_prob: f64,
    pub weight_decay: f64,
    pub mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 32,
            epochs: 5,
            samples_per_anchor: 8,
            mask_prob: 0.7,
            weight_decay: 0.01,
            mode: LossMode::Inv,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.samples_per_anchor < 2 || !self.samples_per_anchor.is_multiple_of(2) {
            return Err(TrainError::InvalidConfig(format!(
                "samples_per_anchor must be even and at least 2, got {}",
                self.samples_per_anchor
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(TrainError::InvalidConfig(format!(
                "mask_prob must lie in [0, 1], got {}",
                self.mask_prob
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One point of the loss curve. Epoch 0 is the evaluation before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: Split,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub curve: Vec<LossRecord>,
    /// 1-based epoch with the lowest test loss (the last epoch without a test split).
    pub best_epoch: usize,
    pub best: Encoder<T>,
    pub last: Encoder<T>,
}

impl<T> TrainOutcome<T> {
    pub fn loss_at(&self, epoch: usize, split: Split) -> Option<f64> {
        self.curve
            .iter()
            .find(|r| r.epoch == epoch && r.split == split)
            .map(|r| r.mean_loss)
    }
}

/// 1-based position of the first minimum.
pub fn best_epoch(test_losses: &[f64]) -> Option<usize> {
    test_losses
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &l)| match best {
            Some((_, b)) if b <= l => best,
            _ => Some((i, l)),
        })
        .map(|(i, _)| i + 1)
}

/// Loss of one anchor against its encoded samples; accumulates
/// `scale * d loss / d params` into `grads` when given.
pub fn pair_batch_loss<T: Real>(
    model: &Encoder<T>,
    encoded: &[TokenizedExample],
    relations: &[Relation],
    mode: LossMode,
    grads: Option<(&mut Params<T>, T)>,
) -> Result<T, EncoderError> {
    let caches = encoded
        .iter()
        .map(|e| model.forward_sequence(e.unpadded()))
        .collect::<Result<Vec<_>, _>>()?;
    let embeddings: Vec<_> = caches
        .iter()
        .zip(encoded)
        .map(|(c, e)| relation_embedding(c.outputs.view(), e.su_pos, e.ob_pos))
        .collect();
    let samples: Vec<ArrayView1<'_, T>> = embeddings[1..].iter().map(|e| e.view()).collect();
    let out = pair_loss(embeddings[0].view(), &samples, relations, mode);

    if let Some((grads, scale)) = grads {
        let d = model.config().d_model;
        let emb_grads = std::iter::once(&out.anchor_grad).chain(&out.sample_grads);
        for ((cache, enc), g) in caches.iter().zip(encoded).zip(emb_grads) {
            let scaled = g.mapv(|x| x * scale);
            let up = embedding_upstream(cache.len(), d, enc.su_pos, enc.ob_pos, scaled.view());
            model.backward_sequence(cache, up.view(), grads)?;
        }
    }
    Ok(out.loss)
}

/// Samples, encodes and scores one anchor.
#[allow(clippy::too_many_arguments)]
fn anchor_loss<T: Real, R: Rng>(
    model: &Encoder<T>,
    vocab: &Vocab,
    examples: &[RelationExample],
    index: &PairIndex,
    anchor: usize,
    cfg: &TrainConfig,
    rng: &mut R,
    grads: Option<(&mut Params<T>, T)>,
) -> Result<T, TrainError> {
    let batch = nce_sample(anchor, index, cfg.samples_per_anchor, cfg.mode, rng)?;
    let max_len = model.config().max_len;
    let encoded = std::iter::once(anchor)
        .chain(batch.samples())
        .map(|i| encode(&examples[i], vocab, cfg.mask_prob, max_len, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let relations: Vec<Relation> = batch.samples().map(|i| index.relation(anchor, i)).collect();
    Ok(pair_batch_loss(model, &encoded, &relations, cfg.mode, grads)?)
}

/// Mean loss over every example of a split as anchor, with a fixed sampling seed.
///
/// Anchors whose pair has no negatives within the split are skipped; `None`
/// means no anchor could be scored.
pub fn evaluate_loss<T: Real>(
    model: &Encoder<T>,
    vocab: &Vocab,
    examples: &[RelationExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<f64>, TrainError> {
    let index = PairIndex::build(examples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut scored = 0usize;
    for anchor in 0..examples.len() {
        match anchor_loss(model, vocab, examples, &index, anchor, cfg, &mut rng, None) {
            Ok(l) => {
                total += l.as_f64();
                scored += 1;
            }
            Err(TrainError::Sampler(SamplerError::NoNegatives(_))) => {}
            Err(e) => return Err(e),
        }
    }
    if scored < examples.len() {
        log::warn!(
            "[{}] {} of {} anchors have no negatives in their split and were not scored",
            cfg.mode,
            examples.len() - scored,
            examples.len()
        );
    }
    Ok((scored > 0).then(|| total / scored as f64))
}

/// Trains `model` on `train`, scoring `test` after every epoch and keeping
/// the parameters with the lowest test loss.
pub fn train<T: Real>(
    mut model: Encoder<T>,
    vocab: &Vocab,
    train: &[RelationExample],
    test: &[RelationExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let index = PairIndex::build(train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_seed = cfg.seed ^ 0x7e57_1055;
    let mut optimizer = AdamW::new(cfg.optimizer(), &model.params);
    let mut grads = Params::zeros(model.config());

    let mut curve = Vec::new();
    for (split, examples) in [(Split::Train, train), (Split::Test, test)] {
        if let Some(mean_loss) = evaluate_loss(&model, vocab, examples, cfg, eval_seed)? {
            curve.push(LossRecord {
                epoch: 0,
                split,
                mean_loss,
            });
        }
    }

    let mut best: Option<(usize, f64, Encoder<T>)> = None;
    let mut anchors: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        anchors.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in anchors.chunks(cfg.batch_size) {
            grads.fill_zero();
            let scale = T::one() / T::of(chunk.len() as f64);
            for &anchor in chunk {
                let l = anchor_loss(
                    &model,
                    vocab,
                    train,
                    &index,
                    anchor,
                    cfg,
                    &mut rng,
                    Some((&mut grads, scale)),
                )?;
                epoch_total += l.as_f64();
            }
            optimizer.step(&mut model.params, &grads);
        }
        let train_loss = epoch_total / train.len() as f64;
        curve.push(LossRecord {
            epoch,
            split: Split::Train,
            mean_loss: train_loss,
        });
        let test_loss = evaluate_loss(&model, vocab, test, cfg, eval_seed)?;
        if let Some(mean_loss) = test_loss {
            curve.push(LossRecord {
                epoch,
                split: Split::Test,
                mean_loss,
            });
        }
        log::info!(
            "[{}] epoch {epoch}: train {train_loss:.4} test {}",
            cfg.mode,
            test_loss.map_or("-".to_string(), |l| format!("{l:.4}"))
        );
        let improved = match (&best, test_loss) {
            (None, _) | (_, None) => true,
            (Some((_, b, _)), Some(l)) => l < *b,
        };
        if improved {
            best = Some((epoch, test_loss.unwrap_or(f64::NAN), model.clone()));
        }
    }

    let (best_epoch, _, best_model) = best.unwrap_or((0, f64::NAN, model.clone()));
    Ok(TrainOutcome {
        curve,
        best_epoch,
        best: best_model,
        last: model,
    })
}
