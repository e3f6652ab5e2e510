//! Pairwise relation probabilities and the three-group contrastive loss.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Which loss variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Matched-pair baseline: reversed pairs count as non-matching.
    Em,
    /// Reflection loss: reversed pairs should embed as negatives of each other.
    Inv,
}

impl LossMode {
    pub const ALL: [LossMode; 2] = [LossMode::Em, LossMode::Inv];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Em => "em",
            LossMode::Inv => "inv",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(LossMode::Em),
            "inv" | "inv-" => Ok(LossMode::Inv),
            other => Err(format!("unknown loss mode '{other}' (expected em or inv)")),
        }
    }
}

/// How a sampled example's ordered pair relates to the anchor's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Match,
    Inverse,
    Neither,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    -((-x).max(T::zero()) + (-x.abs()).exp().ln_1p())
}

/// Probability that two relation statements express the same relation.
pub fn prob_same<T: Real>(r1: ArrayView1<'_, T>, r2: ArrayView1<'_, T>) -> T {
    sigmoid(r1.dot(&r2))
}

/// Probability that the second statement is the reflection of the first.
pub fn prob_inverse<T: Real>(r1: ArrayView1<'_, T>, r2: ArrayView1<'_, T>) -> T {
    sigmoid(-r1.dot(&r2))
}

/// Negative log-likelihood of one pair term and its derivative w.r.t. the dot product.
fn term<T: Real>(dot: T, relation: Relation, mode: LossMode) -> (T, T) {
    match (relation, mode) {
        // -log p_same
        (Relation::Match, _) => (-log_sigmoid(dot), sigmoid(dot) - T::one()),
        // -log p_inv
        (Relation::Inverse, LossMode::Inv) => (-log_sigmoid(-dot), sigmoid(dot)),
        // -log(1 - p_same)
        (Relation::Inverse, LossMode::Em) | (Relation::Neither, _) => {
            (-log_sigmoid(-dot), sigmoid(dot))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss<T> {
    pub loss: T,
    pub anchor_grad: Array1<T>,
    pub sample_grads: Vec<Array1<T>>,
}

/// Mean over sampled pairs of the per-pair negative log-likelihood, with exact
/// gradients for the anchor and every sample embedding.
pub fn pair_loss<T: Real>(
    anchor: ArrayView1<'_, T>,
    samples: &[ArrayView1<'_, T>],
    relations: &[Relation],
    mode: LossMode,
) -> PairLoss<T> {
    assert_eq!(samples.len(), relations.len(), "one relation per sample");
    let mut anchor_grad = Array1::zeros(anchor.len());
    if samples.is_empty() {
        return PairLoss {
            loss: T::zero(),
            anchor_grad,
            sample_grads: Vec::new(),
        };
    }
    let n = T::of(samples.len() as f64);
    let mut loss = T::zero();
    let mut sample_grads = Vec::with_capacity(samples.len());
    for (s, &rel) in samples.iter().zip(relations) {
        let (l, d) = term(anchor.dot(s), rel, mode);
        loss += l;
        anchor_grad.scaled_add(d / n, s);
        sample_grads.push(anchor.mapv(|a| a * d / n));
    }
    PairLoss {
        loss: loss / n,
        anchor_grad,
        sample_grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        // 1 / (1 + e^-10)
        assert!((sigmoid(10.0f64) - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64) == 0.0);
    }

    #[test]
    fn probabilities() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 3.0];
        assert_eq!(prob_same(a.view(), b.view()), 0.5);
        assert_eq!(prob_inverse(a.view(), b.view()), 0.5);

        // |r1|^2 = 10, r2 = -r1
        let r1 = array![1.0f64, 3.0];
        let r2 = -&r1;
        assert!((prob_inverse(r1.view(), r2.view()) - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn zero_scores_cost_log_two() {
        let a = array![1.0, 0.0];
        let s = array![0.0, 1.0];
        for mode in LossMode::ALL {
            for rel in [Relation::Match, Relation::Inverse, Relation::Neither] {
                let out = pair_loss(a.view(), &[s.view()], &[rel], mode);
                assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn confident_scores_cost_nearly_nothing() {
        let a = array![1.0f64, 0.0];
        let pos = array![10.0, 0.0];
        let inv = array![-10.0, 0.0];
        let neg = array![-10.0, 1.0];
        let out = pair_loss(
            a.view(),
            &[pos.view(), inv.view(), neg.view()],
            &[Relation::Match, Relation::Inverse, Relation::Neither],
            LossMode::Inv,
        );
        // each term is ln(1 + e^-10)
        assert!((out.loss - 4.539_889_921_686_464e-5).abs() < 1e-15);
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn inverse_and_same_are_complementary(a in vec_strategy(5), b in vec_strategy(5)) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            let total = prob_same(a.view(), b.view()) + prob_inverse(a.view(), b.view());
            prop_assert!((total - 1.0).abs() < 1e-15);
            prop_assert_eq!(prob_same(a.view(), b.view()), prob_same(b.view(), a.view()));
        }

        #[test]
        fn reflected_inverse_equals_negated_positive(
            a in vec_strategy(4), v in vec_strategy(4), w in vec_strategy(4)
        ) {
            let (a, v, w) = (Array1::from(a), Array1::from(v), Array1::from(w));
            let neg_v = -&v;
            let as_inverse = pair_loss(a.view(), &[v.view(), w.view()], &[Relation::Inverse, Relation::Neither], LossMode::Inv);
            let as_positive = pair_loss(a.view(), &[neg_v.view(), w.view()], &[Relation::Match, Relation::Neither], LossMode::Inv);
            prop_assert!((as_inverse.loss - as_positive.loss).abs() < 1e-14);
        }

        #[test]
        fn loss_ignores_sample_order(a in vec_strategy(3), s in proptest::collection::vec(vec_strategy(3), 4)) {
            let a = Array1::from(a);
            let samples: Vec<Array1<f64>> = s.into_iter().map(Array1::from).collect();
            let rels = [Relation::Match, Relation::Inverse, Relation::Neither, Relation::Neither];
            let views: Vec<_> = samples.iter().map(|x| x.view()).collect();
            let fwd = pair_loss(a.view(), &views, &rels, LossMode::Inv);
            let rev_views: Vec<_> = views.iter().rev().cloned().collect();
            let rev_rels: Vec<_> = rels.iter().rev().cloned().collect();
            let rev = pair_loss(a.view(), &rev_views, &rev_rels, LossMode::Inv);
            prop_assert!((fwd.loss - rev.loss).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = array![0.3, -1.2, 0.8];
        let samples = [array![1.0, 0.5, -0.2], array![-0.7, 0.1, 0.9], array![0.2, -0.4, -1.5]];
        let rels = [Relation::Match, Relation::Inverse, Relation::Neither];
        for mode in LossMode::ALL {
            let f = |a: &Array1<f64>, s: &[Array1<f64>]| {
                let views: Vec<_> = s.iter().map(|x| x.view()).collect();
                pair_loss(a.view(), &views, &rels, mode).loss
            };
            let views: Vec<_> = samples.iter().map(|x| x.view()).collect();
            let out = pair_loss(a.view(), &views, &rels, mode);
            let h = 1e-6;
            let check = |analytic: f64, numeric: f64| {
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(err < 1e-6, "{analytic} vs {numeric}");
            };
            for i in 0..3 {
                let (mut up, mut down) = (a.clone(), a.clone());
                up[i] += h;
                down[i] -= h;
                check(out.anchor_grad[i], (f(&up, &samples) - f(&down, &samples)) / (2.0 * h));
                for j in 0..3 {
                    let (mut su, mut sd) = (samples.to_vec(), samples.to_vec());
                    su[j][i] += h;
                    sd[j][i] -= h;
                    check(out.sample_grads[j][i], (f(&a, &su) - f(&a, &sd)) / (2.0 * h));
                }
            }
        }
    }
}
