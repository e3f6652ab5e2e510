//! A small pre-norm transformer encoder with hand-written backpropagation.
//!
//! Relation embeddings are read off the final layer as the difference between
//! the output vectors at the `[SU]` and `[OB]` marker positions.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::tokenizer::{TokenizedExample, PAD, RESERVED};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: RESERVED.len(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 104,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.vocab_size < RESERVED.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_size must include the {} reserved tokens",
                RESERVED.len()
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

macro_rules! tensor_list {
    ($($field:ident),* $(,)?) => {
        fn tensors(&self) -> Vec<(&'static str, &[T], Vec<usize>)> {
            vec![$((
                stringify!($field),
                self.$field.as_slice().expect("standard layout"),
                self.$field.shape().to_vec(),
            )),*]
        }

        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
            vec![$((stringify!($field), self.$field.as_slice_mut().expect("standard layout"))),*]
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub w_ff1: Array2<T>,
    pub b_ff1: Array1<T>,
    pub w_ff2: Array2<T>,
    pub b_ff2: Array1<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(d: usize, d_ff: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            ln1_gain: v(d),
            ln1_bias: v(d),
            w_q: m(d, d),
            b_q: v(d),
            w_k: m(d, d),
            b_k: v(d),
            w_v: m(d, d),
            b_v: v(d),
            w_o: m(d, d),
            b_o: v(d),
            ln2_gain: v(d),
            ln2_bias: v(d),
            w_ff1: m(d, d_ff),
            b_ff1: v(d_ff),
            w_ff2: m(d_ff, d),
            b_ff2: v(d),
        }
    }

    tensor_list!(
        ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1,
        b_ff1, w_ff2, b_ff2,
    );
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token_embedding: Array2<T>,
    pub position_embedding: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Array1<T>,
    pub final_bias: Array1<T>,
}

/// A named view of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Real> Params<T> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        Self {
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(d, config.d_ff))
                .collect(),
            final_gain: Array1::zeros(d),
            final_bias: Array1::zeros(d),
        }
    }

    /// Tensors in canonical order with dotted names such as `layers.0.w_q`.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = vec![
            TensorRef {
                name: "token_embedding".into(),
                shape: self.token_embedding.shape().to_vec(),
                data: self.token_embedding.as_slice().expect("standard layout"),
            },
            TensorRef {
                name: "position_embedding".into(),
                shape: self.position_embedding.shape().to_vec(),
                data: self.position_embedding.as_slice().expect("standard layout"),
            },
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, data, shape) in layer.tensors() {
                out.push(TensorRef {
                    name: format!("layers.{i}.{name}"),
                    shape,
                    data,
                });
            }
        }
        for (name, t) in [("final_gain", &self.final_gain), ("final_bias", &self.final_bias)] {
            out.push(TensorRef {
                name: name.into(),
                shape: t.shape().to_vec(),
                data: t.as_slice().expect("standard layout"),
            });
        }
        out
    }

    /// Mutable slices in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![
            (
                "token_embedding".into(),
                self.token_embedding.as_slice_mut().expect("standard layout"),
            ),
            (
                "position_embedding".into(),
                self.position_embedding.as_slice_mut().expect("standard layout"),
            ),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, data) in layer.tensors_mut() {
                out.push((format!("layers.{i}.{name}"), data));
            }
        }
        out.push(("final_gain".into(), self.final_gain.as_slice_mut().expect("standard layout")));
        out.push(("final_bias".into(), self.final_bias.as_slice_mut().expect("standard layout")));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill_zero(&mut self) {
        for (_, data) in self.tensors_mut() {
            data.fill(T::zero());
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::of(x.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|x| U::of(x.as_f64()));
        Params {
            token_embedding: c2(&self.token_embedding),
            position_embedding: c2(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: c1(&l.ln1_gain),
                    ln1_bias: c1(&l.ln1_bias),
                    w_q: c2(&l.w_q),
                    b_q: c1(&l.b_q),
                    w_k: c2(&l.w_k),
                    b_k: c1(&l.b_k),
                    w_v: c2(&l.w_v),
                    b_v: c1(&l.b_v),
                    w_o: c2(&l.w_o),
                    b_o: c1(&l.b_o),
                    ln2_gain: c1(&l.ln2_gain),
                    ln2_bias: c1(&l.ln2_bias),
                    w_ff1: c2(&l.w_ff1),
                    b_ff1: c1(&l.b_ff1),
                    w_ff2: c2(&l.w_ff2),
                    b_ff2: c1(&l.b_ff2),
                })
                .collect(),
            final_gain: c1(&self.final_gain),
            final_bias: c1(&self.final_bias),
        }
    }
}

/// A relation embedding: one `d_model` vector per example.
pub type RelationEmbedding<T> = Array1<T>;

/// `outputs[su_pos] - outputs[ob_pos]`.
pub fn relation_embedding<T: Real>(
    outputs: ArrayView2<'_, T>,
    su_pos: usize,
    ob_pos: usize,
) -> RelationEmbedding<T> {
    &outputs.row(su_pos) - &outputs.row(ob_pos)
}

struct NormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

fn layer_norm<T: Real>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> (Array2<T>, NormCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *s = T::one() / (var + eps).sqrt();
        let r = *s;
        row.mapv_inplace(|v| v * r);
    }
    let y = &normalized * gain + bias;
    (y, NormCache { normalized, inv_std })
}

fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &NormCache<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    *dgain += &(dy * &cache.normalized).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let dnorm = dy * gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dnorm.row(i);
        let xh = cache.normalized.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

fn gelu<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

struct LayerCache<T> {
    norm1: NormCache<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities per head, `len x len`.
    probs: Vec<Array2<T>>,
    context: Array2<T>,
    norm2: NormCache<T>,
    h2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Activations of one sequence, kept for the backward pass.
pub struct SequenceCache<T> {
    ids: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
    /// Per-token outputs, `len x d_model`.
    pub outputs: Array2<T>,
}

impl<T> SequenceCache<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    pub params: Params<T>,
}

impl<T: Real> Encoder<T> {
    /// Seeded Xavier-uniform weights, unit norm gains, zero biases.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape.clone()).collect();
        for ((name, data), shape) in params.tensors_mut().into_iter().zip(shapes) {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            if leaf == "final_gain" {
                // keeps initial relation-embedding dot products O(1)
                data.fill(T::of(1.0 / (config.d_model as f64).sqrt()));
            } else if leaf.ends_with("gain") {
                data.fill(T::one());
            } else if leaf.ends_with("embedding") {
                let a = 3f64.sqrt() * 0.5;
                data.iter_mut().for_each(|x| *x = T::of(rng.gen_range(-a..a)));
            } else if leaf.starts_with("w_") {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                data.iter_mut().for_each(|x| *x = T::of(rng.gen_range(-a..a)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: Params<T>) -> Result<Self, EncoderError> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config);
        let shapes = |p: &Params<T>| -> Vec<(String, Vec<usize>)> {
            p.tensors().into_iter().map(|t| (t.name, t.shape)).collect()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(EncoderError::ShapeMismatch("parameters do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Runs one sequence. `[PAD]` positions never serve as attention keys.
    pub fn forward_sequence(&self, ids: &[u32]) -> Result<SequenceCache<T>, EncoderError> {
        let cfg = &self.config;
        if ids.len() > cfg.max_len {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len(),
                max_len: cfg.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let p = &self.params;
        let len = ids.len();
        let mut x = Array2::zeros((len, cfg.d_model));
        for (i, &id) in ids.iter().enumerate() {
            let row = &p.token_embedding.row(id as usize) + &p.position_embedding.row(i);
            x.row_mut(i).assign(&row);
        }
        let keys: Vec<usize> = (0..len).filter(|&j| ids[j] != PAD).collect();

        let mut layers = Vec::with_capacity(p.layers.len());
        for layer in &p.layers {
            let (out, cache) = self.layer_forward(layer, &x, &keys);
            layers.push(cache);
            x = out;
        }
        let (outputs, final_norm) = layer_norm(&x, &p.final_gain, &p.final_bias);
        Ok(SequenceCache {
            ids: ids.to_vec(),
            layers,
            final_norm,
            outputs,
        })
    }

    fn layer_forward(
        &self,
        layer: &LayerParams<T>,
        x: &Array2<T>,
        keys: &[usize],
    ) -> (Array2<T>, LayerCache<T>) {
        let len = x.nrows();
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();

        let (h1, norm1) = layer_norm(x, &layer.ln1_gain, &layer.ln1_bias);
        let q = h1.dot(&layer.w_q) + &layer.b_q;
        let k = h1.dot(&layer.w_k) + &layer.b_k;
        let v = h1.dot(&layer.w_v) + &layer.b_v;

        let mut context = Array2::zeros((len, self.config.d_model));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let scores = qh.dot(&kh.t());
            let mut prob = Array2::zeros((len, len));
            for i in 0..len {
                if keys.is_empty() {
                    break;
                }
                let max = keys
                    .iter()
                    .map(|&j| scores[[i, j]] * scale)
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for &j in keys {
                    let e = (scores[[i, j]] * scale - max).exp();
                    prob[[i, j]] = e;
                    total += e;
                }
                for &j in keys {
                    prob[[i, j]] /= total;
                }
            }
            context.slice_mut(cols).assign(&prob.dot(&vh));
            probs.push(prob);
        }
        let attn = context.dot(&layer.w_o) + &layer.b_o;
        let x1 = x + &attn;

        let (h2, norm2) = layer_norm(&x1, &layer.ln2_gain, &layer.ln2_bias);
        let pre_act = h2.dot(&layer.w_ff1) + &layer.b_ff1;
        let act = pre_act.mapv(gelu);
        let out = &x1 + &(act.dot(&layer.w_ff2) + &layer.b_ff2);
        (
            out,
            LayerCache {
                norm1,
                h1,
                q,
                k,
                v,
                probs,
                context,
                norm2,
                h2,
                pre_act,
                act,
            },
        )
    }

    /// Accumulates parameter gradients for one sequence given `d loss / d outputs`.
    pub fn backward_sequence(
        &self,
        cache: &SequenceCache<T>,
        upstream: ArrayView2<'_, T>,
        grads: &mut Params<T>,
    ) -> Result<(), EncoderError> {
        if upstream.dim() != cache.outputs.dim() {
            return Err(EncoderError::ShapeMismatch(format!(
                "upstream gradient {:?} vs outputs {:?}",
                upstream.dim(),
                cache.outputs.dim()
            )));
        }
        let p = &self.params;
        let mut dx = layer_norm_backward(
            &upstream.to_owned(),
            &cache.final_norm,
            &p.final_gain,
            &mut grads.final_gain,
            &mut grads.final_bias,
        );
        for ((layer, lc), lg) in p
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            dx = self.layer_backward(layer, lc, lg, dx);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = dx.row(i);
            let mut tok = grads.token_embedding.row_mut(id as usize);
            tok += &row;
            let mut pos = grads.position_embedding.row_mut(i);
            pos += &row;
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        layer: &LayerParams<T>,
        c: &LayerCache<T>,
        g: &mut LayerParams<T>,
        dout: Array2<T>,
    ) -> Array2<T> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();

        // feed-forward branch: out = x1 + gelu(h2 W1 + b1) W2 + b2
        g.w_ff2 += &c.act.t().dot(&dout);
        g.b_ff2 += &dout.sum_axis(Axis(0));
        let dact = dout.dot(&layer.w_ff2.t());
        let dpre = &dact * &c.pre_act.mapv(gelu_grad);
        g.w_ff1 += &c.h2.t().dot(&dpre);
        g.b_ff1 += &dpre.sum_axis(Axis(0));
        let dh2 = dpre.dot(&layer.w_ff1.t());
        let dx1 = &dout
            + &layer_norm_backward(&dh2, &c.norm2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

        // attention branch: x1 = x + softmax(q k^T) v W_o + b_o
        g.w_o += &c.context.t().dot(&dx1);
        g.b_o += &dx1.sum_axis(Axis(0));
        let dcontext = dx1.dot(&layer.w_o.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, prob) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx = dcontext.slice(cols);
            let dprob = dctx.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&prob.t().dot(&dctx));
            let mut dscores = prob * &dprob;
            for (mut row, prow) in dscores.rows_mut().into_iter().zip(prob.rows()) {
                let total = row.sum();
                row.zip_mut_with(&prow, |d, &p| *d -= p * total);
            }
            dscores.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        g.w_q += &c.h1.t().dot(&dq);
        g.b_q += &dq.sum_axis(Axis(0));
        g.w_k += &c.h1.t().dot(&dk);
        g.b_k += &dk.sum_axis(Axis(0));
        g.w_v += &c.h1.t().dot(&dv);
        g.b_v += &dv.sum_axis(Axis(0));
        let dh1 = dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t());
        dx1 + layer_norm_backward(&dh1, &c.norm1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias)
    }

    /// Per-token outputs for a padded batch, `batch x max_len x d_model`.
    pub fn forward(&self, batch: &[TokenizedExample]) -> Result<Array3<T>, EncoderError> {
        let cfg = &self.config;
        let mut out = Array3::zeros((batch.len(), cfg.max_len, cfg.d_model));
        for (b, ex) in batch.iter().enumerate() {
            if ex.ids.len() != cfg.max_len {
                return Err(EncoderError::ShapeMismatch(format!(
                    "example padded to {} but max_len is {}",
                    ex.ids.len(),
                    cfg.max_len
                )));
            }
            let cache = self.forward_sequence(&ex.ids)?;
            out.slice_mut(s![b, .., ..]).assign(&cache.outputs);
        }
        Ok(out)
    }

    /// Parameter gradients for a padded batch given `d loss / d outputs`.
    pub fn backward(
        &self,
        batch: &[TokenizedExample],
        upstream: &Array3<T>,
    ) -> Result<Params<T>, EncoderError> {
        let mut grads = Params::zeros(&self.config);
        if upstream.dim().0 != batch.len() {
            return Err(EncoderError::ShapeMismatch("batch size of upstream gradient".into()));
        }
        for (b, ex) in batch.iter().enumerate() {
            let cache = self.forward_sequence(&ex.ids)?;
            self.backward_sequence(&cache, upstream.slice(s![b, .., ..]), &mut grads)?;
        }
        Ok(grads)
    }

    /// Embedding of one encoded example, computed over its unpadded tokens.
    pub fn embed(&self, ex: &TokenizedExample) -> Result<RelationEmbedding<T>, EncoderError> {
        let cache = self.forward_sequence(ex.unpadded())?;
        Ok(relation_embedding(cache.outputs.view(), ex.su_pos, ex.ob_pos))
    }
}

/// Gradient w.r.t. the outputs of a sequence from a gradient w.r.t. its relation embedding.
pub fn embedding_upstream<T: Real>(
    len: usize,
    d_model: usize,
    su_pos: usize,
    ob_pos: usize,
    grad: ArrayView1<'_, T>,
) -> Array2<T> {
    let mut up = Array2::zeros((len, d_model));
    {
        let mut row = up.row_mut(su_pos);
        row += &grad;
    }
    let mut row = up.row_mut(ob_pos);
    row -= &grad;
    up
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn tiny(n_layers: usize, n_heads: usize, seed: u64) -> Encoder<f64> {
        Encoder::init(EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers,
            n_heads,
            d_ff: 16,
            max_len: 12,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig {
            vocab_size: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 5;
        assert!(matches!(cfg.validate(), Err(EncoderError::InvalidConfig(_))));
        cfg.n_heads = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = EncoderConfig {
            vocab_size: 100,
            seed: 9,
            ..Default::default()
        };
        let a = Encoder::<f64>::init(cfg.clone()).unwrap();
        let b = Encoder::<f64>::init(cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.token_embedding.dim(), (100, 64));
        assert_eq!(a.params.position_embedding.dim(), (104, 64));
        assert_eq!(a.params.layers.len(), 2);
        let c = tiny(1, 2, 10);
        assert_ne!(c, tiny(1, 2, 11));
    }

    #[test]
    fn outputs_are_finite_after_init() {
        let model = tiny(2, 2, 1);
        let cache = model.forward_sequence(&[3, 9, 4, 5, 10, 6, 0, 0]).unwrap();
        assert!(cache.outputs.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_layers_is_normalized_embedding_sum() {
        let model = tiny(0, 1, 2);
        let ids = [3u32, 7, 4];
        let cache = model.forward_sequence(&ids).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let x = &model.params.token_embedding.row(id as usize) + &model.params.position_embedding.row(i);
            let mean = x.sum() / 8.0;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let gain = 1.0 / 8f64.sqrt();
            let expect = x.mapv(|v| gain * (v - mean) / (var + LN_EPS).sqrt());
            for (a, b) in cache.outputs.row(i).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let model = tiny(2, 2, 3);
        let real = [3u32, 11, 4, 5, 12, 6];
        let short = model.forward_sequence(&real).unwrap();
        for pads in [1, 3, 6] {
            let mut ids = real.to_vec();
            ids.extend(std::iter::repeat_n(PAD, pads));
            let long = model.forward_sequence(&ids).unwrap();
            for i in 0..real.len() {
                for j in 0..8 {
                    assert!((short.outputs[[i, j]] - long.outputs[[i, j]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let model = tiny(1, 2, 4);
        let mk = |ids: &[u32]| {
            let mut padded = ids.to_vec();
            padded.resize(12, PAD);
            TokenizedExample {
                ids: padded,
                len: ids.len(),
                su_pos: 0,
                ob_pos: 2,
                subject_masked: false,
                object_masked: false,
                truncated: false,
            }
        };
        let a = mk(&[3, 8, 4, 5, 9, 6]);
        let b = mk(&[3, 10, 4, 5, 11, 6, 13]);
        let out = model.forward(&[a.clone(), b.clone(), a.clone()]).unwrap();
        assert_eq!(out.slice(s![0, .., ..]), out.slice(s![2, .., ..]));
        let swapped = model.forward(&[b, a]).unwrap();
        assert_eq!(out.slice(s![0, .., ..]), swapped.slice(s![1, .., ..]));
        assert_eq!(out.slice(s![1, .., ..]), swapped.slice(s![0, .., ..]));
    }

    #[test]
    fn rejects_bad_input() {
        let model = tiny(1, 1, 0);
        assert_eq!(
            model.forward_sequence(&[3, 25]).err(),
            Some(EncoderError::TokenOutOfRange { id: 25, vocab_size: 20 })
        );
        assert!(matches!(
            model.forward_sequence(&[3; 13]),
            Err(EncoderError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn relation_embedding_arithmetic() {
        let out = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(relation_embedding(out.view(), 0, 1), array![1.0, -1.0, 0.0]);
        assert_eq!(relation_embedding(out.view(), 0, 2), array![0.0, 0.0, 0.0]);
        assert_eq!(relation_embedding(out.view(), 1, 0), array![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = tiny(2, 2, 5);
        let cache = model.forward_sequence(&[3, 8, 4, 5, 9, 6]).unwrap();
        let mut grads = Params::zeros(model.config());
        model
            .backward_sequence(&cache, Array2::zeros((6, 8)).view(), &mut grads)
            .unwrap();
        assert!(grads.tensors().iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
    }

    /// Central differences on a random linear functional of the outputs.
    #[test]
    fn gradients_match_finite_differences() {
        let mut model = tiny(2, 2, 6);
        let ids = [3u32, 8, 4, 1, 5, 9, 6, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = Array2::from_shape_fn((ids.len(), 8), |_| rng.gen_range(-1.0..1.0));
        let objective = |m: &Encoder<f64>| (&m.forward_sequence(&ids).unwrap().outputs * &weights).sum();

        let cache = model.forward_sequence(&ids).unwrap();
        let mut grads = Params::zeros(model.config());
        model.backward_sequence(&cache, weights.view(), &mut grads).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data.to_vec()).collect();

        let h = 1e-5;
        let mut k = 0;
        let n_tensors = model.params.tensors().len();
        for t in 0..n_tensors {
            let n = model.params.tensors()[t].data.len();
            for i in 0..n {
                let orig = model.params.tensors()[t].data[i];
                model.params.tensors_mut()[t].1[i] = orig + h;
                let up = objective(&model);
                model.params.tensors_mut()[t].1[i] = orig - h;
                let down = objective(&model);
                model.params.tensors_mut()[t].1[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "tensor {t} index {i}: {a} vs {numeric}");
                k += 1;
            }
        }
    }
}
