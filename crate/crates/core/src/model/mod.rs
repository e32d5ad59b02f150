//! Decoder-only next-block transformer and a first-order Markov baseline.

mod checkpoint;
mod markov;
mod train;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use markov::MarkovModel;
pub use train::{teacher_forced_accuracy, train, TrainConfig, TrainReport};

/// Anything that can score the next block after each of a batch of prefixes.
pub trait NextBlockModel {
    fn vocab_size(&self) -> usize;

    /// Longest prefix the model looks at; longer prefixes are truncated from
    /// the left.
    fn context_len(&self) -> usize;

    /// One probability vector of length `vocab_size` per prefix.
    fn next_distributions(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture (H=256, L=8, A=8) for a given vocabulary and context.
    pub fn new(vocab_size: usize, context_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_len,
            embed_dim: 256,
            layers: 8,
            heads: 8,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab_size {} < 3", self.vocab_size)));
        }
        if self.context_len < 2 {
            return Err(Error::Config(format!("context_len {} < 2", self.context_len)));
        }
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("embed_dim, layers and heads must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `2VH + CH + L(12H² + 13H) + 2H`.
    pub fn param_count(&self) -> usize {
        let (v, c, h, l) = (self.vocab_size, self.context_len, self.embed_dim, self.layers);
        2 * v * h + c * h + l * (12 * h * h + 13 * h) + 2 * h
    }

    /// Canonical `key=value` lines in sorted key order.
    pub fn to_text(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("context_len", self.context_len.to_string());
        m.insert("dropout", format!("{:?}", self.dropout));
        m.insert("embed_dim", self.embed_dim.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("layers", self.layers.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("vocab_size", self.vocab_size.to_string());
        let mut s = String::new();
        for (k, v) in m {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<F: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<F> {
            m.get(k)
                .ok_or_else(|| Error::Format(format!("missing config key {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        }
        let cfg = ModelConfig {
            vocab_size: get(&m, "vocab_size")?,
            context_len: get(&m, "context_len")?,
            embed_dim: get(&m, "embed_dim")?,
            layers: get(&m, "layers")?,
            heads: get(&m, "heads")?,
            dropout: get(&m, "dropout")?,
            seed: get(&m, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const PER_LAYER: usize = 16;
const LAYER_PARAMS: [&str; PER_LAYER] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
    "ln2.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

/// Parameter shapes in storage order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, c, h) = (cfg.vocab_size, cfg.context_len, cfg.embed_dim);
    let mut out = vec![("wte".to_string(), vec![v, h]), ("wpe".to_string(), vec![c, h])];
    for l in 0..cfg.layers {
        for name in LAYER_PARAMS {
            let shape = match name {
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![h, h],
                "ff.w1" => vec![h, 4 * h],
                "ff.b1" => vec![4 * h],
                "ff.w2" => vec![4 * h, h],
                _ => vec![h],
            };
            out.push((format!("h{l}.{name}"), shape));
        }
    }
    out.push(("lnf.g".into(), vec![h]));
    out.push(("lnf.b".into(), vec![h]));
    out.push(("head".into(), vec![h, v]));
    out
}

/// Logits for a padded batch, laid out `batch × seq × vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T = f32> {
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T> Logits<T> {
    pub fn row(&self, b: usize, t: usize) -> &[T] {
        let start = (b * self.seq + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

/// Attention weights of one layer for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub layer: usize,
    pub seq: usize,
    /// One row-major `seq × seq` matrix per head.
    pub heads: Vec<Vec<f64>>,
    /// Elementwise maximum over heads.
    pub max: Vec<f64>,
}

pub(crate) struct ForwardVars {
    pub logits: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in param_layout(&config) {
            let t = if shape.len() == 2 {
                Tensor::from_fn(&shape, |_| T::of(normal.sample(&mut rng)))
            } else if name.ends_with(".g") {
                Tensor::full(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(TransformerModel { config, names, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(&params) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {pn} {:?} does not match expected {name} {shape:?}",
                    pt.shape()
                )));
            }
        }
        let (names, params) = params.into_iter().unzip();
        Ok(TransformerModel { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Biases and layer-norm parameters are exempt from weight decay.
    pub fn decays(&self, i: usize) -> bool {
        self.params[i].shape().len() == 2
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_ids(&self, ids: &[u32], seq: usize) -> Result<()> {
        if seq == 0 || seq > self.config.context_len {
            return Err(Error::shape(
                "forward",
                format!("sequence length {seq} outside 1..={}", self.config.context_len),
            ));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records the forward pass for `batch` right-padded sequences of length
    /// `seq` (`ids.len() == batch·seq`). With `dropout` set the model runs in
    /// training mode.
    pub(crate) fn build<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        ids: &[u32],
        batch: usize,
        seq: usize,
        trainable: bool,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        self.check_ids(ids, seq)?;
        if ids.len() != batch * seq {
            return Err(Error::shape("forward", format!("{} ids for {batch}x{seq}", ids.len())));
        }
        let cfg = &self.config;
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable { g.param(t, i) } else { g.constant(t) })
            .collect();
        let p_drop = if dropout.is_some() { cfg.dropout } else { 0.0 };

        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = g.gather(p[0], &tok_ids)?;
        let pos = g.gather(p[1], &pos_ids)?;
        let mut h = g.add(tok, pos)?;
        if let Some(rng) = dropout.as_deref_mut() {
            h = g.dropout(h, p_drop, rng);
        }

        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let a = g.layer_norm(h, w[0], w[1])?;
            let q = g.linear(a, w[2], Some(w[3]))?;
            let k = g.linear(a, w[4], Some(w[5]))?;
            let v = g.linear(a, w[6], Some(w[7]))?;
            let att = g.causal_attention(q, k, v, batch, seq, cfg.heads)?;
            attention.push(att);
            let mut o = g.linear(att, w[8], Some(w[9]))?;
            if let Some(rng) = dropout.as_deref_mut() {
                o = g.dropout(o, p_drop, rng);
            }
            h = g.add(h, o)?;

            let f = g.layer_norm(h, w[10], w[11])?;
            let f = g.linear(f, w[12], Some(w[13]))?;
            let f = g.gelu(f);
            let mut f = g.linear(f, w[14], Some(w[15]))?;
            if let Some(rng) = dropout.as_deref_mut() {
                f = g.dropout(f, p_drop, rng);
            }
            h = g.add(h, f)?;
        }
        let n = p.len();
        let h = g.layer_norm(h, p[n - 3], p[n - 2])?;
        let logits = g.matmul(h, p[n - 1])?;
        Ok(ForwardVars { logits, attention })
    }

    /// Logits for a batch of sequences; shorter sequences are right-padded,
    /// which cannot affect their own positions because attention is causal.
    pub fn forward(&self, batch: &[&[u32]]) -> Result<Logits<T>> {
        let (ids, seq) = pad_batch(batch)?;
        let mut g = Graph::new();
        let fv = self.build(&mut g, &ids, batch.len(), seq, false, None)?;
        Ok(Logits {
            batch: batch.len(),
            seq,
            vocab: self.config.vocab_size,
            data: g.value(fv.logits).to_vec(),
        })
    }

    /// Logits plus the attention weights of `layer` (default: last) for one
    /// sequence.
    pub fn forward_with_attention(&self, tokens: &[u32], layer: Option<usize>) -> Result<(Logits<T>, AttentionMaps)> {
        let layer = layer.unwrap_or(self.config.layers - 1);
        if layer >= self.config.layers {
            return Err(Error::Config(format!("layer {layer} >= {}", self.config.layers)));
        }
        let seq = tokens.len();
        let mut g = Graph::new();
        let fv = self.build(&mut g, tokens, 1, seq, false, None)?;
        let (probs, shape) = g
            .attention_probs(fv.attention[layer])
            .ok_or_else(|| Error::Invariant("attention node without probabilities".into()))?;
        let heads: Vec<Vec<f64>> = probs
            .chunks(seq * seq)
            .take(shape.heads)
            .map(|c| c.iter().map(|v| v.as_f64()).collect())
            .collect();
        let max = (0..seq * seq)
            .map(|i| heads.iter().map(|h| h[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let logits = Logits {
            batch: 1,
            seq,
            vocab: self.config.vocab_size,
            data: g.value(fv.logits).to_vec(),
        };
        Ok((logits, AttentionMaps { layer, seq, heads, max }))
    }

    /// Softmax of the final-position logits.
    pub fn next_block_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.next_distributions(&[prefix])?.remove(0))
    }

    /// Masked mean cross-entropy over `batch × seq` ids (dropout off) and,
    /// when asked, its gradient with respect to every parameter.
    pub fn loss(
        &self,
        ids: &[u32],
        batch: usize,
        seq: usize,
        targets: &[usize],
        mask: &[bool],
        with_gradients: bool,
    ) -> Result<(f64, Option<Vec<Vec<T>>>)> {
        let mut g = Graph::new();
        let fv = self.build(&mut g, ids, batch, seq, with_gradients, None)?;
        let loss = g.cross_entropy(fv.logits, targets, mask)?;
        let value = g.value(loss)[0].as_f64();
        if !with_gradients {
            return Ok((value, None));
        }
        let mut grads = g.backward(loss)?;
        let out = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| grads.take(i).unwrap_or_else(|| vec![T::of(0.0); p.numel()]))
            .collect();
        Ok((value, Some(out)))
    }
}

impl<T: Scalar> NextBlockModel for TransformerModel<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn next_distributions(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.config.context_len;
        let trimmed: Vec<&[u32]> = prefixes.iter().map(|p| &p[p.len().saturating_sub(c)..]).collect();
        let logits = self.forward(&trimmed)?;
        Ok(trimmed
            .iter()
            .enumerate()
            .map(|(b, p)| softmax_f64(logits.row(b, p.len() - 1)))
            .collect())
    }
}

pub(crate) fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Flattens right-padded sequences; returns the ids and the padded length.
fn pad_batch(batch: &[&[u32]]) -> Result<(Vec<u32>, usize)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.iter().any(|s| s.is_empty()) {
        return Err(Error::Empty("sequence in batch"));
    }
    let seq = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(batch.len() * seq);
    for s in batch {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD, seq - s.len()));
    }
    Ok((ids, seq))
}
