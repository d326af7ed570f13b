//! Post-LN transformer encoder classifier with attention tracing and
//! head ablation.
//!
//! Inputs are token-id sequences that already start with the classification
//! token (see [`with_cls`]). Sequences in a batch are right-padded; padded
//! keys get exactly zero attention and padded positions are excluded from
//! pooling.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CLS_TOKEN, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    /// Position-table size; must cover the classification token plus the
    /// longest corpus sequence.
    pub max_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            ff_dim: 128,
            vocab_size: 512,
            max_len: 25,
            num_classes: 8,
            dropout: 0.1,
            pooling: Pooling::Cls,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::invalid("num_layers and num_heads must be at least 1"));
        }
        if self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ff_dim == 0 || self.vocab_size == 0 || self.max_len == 0 || self.num_classes == 0 {
            return Err(Error::invalid("ff_dim, vocab_size, max_len and num_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0 && self.init_std > 0.0) {
            return Err(Error::invalid("layer_norm_eps and init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Same architecture with half the layers (at least one).
    pub fn student(&self) -> Self {
        Self {
            num_layers: (self.num_layers / 2).max(1),
            ..self.clone()
        }
    }
}

/// Head indices whose post-softmax attention is zeroed in every layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AblationSpec {
    heads: BTreeSet<usize>,
}

impl AblationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(head: usize) -> Self {
        Self {
            heads: BTreeSet::from([head]),
        }
    }

    /// Rejects duplicates and indices `>= num_heads`.
    pub fn new(heads: &[usize], num_heads: usize) -> Result<Self> {
        let set: BTreeSet<usize> = heads.iter().copied().collect();
        if set.len() != heads.len() {
            return Err(Error::invalid(format!("duplicate head indices in {heads:?}")));
        }
        if let Some(&h) = set.iter().find(|&&h| h >= num_heads) {
            return Err(Error::invalid(format!("head {h} out of range for {num_heads} heads")));
        }
        Ok(Self { heads: set })
    }

    pub fn all(num_heads: usize) -> Self {
        Self {
            heads: (0..num_heads).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn contains(&self, head: usize) -> bool {
        self.heads.contains(&head)
    }

    pub fn heads(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.iter().copied()
    }

    fn check(&self, num_heads: usize) -> Result<()> {
        match self.heads.iter().find(|&&h| h >= num_heads) {
            Some(h) => Err(Error::invalid(format!("head {h} out of range for {num_heads} heads"))),
            None => Ok(()),
        }
    }
}

/// Per-example record of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Per layer, `[heads, width, width]` post-softmax weights (query, key).
    pub attention: Vec<Tensor>,
    /// Per layer plus the embedding output (index 0), `[width, model_dim]`.
    pub hidden: Vec<Tensor>,
    /// True at padded positions.
    pub pad_mask: Vec<bool>,
}

impl ForwardTrace {
    pub fn width(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn num_layers(&self) -> usize {
        self.attention.len()
    }

    /// Attention distribution of query `t` for `head` in `layer`.
    pub fn attention_row(&self, layer: usize, head: usize, t: usize) -> &[f64] {
        let w = self.width();
        &self.attention[layer].data()[(head * w + t) * w..(head * w + t + 1) * w]
    }

    pub fn valid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.pad_mask.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i)
    }
}

/// Pooled representation of the final hidden layer.
pub fn pool(trace: &ForwardTrace, mode: Pooling) -> Result<Vec<f64>> {
    let last = trace
        .hidden
        .last()
        .ok_or_else(|| Error::invalid("trace has no hidden states"))?;
    let valid: Vec<usize> = trace.valid_positions().collect();
    if valid.is_empty() {
        return Err(Error::invalid("cannot pool an all-padding sequence"));
    }
    match mode {
        Pooling::Cls => {
            if trace.pad_mask[0] {
                return Err(Error::invalid("classification position is padding"));
            }
            Ok(last.row(0).to_vec())
        }
        Pooling::Mean => {
            let d = last.last_dim();
            let mut out = vec![0.0; d];
            for &i in &valid {
                out.iter_mut().zip(last.row(i)).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= valid.len() as f64);
            Ok(out)
        }
    }
}

/// Prepends the classification token.
pub fn with_cls(tokens: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(CLS_TOKEN);
    out.extend_from_slice(tokens);
    out
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Right-padded batch of sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub width: usize,
    /// Flattened `[size * width]` token ids, padded with [`PAD_TOKEN`].
    pub ids: Vec<usize>,
    /// Flattened `[size * width]`, false at padding.
    pub valid: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if width > config.max_len {
            return Err(Error::invalid(format!(
                "sequence of length {width} exceeds max_len {}",
                config.max_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut valid = Vec::with_capacity(seqs.len() * width);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::invalid("cannot encode an empty sequence"));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::invalid(format!(
                    "token id {t} >= vocab_size {}",
                    config.vocab_size
                )));
            }
            ids.extend(s.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat(PAD_TOKEN as usize).take(width - s.len()));
            valid.extend(std::iter::repeat(true).take(s.len()));
            valid.extend(std::iter::repeat(false).take(width - s.len()));
            lengths.push(s.len());
        }
        Ok(Self {
            size: seqs.len(),
            width,
            ids,
            valid,
            lengths,
        })
    }
}

/// Graph handles produced by [`EncoderModel::forward_graph`].
pub struct GraphOutputs {
    /// `L + 1` entries of `[batch * width, d]`.
    pub hidden: Vec<Var>,
    /// `L` entries of `[batch * heads, width, width]`.
    pub attention: Vec<Var>,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn p_layer(l: usize, name: &str) -> String {
    format!("layers.{l}.{name}")
}

impl EncoderModel {
    /// Fresh weights: `N(0, init_std)` matrices, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("positive std");
        let mut randn = |shape: [usize; 2]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        let (d, f, v, c) = (config.model_dim, config.ff_dim, config.vocab_size, config.num_classes);

        let mut p = ParamSet::new();
        p.insert("embeddings.token", randn([v, d]));
        p.insert("embeddings.position", randn([config.max_len, d]));
        p.insert("embeddings.ln.gamma", Tensor::full([d], 1.0));
        p.insert("embeddings.ln.beta", Tensor::zeros([d]));
        for l in 0..config.num_layers {
            for proj in ["q", "k", "v"] {
                p.insert(p_layer(l, &format!("attn.{proj}.weight")), randn([d, d]));
                p.insert(p_layer(l, &format!("attn.{proj}.bias")), Tensor::zeros([d]));
            }
            p.insert(p_layer(l, "attn.o.weight"), randn([d, d]));
            p.insert(p_layer(l, "attn_ln.gamma"), Tensor::full([d], 1.0));
            p.insert(p_layer(l, "attn_ln.beta"), Tensor::zeros([d]));
            p.insert(p_layer(l, "ff.in.weight"), randn([d, f]));
            p.insert(p_layer(l, "ff.in.bias"), Tensor::zeros([f]));
            p.insert(p_layer(l, "ff.out.weight"), randn([f, d]));
            p.insert(p_layer(l, "ff.out.bias"), Tensor::zeros([d]));
            p.insert(p_layer(l, "ff_ln.gamma"), Tensor::full([d], 1.0));
            p.insert(p_layer(l, "ff_ln.beta"), Tensor::zeros([d]));
        }
        p.insert("classifier.weight", randn([d, c]));
        p.insert("classifier.bias", Tensor::zeros([c]));
        p.insert("mlm.weight", randn([d, v]));
        p.insert("mlm.bias", Tensor::zeros([v]));
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    /// Checks every parameter shape against the config.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::init(&self.config, 0)?;
        for (name, t) in fresh.params.iter() {
            let have = self.params.require(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "EncoderModel::validate",
                    lhs: have.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if self.params.len() != fresh.params.len() {
            return Err(Error::invalid("unexpected extra parameters"));
        }
        Ok(())
    }

    /// Records the forward pass for `batch` on `g`. Dropout is applied only
    /// when `dropout_rng` is given.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
        ablation: &AblationSpec,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutputs> {
        let cfg = &self.config;
        ablation.check(cfg.num_heads)?;
        let (b, w, h) = (batch.size, batch.width, cfg.num_heads);
        let eps = cfg.layer_norm_eps;
        let rate = cfg.dropout;

        let mut dropout = |g: &mut Graph, x: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let shape = g.value(x).shape().to_vec();
                    let keep = 1.0 / (1.0 - rate);
                    let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
                    let m = g.constant(mask);
                    g.mul(x, m)
                }
                _ => Ok(x),
            }
        };

        let positions: Vec<usize> = (0..b).flat_map(|_| 0..w).collect();
        let tok = g.embedding(p.var("embeddings.token"), &batch.ids)?;
        let pos = g.embedding(p.var("embeddings.position"), &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.layer_norm(x, p.var("embeddings.ln.gamma"), p.var("embeddings.ln.beta"), eps)?;
        let mut x = dropout(g, x)?;

        // keep[(bi*h + hi), q, k] = key k of sequence bi is real
        let mut key_keep = Vec::with_capacity(b * h * w * w);
        for bi in 0..b {
            let row = &batch.valid[bi * w..(bi + 1) * w];
            for _ in 0..h * w {
                key_keep.extend_from_slice(row);
            }
        }
        let head_mask = (!ablation.is_empty()).then(|| {
            Tensor::from_fn([b * h, w, w], |i| {
                let head = (i / (w * w)) % h;
                if ablation.contains(head) {
                    0.0
                } else {
                    1.0
                }
            })
        });
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let proj = |g: &mut Graph, name: &str, x: Var| -> Result<Var> {
                let y = g.matmul(x, p.var(&p_layer(l, &format!("attn.{name}.weight"))))?;
                g.add_bias(y, p.var(&p_layer(l, &format!("attn.{name}.bias"))))
            };
            let q = proj(g, "q", x)?;
            let k = proj(g, "k", x)?;
            let v = proj(g, "v", x)?;
            let qh = g.split_heads(q, b, w, h)?;
            let kh = g.split_heads(k, b, w, h)?;
            let vh = g.split_heads(v, b, w, h)?;
            let scores = g.batch_matmul(qh, kh, true)?;
            let scores = g.scale(scores, scale);
            let mut probs = g.masked_softmax(scores, Some(&key_keep))?;
            if let Some(mask) = &head_mask {
                let m = g.constant(mask.clone());
                probs = g.mul(probs, m)?;
            }
            attention.push(probs);
            let ctx = g.batch_matmul(probs, vh, false)?;
            let merged = g.merge_heads(ctx, b, w, h)?;
            let attn_out = g.matmul(merged, p.var(&p_layer(l, "attn.o.weight")))?;
            let attn_out = dropout(g, attn_out)?;
            let res = g.add(x, attn_out)?;
            x = g.layer_norm(res, p.var(&p_layer(l, "attn_ln.gamma")), p.var(&p_layer(l, "attn_ln.beta")), eps)?;

            let ff = g.matmul(x, p.var(&p_layer(l, "ff.in.weight")))?;
            let ff = g.add_bias(ff, p.var(&p_layer(l, "ff.in.bias")))?;
            let ff = match cfg.activation {
                Activation::Gelu => g.gelu(ff),
                Activation::Relu => g.relu(ff),
            };
            let ff = g.matmul(ff, p.var(&p_layer(l, "ff.out.weight")))?;
            let ff = g.add_bias(ff, p.var(&p_layer(l, "ff.out.bias")))?;
            let ff = dropout(g, ff)?;
            let res = g.add(x, ff)?;
            x = g.layer_norm(res, p.var(&p_layer(l, "ff_ln.gamma")), p.var(&p_layer(l, "ff_ln.beta")), eps)?;
            hidden.push(x);
        }

        let pooled = match cfg.pooling {
            Pooling::Cls => {
                let rows: Vec<usize> = (0..b).map(|bi| bi * w).collect();
                g.gather_rows(x, &rows)?
            }
            Pooling::Mean => {
                let mut m = Tensor::zeros([b, b * w]);
                for bi in 0..b {
                    let n = batch.lengths[bi] as f64;
                    for t in 0..w {
                        if batch.valid[bi * w + t] {
                            m.data_mut()[bi * b * w + bi * w + t] = 1.0 / n;
                        }
                    }
                }
                let m = g.constant(m);
                g.matmul(m, x)?
            }
        };
        let logits = g.matmul(pooled, p.var("classifier.weight"))?;
        let logits = g.add_bias(logits, p.var("classifier.bias"))?;
        Ok(GraphOutputs {
            hidden,
            attention,
            pooled,
            logits,
        })
    }

    /// Vocabulary logits at the given flattened batch positions.
    pub fn mlm_logits(&self, g: &mut Graph, p: &BoundParams, last_hidden: Var, rows: &[usize]) -> Result<Var> {
        let sel = g.gather_rows(last_hidden, rows)?;
        let z = g.matmul(sel, p.var("mlm.weight"))?;
        g.add_bias(z, p.var("mlm.bias"))
    }

    /// Eval-mode forward of one sequence.
    pub fn forward(&self, tokens: &[u32], ablation: &AblationSpec) -> Result<(Vec<f64>, ForwardTrace)> {
        let mut out = self.forward_batch(&[tokens], ablation)?;
        Ok(out.pop().expect("one sequence in, one out"))
    }

    /// Eval-mode forward of a batch; traces are padded to the batch width.
    pub fn forward_batch<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        ablation: &AblationSpec,
    ) -> Result<Vec<(Vec<f64>, ForwardTrace)>> {
        let batch = Batch::new(seqs, &self.config)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &p, &batch, ablation, None)?;
        let (b, w, h, d) = (batch.size, batch.width, self.config.num_heads, self.config.model_dim);
        let c = self.config.num_classes;
        let logits = g.value(out.logits);
        Ok((0..b)
            .map(|bi| {
                let attention = out
                    .attention
                    .iter()
                    .map(|&a| {
                        let data = &g.value(a).data()[bi * h * w * w..(bi + 1) * h * w * w];
                        Tensor::from_parts(vec![h, w, w], data.to_vec())
                    })
                    .collect();
                let hidden = out
                    .hidden
                    .iter()
                    .map(|&x| {
                        let data = &g.value(x).data()[bi * w * d..(bi + 1) * w * d];
                        Tensor::from_parts(vec![w, d], data.to_vec())
                    })
                    .collect();
                let pad_mask = batch.valid[bi * w..(bi + 1) * w].iter().map(|v| !v).collect();
                (
                    logits.data()[bi * c..(bi + 1) * c].to_vec(),
                    ForwardTrace {
                        attention,
                        hidden,
                        pad_mask,
                    },
                )
            })
            .collect())
    }

    /// Eval-mode logits for a batch without materialising traces.
    pub fn logits_batch<S: AsRef<[u32]>>(&self, seqs: &[S], ablation: &AblationSpec) -> Result<Vec<Vec<f64>>> {
        let batch = Batch::new(seqs, &self.config)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &p, &batch, ablation, None)?;
        let c = self.config.num_classes;
        Ok(g.value(out.logits).data().chunks(c).map(|r| r.to_vec()).collect())
    }

    pub fn classify(&self, tokens: &[u32], ablation: &AblationSpec) -> Result<usize> {
        let (logits, _) = self.forward(tokens, ablation)?;
        Ok(argmax(&logits))
    }

    /// Predicted classes for many sequences, evaluated `batch_size` at a time.
    pub fn predict<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        ablation: &AblationSpec,
        batch_size: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            out.extend(self.logits_batch(chunk, ablation)?.iter().map(|l| argmax(l)));
        }
        Ok(out)
    }

    /// Softmax of `logits / temperature` for many sequences.
    pub fn soft_predictions<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        temperature: f64,
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            for l in self.logits_batch(chunk, &AblationSpec::none())? {
                let scaled: Vec<f64> = l.iter().map(|v| v / temperature).collect();
                out.push(crate::nn::graph::softmax_rows(&scaled, scaled.len()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            vocab_size: 20,
            max_len: 8,
            num_classes: 3,
            dropout: 0.0,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            model_dim: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::default().student().num_layers, 2);
    }

    #[test]
    fn ablation_spec_validation() {
        assert!(AblationSpec::new(&[0, 0], 4).is_err());
        assert!(AblationSpec::new(&[4], 4).is_err());
        assert!(AblationSpec::new(&[3, 1], 4).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    }

    #[test]
    fn rejects_out_of_vocab_and_overlong() {
        let m = EncoderModel::init(&tiny(), 1).unwrap();
        assert!(m.forward(&[1, 20], &AblationSpec::none()).is_err());
        assert!(m.forward(&[1; 9], &AblationSpec::none()).is_err());
        assert!(m.forward(&[], &AblationSpec::none()).is_err());
    }

    #[test]
    fn unablated_rows_are_distributions() {
        let m = EncoderModel::init(&tiny(), 2).unwrap();
        let (logits, trace) = m.forward(&[1, 5, 6, 7], &AblationSpec::none()).unwrap();
        assert_eq!(logits.len(), 3);
        assert_eq!(trace.attention.len(), 2);
        assert_eq!(trace.hidden.len(), 3);
        for l in 0..2 {
            for h in 0..2 {
                for t in 0..4 {
                    let row = trace.attention_row(l, h, t);
                    assert!(row.iter().all(|&a| a >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn padded_keys_get_no_attention_and_padding_does_not_leak() {
        let m = EncoderModel::init(&tiny(), 3).unwrap();
        let short: &[u32] = &[1, 4, 9];
        let long: &[u32] = &[1, 4, 9, 11, 12, 13];
        let out = m.forward_batch(&[short, long], &AblationSpec::none()).unwrap();
        let (logits_padded, trace) = &out[0];
        assert_eq!(trace.pad_mask, vec![false, false, false, true, true, true]);
        for l in 0..2 {
            for h in 0..2 {
                for t in 0..6 {
                    assert!(trace.attention_row(l, h, t)[3..].iter().all(|&a| a == 0.0));
                }
            }
        }
        let (alone, _) = m.forward(short, &AblationSpec::none()).unwrap();
        for (a, b) in alone.iter().zip(logits_padded) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ablated_head_is_exactly_zero_everywhere() {
        let m = EncoderModel::init(&tiny(), 4).unwrap();
        let (_, trace) = m.forward(&[1, 2, 3, 4, 5], &AblationSpec::single(1)).unwrap();
        for l in 0..2 {
            for t in 0..5 {
                assert!(trace.attention_row(l, 1, t).iter().all(|&a| a == 0.0));
                assert!((trace.attention_row(l, 0, t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_ablation_keeps_logits_finite() {
        let m = EncoderModel::init(&tiny(), 5).unwrap();
        let (logits, trace) = m.forward(&[1, 7, 8], &AblationSpec::all(2)).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(trace.attention.iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pooling_modes() {
        let m = EncoderModel::init(&tiny(), 6).unwrap();
        let (_, single) = m.forward(&[1], &AblationSpec::none()).unwrap();
        assert_eq!(pool(&single, Pooling::Cls).unwrap(), pool(&single, Pooling::Mean).unwrap());

        let (_, trace) = m.forward_batch(&[&[1u32, 3, 4][..], &[1, 3, 4, 5, 6]], &AblationSpec::none()).unwrap()[0]
            .clone();
        let mean = pool(&trace, Pooling::Mean).unwrap();
        let last = trace.hidden.last().unwrap();
        for j in 0..8 {
            let brute = (last.at2(0, j) + last.at2(1, j) + last.at2(2, j)) / 3.0;
            assert!((mean[j] - brute).abs() < 1e-12);
        }

        let identical = ForwardTrace {
            attention: vec![],
            hidden: vec![Tensor::new([3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap()],
            pad_mask: vec![false; 3],
        };
        assert_eq!(pool(&identical, Pooling::Mean).unwrap(), vec![1.5, -2.0]);
        let all_pad = ForwardTrace {
            pad_mask: vec![true; 3],
            ..identical
        };
        assert!(pool(&all_pad, Pooling::Mean).is_err());
    }

    #[test]
    fn graph_pooling_agrees_with_trace_pooling() {
        for mode in [Pooling::Cls, Pooling::Mean] {
            let cfg = ModelConfig { pooling: mode, ..tiny() };
            let m = EncoderModel::init(&cfg, 7).unwrap();
            let (logits, trace) = m.forward(&[1, 9, 10, 11], &AblationSpec::none()).unwrap();
            let pooled = pool(&trace, mode).unwrap();
            let w = m.params.get("classifier.weight").unwrap();
            let b = m.params.get("classifier.bias").unwrap();
            for c in 0..3 {
                let z: f64 = (0..8).map(|j| pooled[j] * w.at2(j, c)).sum::<f64>() + b.data()[c];
                assert!((z - logits[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablation_is_bit_reproducible() {
        let m = EncoderModel::init(&tiny(), 8).unwrap();
        let a = m.forward(&[1, 3, 5, 7], &AblationSpec::single(0)).unwrap();
        let b = m.forward(&[1, 3, 5, 7], &AblationSpec::single(0)).unwrap();
        assert_eq!(a, b);
    }
}
