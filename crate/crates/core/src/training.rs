//! Masked-token pretraining, supervised fine-tuning and teacher-to-student
//! distillation.
//!
//! Every loop is single-threaded and driven by one seeded ChaCha stream, so
//! a `(config, corpus, seed)` triple always produces the same weights.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MASK_TOKEN, RESERVED_TOKENS};
use crate::encoder::{argmax, with_cls, AblationSpec, Batch, EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Graph, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after the warmup.
    pub learning_rate: f64,
    /// Fraction of all steps spent in linear warmup; constant afterwards.
    pub warmup_fraction: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mask_rate: f64,
    pub distill_temperature: f64,
    /// Weight of the hard-label term; `1 - alpha` weights the soft term.
    pub distill_alpha: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            mask_rate: 0.15,
            distill_temperature: 2.0,
            distill_alpha: 0.5,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.weight_decay < 0.0 {
            return Err(Error::invalid("warmup_fraction must lie in [0, 1], weight_decay >= 0"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::invalid(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::invalid("distill_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.distill_alpha) {
            return Err(Error::invalid("distill_alpha must lie in [0, 1]"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lineage {
    Initialized,
    Pretrained,
    FineTuned,
    Distilled,
}

/// How a distilled student's weights were initialised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copies teacher layers at these indices (every other layer).
    TeacherLayers(Vec<usize>),
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub lineage: Lineage,
    pub dataset_id: String,
    pub seed: u64,
    pub config_hash: String,
    /// Weights hash of the model this one started from.
    pub parent: Option<String>,
    pub student_init: Option<StudentInit>,
    pub weights_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: EncoderModel,
    pub provenance: Provenance,
    pub log: Vec<LogRow>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: ModelConfig,
    provenance: Provenance,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CheckpointMeta {
            model_config: self.model.config.clone(),
            provenance: self.provenance.clone(),
        })?;
        checkpoint::save(path, &meta, &self.model.params)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(CheckpointMeta {
            model_config: self.model.config.clone(),
            provenance: self.provenance.clone(),
        })?;
        checkpoint::encode(&meta, &self.model.params)
    }

    /// Loads a checkpoint; the training log is not stored in checkpoints.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let model = EncoderModel {
            config: meta.model_config,
            params,
        };
        model.validate()?;
        if model.params.content_hash() != meta.provenance.weights_hash {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "weights hash does not match provenance".into(),
            });
        }
        Ok(Self {
            model,
            provenance: meta.provenance,
            log: Vec::new(),
        })
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.log {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        out
    }
}

fn config_hash(train: &TrainConfig, model: &ModelConfig, mode: &str) -> Result<String> {
    let v = serde_json::json!({ "mode": mode, "train": train, "model": model });
    Ok(crate::io::sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

/// Adam with decoupled weight decay and a linear-warmup-then-constant rate.
struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(params: &ParamSet) -> Self {
        Self {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// `grads[i]` pairs with the i-th parameter; `None` leaves it untouched.
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let decay = if p.ndim() >= 2 { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

fn schedule(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if warmup == 0 || step >= warmup {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (step + 1) as f64 / warmup as f64
    }
}

fn clip(grads: &mut [Option<Tensor>], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Targets for the classification loop.
pub enum Targets<'a> {
    Hard,
    /// `probs[i]` is the teacher's temperature-softened distribution for example `i`.
    Distill {
        probs: &'a [Vec<f64>],
        temperature: f64,
        alpha: f64,
    },
}

/// Shared optimisation loop over shuffled minibatches; `loss_fn` builds the
/// batch loss on the graph and returns it.
fn optimise<F>(model: &mut EncoderModel, cfg: &TrainConfig, n: usize, rng: &mut ChaCha8Rng, mut loss_fn: F) -> Result<Vec<LogRow>>
where
    F: FnMut(&EncoderModel, &mut Graph, &crate::nn::BoundParams, &[usize], &mut ChaCha8Rng) -> Result<crate::nn::Var>,
{
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.params);
    let mut log = Vec::with_capacity(total);
    let mut last_finite = f64::NAN;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let loss = loss_fn(model, &mut g, &bound, chunk, rng)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = value;
            let mut grads = g.backward(loss)?;
            let mut per_param: Vec<Option<Tensor>> = bound.iter().map(|(_, v)| grads.take(v)).collect();
            if per_param.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    last_finite_loss: last_finite,
                });
            }
            clip(&mut per_param, cfg.grad_clip);
            let lr = schedule(cfg, step, total);
            opt.step(&mut model.params, &per_param, lr, cfg.weight_decay);
            log.push(LogRow { step, loss: value, lr });
            step += 1;
        }
    }
    Ok(log)
}

/// Trains `model` as a classifier on `corpus` (classification token prepended).
pub fn fit_classifier(
    mut model: EncoderModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    targets: Targets<'_>,
) -> Result<(EncoderModel, Vec<LogRow>)> {
    cfg.validate()?;
    check_labels(corpus, &model.config)?;
    if let Targets::Distill { probs, .. } = &targets {
        if probs.len() != corpus.len() {
            return Err(Error::invalid("one soft target per example required"));
        }
    }
    let seqs: Vec<Vec<u32>> = corpus.examples().iter().map(|e| with_cls(&e.tokens)).collect();
    let labels = corpus.labels();
    let c = model.config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let log = optimise(&mut model, cfg, seqs.len(), &mut rng, |m, g, bound, idx, rng| {
        let batch_seqs: Vec<&[u32]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch = Batch::new(&batch_seqs, &m.config)?;
        let out = m.forward_graph(g, bound, &batch, &AblationSpec::none(), Some(rng))?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let hard = g.cross_entropy(out.logits, &y)?;
        match &targets {
            Targets::Hard => Ok(hard),
            Targets::Distill {
                probs,
                temperature,
                alpha,
            } => {
                let q = Tensor::new([idx.len(), c], idx.iter().flat_map(|&i| probs[i].iter().copied()).collect())?;
                let scaled = g.scale(out.logits, 1.0 / temperature);
                let soft = g.soft_cross_entropy(scaled, Rc::new(q))?;
                let hard = g.scale(hard, *alpha);
                let soft = g.scale(soft, (1.0 - alpha) * temperature * temperature);
                g.add(hard, soft)
            }
        }
    })?;
    Ok((model, log))
}

fn check_labels(corpus: &Corpus, config: &ModelConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train on an empty corpus"));
    }
    if corpus.num_classes() > config.num_classes {
        return Err(Error::invalid(format!(
            "corpus has {} classes, model only {}",
            corpus.num_classes(),
            config.num_classes
        )));
    }
    if corpus.spec().vocab_size > config.vocab_size || corpus.spec().max_len + 1 > config.max_len {
        return Err(Error::invalid(format!(
            "corpus (vocab {}, max_len {}) does not fit model (vocab {}, max_len {} incl. classification token)",
            corpus.spec().vocab_size,
            corpus.spec().max_len,
            config.vocab_size,
            config.max_len
        )));
    }
    Ok(())
}

fn finish(
    model: EncoderModel,
    log: Vec<LogRow>,
    lineage: Lineage,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mode: &str,
    parent: Option<String>,
    student_init: Option<StudentInit>,
) -> Result<TrainedModel> {
    let provenance = Provenance {
        lineage,
        dataset_id: corpus.content_hash()?,
        seed: cfg.seed,
        config_hash: config_hash(cfg, &model.config, mode)?,
        parent,
        student_init,
        weights_hash: model.params.content_hash(),
    };
    Ok(TrainedModel {
        model,
        provenance,
        log,
    })
}

/// A masked copy of `seq` (classification token at 0 is never masked) and
/// the positions/targets to predict. 80% of chosen positions become the mask
/// token, 10% a random token, 10% stay unchanged.
fn mask_sequence(seq: &[u32], rate: f64, vocab: u32, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut out = seq.to_vec();
    let mut chosen: Vec<usize> = (1..seq.len()).filter(|_| rng.gen_bool(rate)).collect();
    if chosen.is_empty() && seq.len() > 1 {
        chosen.push(rng.gen_range(1..seq.len()));
    }
    let mut targets = Vec::with_capacity(chosen.len());
    for t in chosen {
        targets.push((t, seq[t]));
        let r: f64 = rng.gen();
        if r < 0.8 {
            out[t] = MASK_TOKEN;
        } else if r < 0.9 {
            out[t] = rng.gen_range(RESERVED_TOKENS..vocab);
        }
    }
    (out, targets)
}

/// Masked-token pretraining of a fresh encoder.
pub fn pretrain_mlm(cfg: &TrainConfig, corpus: &Corpus, model_config: &ModelConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    check_labels(corpus, model_config)?;
    let mut model = EncoderModel::init(model_config, cfg.seed)?;
    let seqs: Vec<Vec<u32>> = corpus.examples().iter().map(|e| with_cls(&e.tokens)).collect();
    let vocab = model_config.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let log = optimise(&mut model, cfg, seqs.len(), &mut rng, |m, g, bound, idx, rng| {
        let mut masked = Vec::with_capacity(idx.len());
        let mut picks = Vec::with_capacity(idx.len());
        for &i in idx {
            let (s, t) = mask_sequence(&seqs[i], cfg.mask_rate, vocab, rng);
            masked.push(s);
            picks.push(t);
        }
        let batch = Batch::new(&masked, &m.config)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, p) in picks.iter().enumerate() {
            for &(t, tok) in p {
                rows.push(b * batch.width + t);
                targets.push(tok as usize);
            }
        }
        let out = m.forward_graph(g, bound, &batch, &AblationSpec::none(), Some(rng))?;
        let last = *out.hidden.last().expect("at least one layer");
        let z = m.mlm_logits(g, bound, last, &rows)?;
        g.cross_entropy(z, &targets)
    })?;
    finish(model, log, Lineage::Pretrained, corpus, cfg, "mlm", None, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmEval {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent masked token.
    pub majority_baseline: f64,
    pub mean_loss: f64,
    pub masked_positions: usize,
}

/// Masked-token reconstruction on `corpus` with a seeded masking draw.
pub fn evaluate_mlm(model: &EncoderModel, corpus: &Corpus, mask_rate: f64, seed: u64) -> Result<MlmEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size as u32;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss = 0.0;
    let mut freq = std::collections::BTreeMap::<u32, usize>::new();
    let seqs: Vec<Vec<u32>> = corpus.examples().iter().map(|e| with_cls(&e.tokens)).collect();
    for chunk in seqs.chunks(128) {
        let mut masked = Vec::new();
        let mut picks = Vec::new();
        for s in chunk {
            let (m, t) = mask_sequence(s, mask_rate, vocab, &mut rng);
            masked.push(m);
            picks.push(t);
        }
        let batch = Batch::new(&masked, &model.config)?;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, false);
        let out = model.forward_graph(&mut g, &bound, &batch, &AblationSpec::none(), None)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, p) in picks.iter().enumerate() {
            for &(t, tok) in p {
                rows.push(b * batch.width + t);
                targets.push(tok);
            }
        }
        let last = *out.hidden.last().expect("at least one layer");
        let z = model.mlm_logits(&mut g, &bound, last, &rows)?;
        let zt = g.value(z);
        let v = zt.last_dim();
        for (r, &tok) in targets.iter().enumerate() {
            let row = &zt.data()[r * v..(r + 1) * v];
            if argmax(row) == tok as usize {
                correct += 1;
            }
            loss -= row[tok as usize] - crate::nn::graph::log_sum_exp(row);
            *freq.entry(tok).or_default() += 1;
        }
        total += targets.len();
    }
    if total == 0 {
        return Err(Error::invalid("no maskable positions"));
    }
    let majority = freq.values().copied().max().unwrap_or(0);
    Ok(MlmEval {
        accuracy: correct as f64 / total as f64,
        majority_baseline: majority as f64 / total as f64,
        mean_loss: loss / total as f64,
        masked_positions: total,
    })
}

/// Re-draws the classification head from `seed`.
fn reinit_classifier(model: &mut EncoderModel, seed: u64) {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6173_7369_6679);
    let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
    let (d, c) = (cfg.model_dim, cfg.num_classes);
    model
        .params
        .insert("classifier.weight", Tensor::from_fn([d, c], |_| normal.sample(&mut rng)));
    model.params.insert("classifier.bias", Tensor::zeros([c]));
}

/// Supervised fine-tuning. Starts from `base` (with a freshly drawn
/// classification head) or from a fresh initialisation of `model_config`.
pub fn finetune(
    cfg: &TrainConfig,
    train: &Corpus,
    base: Option<&TrainedModel>,
    model_config: &ModelConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let (model, parent) = match base {
        Some(b) => {
            let mut m = b.model.clone();
            reinit_classifier(&mut m, cfg.seed);
            (m, Some(b.provenance.weights_hash.clone()))
        }
        None => (EncoderModel::init(model_config, cfg.seed)?, None),
    };
    let (model, log) = fit_classifier(model, train, cfg, Targets::Hard)?;
    finish(model, log, Lineage::FineTuned, train, cfg, "finetune", parent, None)
}

/// Student with half the teacher's layers, initialised from every other
/// teacher layer (`0, 2, 4, ...`), embeddings and heads copied.
pub fn student_from_teacher(teacher: &EncoderModel) -> Result<(EncoderModel, StudentInit)> {
    let scfg = teacher.config.student();
    let mut student = EncoderModel::init(&scfg, 0)?;
    let picked: Vec<usize> = (0..scfg.num_layers).map(|i| (2 * i).min(teacher.config.num_layers - 1)).collect();
    let names: Vec<String> = student.params.names().map(str::to_string).collect();
    for name in names {
        let src = match name.strip_prefix("layers.") {
            Some(rest) => {
                let (idx, tail) = rest.split_once('.').expect("layer parameter names have a tail");
                let i: usize = idx.parse().expect("numeric layer index");
                format!("layers.{}.{tail}", picked[i])
            }
            None => name.clone(),
        };
        let t = teacher.params.require(&src)?.clone();
        student.params.insert(name, t);
    }
    Ok((student, StudentInit::TeacherLayers(picked)))
}

/// Distils `teacher` into a half-depth student on `corpus`:
/// `alpha * CE(student, labels) + (1 - alpha) * T^2 * CE(softmax(teacher / T), student / T)`.
pub fn distill(teacher: &TrainedModel, cfg: &TrainConfig, corpus: &Corpus, init: StudentInitMode) -> Result<TrainedModel> {
    cfg.validate()?;
    let (student, how) = match init {
        StudentInitMode::FromTeacher => student_from_teacher(&teacher.model)?,
        StudentInitMode::Fresh => (EncoderModel::init(&teacher.model.config.student(), cfg.seed)?, StudentInit::Fresh),
    };
    distill_into(teacher, student, how, cfg, corpus)
}

/// Distillation into an explicitly supplied student.
pub fn distill_into(
    teacher: &TrainedModel,
    student: EncoderModel,
    how: StudentInit,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let seqs: Vec<Vec<u32>> = corpus.examples().iter().map(|e| with_cls(&e.tokens)).collect();
    let probs = teacher
        .model
        .soft_predictions(&seqs, cfg.distill_temperature, cfg.eval_batch_size)?;
    let (model, log) = fit_classifier(
        student,
        corpus,
        cfg,
        Targets::Distill {
            probs: &probs,
            temperature: cfg.distill_temperature,
            alpha: cfg.distill_alpha,
        },
    )?;
    finish(
        model,
        log,
        Lineage::Distilled,
        corpus,
        cfg,
        "distill",
        Some(teacher.provenance.weights_hash.clone()),
        Some(how),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInitMode {
    FromTeacher,
    Fresh,
}

/// Predicted classes for a corpus in eval mode.
pub fn predict_corpus(model: &EncoderModel, corpus: &Corpus, ablation: &AblationSpec, batch_size: usize) -> Result<Vec<usize>> {
    let seqs: Vec<Vec<u32>> = corpus.examples().iter().map(|e| with_cls(&e.tokens)).collect();
    model.predict(&seqs, ablation, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec, TemplateParams};

    pub(crate) fn toy_corpus(n: usize, seed: u64) -> Corpus {
        generate(&CorpusSpec {
            num_classes: 2,
            class_proportions: vec![0.5, 0.5],
            group_ratio_per_class: vec![0.3, 0.7],
            vocab_size: 40,
            max_len: 6,
            num_examples: n,
            template: TemplateParams {
                signal_pool_size: 4,
                marker_pool_size: 2,
                signal_tokens: 2,
                marker_tokens: 1,
                signal_confusion: 0.1,
                noise_rate: 0.3,
            },
            seed,
        })
        .unwrap()
    }

    pub(crate) fn toy_model() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            vocab_size: 40,
            max_len: 7,
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { mask_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { distill_temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { distill_alpha: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn warmup_then_constant() {
        let cfg = TrainConfig { learning_rate: 1.0, warmup_fraction: 0.25, ..Default::default() };
        let lrs: Vec<f64> = (0..8).map(|s| schedule(&cfg, s, 8)).collect();
        assert_eq!(lrs, vec![0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let corpus = toy_corpus(40, 1);
        let cfg = TrainConfig { epochs: 0, seed: 3, ..Default::default() };
        let m = pretrain_mlm(&cfg, &corpus, &toy_model()).unwrap();
        assert_eq!(m.model, EncoderModel::init(&toy_model(), 3).unwrap());
        assert!(m.log.is_empty());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let corpus = toy_corpus(40, 1);
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, seed: 5, ..Default::default() };
        let m = finetune(&cfg, &corpus, None, &toy_model()).unwrap();
        assert_eq!(m.model, EncoderModel::init(&toy_model(), 5).unwrap());
    }

    #[test]
    fn mask_sequence_never_touches_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let seq = [1u32, 10, 11, 12, 13];
            let (out, targets) = mask_sequence(&seq, 0.15, 40, &mut rng);
            assert_eq!(out[0], 1);
            assert!(!targets.is_empty());
            assert!(targets.iter().all(|&(t, tok)| t >= 1 && seq[t] == tok));
        }
    }

    #[test]
    fn student_copies_every_other_layer() {
        let teacher = EncoderModel::init(&ModelConfig { num_layers: 4, ..toy_model() }, 9).unwrap();
        let (student, how) = student_from_teacher(&teacher).unwrap();
        assert_eq!(how, StudentInit::TeacherLayers(vec![0, 2]));
        assert_eq!(student.config.num_layers, 2);
        assert_eq!(
            student.params.get("layers.1.ff.in.weight"),
            teacher.params.get("layers.2.ff.in.weight")
        );
        assert_eq!(student.params.get("classifier.weight"), teacher.params.get("classifier.weight"));
        student.validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = toy_corpus(30, 2);
        let cfg = TrainConfig { epochs: 1, seed: 1, ..Default::default() };
        let m = finetune(&cfg, &corpus, None, &toy_model()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = TrainedModel::load(&p).unwrap();
        assert_eq!(back.model, m.model);
        assert_eq!(back.provenance, m.provenance);
    }
}
