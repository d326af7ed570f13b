//! Multi-seed experiment orchestration: subset construction, model training
//! with a checkpoint cache, layer comparison (E1), the head-ablation sweep
//! (E2) and the teacher/student comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ClassStats, Corpus, CorpusSpec};
use crate::encoder::{with_cls, AblationSpec, EncoderModel, ForwardTrace, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    self, fairness_report, hidden_at, log_rescale, mean_std, sample_token_positions, spearman, svcca_basis,
    svcca_from_bases, trace_js, EoMode, FairnessReport, LayerwiseScore,
};
use crate::nn::Tensor;
use crate::training::{self, StudentInitMode, TrainConfig, TrainedModel};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Imbalanced,
    Balanced,
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::Imbalanced, Setting::Balanced];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::Imbalanced => "mi",
            Setting::Balanced => "mb",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Teacher,
    Student,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::Teacher, Arch::Student];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Teacher => "teacher",
            Arch::Student => "student",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelKey {
    pub arch: Arch,
    pub setting: Setting,
    pub seed: u64,
}

impl ModelKey {
    pub fn id(&self) -> String {
        format!("{}-{}-s{}", self.arch.tag(), self.setting.tag(), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub eo_mode: EoMode,
    pub variance_keep: f64,
    /// Evaluation examples fed to both models in E1.
    pub e1_samples: usize,
    /// Token positions per SVCCA comparison.
    pub svcca_tokens: usize,
    /// Also compare the embedding output (hidden layer 0).
    pub include_embeddings: bool,
    pub sample_seed: u64,
    pub eval_batch_size: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            eo_mode: EoMode::Average,
            variance_keep: 0.99,
            e1_samples: 256,
            svcca_tokens: 2000,
            include_embeddings: false,
            sample_seed: 0,
            eval_batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub corpus: CorpusSpec,
    pub teacher: ModelConfig,
    /// Defaults to the teacher with half the layers.
    pub student: Option<ModelConfig>,
    /// Zero epochs skips pretraining; models then start from a fresh init.
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub distill: TrainConfig,
    pub student_init: StudentInitMode,
    /// One pretrained checkpoint per seed, shared by that seed's Mi and Mb.
    /// When false a single checkpoint serves every seed.
    pub pretrain_per_seed: bool,
    pub seeds: Vec<u64>,
    /// Share of the corpus in the training pool; the rest is the shared
    /// evaluation split.
    pub train_fraction: f64,
    pub metrics: MetricOptions,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            teacher: ModelConfig::default(),
            student: None,
            pretrain: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            distill: TrainConfig::default(),
            student_init: StudentInitMode::FromTeacher,
            pretrain_per_seed: true,
            seeds: (0..5).collect(),
            train_fraction: 0.7,
            metrics: MetricOptions::default(),
            output_dir: None,
        }
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_to_string(path)?)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn student_config(&self) -> ModelConfig {
        self.student.clone().unwrap_or_else(|| self.teacher.student())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        if self.seeds.len() < 2 {
            return Err(Error::invalid("baselines require >= 2 seeds"));
        }
        self.corpus.validate()?;
        self.teacher.validate()?;
        let student = self.student_config();
        student.validate()?;
        let t = &self.teacher;
        if (student.num_heads, student.model_dim, student.vocab_size, student.max_len, student.num_classes)
            != (t.num_heads, t.model_dim, t.vocab_size, t.max_len, t.num_classes)
        {
            return Err(Error::invalid("student may differ from the teacher only in depth and feed-forward settings"));
        }
        if self.student_init == StudentInitMode::FromTeacher && student.num_layers > t.num_layers.div_ceil(2) {
            return Err(Error::invalid("a student initialised from every other teacher layer needs at most ceil(L/2) layers"));
        }
        if t.num_classes != self.corpus.num_classes {
            return Err(Error::invalid(format!(
                "model has {} classes, corpus {}",
                t.num_classes, self.corpus.num_classes
            )));
        }
        if t.vocab_size < self.corpus.vocab_size || t.max_len < self.corpus.max_len + 1 {
            return Err(Error::invalid(
                "model vocab/max_len must cover the corpus plus the classification token",
            ));
        }
        for c in [&self.pretrain, &self.finetune, &self.distill] {
            c.validate()?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        let m = &self.metrics;
        if !(m.variance_keep > 0.0 && m.variance_keep <= 1.0) {
            return Err(Error::invalid("variance_keep must lie in (0, 1]"));
        }
        if m.e1_samples == 0 || m.eval_batch_size == 0 {
            return Err(Error::invalid("e1_samples and eval_batch_size must be positive"));
        }
        if m.svcca_tokens <= t.model_dim {
            return Err(Error::invalid(format!(
                "svcca_tokens ({}) must exceed model_dim ({})",
                m.svcca_tokens, t.model_dim
            )));
        }
        Ok(())
    }

    /// Hash of everything that determines the trained weights.
    pub fn training_fingerprint(&self) -> Result<String> {
        let v = serde_json::json!({
            "corpus": self.corpus,
            "teacher": self.teacher,
            "student": self.student_config(),
            "pretrain": self.pretrain,
            "finetune": self.finetune,
            "distill": self.distill,
            "student_init": self.student_init,
            "pretrain_per_seed": self.pretrain_per_seed,
            "train_fraction": self.train_fraction,
        });
        Ok(crate::io::sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }
}

pub struct PreparedData {
    pub full: Corpus,
    pub train_pool: Corpus,
    pub eval: Corpus,
    pub balanced: Corpus,
    pub imbalanced: Corpus,
}

impl PreparedData {
    pub fn subset(&self, setting: Setting) -> &Corpus {
        match setting {
            Setting::Imbalanced => &self.imbalanced,
            Setting::Balanced => &self.balanced,
        }
    }
}

/// Generates the corpus, holds out the shared evaluation split, and draws
/// the balanced/imbalanced training pair from the rest.
pub fn prepare_data(plan: &ExperimentPlan) -> Result<PreparedData> {
    let full = corpus::generate(&plan.corpus)?;
    let seed = plan.corpus.seed;
    let (train_pool, eval) = corpus::split(&full, plan.train_fraction, seed)?;
    let balanced = corpus::make_balanced(&train_pool, seed)?;
    let imbalanced = corpus::make_imbalanced_pair(&train_pool, &balanced, seed)?;
    Ok(PreparedData {
        full,
        train_pool,
        eval,
        balanced,
        imbalanced,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub jobs: usize,
    /// Fail instead of training when a checkpoint is missing.
    pub strict: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct ModelZoo {
    pub pretrained: BTreeMap<String, TrainedModel>,
    pub models: BTreeMap<ModelKey, TrainedModel>,
    /// Ids that were trained in this run rather than loaded.
    pub trained: Vec<String>,
}

impl ModelZoo {
    pub fn get(&self, key: &ModelKey) -> Result<&TrainedModel> {
        self.models
            .get(key)
            .ok_or_else(|| Error::invalid(format!("model {} not in zoo", key.id())))
    }
}

struct Cache<'a> {
    opts: &'a TrainOptions,
    fingerprint: String,
}

impl Cache<'_> {
    fn path(&self, id: &str) -> Option<PathBuf> {
        let key = crate::io::sha256_hex(format!("{}:{id}", self.fingerprint).as_bytes());
        self.opts
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("{id}-{}.ckpt", &key[..12])))
    }

    /// Returns the model and whether it was freshly trained.
    fn get_or_train(&self, id: &str, train: impl FnOnce() -> Result<TrainedModel>) -> Result<(TrainedModel, bool)> {
        let path = self.path(id);
        if let Some(p) = &path {
            if p.exists() {
                tracing::debug!(model = id, path = %p.display(), "loading checkpoint");
                return Ok((TrainedModel::load(p)?, false));
            }
        }
        if self.opts.strict {
            return Err(Error::MissingCheckpoint(path.unwrap_or_else(|| PathBuf::from(id))));
        }
        tracing::info!(model = id, "training");
        let m = train()?;
        if let Some(p) = &path {
            m.save(p)?;
            crate::io::write_atomic(&p.with_extension("log.csv"), m.log_csv().as_bytes())?;
        }
        Ok((m, true))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
fn map_jobs<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    pool(jobs)?.install(|| items.par_iter().map(&f).collect())
}

/// Trains (or loads) the pretrained base(s), Mi/Mb teachers and their
/// distilled students for every seed.
pub fn train_models(plan: &ExperimentPlan, data: &PreparedData, opts: &TrainOptions) -> Result<ModelZoo> {
    plan.validate()?;
    let cache = Cache {
        opts,
        fingerprint: plan.training_fingerprint()?,
    };
    let mut trained = Vec::new();
    let mut pretrained = BTreeMap::new();
    if plan.pretrain.epochs > 0 {
        let seeds: Vec<Option<u64>> = if plan.pretrain_per_seed {
            plan.seeds.iter().map(|&s| Some(s)).collect()
        } else {
            vec![None]
        };
        let out = map_jobs(opts.jobs, &seeds, |s| {
            let id = match s {
                Some(s) => format!("pretrained-s{s}"),
                None => "pretrained".to_string(),
            };
            let cfg = TrainConfig {
                seed: s.unwrap_or(plan.pretrain.seed),
                ..plan.pretrain.clone()
            };
            let (m, fresh) = cache.get_or_train(&id, || training::pretrain_mlm(&cfg, &data.train_pool, &plan.teacher))?;
            Ok((id, m, fresh))
        })?;
        for (id, m, fresh) in out {
            if fresh {
                trained.push(id.clone());
            }
            pretrained.insert(id, m);
        }
    }
    let base_for = |seed: u64| -> Option<&TrainedModel> {
        if plan.pretrain_per_seed {
            pretrained.get(&format!("pretrained-s{seed}"))
        } else {
            pretrained.get("pretrained")
        }
    };
    let student_cfg = plan.student_config();
    let per_seed = map_jobs(opts.jobs, &plan.seeds, |&seed| {
        let mut out = Vec::new();
        for setting in Setting::ALL {
            let subset = data.subset(setting);
            let tkey = ModelKey {
                arch: Arch::Teacher,
                setting,
                seed,
            };
            let ft = TrainConfig {
                seed,
                ..plan.finetune.clone()
            };
            let (teacher, fresh_t) =
                cache.get_or_train(&tkey.id(), || training::finetune(&ft, subset, base_for(seed), &plan.teacher))?;
            let skey = ModelKey {
                arch: Arch::Student,
                ..tkey
            };
            let dc = TrainConfig {
                seed,
                ..plan.distill.clone()
            };
            let (student, fresh_s) = cache.get_or_train(&skey.id(), || {
                let (init, how) = match plan.student_init {
                    StudentInitMode::FromTeacher => {
                        let (mut s, how) = training::student_from_teacher(&teacher.model)?;
                        s.config = student_cfg.clone();
                        s.validate()?;
                        (s, how)
                    }
                    StudentInitMode::Fresh => (EncoderModel::init(&student_cfg, seed)?, training::StudentInit::Fresh),
                };
                training::distill_into(&teacher, init, how, &dc, subset)
            })?;
            out.push((tkey, teacher, fresh_t));
            out.push((skey, student, fresh_s));
        }
        Ok(out)
    })?;
    let mut models = BTreeMap::new();
    for (key, m, fresh) in per_seed.into_iter().flatten() {
        if fresh {
            trained.push(key.id());
        }
        models.insert(key, m);
    }
    Ok(ModelZoo {
        pretrained,
        models,
        trained,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pairs: Vec<LayerwiseScore>,
}

impl Curve {
    fn from_pairs(pairs: Vec<LayerwiseScore>) -> Self {
        let layers = pairs.first().map_or(0, |p| p.values.len());
        let (mut mean, mut std) = (Vec::with_capacity(layers), Vec::with_capacity(layers));
        for l in 0..layers {
            let col: Vec<f64> = pairs.iter().map(|p| p.values[l]).collect();
            let (m, s) = mean_std(&col);
            mean.push(m);
            std.push(s);
        }
        Self { mean, std, pairs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E1Metric {
    pub mi_mb: Curve,
    pub mi_mi: Curve,
    pub mb_mb: Curve,
    /// A model compared with itself; must be zero.
    pub sanity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E1Arch {
    pub arch: Arch,
    pub js: E1Metric,
    pub svcca: E1Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E1Result {
    pub schema_version: u32,
    pub archs: Vec<E1Arch>,
    pub num_samples: usize,
    pub num_tokens: usize,
    pub num_seeds: usize,
    /// Index of the first hidden layer in the SVCCA curves (0 = embeddings).
    pub svcca_first_layer: usize,
}

/// Per-model quantities every E1 comparison needs.
struct E1Features {
    traces: Vec<ForwardTrace>,
    bases: Vec<Tensor>,
}

fn e1_features(model: &EncoderModel, seqs: &[Vec<u32>], pos: &[(usize, usize)], plan: &ExperimentPlan) -> Result<E1Features> {
    let m = &plan.metrics;
    let none = AblationSpec::none();
    let mut traces = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(m.eval_batch_size) {
        traces.extend(model.forward_batch(chunk, &none)?.into_iter().map(|(_, t)| t));
    }
    let skip = usize::from(!m.include_embeddings);
    let bases = hidden_at(model, seqs, pos, m.eval_batch_size)?
        .iter()
        .skip(skip)
        .map(|h| svcca_basis(h, m.variance_keep))
        .collect::<Result<Vec<_>>>()?;
    Ok(E1Features { traces, bases })
}

fn js_curve(a: &E1Features, b: &E1Features) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    for (x, y) in a.traces.iter().zip(&b.traces) {
        let v = trace_js(x, y)?;
        if sums.is_empty() {
            sums = vec![0.0; v.len()];
        }
        for (s, v) in sums.iter_mut().zip(v) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / a.traces.len() as f64).collect())
}

fn svcca_curve(a: &E1Features, b: &E1Features) -> Result<Vec<f64>> {
    a.bases.iter().zip(&b.bases).map(|(x, y)| svcca_from_bases(x, y)).collect()
}

/// The E1 evaluation sample: a seeded subset of the evaluation split, in
/// corpus order, with classification tokens prepended.
pub fn e1_sample(plan: &ExperimentPlan, eval: &Corpus) -> Vec<Vec<u32>> {
    let n = plan.metrics.e1_samples.min(eval.len());
    let mut rng = ChaCha8Rng::seed_from_u64(plan.metrics.sample_seed);
    let mut idx = index::sample(&mut rng, eval.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| with_cls(&eval.examples()[i].tokens)).collect()
}

/// Layer-by-layer comparison of Mi vs Mb against same-setting seed pairs.
pub fn run_e1(plan: &ExperimentPlan, data: &PreparedData, zoo: &ModelZoo, jobs: usize) -> Result<E1Result> {
    plan.validate()?;
    let seqs = e1_sample(plan, &data.eval);
    let pos = sample_token_positions(&seqs, plan.metrics.svcca_tokens, plan.metrics.sample_seed);
    if pos.len() <= plan.teacher.model_dim {
        return Err(Error::invalid(format!(
            "only {} token positions for SVCCA; need more than model_dim",
            pos.len()
        )));
    }
    let mut archs = Vec::new();
    for arch in Arch::ALL {
        let keys: Vec<ModelKey> = Setting::ALL
            .iter()
            .flat_map(|&setting| plan.seeds.iter().map(move |&seed| ModelKey { arch, setting, seed }))
            .collect();
        let feats = map_jobs(jobs, &keys, |k| e1_features(&zoo.get(k)?.model, &seqs, &pos, plan))?;
        let feat: BTreeMap<ModelKey, &E1Features> = keys.iter().copied().zip(feats.iter()).collect();
        let key = |setting, seed| ModelKey { arch, setting, seed };
        let mut cross = Vec::new();
        let mut within = [Vec::new(), Vec::new()];
        for (i, &a) in plan.seeds.iter().enumerate() {
            for &b in &plan.seeds {
                cross.push((key(Setting::Imbalanced, a), key(Setting::Balanced, b)));
            }
            for &b in &plan.seeds[i + 1..] {
                for (w, s) in within.iter_mut().zip(Setting::ALL) {
                    w.push((key(s, a), key(s, b)));
                }
            }
        }
        let score = |metric: &str, pairs: &[(ModelKey, ModelKey)]| -> Result<Curve> {
            let scores = pairs
                .iter()
                .map(|(a, b)| {
                    let values = match metric {
                        "js" => js_curve(feat[a], feat[b])?,
                        _ => svcca_curve(feat[a], feat[b])?,
                    };
                    Ok(LayerwiseScore {
                        metric: metric.to_string(),
                        model_a: a.id(),
                        model_b: b.id(),
                        values,
                        num_samples: seqs.len(),
                        num_seeds: 1,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Curve::from_pairs(scores))
        };
        let probe = key(Setting::Imbalanced, plan.seeds[0]);
        let metric = |name: &str| -> Result<E1Metric> {
            Ok(E1Metric {
                mi_mb: score(name, &cross)?,
                mi_mi: score(name, &within[0])?,
                mb_mb: score(name, &within[1])?,
                sanity: match name {
                    "js" => js_curve(feat[&probe], feat[&probe])?,
                    _ => svcca_curve(feat[&probe], feat[&probe])?,
                },
            })
        };
        archs.push(E1Arch {
            arch,
            js: metric("js")?,
            svcca: metric("svcca")?,
        });
    }
    Ok(E1Result {
        schema_version: REPORT_SCHEMA_VERSION,
        archs,
        num_samples: seqs.len(),
        num_tokens: pos.len(),
        num_seeds: plan.seeds.len(),
        svcca_first_layer: usize::from(!plan.metrics.include_embeddings),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEval {
    /// `None` is the unablated baseline.
    pub ablated_head: Option<usize>,
    pub report: FairnessReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2Model {
    pub model_id: String,
    pub setting: Setting,
    pub seed: u64,
    /// Baseline first, then heads `0..H` in order.
    pub evaluations: Vec<AblationEval>,
}

impl E2Model {
    pub fn baseline(&self) -> &FairnessReport {
        &self.evaluations[0].report
    }

    pub fn ablations(&self) -> &[AblationEval] {
        &self.evaluations[1..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeRow {
    pub setting: Setting,
    pub seed: u64,
    pub class: usize,
    /// Class share of the setting's training subset.
    pub proportion: f64,
    pub ratio_wm: f64,
    pub baseline_eo: Option<f64>,
    pub baseline_f1: f64,
    pub eo_per_head: Vec<Option<f64>>,
    pub f1_per_head: Vec<f64>,
    pub amplitude: Option<f64>,
    pub log_proportion: f64,
    pub log_amplitude: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedClass {
    pub setting: Setting,
    pub seed: u64,
    pub class: usize,
    pub reason: String,
}

/// Which head's removal raises EO the most, per seed, and how often the
/// most common answer occurs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStability {
    pub setting: Setting,
    pub class: usize,
    pub top_heads: Vec<Option<usize>>,
    pub modal_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2Result {
    pub schema_version: u32,
    pub arch: Arch,
    pub num_heads: usize,
    pub num_classes: usize,
    pub eval_size: usize,
    pub models: Vec<E2Model>,
    pub amplitudes: Vec<AmplitudeRow>,
    pub excluded: Vec<ExcludedClass>,
    pub head_stability: Vec<HeadStability>,
}

/// Fairness of `model` on `eval` with the given heads ablated.
pub fn evaluate_fairness(
    model: &EncoderModel,
    eval: &Corpus,
    ablation: &AblationSpec,
    mode: EoMode,
    batch_size: usize,
) -> Result<FairnessReport> {
    let pred = training::predict_corpus(model, eval, ablation, batch_size)?;
    fairness_report(&pred, &eval.labels(), &eval.groups(), model.config.num_classes, mode)
}

fn e2_model(key: &ModelKey, model: &EncoderModel, eval: &Corpus, m: &MetricOptions) -> Result<E2Model> {
    let heads = model.config.num_heads;
    let mut evaluations = Vec::with_capacity(heads + 1);
    for ablated_head in std::iter::once(None).chain((0..heads).map(Some)) {
        let abl = ablated_head.map_or_else(AblationSpec::none, AblationSpec::single);
        evaluations.push(AblationEval {
            ablated_head,
            report: evaluate_fairness(model, eval, &abl, m.eo_mode, m.eval_batch_size)?,
        });
    }
    Ok(E2Model {
        model_id: key.id(),
        setting: key.setting,
        seed: key.seed,
        evaluations,
    })
}

/// Single-head ablation sweep for every model of `arch`.
pub fn run_e2(plan: &ExperimentPlan, data: &PreparedData, zoo: &ModelZoo, arch: Arch, jobs: usize) -> Result<E2Result> {
    plan.validate()?;
    let keys: Vec<ModelKey> = Setting::ALL
        .iter()
        .flat_map(|&setting| plan.seeds.iter().map(move |&seed| ModelKey { arch, setting, seed }))
        .collect();
    let models = map_jobs(jobs, &keys, |k| e2_model(k, &zoo.get(k)?.model, &data.eval, &plan.metrics))?;
    let stats: BTreeMap<Setting, Vec<ClassStats>> = Setting::ALL
        .iter()
        .map(|&s| Ok((s, corpus::stats(data.subset(s))?)))
        .collect::<Result<_>>()?;
    let num_classes = plan.teacher.num_classes;
    let mut amplitudes = Vec::new();
    let mut excluded = Vec::new();
    for m in &models {
        for class in 0..num_classes {
            let st = &stats[&m.setting][class];
            let eo_per_head: Vec<Option<f64>> = m.ablations().iter().map(|a| a.report.classes[class].eo).collect();
            let amplitude = metrics::amplitude(&eo_per_head)?;
            if amplitude.is_none() {
                excluded.push(ExcludedClass {
                    setting: m.setting,
                    seed: m.seed,
                    class,
                    reason: "equalized odds undefined under some ablation (empty label/group cell)".into(),
                });
            }
            amplitudes.push(AmplitudeRow {
                setting: m.setting,
                seed: m.seed,
                class,
                proportion: st.proportion,
                ratio_wm: st.ratio_wm,
                baseline_eo: m.baseline().classes[class].eo,
                baseline_f1: m.baseline().classes[class].f1,
                eo_per_head,
                f1_per_head: m.ablations().iter().map(|a| a.report.classes[class].f1).collect(),
                amplitude,
                log_proportion: log_rescale(&[st.proportion])?[0],
                log_amplitude: amplitude.map(|a| log_rescale(&[a])).transpose()?.map(|v| v[0]),
            });
        }
    }
    let mut head_stability = Vec::new();
    for setting in Setting::ALL {
        for class in 0..num_classes {
            let top_heads: Vec<Option<usize>> = models
                .iter()
                .filter(|m| m.setting == setting)
                .map(|m| top_head(m, class))
                .collect();
            let mut counts = BTreeMap::<usize, usize>::new();
            for h in top_heads.iter().flatten() {
                *counts.entry(*h).or_default() += 1;
            }
            let defined = top_heads.iter().flatten().count();
            head_stability.push(HeadStability {
                setting,
                class,
                modal_fraction: counts
                    .values()
                    .max()
                    .map(|&c| c as f64 / defined as f64),
                top_heads,
            });
        }
    }
    Ok(E2Result {
        schema_version: REPORT_SCHEMA_VERSION,
        arch,
        num_heads: zoo.get(&keys[0])?.model.config.num_heads,
        num_classes,
        eval_size: data.eval.len(),
        models,
        amplitudes,
        excluded,
        head_stability,
    })
}

/// Head whose ablation gives the highest EO for `class` (lowest index on ties).
fn top_head(m: &E2Model, class: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (h, a) in m.ablations().iter().enumerate() {
        let eo = a.report.classes[class].eo?;
        if best.map_or(true, |(_, b)| eo > b) {
            best = Some((h, eo));
        }
    }
    best.map(|(h, _)| h)
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Seed-averaged per-class amplitude for one setting; `None` where no seed
/// has a defined amplitude.
pub fn mean_amplitudes(e2: &E2Result, setting: Setting) -> Vec<Option<f64>> {
    (0..e2.num_classes)
        .map(|c| {
            mean_defined(
                e2.amplitudes
                    .iter()
                    .filter(|r| r.setting == setting && r.class == c)
                    .map(|r| r.amplitude),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassComparison {
    pub class: usize,
    pub proportion: f64,
    pub ratio_wm: f64,
    pub teacher_amplitude: Option<f64>,
    pub student_amplitude: Option<f64>,
    /// Teacher minus student.
    pub amplitude_delta: Option<f64>,
    pub teacher_eo: Option<f64>,
    pub student_eo: Option<f64>,
    pub eo_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchComparison {
    pub schema_version: u32,
    pub setting: Setting,
    pub rows: Vec<ClassComparison>,
    /// Seed-mean weighted F-score of the unablated models.
    pub teacher_fscore: f64,
    pub student_fscore: f64,
    /// Rank correlation of weighted F-score and mean EO across all
    /// ablation evaluations.
    pub teacher_fscore_eo_spearman: Option<f64>,
    pub student_fscore_eo_spearman: Option<f64>,
}

pub fn compare_architectures(teacher: &E2Result, student: &E2Result, setting: Setting) -> Result<ArchComparison> {
    if teacher.num_classes != student.num_classes || teacher.eval_size != student.eval_size {
        return Err(Error::invalid("E2 results cover different classes or evaluation sets"));
    }
    let (ta, sa) = (mean_amplitudes(teacher, setting), mean_amplitudes(student, setting));
    let baseline_eo = |e: &E2Result, c: usize| {
        mean_defined(
            e.models
                .iter()
                .filter(|m| m.setting == setting)
                .map(|m| m.baseline().classes[c].eo),
        )
    };
    let mut rows = Vec::with_capacity(teacher.num_classes);
    for c in 0..teacher.num_classes {
        let stat = teacher
            .amplitudes
            .iter()
            .find(|r| r.setting == setting && r.class == c)
            .ok_or_else(|| Error::invalid(format!("no amplitude rows for class {c}")))?;
        let (te, se) = (baseline_eo(teacher, c), baseline_eo(student, c));
        rows.push(ClassComparison {
            class: c,
            proportion: stat.proportion,
            ratio_wm: stat.ratio_wm,
            teacher_amplitude: ta[c],
            student_amplitude: sa[c],
            amplitude_delta: ta[c].zip(sa[c]).map(|(a, b)| a - b),
            teacher_eo: te,
            student_eo: se,
            eo_delta: te.zip(se).map(|(a, b)| a - b),
        });
    }
    let fscore = |e: &E2Result| {
        let v: Vec<f64> = e
            .models
            .iter()
            .filter(|m| m.setting == setting)
            .map(|m| m.baseline().weighted_fscore)
            .collect();
        mean_std(&v).0
    };
    let corr = |e: &E2Result| {
        let (f, eo): (Vec<f64>, Vec<f64>) = e
            .models
            .iter()
            .filter(|m| m.setting == setting)
            .flat_map(|m| m.ablations())
            .filter_map(|a| Some((a.report.weighted_fscore, a.report.mean_eo?)))
            .unzip();
        spearman(&f, &eo)
    };
    Ok(ArchComparison {
        schema_version: REPORT_SCHEMA_VERSION,
        setting,
        rows,
        teacher_fscore: fscore(teacher),
        student_fscore: fscore(student),
        teacher_fscore_eo_spearman: corr(teacher),
        student_fscore_eo_spearman: corr(student),
    })
}

/// Classes ranked most double-imbalanced first: smallest
/// `proportion * ratio_wm` (rare and skewed), ties by class index.
pub fn double_imbalance_order(stats: &[ClassStats]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stats.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&stats[a], &stats[b]);
        (x.proportion * x.ratio_wm).total_cmp(&(y.proportion * y.ratio_wm)).then(a.cmp(&b))
    });
    idx
}

/// The `k` largest classes whose ratio W/M is at least `min_ratio`.
pub fn largest_balanced(stats: &[ClassStats], k: usize, min_ratio: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stats.len()).filter(|&c| stats[c].ratio_wm >= min_ratio).collect();
    idx.sort_by(|&a, &b| stats[b].proportion.total_cmp(&stats[a].proportion).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn verify_e1(e1: &E1Result, teacher_layers: usize, student_layers: usize) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(m));
    for a in &e1.archs {
        let layers = match a.arch {
            Arch::Teacher => teacher_layers,
            Arch::Student => student_layers,
        };
        let hidden = layers + 1 - e1.svcca_first_layer;
        for (metric, m, len) in [("js", &a.js, layers), ("svcca", &a.svcca, hidden)] {
            for curve in [&m.mi_mb, &m.mi_mi, &m.mb_mb] {
                if curve.mean.len() != len {
                    return fail(format!("{} {metric} curve has {} layers, expected {len}", a.arch.tag(), curve.mean.len()));
                }
                for p in &curve.pairs {
                    if p.values.iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
                        return fail(format!("{metric} value outside [0, 1] for {} vs {}", p.model_a, p.model_b));
                    }
                }
            }
            let tol = if metric == "js" { 0.0 } else { 1e-6 };
            if m.sanity.iter().any(|v| *v > tol) {
                return fail(format!("{} {metric} self-comparison is not zero: {:?}", a.arch.tag(), m.sanity));
            }
        }
    }
    Ok(())
}

pub fn verify_e2(e2: &E2Result) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(m));
    for m in &e2.models {
        if m.evaluations.len() != e2.num_heads + 1 {
            return fail(format!("{} has {} evaluations", m.model_id, m.evaluations.len()));
        }
        let supports: usize = m.baseline().classes.iter().map(|c| c.support).sum();
        if supports != e2.eval_size {
            return fail(format!("{} supports sum to {supports}", m.model_id));
        }
    }
    for r in &e2.amplitudes {
        if r.amplitude != metrics::amplitude(&r.eo_per_head)? {
            return fail(format!("amplitude mismatch for class {} seed {}", r.class, r.seed));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    pub strict: bool,
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            strict: false,
            force: false,
        }
    }
}

pub struct PlanOutcome {
    pub data: PreparedData,
    pub zoo: ModelZoo,
    pub e1: E1Result,
    pub e2_teacher: E2Result,
    pub e2_student: E2Result,
    pub comparison: ArchComparison,
}

/// Trains everything (reusing cached checkpoints under `outdir/checkpoints`),
/// runs both experiments, verifies invariants and writes all reports.
pub fn run_plan(plan: &ExperimentPlan, outdir: &Path, opts: &RunOptions) -> Result<PlanOutcome> {
    plan.validate()?;
    let reports = outdir.join("reports");
    if !opts.force && reports.join("summary.json").exists() {
        return Err(Error::invalid(format!(
            "{} already holds reports; pass --force to overwrite",
            outdir.display()
        )));
    }
    let data = prepare_data(plan)?;
    let zoo = train_models(
        plan,
        &data,
        &TrainOptions {
            jobs: opts.jobs,
            strict: opts.strict,
            checkpoint_dir: Some(outdir.join("checkpoints")),
        },
    )?;
    let e1 = run_e1(plan, &data, &zoo, opts.jobs)?;
    verify_e1(&e1, plan.teacher.num_layers, plan.student_config().num_layers)?;
    let e2_teacher = run_e2(plan, &data, &zoo, Arch::Teacher, opts.jobs)?;
    let e2_student = run_e2(plan, &data, &zoo, Arch::Student, opts.jobs)?;
    verify_e2(&e2_teacher)?;
    verify_e2(&e2_student)?;
    let comparison = compare_architectures(&e2_teacher, &e2_student, Setting::Imbalanced)?;
    let outcome = PlanOutcome {
        data,
        zoo,
        e1,
        e2_teacher,
        e2_student,
        comparison,
    };
    crate::report::write_all(outdir, plan, &outcome)?;
    Ok(outcome)
}
