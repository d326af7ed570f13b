#![allow(dead_code)]

use std::rc::Rc;

use fairscope_core::encoder::{AblationSpec, Batch, EncoderModel, ModelConfig};
use fairscope_core::nn::gradcheck::{grad_check, grad_check_sampled, GradCheckReport, DEFAULT_STEP};
use fairscope_core::metrics::{equalized_odds, EoMode};
use fairscope_core::nn::{svd, Graph, Tensor, Var};
use fairscope_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
    /// Keep sampled inputs away from zero (for kinks such as ReLU).
    pub avoid_zero: bool,
}

/// Reduces an op output to a scalar through a fixed weighting, so every
/// output entry contributes a distinct gradient.
fn weigh(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(Tensor::from_fn(shape, |i| ((i * 37 % 11) as f64 - 5.0) / 7.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: Vec<Vec<usize>>, f: OpFn) -> OpCase {
        OpCase {
            name,
            shapes,
            f,
            avoid_zero: false,
        }
    }
    let keep: Vec<bool> = (0..2 * 3 * 4).map(|i| i % 4 != 3 || i % 8 == 3).collect();
    vec![
        case("matmul", vec![vec![4, 3], vec![3, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weigh(g, y)
        })),
        case("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|g, v| {
            let y = g.batch_matmul(v[0], v[1], false)?;
            weigh(g, y)
        })),
        case("batch_matmul_transposed", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|g, v| {
            let y = g.batch_matmul(v[0], v[1], true)?;
            weigh(g, y)
        })),
        case("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weigh(g, y)
        })),
        case("add_bias", vec![vec![3, 4], vec![4]], Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weigh(g, y)
        })),
        case("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weigh(g, y)
        })),
        case("scale", vec![vec![5]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weigh(g, y)
        })),
        case("sum", vec![vec![2, 3]], Box::new(|g, v| {
            let s = g.sum(v[0]);
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        })),
        case("softmax", vec![vec![3, 5]], Box::new(|g, v| {
            let y = g.softmax(v[0]);
            weigh(g, y)
        })),
        case("masked_softmax", vec![vec![2, 3, 4]], Box::new(move |g, v| {
            let y = g.masked_softmax(v[0], Some(&keep))?;
            weigh(g, y)
        })),
        case("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weigh(g, y)
        })),
        case("gelu", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weigh(g, y)
        })),
        OpCase {
            avoid_zero: true,
            ..case("relu", vec![vec![4, 3]], Box::new(|g, v| {
                let y = g.relu(v[0]);
                weigh(g, y)
            }))
        },
        case("embedding_lookup", vec![vec![5, 3]], Box::new(|g, v| {
            let y = g.embedding(v[0], &[4, 0, 4, 2])?;
            weigh(g, y)
        })),
        case("split_heads", vec![vec![6, 4]], Box::new(|g, v| {
            let y = g.split_heads(v[0], 2, 3, 2)?;
            weigh(g, y)
        })),
        case("merge_heads", vec![vec![4, 3, 2]], Box::new(|g, v| {
            let y = g.merge_heads(v[0], 2, 3, 2)?;
            weigh(g, y)
        })),
        case("gather_rows", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[3, 0, 3])?;
            weigh(g, y)
        })),
        case("cross_entropy", vec![vec![3, 4]], Box::new(|g, v| g.cross_entropy(v[0], &[1, 3, 0]))),
        case("soft_cross_entropy", vec![vec![2, 3]], Box::new(|g, v| {
            let q = Rc::new(Tensor::new([2, 3], vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05]).unwrap());
            g.soft_cross_entropy(v[0], q)
        })),
    ]
}

pub fn random_point(shapes: &[Vec<usize>], seed: u64, avoid_zero: bool) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s.clone(), |_| {
                let mut v: f64 = rng.gen_range(-2.0..2.0);
                if avoid_zero && v.abs() < 0.1 {
                    v += 0.2f64.copysign(v);
                }
                v
            })
        })
        .collect()
}

/// Worst relative error of one op across `points` random inputs.
pub fn check_op(case: &OpCase, points: u64) -> f64 {
    (0..points)
        .map(|seed| {
            let params = random_point(&case.shapes, seed, case.avoid_zero);
            grad_check(&case.f, &params, DEFAULT_STEP).unwrap().max_rel_error
        })
        .fold(0.0, f64::max)
}

pub fn tiny_encoder_config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 12,
        vocab_size: 16,
        max_len: 6,
        num_classes: 3,
        dropout: 0.0,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

/// Gradient check of the classification loss through the whole encoder on a
/// padded two-example batch.
pub fn encoder_loss_check(config: &ModelConfig, seed: u64, max_entries: usize) -> GradCheckReport {
    let model = EncoderModel::init(config, seed).unwrap();
    let seqs: Vec<Vec<u32>> = vec![vec![1, 5, 9, 3], vec![1, 12, 7]];
    let batch = Batch::new(&seqs, config).unwrap();
    let labels = [2usize, 0];
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound = model.params.attach(vars);
        let out = model.forward_graph(g, &bound, &batch, &AblationSpec::none(), None)?;
        g.cross_entropy(out.logits, &labels)
    };
    grad_check_sampled(f, &model.params.tensors(), DEFAULT_STEP, max_entries).unwrap()
}

pub fn toy_corpus_spec(n: usize, seed: u64) -> fairscope_core::corpus::CorpusSpec {
    use fairscope_core::corpus::{CorpusSpec, TemplateParams};
    CorpusSpec {
        num_classes: 3,
        class_proportions: vec![0.4, 0.35, 0.25],
        group_ratio_per_class: vec![0.3, 0.5, 0.8],
        vocab_size: 48,
        max_len: 8,
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
    }
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        vocab_size: 48,
        max_len: 9,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Two-seed plan on the toy corpus that trains in a couple of seconds.
pub fn tiny_plan() -> fairscope_core::protocol::ExperimentPlan {
    use fairscope_core::protocol::{ExperimentPlan, MetricOptions};
    use fairscope_core::training::TrainConfig;
    let cfg = |epochs| TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    ExperimentPlan {
        corpus: toy_corpus_spec(400, 3),
        teacher: toy_model_config(),
        pretrain: cfg(1),
        finetune: cfg(2),
        distill: cfg(2),
        seeds: vec![0, 1],
        metrics: MetricOptions {
            e1_samples: 32,
            svcca_tokens: 120,
            eval_batch_size: 64,
            ..MetricOptions::default()
        },
        ..ExperimentPlan::default()
    }
}

pub fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn([n, d], |_| rng.sample(StandardNormal))
}

pub fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    svd(&gaussian(d, d, rng)).unwrap().u
}

/// KL-based JS in nats, converted to bits.
pub fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
    let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
    let kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(&m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    (kl(&p) + kl(&q)) / 2.0 / std::f64::consts::LN_2
}

/// Probability-table EO: builds P(yhat=1, y, s) and P(y, s) over the
/// example list and conditions explicitly.
pub fn eo_oracle(p: &[usize], y: &[usize], s: &[u8], target: usize, mode: EoMode) -> Option<f64> {
    let n = y.len() as f64;
    let joint = |yy: bool, ss: u8, pos: Option<bool>| -> f64 {
        (0..y.len())
            .filter(|&i| (y[i] == target) == yy && s[i] == ss && pos.map_or(true, |b| (p[i] == target) == b))
            .count() as f64
            / n
    };
    let cond = |yy: bool, ss: u8| {
        let d = joint(yy, ss, None);
        (d > 0.0).then(|| joint(yy, ss, Some(true)) / d)
    };
    let gap = |yy: bool| Some((cond(yy, 0)? - cond(yy, 1)?).abs());
    match mode {
        EoMode::PositiveOnly => gap(true),
        EoMode::Average => Some((gap(true)? + gap(false)?) / 2.0),
        EoMode::Max => Some(gap(true)?.max(gap(false)?)),
    }
}

/// Every confusion table with 0..=2 examples per (label, group) cell and up
/// to 8 examples, checked against the table oracle and under a group swap
/// in all three modes. Returns (tables checked, defined EO values).
pub fn eo_table_sweep() -> Result<(usize, usize), String> {
    // Each (y, s) cell holds 0..=2 examples with any number of positive
    // predictions, total at most 8.
    let mut checked = 0;
    let mut defined = 0;
    for sizes in 0..81usize {
        let n: Vec<usize> = (0..4).map(|k| sizes / 3usize.pow(k as u32) % 3).collect();
        let total: usize = n.iter().sum();
        if total == 0 || total > 8 {
            continue;
        }
        let combos: usize = n.iter().map(|&c| c + 1).product();
        for pick in 0..combos {
            let mut rem = pick;
            let (mut p, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new());
            for (cell, &size) in n.iter().enumerate() {
                let positives = rem % (size + 1);
                rem /= size + 1;
                let (yy, ss) = (cell / 2, (cell % 2) as u8);
                for j in 0..size {
                    y.push(yy);
                    s.push(ss);
                    let hit = j < positives;
                    // target class is 1; a negative prediction is class 0 or 2
                    p.push(if hit { 1 } else if yy == 1 { 0 } else { 2 * (j % 2) });
                }
            }
            let swapped: Vec<u8> = s.iter().map(|g| 1 - g).collect();
            for mode in [EoMode::Average, EoMode::Max, EoMode::PositiveOnly] {
                let got = equalized_odds(&p, &y, &s, 1, mode).unwrap();
                let want = eo_oracle(&p, &y, &s, 1, mode);
                match (got, want) {
                    (Some(a), Some(b)) if (a - b).abs() < 1e-12 && (0.0..=1.0).contains(&a) => defined += 1,
                    (None, None) => {}
                    other => return Err(format!("{p:?} {y:?} {s:?} {mode:?}: {other:?}")),
                }
                if got != equalized_odds(&p, &y, &swapped, 1, mode).unwrap() {
                    return Err(format!("group swap changed EO for {p:?} {y:?} {s:?}"));
                }
                checked += 1;
            }
        }
    }
    Ok((checked, defined))
}


pub fn fscore_oracle(p: &[usize], y: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let tp = p.iter().zip(y).filter(|(a, b)| **a == k && **b == k).count() as f64;
        let fp = p.iter().zip(y).filter(|(a, b)| **a == k && **b != k).count() as f64;
        let fn_ = p.iter().zip(y).filter(|(a, b)| **a != k && **b == k).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += f1 * y.iter().filter(|&&v| v == k).count() as f64;
    }
    total / y.len() as f64
}

