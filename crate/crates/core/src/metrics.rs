//! Attention divergence, representation similarity, group fairness and
//! classification quality.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, ForwardTrace};
use crate::error::{Error, Result};
use crate::nn::{svd, Tensor};

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
/// Inputs are renormalised before use.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!(
            "distributions must be non-empty and equally long ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let sp = check_distribution(p)?;
    let sq = check_distribution(q)?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        let term = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        // Commutative addition keeps js(p, q) == js(q, p) bit for bit.
        total += 0.5 * (term(a) + term(b));
    }
    Ok(total.clamp(0.0, 1.0))
}

fn check_distribution(p: &[f64]) -> Result<f64> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("distribution entries must be finite and non-negative"));
    }
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return Err(Error::invalid("distribution sums to zero"));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseScore {
    pub metric: String,
    pub model_a: String,
    pub model_b: String,
    /// One value per compared layer, bottom to top.
    pub values: Vec<f64>,
    pub num_samples: usize,
    pub num_seeds: usize,
}

fn check_pair(a: &EncoderModel, b: &EncoderModel) -> Result<()> {
    let (ca, cb) = (&a.config, &b.config);
    if ca.num_heads != cb.num_heads || ca.num_layers != cb.num_layers {
        return Err(Error::invalid(format!(
            "cannot compare {}x{} with {}x{} (layers x heads)",
            ca.num_layers, ca.num_heads, cb.num_layers, cb.num_heads
        )));
    }
    if ca.model_dim != cb.model_dim {
        return Err(Error::invalid(format!("model_dim mismatch: {} vs {}", ca.model_dim, cb.model_dim)));
    }
    Ok(())
}

/// Mean JS divergence between two traces of the same input, per layer:
/// `1/H sum_h 1/W sum_t JS(A_h(t), B_h(t))` over the `W` non-pad queries,
/// with pad keys removed from both distributions.
pub fn trace_js(a: &ForwardTrace, b: &ForwardTrace) -> Result<Vec<f64>> {
    if a.pad_mask != b.pad_mask || a.attention.len() != b.attention.len() {
        return Err(Error::invalid("traces come from different inputs or depths"));
    }
    let valid: Vec<usize> = a.valid_positions().collect();
    if valid.is_empty() {
        return Err(Error::invalid("trace has no valid positions"));
    }
    let mut out = Vec::with_capacity(a.attention.len());
    let mut ra = Vec::with_capacity(valid.len());
    let mut rb = Vec::with_capacity(valid.len());
    for l in 0..a.attention.len() {
        let heads = a.attention[l].shape()[0];
        if b.attention[l].shape()[0] != heads {
            return Err(Error::invalid("head-count mismatch"));
        }
        let mut layer = 0.0;
        for h in 0..heads {
            let mut head = 0.0;
            for &t in &valid {
                let (row_a, row_b) = (a.attention_row(l, h, t), b.attention_row(l, h, t));
                ra.clear();
                rb.clear();
                ra.extend(valid.iter().map(|&k| row_a[k]));
                rb.extend(valid.iter().map(|&k| row_b[k]));
                head += js_divergence(&ra, &rb)?;
            }
            layer += head / valid.len() as f64;
        }
        out.push(layer / heads as f64);
    }
    Ok(out)
}

/// Per-layer attention divergence between two models on the same inputs,
/// averaged over samples.
pub fn layerwise_js<S: AsRef<[u32]>>(
    a: &EncoderModel,
    b: &EncoderModel,
    seqs: &[S],
    batch_size: usize,
) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    if seqs.is_empty() {
        return Err(Error::invalid("no evaluation sequences"));
    }
    let none = crate::encoder::AblationSpec::none();
    let mut sums = vec![0.0; a.config.num_layers];
    for chunk in seqs.chunks(batch_size.max(1)) {
        let ta = a.forward_batch(chunk, &none)?;
        let tb = b.forward_batch(chunk, &none)?;
        for ((_, x), (_, y)) in ta.iter().zip(&tb) {
            for (s, v) in sums.iter_mut().zip(trace_js(x, y)?) {
                *s += v;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / seqs.len() as f64).collect())
}

/// Orthonormal basis (`n x k`) of the column-centred representation matrix,
/// truncated to the fewest directions explaining `variance_keep` of the
/// variance.
pub fn svcca_basis(x: &Tensor, variance_keep: f64) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::invalid("representations must be a matrix"));
    }
    if !(variance_keep > 0.0 && variance_keep <= 1.0) {
        return Err(Error::invalid(format!("variance_keep {variance_keep} outside (0, 1]")));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n <= d {
        return Err(Error::invalid(format!("need more samples than dimensions ({n} <= {d})")));
    }
    let mut c = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            c.data_mut()[i * d + j] -= mean;
        }
    }
    let dec = svd(&c)?;
    let energy: Vec<f64> = dec.s.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    let smax = dec.s.first().copied().unwrap_or(0.0);
    if total <= 0.0 || smax <= 1e-12 * x.frobenius().max(1.0) {
        return Err(Error::invalid("representation matrix has rank zero"));
    }
    let mut k = 0;
    let mut acc = 0.0;
    while k < energy.len() && acc < variance_keep * total * (1.0 - 1e-12) {
        if dec.s[k] <= 1e-10 * smax {
            break;
        }
        acc += energy[k];
        k += 1;
    }
    let k = k.max(1);
    let width = dec.u.shape()[1];
    Ok(Tensor::from_fn([n, k], |i| dec.u.data()[(i / k) * width + i % k]))
}

/// Canonical correlations between two bases of the same sample rows,
/// descending; `min(kx, ky)` of them.
pub fn canonical_correlations(ux: &Tensor, uy: &Tensor) -> Result<Vec<f64>> {
    if ux.shape()[0] != uy.shape()[0] {
        return Err(Error::invalid("bases cover different numbers of samples"));
    }
    let m = ux.transpose()?.matmul(uy)?;
    Ok(svd(&m)?.s.into_iter().map(|r| r.clamp(0.0, 1.0)).collect())
}

/// `1 - mean(rho)` from precomputed bases.
pub fn svcca_from_bases(ux: &Tensor, uy: &Tensor) -> Result<f64> {
    let rho = canonical_correlations(ux, uy)?;
    let c = ux.shape()[1].min(uy.shape()[1]);
    let mean = rho.iter().take(c).sum::<f64>() / c as f64;
    Ok((1.0 - mean).clamp(0.0, 1.0))
}

/// SVCCA distance between two `n x d` representation matrices of the same rows.
pub fn svcca_distance(x: &Tensor, y: &Tensor, variance_keep: f64) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::Shape {
            op: "svcca_distance",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    svcca_from_bases(&svcca_basis(x, variance_keep)?, &svcca_basis(y, variance_keep)?)
}

/// `(sequence, position)` pairs drawn without replacement from the non-pad
/// positions of `seqs`, in a seeded but model-independent way.
pub fn sample_token_positions<S: AsRef<[u32]>>(seqs: &[S], sample_size: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.as_ref().len()).map(move |t| (i, t)))
        .collect();
    if sample_size >= all.len() {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), sample_size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Hidden states at the given positions, one `[positions, d]` matrix per
/// hidden layer (embedding output first).
pub fn hidden_at<S: AsRef<[u32]>>(
    model: &EncoderModel,
    seqs: &[S],
    positions: &[(usize, usize)],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let d = model.config.model_dim;
    let layers = model.config.num_layers + 1;
    let mut out = vec![Vec::with_capacity(positions.len() * d); layers];
    let none = crate::encoder::AblationSpec::none();
    let bs = batch_size.max(1);
    let mut cursor = 0;
    for (ci, chunk) in seqs.chunks(bs).enumerate() {
        let base = ci * bs;
        if cursor >= positions.len() {
            break;
        }
        if positions[cursor].0 >= base + chunk.len() {
            continue;
        }
        let traces = model.forward_batch(chunk, &none)?;
        while cursor < positions.len() && positions[cursor].0 < base + chunk.len() {
            let (i, t) = positions[cursor];
            let (_, trace) = &traces[i - base];
            if trace.pad_mask.get(t).copied().unwrap_or(true) {
                return Err(Error::invalid(format!("position ({i}, {t}) is padding")));
            }
            for (l, h) in trace.hidden.iter().enumerate() {
                out[l].extend_from_slice(h.row(t));
            }
            cursor += 1;
        }
    }
    if cursor != positions.len() {
        return Err(Error::invalid("positions must be sorted and refer to the given sequences"));
    }
    out.into_iter().map(|v| Tensor::new([positions.len(), d], v)).collect()
}

/// Per-layer SVCCA distance over a shared seeded token sample. With
/// `include_embeddings` the embedding output is compared too (L+1 values).
#[allow(clippy::too_many_arguments)]
pub fn layerwise_svcca<S: AsRef<[u32]>>(
    a: &EncoderModel,
    b: &EncoderModel,
    seqs: &[S],
    token_sample_size: usize,
    seed: u64,
    variance_keep: f64,
    include_embeddings: bool,
    batch_size: usize,
) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let pos = sample_token_positions(seqs, token_sample_size, seed);
    let ha = hidden_at(a, seqs, &pos, batch_size)?;
    let hb = hidden_at(b, seqs, &pos, batch_size)?;
    let skip = usize::from(!include_embeddings);
    ha.iter()
        .zip(&hb)
        .skip(skip)
        .map(|(x, y)| svcca_distance(x, y, variance_keep))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EoMode {
    /// `(|TPR0 - TPR1| + |FPR0 - FPR1|) / 2`
    #[default]
    Average,
    /// `max(|TPR0 - TPR1|, |FPR0 - FPR1|)`
    Max,
    /// `|TPR0 - TPR1|` only.
    PositiveOnly,
}

fn check_lengths(predictions: &[usize], labels: &[usize], groups: Option<&[u8]>) -> Result<()> {
    if predictions.len() != labels.len() || groups.is_some_and(|g| g.len() != labels.len()) {
        return Err(Error::invalid("predictions, labels and groups must be equally long"));
    }
    Ok(())
}

/// One-vs-rest equalized-odds gap for `target`. `None` when a
/// (label, group) cell needed by `mode` is empty.
pub fn equalized_odds(
    predictions: &[usize],
    labels: &[usize],
    groups: &[u8],
    target: usize,
    mode: EoMode,
) -> Result<Option<f64>> {
    check_lengths(predictions, labels, Some(groups))?;
    // [y][s] -> (positive predictions, count)
    let mut cells = [[(0usize, 0usize); 2]; 2];
    for ((&p, &y), &s) in predictions.iter().zip(labels).zip(groups) {
        if s > 1 {
            return Err(Error::invalid(format!("group {s} is not binary")));
        }
        let cell = &mut cells[usize::from(y == target)][s as usize];
        cell.1 += 1;
        cell.0 += usize::from(p == target);
    }
    let rate = |y: usize, s: usize| {
        let (k, n) = cells[y][s];
        (n > 0).then(|| k as f64 / n as f64)
    };
    let gap = |y: usize| Some((rate(y, 0)? - rate(y, 1)?).abs());
    Ok(match mode {
        EoMode::PositiveOnly => gap(1),
        EoMode::Average => gap(1).zip(gap(0)).map(|(a, b)| 0.5 * (a + b)),
        EoMode::Max => gap(1).zip(gap(0)).map(|(a, b)| a.max(b)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision, recall and F1; undefined ratios count as 0.
pub fn per_class_scores(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<ClassScore>> {
    check_lengths(predictions, labels, None)?;
    let mut tp = vec![0usize; num_classes];
    let mut pred = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!("class index out of range for {num_classes} classes")));
        }
        pred[p] += 1;
        support[y] += 1;
        tp[y] += usize::from(p == y);
    }
    Ok((0..num_classes)
        .map(|c| {
            let precision = if pred[c] > 0 { tp[c] as f64 / pred[c] as f64 } else { 0.0 };
            let recall = if support[c] > 0 { tp[c] as f64 / support[c] as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                precision,
                recall,
                f1,
                support: support[c],
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_fscore(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let scores = per_class_scores(predictions, labels, num_classes)?;
    Ok(scores.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFairness {
    pub class: usize,
    pub eo: Option<f64>,
    pub f1: f64,
    pub support: usize,
    /// `[men, women]` among examples of this class.
    pub group_counts: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub eo_mode: EoMode,
    pub classes: Vec<ClassFairness>,
    pub weighted_fscore: f64,
    /// Mean over classes with a defined EO; `None` if there are none.
    pub mean_eo: Option<f64>,
}

pub fn fairness_report(
    predictions: &[usize],
    labels: &[usize],
    groups: &[u8],
    num_classes: usize,
    mode: EoMode,
) -> Result<FairnessReport> {
    check_lengths(predictions, labels, Some(groups))?;
    let scores = per_class_scores(predictions, labels, num_classes)?;
    let mut classes = Vec::with_capacity(num_classes);
    for (c, s) in scores.iter().enumerate() {
        let mut gc = [0usize; 2];
        for (&y, &g) in labels.iter().zip(groups) {
            if y == c {
                gc[g.min(1) as usize] += 1;
            }
        }
        classes.push(ClassFairness {
            class: c,
            eo: equalized_odds(predictions, labels, groups, c, mode)?,
            f1: s.f1,
            support: s.support,
            group_counts: gc,
        });
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.eo).collect();
    Ok(FairnessReport {
        eo_mode: mode,
        weighted_fscore: weighted_fscore(predictions, labels, num_classes)?,
        mean_eo: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        classes,
    })
}

/// `max - min` of per-head EO for one class; `None` if any entry is undefined.
pub fn amplitude(eo_per_head: &[Option<f64>]) -> Result<Option<f64>> {
    if eo_per_head.is_empty() {
        return Err(Error::invalid("amplitude of an empty vector"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in eo_per_head {
        let Some(v) = *v else { return Ok(None) };
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(Some(hi - lo))
}

/// Elementwise `ln(1 + x)`.
pub fn log_rescale(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("log_rescale needs finite non-negative entries, got {x}")));
    }
    Ok(v.iter().map(|x| x.ln_1p()).collect())
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Median of the values (mean of the middle two for even lengths).
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // M = (0.75, 0.25): 0.5*log2(1/0.75) + 0.5*(0.5*log2(0.5/0.75) + 0.5*log2(0.5/0.25))
        let want = 0.5 * (1.0f64 / 0.75).log2() + 0.25 * (0.5f64 / 0.75).log2() + 0.25;
        let got = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3113).abs() < 1e-4);
        assert!(js_divergence(&[0.0, 0.0], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn eo_examples() {
        let y = [1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let s = [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1];
        let p = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0];
        assert_eq!(equalized_odds(&p, &y, &s, 1, EoMode::Average).unwrap(), Some(0.125));
        assert_eq!(equalized_odds(&p, &y, &s, 1, EoMode::Max).unwrap(), Some(0.25));
        assert_eq!(equalized_odds(&y, &y, &s, 1, EoMode::Average).unwrap(), Some(0.0));
        let biased: Vec<usize> = s.iter().map(|&g| usize::from(g == 0)).collect();
        assert_eq!(equalized_odds(&biased, &y, &s, 1, EoMode::Average).unwrap(), Some(1.0));
        // No negatives in group 1.
        assert_eq!(equalized_odds(&[1, 1, 0], &[1, 1, 0], &[0, 1, 0], 1, EoMode::Average).unwrap(), None);
        assert!(equalized_odds(&[1, 1, 0], &[1, 1, 0], &[0, 1, 0], 1, EoMode::PositiveOnly).unwrap().is_some());
    }

    #[test]
    fn fscore_examples() {
        assert_eq!(weighted_fscore(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let f = weighted_fscore(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert!(weighted_fscore(&[], &[], 2).is_err());
    }

    #[test]
    fn amplitude_and_rescale() {
        assert!((amplitude(&[Some(0.1), Some(0.3), Some(0.2)]).unwrap().unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(amplitude(&[Some(0.4); 3]).unwrap(), Some(0.0));
        assert_eq!(amplitude(&[Some(0.4), None]).unwrap(), None);
        assert_eq!(log_rescale(&[0.0]).unwrap(), vec![0.0]);
        assert!((log_rescale(&[std::f64::consts::E - 1.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(log_rescale(&[-0.1]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.9]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_representation_is_rejected() {
        let x = Tensor::full([20, 3], 2.0);
        assert!(svcca_basis(&x, 0.99).is_err());
        assert!(svcca_basis(&Tensor::zeros([3, 3]), 0.99).is_err());
    }
}
