//! Synthetic biography-style corpus with controllable class and group
//! imbalance, plus the balanced / imbalanced subset constructions and a
//! stratified train/eval split.
//!
//! Token layout: ids `0..RESERVED_TOKENS` are reserved (padding, the
//! classification token and the mask token). Then come one signal pool per
//! class, one marker pool per group, and everything above is shared noise.
//! An example carries `signal_tokens` draws from its class pool (each draw
//! swapped for the confusable partner class's pool with probability
//! `signal_confusion`), `marker_tokens` draws from its group pool, and a
//! Bernoulli number of noise tokens, shuffled together.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: u32 = 0;
pub const CLS_TOKEN: u32 = 1;
pub const MASK_TOKEN: u32 = 2;
pub const RESERVED_TOKENS: u32 = 3;

/// Group id of the "men" sensitive group.
pub const GROUP_MEN: u8 = 0;
/// Group id of the "women" sensitive group.
pub const GROUP_WOMEN: u8 = 1;

/// Version tag of the line-delimited corpus file format.
pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub group: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateParams {
    /// Distinct signal tokens per class.
    pub signal_pool_size: usize,
    /// Distinct marker tokens per group.
    pub marker_pool_size: usize,
    pub signal_tokens: usize,
    pub marker_tokens: usize,
    /// Probability that a signal draw comes from the partner class's pool.
    pub signal_confusion: f64,
    /// Bernoulli rate of a noise token in each remaining slot up to `max_len`.
    pub noise_rate: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            signal_pool_size: 12,
            marker_pool_size: 4,
            signal_tokens: 3,
            marker_tokens: 2,
            signal_confusion: 0.3,
            noise_rate: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub class_proportions: Vec<f64>,
    /// Fraction of women within each class.
    pub group_ratio_per_class: Vec<f64>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_examples: usize,
    pub template: TemplateParams,
    pub seed: u64,
}

impl Default for CorpusSpec {
    /// Eight occupations with a long-tailed class distribution. Confusable
    /// pairs (0,1), (2,3), (4,5), (6,7) carry opposite gender skews, and the
    /// two smallest classes are the most skewed.
    fn default() -> Self {
        Self {
            num_classes: 8,
            class_proportions: vec![0.24, 0.20, 0.14, 0.12, 0.09, 0.08, 0.07, 0.06],
            group_ratio_per_class: vec![0.48, 0.53, 0.30, 0.70, 0.25, 0.75, 0.15, 0.85],
            vocab_size: 512,
            max_len: 24,
            num_examples: 8000,
            template: TemplateParams::default(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        if self.class_proportions.len() != c || self.group_ratio_per_class.len() != c {
            return Err(Error::invalid(format!(
                "expected {c} class proportions and group ratios, got {} and {}",
                self.class_proportions.len(),
                self.group_ratio_per_class.len()
            )));
        }
        if self.class_proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("class proportions must be finite and non-negative"));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "class proportions sum to {total}, expected 1"
            )));
        }
        if let Some((i, r)) = self
            .group_ratio_per_class
            .iter()
            .enumerate()
            .find(|(_, r)| !(0.0..=1.0).contains(*r))
        {
            return Err(Error::invalid(format!(
                "group ratio {r} of class {i} outside [0, 1]"
            )));
        }
        let t = &self.template;
        if t.signal_tokens + t.marker_tokens == 0 {
            return Err(Error::invalid("examples need at least one signal or marker token"));
        }
        if t.signal_tokens + t.marker_tokens > self.max_len {
            return Err(Error::invalid(format!(
                "max_len {} cannot hold {} signal + {} marker tokens",
                self.max_len, t.signal_tokens, t.marker_tokens
            )));
        }
        if t.signal_tokens > 0 && t.signal_pool_size == 0 {
            return Err(Error::invalid("signal_pool_size must be positive"));
        }
        if t.marker_tokens > 0 && t.marker_pool_size == 0 {
            return Err(Error::invalid("marker_pool_size must be positive"));
        }
        if !(0.0..=1.0).contains(&t.signal_confusion) || !(0.0..=1.0).contains(&t.noise_rate) {
            return Err(Error::invalid("signal_confusion and noise_rate must lie in [0, 1]"));
        }
        let layout = TokenLayout::new(self);
        if layout.noise_start > self.vocab_size as u32
            || (t.noise_rate > 0.0 && layout.noise_start == self.vocab_size as u32)
        {
            return Err(Error::invalid(format!(
                "vocab_size {} too small for the token pools (need more than {})",
                self.vocab_size, layout.noise_start
            )));
        }
        if self.num_examples == 0 {
            return Err(Error::invalid("num_examples must be positive"));
        }
        Ok(())
    }

    /// Exact per-class counts by largest remainder; ties go to the lower class.
    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.num_examples;
        let raw: Vec<f64> = self.class_proportions.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }

    /// Class whose signal pool a "confused" draw of class `c` comes from.
    pub fn partner_class(&self, c: usize) -> Option<usize> {
        if self.num_classes < 2 {
            return None;
        }
        let p = c ^ 1;
        Some(if p < self.num_classes { p } else { c - 1 })
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self)
    }
}

/// Where each token pool lives in the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub signal_start: u32,
    pub signal_pool: u32,
    pub marker_start: u32,
    pub marker_pool: u32,
    pub noise_start: u32,
    pub vocab_size: u32,
}

impl TokenLayout {
    fn new(spec: &CorpusSpec) -> Self {
        let signal_pool = spec.template.signal_pool_size as u32;
        let marker_pool = spec.template.marker_pool_size as u32;
        let signal_start = RESERVED_TOKENS;
        let marker_start = signal_start + signal_pool * spec.num_classes as u32;
        Self {
            signal_start,
            signal_pool,
            marker_start,
            marker_pool,
            noise_start: marker_start + 2 * marker_pool,
            vocab_size: spec.vocab_size as u32,
        }
    }

    pub fn signal_class(&self, token: u32) -> Option<usize> {
        (token >= self.signal_start && token < self.marker_start)
            .then(|| ((token - self.signal_start) / self.signal_pool) as usize)
    }

    pub fn marker_group(&self, token: u32) -> Option<u8> {
        (token >= self.marker_start && token < self.noise_start)
            .then(|| ((token - self.marker_start) / self.marker_pool) as u8)
    }
}

/// A labeled corpus with cached per-class and per-(class, group) counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    examples: Vec<LabeledExample>,
    spec: CorpusSpec,
    class_counts: Vec<usize>,
    group_counts: Vec<[usize; 2]>,
}

impl Corpus {
    /// Validates every example against `spec` and caches the counts.
    pub fn from_examples(spec: CorpusSpec, examples: Vec<LabeledExample>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.tokens.is_empty() || ex.tokens.len() > spec.max_len {
                return Err(Error::invalid(format!(
                    "example {i}: {} tokens, expected 1..={}",
                    ex.tokens.len(),
                    spec.max_len
                )));
            }
            if let Some(t) = ex.tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
                return Err(Error::invalid(format!(
                    "example {i}: token {t} >= vocab_size {}",
                    spec.vocab_size
                )));
            }
            if ex.label >= spec.num_classes {
                return Err(Error::invalid(format!(
                    "example {i}: label {} >= {} classes",
                    ex.label, spec.num_classes
                )));
            }
            if ex.group > 1 {
                return Err(Error::invalid(format!("example {i}: group {} not in {{0, 1}}", ex.group)));
            }
        }
        let (class_counts, group_counts) = count(&examples, spec.num_classes);
        Ok(Self {
            examples,
            spec,
            class_counts,
            group_counts,
        })
    }

    fn subset(&self, keep: &[usize]) -> Self {
        let examples: Vec<LabeledExample> = keep.iter().map(|&i| self.examples[i].clone()).collect();
        let (class_counts, group_counts) = count(&examples, self.spec.num_classes);
        Self {
            examples,
            spec: self.spec.clone(),
            class_counts,
            group_counts,
        }
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// `[men, women]` per class.
    pub fn group_counts(&self) -> &[[usize; 2]] {
        &self.group_counts
    }

    /// True when the cached counts agree with a recount of the examples.
    pub fn counts_consistent(&self) -> bool {
        let (c, g) = count(&self.examples, self.spec.num_classes);
        c == self.class_counts && g == self.group_counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn groups(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.group).collect()
    }

    /// Women fraction per class (`None` for an empty class).
    pub fn women_fractions(&self) -> Vec<Option<f64>> {
        self.group_counts
            .iter()
            .map(|[m, w]| {
                let n = m + w;
                (n > 0).then(|| *w as f64 / n as f64)
            })
            .collect()
    }

    /// Serialises to the line-delimited format: a `{"spec": ...}` header line,
    /// then one `{"tokens","label","group"}` object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&CorpusHeader {
            spec: self.spec.clone(),
        })?;
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl_reader(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "empty file".into()))?
            .map_err(|e| Error::io(origin, e))?;
        let header: CorpusHeader =
            serde_json::from_str(&header).map_err(|e| bad(1, format!("bad header: {e}")))?;
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: LabeledExample =
                serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?;
            examples.push(ex);
        }
        Self::from_examples(header.spec, examples)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl_reader(BufReader::new(f), path)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// SHA-256 of the serialised corpus; identifies a dataset in provenance.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::io::sha256_hex(self.to_jsonl()?.as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    spec: CorpusSpec,
}

fn count(examples: &[LabeledExample], c: usize) -> (Vec<usize>, Vec<[usize; 2]>) {
    let mut classes = vec![0; c];
    let mut groups = vec![[0; 2]; c];
    for ex in examples {
        if ex.label < c && ex.group < 2 {
            classes[ex.label] += 1;
            groups[ex.label][ex.group as usize] += 1;
        }
    }
    (classes, groups)
}

/// Generates a corpus from `spec`; a pure function of the spec and its seed.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = spec.layout();
    let t = &spec.template;

    let mut slots: Vec<(usize, u8)> = Vec::with_capacity(spec.num_examples);
    for (class, &n) in spec.class_counts().iter().enumerate() {
        let women = (spec.group_ratio_per_class[class] * n as f64).round() as usize;
        slots.extend(std::iter::repeat((class, GROUP_WOMEN)).take(women));
        slots.extend(std::iter::repeat((class, GROUP_MEN)).take(n - women));
    }
    slots.shuffle(&mut rng);

    let noise_slots = spec.max_len - t.signal_tokens - t.marker_tokens;
    let examples = slots
        .into_iter()
        .map(|(label, group)| {
            let mut tokens = Vec::with_capacity(spec.max_len);
            for _ in 0..t.signal_tokens {
                let source = match spec.partner_class(label) {
                    Some(p) if rng.gen_bool(t.signal_confusion) => p,
                    _ => label,
                };
                let offset = rng.gen_range(0..layout.signal_pool);
                tokens.push(layout.signal_start + source as u32 * layout.signal_pool + offset);
            }
            for _ in 0..t.marker_tokens {
                let offset = rng.gen_range(0..layout.marker_pool);
                tokens.push(layout.marker_start + group as u32 * layout.marker_pool + offset);
            }
            for _ in 0..noise_slots {
                if rng.gen_bool(t.noise_rate) {
                    tokens.push(rng.gen_range(layout.noise_start..layout.vocab_size));
                }
            }
            tokens.shuffle(&mut rng);
            LabeledExample {
                tokens,
                label,
                group,
            }
        })
        .collect();
    Corpus::from_examples(spec.clone(), examples)
}

/// Per-class indices into `corpus.examples()`, split by group.
fn indices_by_class_group(corpus: &Corpus) -> Vec<[Vec<usize>; 2]> {
    let mut out: Vec<[Vec<usize>; 2]> = (0..corpus.num_classes()).map(|_| [vec![], vec![]]).collect();
    for (i, ex) in corpus.examples().iter().enumerate() {
        out[ex.label][ex.group as usize].push(i);
    }
    out
}

fn subsample(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Within every class, truncates the larger group to the size of the smaller
/// by a seeded uniform subsample. Retained examples keep corpus order.
pub fn make_balanced(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (class, [men, women]) in indices_by_class_group(corpus).iter().enumerate() {
        if men.is_empty() {
            return Err(Error::MissingGroup {
                class,
                group: GROUP_MEN,
            });
        }
        if women.is_empty() {
            return Err(Error::MissingGroup {
                class,
                group: GROUP_WOMEN,
            });
        }
        let n = men.len().min(women.len());
        keep.extend(subsample(&mut rng, men, n));
        keep.extend(subsample(&mut rng, women, n));
    }
    keep.sort_unstable();
    Ok(corpus.subset(&keep))
}

/// Women count for a class budget: nearest integer, clamped to
/// `[1, budget - 1]` when both groups are available so neither group vanishes.
pub fn imbalanced_women_count(ratio: f64, budget: usize, both_groups: bool) -> usize {
    let w = (ratio * budget as f64).round() as usize;
    if both_groups && budget >= 2 {
        w.clamp(1, budget - 1)
    } else {
        w.min(budget)
    }
}

/// Draws, per class, exactly `budgets[c]` examples whose women fraction
/// follows `reference_ratios[c]` (see [`imbalanced_women_count`]).
pub fn make_imbalanced(
    corpus: &Corpus,
    reference_ratios: &[f64],
    budgets: &[usize],
    seed: u64,
) -> Result<Corpus> {
    let c = corpus.num_classes();
    if reference_ratios.len() != c || budgets.len() != c {
        return Err(Error::invalid(format!(
            "expected {c} reference ratios and budgets, got {} and {}",
            reference_ratios.len(),
            budgets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (class, [men, women]) in indices_by_class_group(corpus).iter().enumerate() {
        let ratio = reference_ratios[class];
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("reference ratio {ratio} of class {class} outside [0, 1]")));
        }
        let budget = budgets[class];
        let both = !men.is_empty() && !women.is_empty() && ratio > 0.0 && ratio < 1.0;
        let n_women = imbalanced_women_count(ratio, budget, both);
        let n_men = budget - n_women;
        for (group, pool, need) in [(GROUP_WOMEN, women, n_women), (GROUP_MEN, men, n_men)] {
            if need > pool.len() {
                return Err(Error::Infeasible {
                    class,
                    group,
                    needed: need,
                    available: pool.len(),
                });
            }
        }
        keep.extend(subsample(&mut rng, women, n_women));
        keep.extend(subsample(&mut rng, men, n_men));
    }
    keep.sort_unstable();
    Ok(corpus.subset(&keep))
}

/// The imbalanced companion of `balanced`: same per-class sizes, women
/// fractions taken from `corpus` itself.
pub fn make_imbalanced_pair(corpus: &Corpus, balanced: &Corpus, seed: u64) -> Result<Corpus> {
    let ratios: Vec<f64> = corpus
        .women_fractions()
        .into_iter()
        .map(|r| r.unwrap_or(0.5))
        .collect();
    make_imbalanced(corpus, &ratios, balanced.class_counts(), seed)
}

/// Stratified split by (class, group): each stratum of size `n` sends
/// `round(n * train_fraction)` examples to the first part. A singleton
/// stratum goes to the first part with a warning.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for (class, groups) in indices_by_class_group(corpus).iter().enumerate() {
        for (group, pool) in groups.iter().enumerate() {
            if pool.is_empty() {
                continue;
            }
            if pool.len() == 1 {
                tracing::warn!(class, group, "stratum of size 1 assigned to the training part");
                train.push(pool[0]);
                continue;
            }
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut rng);
            let n_train = (pool.len() as f64 * train_fraction).round() as usize;
            train.extend_from_slice(&shuffled[..n_train]);
            rest.extend_from_slice(&shuffled[n_train..]);
        }
    }
    train.sort_unstable();
    rest.sort_unstable();
    Ok((corpus.subset(&train), corpus.subset(&rest)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub proportion: f64,
    pub women_fraction: f64,
    pub ratio_wm: f64,
}

/// `min(%women / %men, %men / %women)`, 0 when either group is absent.
pub fn ratio_wm(men: usize, women: usize) -> f64 {
    if men == 0 || women == 0 {
        return 0.0;
    }
    let (m, w) = (men as f64, women as f64);
    (w / m).min(m / w)
}

pub fn stats(corpus: &Corpus) -> Result<Vec<ClassStats>> {
    if corpus.is_empty() {
        return Err(Error::invalid("stats of an empty corpus"));
    }
    let n = corpus.len() as f64;
    Ok(corpus
        .group_counts()
        .iter()
        .enumerate()
        .map(|(class, &[men, women])| {
            let count = men + women;
            ClassStats {
                class,
                count,
                proportion: count as f64 / n,
                women_fraction: if count > 0 { women as f64 / count as f64 } else { 0.0 },
                ratio_wm: ratio_wm(men, women),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(props: Vec<f64>, ratios: Vec<f64>, n: usize) -> CorpusSpec {
        CorpusSpec {
            num_classes: props.len(),
            class_proportions: props,
            group_ratio_per_class: ratios,
            num_examples: n,
            seed: 11,
            ..CorpusSpec::default()
        }
    }

    fn hand_corpus(groups_per_class: &[(usize, usize)]) -> Corpus {
        let c = groups_per_class.len();
        let mut examples = Vec::new();
        for (label, &(men, women)) in groups_per_class.iter().enumerate() {
            for i in 0..men + women {
                examples.push(LabeledExample {
                    tokens: vec![RESERVED_TOKENS + i as u32 % 50],
                    label,
                    group: if i < men { GROUP_MEN } else { GROUP_WOMEN },
                });
            }
        }
        let spec = CorpusSpec {
            num_classes: c,
            class_proportions: vec![1.0 / c as f64; c],
            group_ratio_per_class: vec![0.5; c],
            ..CorpusSpec::default()
        };
        Corpus::from_examples(spec, examples).unwrap()
    }

    #[test]
    fn default_spec_is_valid() {
        CorpusSpec::default().validate().unwrap();
    }

    #[test]
    fn rejects_proportions_not_summing_to_one() {
        let spec = small_spec(vec![0.5, 0.6], vec![0.5, 0.5], 100);
        assert!(matches!(generate(&spec), Err(Error::Invalid(_))));
    }

    #[test]
    fn symmetric_spec_gives_even_counts() {
        let c = generate(&small_spec(vec![0.5, 0.5], vec![0.5, 0.5], 400)).unwrap();
        assert_eq!(c.len(), 400);
        for (k, &n) in c.class_counts().iter().enumerate() {
            assert!((186..=214).contains(&n), "class {k}: {n}");
            let w = c.group_counts()[k][1] as f64 / n as f64;
            assert!((w - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn skewed_spec_histogram() {
        let c = generate(&small_spec(vec![0.9, 0.1], vec![0.98, 0.02], 400)).unwrap();
        assert_eq!(c.class_counts(), &[360, 40]);
        // round(0.02 * 40) = 1 woman, i.e. 2.5%.
        assert_eq!(c.group_counts()[1], [39, 1]);
        assert_eq!(c.group_counts()[0], [7, 353]);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = small_spec(vec![0.3, 0.7], vec![0.2, 0.6], 300);
        let a = generate(&spec).unwrap().to_jsonl().unwrap();
        let b = generate(&spec).unwrap().to_jsonl().unwrap();
        assert_eq!(a, b);
        let other = CorpusSpec { seed: 12, ..spec };
        assert_ne!(a, generate(&other).unwrap().to_jsonl().unwrap());
    }

    #[test]
    fn proportions_within_two_points() {
        let spec = CorpusSpec::default();
        let c = generate(&spec).unwrap();
        for (k, (&n, &p)) in c.class_counts().iter().zip(&spec.class_proportions).enumerate() {
            let emp = n as f64 / c.len() as f64;
            assert!((emp - p).abs() <= 0.02, "class {k}: {emp} vs {p}");
        }
    }

    #[test]
    fn tokens_carry_class_and_group_signal() {
        let spec = CorpusSpec::default();
        let layout = spec.layout();
        let c = generate(&spec).unwrap();
        for ex in c.examples() {
            assert!(!ex.tokens.is_empty() && ex.tokens.len() <= spec.max_len);
            assert!(ex.tokens.iter().all(|&t| t >= RESERVED_TOKENS && t < 512));
            let markers: Vec<u8> = ex.tokens.iter().filter_map(|&t| layout.marker_group(t)).collect();
            assert_eq!(markers.len(), 2);
            assert!(markers.iter().all(|&g| g == ex.group));
            let partner = spec.partner_class(ex.label).unwrap();
            assert!(ex
                .tokens
                .iter()
                .filter_map(|&t| layout.signal_class(t))
                .all(|k| k == ex.label || k == partner));
        }
    }

    #[test]
    fn balanced_truncates_the_larger_group() {
        let c = hand_corpus(&[(20, 80), (30, 30)]);
        let b = make_balanced(&c, 1).unwrap();
        assert_eq!(b.group_counts(), &[[20, 20], [30, 30]]);
        // Original untouched.
        assert_eq!(c.group_counts(), &[[20, 80], [30, 30]]);
    }

    #[test]
    fn balanced_is_idempotent() {
        let c = generate(&CorpusSpec::default()).unwrap();
        let once = make_balanced(&c, 5).unwrap();
        let twice = make_balanced(&once, 9).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn balanced_reaches_exact_parity_on_skewed_class() {
        let spec = small_spec(vec![0.5, 0.5], vec![0.8417, 0.5], 2000);
        let c = generate(&spec).unwrap();
        let b = make_balanced(&c, 3).unwrap();
        let [m, w] = b.group_counts()[0];
        assert_eq!(m, w);
        assert_eq!(w as f64 / (m + w) as f64, 0.5);
    }

    #[test]
    fn balanced_errors_name_the_class() {
        let c = hand_corpus(&[(5, 5), (0, 7)]);
        match make_balanced(&c, 0) {
            Err(Error::MissingGroup { class, group }) => {
                assert_eq!((class, group), (1, GROUP_MEN));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn imbalanced_counts() {
        let c = hand_corpus(&[(50, 50), (50, 50)]);
        let i = make_imbalanced(&c, &[0.5, 0.9], &[40, 40], 2).unwrap();
        assert_eq!(i.group_counts(), &[[20, 20], [4, 36]]);
        let err = make_imbalanced(&c, &[0.5, 0.9], &[40, 80], 2).unwrap_err();
        assert!(matches!(err, Error::Infeasible { class: 1, group: GROUP_WOMEN, needed: 72, available: 50 }));
    }

    #[test]
    fn imbalanced_pair_matches_balanced_size() {
        let c = generate(&CorpusSpec::default()).unwrap();
        let b = make_balanced(&c, 1).unwrap();
        let i = make_imbalanced_pair(&c, &b, 2).unwrap();
        assert_eq!(i.len(), b.len());
        assert_eq!(i.class_counts(), b.class_counts());
        for (k, [m, w]) in i.group_counts().iter().enumerate() {
            let target = c.women_fractions()[k].unwrap() * (m + w) as f64;
            assert!((*w as f64 - target).abs() <= 1.0, "class {k}");
        }
    }

    #[test]
    fn rounding_clamps_to_keep_both_groups() {
        assert_eq!(imbalanced_women_count(0.99, 10, true), 9);
        assert_eq!(imbalanced_women_count(0.01, 10, true), 1);
        assert_eq!(imbalanced_women_count(1.0, 10, false), 10);
    }

    #[test]
    fn split_stratum_sizes() {
        let c = hand_corpus(&[(100, 0)]);
        let (tr, te) = split(&c, 0.7, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (70, 30));
        assert!(split(&c, 1.0, 4).is_err());
        assert!(split(&c, 0.0, 4).is_err());
    }

    #[test]
    fn singleton_stratum_goes_to_train() {
        let c = hand_corpus(&[(1, 10)]);
        let (tr, te) = split(&c, 0.7, 4).unwrap();
        assert_eq!(tr.group_counts()[0][0], 1);
        assert_eq!(te.group_counts()[0][0], 0);
    }

    #[test]
    fn stats_ratio_examples() {
        assert_eq!(ratio_wm(50, 50), 1.0);
        assert_eq!(ratio_wm(0, 12), 0.0);
        assert!((ratio_wm(1583, 8417) - 15.83 / 84.17).abs() < 1e-12);
        assert!((15.83_f64 / 84.17 - 0.188).abs() < 5e-4);
        let c = hand_corpus(&[(10, 30), (20, 0)]);
        let s = stats(&c).unwrap();
        assert!((s.iter().map(|s| s.proportion).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s[0].ratio_wm - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[1].ratio_wm, 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate(&small_spec(vec![0.5, 0.5], vec![0.3, 0.7], 50)).unwrap();
        let text = c.to_jsonl().unwrap();
        assert!(text.starts_with("{\"spec\":{"));
        assert!(text.lines().nth(1).unwrap().starts_with("{\"tokens\":["));
        let back = Corpus::from_jsonl_reader(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }
}
