//! Central-difference gradient oracle.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(param index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h` on every entry of every parameter.
///
/// `f` receives a fresh graph and one param leaf per tensor in `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(|p| evaluate(&f, p), &analytic, params, h, usize::MAX)
}

/// Like [`grad_check`] but checks at most `max_entries` evenly spaced entries
/// per parameter, for larger models.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(|p| evaluate(&f, p), &analytic, params, h, max_entries)
}

pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Oracle half of the check: central differences of `value` against a
/// caller-supplied `analytic` gradient. Exposed separately so the oracle can
/// be validated against deliberately corrupted gradients.
pub fn compare_gradients<V>(
    value: V,
    analytic: &[Tensor],
    params: &[Tensor],
    h: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    V: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = if n > max_entries { n.div_ceil(max_entries) } else { 1 };
        for e in (0..n).step_by(stride.max(1)) {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = value(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = value(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[pi].data()[e] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, e);
            }
        }
    }
    Ok(report)
}
