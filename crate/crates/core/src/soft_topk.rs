//! Entropy-regularized soft top-k.
//!
//! Solves `max_λ sᵀλ + ε H(λ)` subject to `1ᵀλ = k` and `0 ≤ λ ≤ 1` by
//! coordinate ascent on the dual variables `a` (sum constraint) and `b`
//! (upper bounds):
//!
//! ```text
//! a' = ε ln k − ε logsumexp((s + b) / ε)
//! b' = min(−s − a', 0)
//! λ  = exp((s + b + a) / ε)
//! ```
//!
//! `ε` is annealed from `eps0` towards `eps_target` by a factor `beta` per
//! iteration. The backward pass differentiates through exactly these
//! unrolled iterations.

use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::tensor::flops;

/// Scalar operations charged per token per dual iteration: shift, divide,
/// max-subtract, exp and accumulate for the `a` update, negate-add and clamp
/// for the `b` update.
pub const OPS_PER_TOKEN_ITERATION: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodaError::Input(format!(
                "score {i} is not finite ({})",
                values[i]
            )));
        }
        if values.is_empty() {
            return Err(CodaError::Input("empty score vector".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for ScoreVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// ε-scaling schedule: `ε_t = max(beta * ε_{t-1}, eps_target)` from `eps0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub eps0: f64,
    pub eps_target: f64,
    pub beta: f64,
    pub iterations: usize,
}

impl EpsSchedule {
    /// Text/vision setting: ε₀=4, ε=0.03, β=0.7, T=20.
    pub const TEXT: EpsSchedule = EpsSchedule {
        eps0: 4.0,
        eps_target: 0.03,
        beta: 0.7,
        iterations: 20,
    };

    /// Speech setting: ε₀=4, ε=1.0, β=0.85, T=20.
    pub const SPEECH: EpsSchedule = EpsSchedule {
        eps0: 4.0,
        eps_target: 1.0,
        beta: 0.85,
        iterations: 20,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_target > 0.0
            && self.eps0 >= self.eps_target
            && self.beta > 0.0
            && self.beta < 1.0
            && self.iterations >= 1
            && self.eps0.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CodaError::Input(format!("invalid ε schedule {self:?}")))
        }
    }

    /// The ε used at each of the `iterations` steps.
    pub fn epsilons(&self) -> Vec<f64> {
        let mut eps = self.eps0;
        (0..self.iterations)
            .map(|_| {
                eps = (self.beta * eps).max(self.eps_target);
                eps
            })
            .collect()
    }
}

impl Default for EpsSchedule {
    fn default() -> Self {
        Self::TEXT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTopkResult {
    pub lambda: Vec<f64>,
    pub a: f64,
    pub b: Vec<f64>,
    /// `|1ᵀλ − k|`.
    pub constraint_residual: f64,
    pub iterations_run: usize,
    /// The ε that produced `lambda`.
    pub eps: f64,
}

/// Per-iteration values the backward pass needs.
struct Trace {
    eps: Vec<f64>,
    /// softmax((s + b_{t-1}) / ε_t) for each iteration.
    probs: Vec<Vec<f64>>,
    /// Whether `b_t[i] = −s[i] − a_t` (the clamp was not active).
    b_active: Vec<Vec<bool>>,
}

fn check_capacity(k: usize, n: usize) -> Result<()> {
    if k < 1 || n < 1 {
        return Err(CodaError::Capacity { k, n });
    }
    Ok(())
}

/// Order-independent sum: the terms are added in ascending order so any
/// permutation of the input gives a bit-identical result.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn run(s: &[f64], k: usize, sched: &EpsSchedule, keep_trace: bool) -> (SoftTopkResult, Option<Trace>) {
    let n = s.len();
    let ln_k = (k as f64).ln();
    let mut a = 0.0;
    let mut b = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut trace = keep_trace.then(|| Trace {
        eps: Vec::with_capacity(sched.iterations),
        probs: Vec::with_capacity(sched.iterations),
        b_active: Vec::with_capacity(sched.iterations),
    });
    let epsilons = sched.epsilons();
    for &eps in &epsilons {
        for ((zi, si), bi) in z.iter_mut().zip(s).zip(&b) {
            *zi = (si + bi) / eps;
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (t, zi) in scratch.iter_mut().zip(&z) {
            *t = (zi - max).exp();
        }
        let lse = max + sorted_sum(&mut scratch).ln();
        a = eps * ln_k - eps * lse;
        let mut active = keep_trace.then(|| Vec::with_capacity(n));
        for (bi, si) in b.iter_mut().zip(s) {
            let free = -si - a;
            if free < 0.0 {
                *bi = free;
            } else {
                *bi = 0.0;
            }
            if let Some(act) = active.as_mut() {
                act.push(free < 0.0);
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.eps.push(eps);
            tr.probs.push(z.iter().map(|zi| (zi - lse).exp()).collect());
            tr.b_active.push(active.unwrap_or_default());
        }
        flops::record(OPS_PER_TOKEN_ITERATION * n as u64);
    }
    let eps = *epsilons.last().expect("at least one iteration");
    let lambda: Vec<f64> = s
        .iter()
        .zip(&b)
        .map(|(si, bi)| {
            if *bi < 0.0 {
                // s + b + a is zero up to rounding when the bound is active
                1.0
            } else {
                ((si + bi + a) / eps).exp()
            }
        })
        .collect();
    let residual = (sorted_sum(&mut lambda.clone()) - k as f64).abs();
    (
        SoftTopkResult {
            lambda,
            a,
            b,
            constraint_residual: residual,
            iterations_run: sched.iterations,
            eps,
        },
        trace,
    )
}

fn saturated(n: usize, sched: &EpsSchedule) -> SoftTopkResult {
    SoftTopkResult {
        lambda: vec![1.0; n],
        a: 0.0,
        b: vec![0.0; n],
        constraint_residual: 0.0,
        iterations_run: 0,
        eps: sched.eps_target,
    }
}

/// Soft top-k by unrolled dual iterations. For `k >= n` every token is
/// selected and `λ = 1` without iterating.
pub fn soft_topk(s: &ScoreVector, k: usize, sched: &EpsSchedule) -> Result<SoftTopkResult> {
    check_capacity(k, s.len())?;
    sched.validate()?;
    if k >= s.len() {
        return Ok(saturated(s.len(), sched));
    }
    Ok(run(s.as_slice(), k, sched, false).0)
}

/// Vector-Jacobian product of [`soft_topk`]: returns `∂(grad_lambdaᵀλ)/∂s`
/// through the same unrolled iterations (ε-scaling included).
pub fn soft_topk_backward(
    s: &ScoreVector,
    k: usize,
    sched: &EpsSchedule,
    grad_lambda: &[f64],
) -> Result<Vec<f64>> {
    let n = s.len();
    check_capacity(k, n)?;
    sched.validate()?;
    if grad_lambda.len() != n {
        return Err(CodaError::dim("soft_topk_backward", (n, 1), (grad_lambda.len(), 1)));
    }
    if k >= n {
        return Ok(vec![0.0; n]);
    }
    let (res, trace) = run(s.as_slice(), k, sched, true);
    let trace = trace.expect("trace requested");
    let eps_final = res.eps;

    let mut grad_s = vec![0.0; n];
    // λ = exp(u), u = (s + b_T + a_T) / ε_T
    let mut grad_b = vec![0.0; n];
    let mut grad_a = 0.0;
    for i in 0..n {
        let gu = grad_lambda[i] * res.lambda[i] / eps_final;
        grad_s[i] += gu;
        grad_b[i] = gu;
        grad_a += gu;
    }
    for t in (0..trace.eps.len()).rev() {
        // b_t = min(−s − a_t, 0)
        for i in 0..n {
            if trace.b_active[t][i] {
                grad_s[i] -= grad_b[i];
                grad_a -= grad_b[i];
            }
        }
        // a_t = ε ln k − ε logsumexp((s + b_{t−1}) / ε): ∂a_t/∂s_i = ∂a_t/∂b_{t−1,i} = −p_i
        let p = &trace.probs[t];
        for i in 0..n {
            grad_s[i] -= grad_a * p[i];
            grad_b[i] = -grad_a * p[i];
        }
        // a_{t−1} only feeds b_{t−1}, which starts accumulating fresh.
        grad_a = 0.0;
    }
    Ok(grad_s)
}

/// Independent reference: with `b` optimal for a given `a`, the primal is
/// `λ_i(a) = min(1, exp((s_i + a)/ε))`, monotone in `a`. Bisection finds
/// the `a` with `Σ λ_i(a) = k`.
pub fn oracle_bisection(s: &ScoreVector, k: usize, eps: f64) -> Result<SoftTopkResult> {
    let n = s.len();
    if k < 1 || k > n {
        return Err(CodaError::Capacity { k, n });
    }
    if !(eps > 0.0) {
        return Err(CodaError::Input(format!("eps must be > 0, got {eps}")));
    }
    let s = s.as_slice();
    let lambda_at = |a: f64| -> Vec<f64> { s.iter().map(|si| ((si + a) / eps).min(0.0).exp()).collect() };
    let mass = |a: f64| -> f64 { sorted_sum(&mut lambda_at(a)) };
    let target = k as f64;
    let s_max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s_min = s.iter().copied().fold(f64::INFINITY, f64::min);
    // mass(lo) <= n * exp((s_max + lo)/eps) < k, mass(hi) = n >= k
    let mut lo = -s_max + eps * (target / n as f64).ln() - eps;
    let mut hi = -s_min;
    let mut a = hi;
    if k < n {
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let g = mass(mid) - target;
            a = mid;
            if g.abs() < 1e-12 {
                break;
            }
            if g > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let lambda = lambda_at(a);
    let residual = (sorted_sum(&mut lambda.clone()) - target).abs();
    let b = s.iter().map(|si| (-si - a).min(0.0)).collect();
    Ok(SoftTopkResult {
        lambda,
        a,
        b,
        constraint_residual: residual,
        iterations_run: 0,
        eps,
    })
}

/// Indices of the `k` largest entries, ties broken by lowest index, in
/// ascending index order.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = v.len();
    if k < 1 || k > n {
        return Err(CodaError::Capacity { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Binary mask with ones at the `k` largest entries of `v`.
pub fn hard_topk_mask(v: &[f64], k: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; v.len()];
    for i in top_k_indices(v, k)? {
        mask[i] = true;
    }
    Ok(mask)
}
