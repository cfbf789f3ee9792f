//! Property checks against independent references: the bisection oracle,
//! central finite differences, the dense baseline, an instrumented
//! multiply-add counter and a parameter census.
//!
//! Every check is a pure function of its seed, so reports are reproducible
//! byte for byte.

use serde::Serialize;

use crate::error::Result;
use crate::flops::count_flops;
use crate::layer::{
    dense_layer_forward, layer_backward, layer_forward, AdapterKind, AttentionVariant, Capacity, CodaConfig,
    CodaLayerParams,
};
use crate::router::RouterVariant;
use crate::soft_topk::{hard_topk_mask, oracle_bisection, soft_topk, soft_topk_backward, EpsSchedule, ScoreVector};
use crate::tensor::{flops, row_softmax, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value < threshold`.
    pub fn below(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value < threshold,
            detail,
        }
    }

    /// Passes when `value == expected` exactly.
    pub fn equal(name: &str, value: f64, expected: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold: expected,
            passed: value == expected,
            detail,
        }
    }

    pub const CSV_HEADER: &'static str = "check,value,threshold,passed,detail";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{},{}",
            self.name,
            self.value,
            self.threshold,
            self.passed,
            self.detail.replace(',', ";")
        )
    }
}

pub fn report_csv(checks: &[Check]) -> String {
    let mut s = String::from(Check::CSV_HEADER);
    s.push('\n');
    for c in checks {
        s.push_str(&c.to_csv());
        s.push('\n');
    }
    s
}

fn gaussian_scores(rng: &mut Rng, n: usize) -> ScoreVector {
    ScoreVector::new((0..n).map(|_| rng.normal()).collect()).expect("finite gaussian scores")
}

/// Worst-case agreement between the iterative soft top-k and the oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OracleStats {
    pub cases: usize,
    pub max_lambda_err: f64,
    /// max over cases of `|1ᵀλ − k| / k`
    pub max_residual_ratio: f64,
    pub failing_cases: usize,
}

/// Gaussian score vectors over the grid `n ∈ {4, 8, 16, 64}`,
/// `k ∈ {1, n/4, n/2, n}` (duplicates removed), `per_cell` vectors each.
/// The oracle runs at the schedule's final ε.
pub fn oracle_equivalence(seed: u64, per_cell: usize, sched: &EpsSchedule, tol: f64) -> Result<OracleStats> {
    let mut rng = Rng::new(seed);
    let mut stats = OracleStats::default();
    for n in [4usize, 8, 16, 64] {
        let mut ks = vec![1, n / 4, n / 2, n];
        ks.dedup();
        for k in ks {
            for _ in 0..per_cell {
                let s = gaussian_scores(&mut rng, n);
                let it = soft_topk(&s, k, sched)?;
                let or = oracle_bisection(&s, k, sched.eps_target)?;
                let err = it.lambda.iter().zip(&or.lambda).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let ratio = it.constraint_residual / k as f64;
                stats.cases += 1;
                stats.max_lambda_err = stats.max_lambda_err.max(err);
                stats.max_residual_ratio = stats.max_residual_ratio.max(ratio);
                if !(err <= tol && ratio < tol) {
                    stats.failing_cases += 1;
                }
            }
        }
    }
    Ok(stats)
}

/// Max deviation of `k = 1` soft top-k from `softmax(s/ε)`.
pub fn softmax_limit(seed: u64, count: usize, sched: &EpsSchedule) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = 2 + rng.below(63);
        let s = gaussian_scores(&mut rng, n);
        let got = soft_topk(&s, 1, sched)?.lambda;
        let scaled: Vec<f64> = s.as_slice().iter().map(|v| v / sched.eps_target).collect();
        let want = row_softmax(&Matrix::row_vector(&scaled));
        let err = got.iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Number of instances (out of `count`) where rounding λ does not give the
/// hard top-k mask. Scores are spaced at least `gap` apart; `solve` maps
/// `(s, k)` to λ.
pub fn hard_limit(
    seed: u64,
    count: usize,
    gap: f64,
    solve: impl Fn(&ScoreVector, usize) -> Result<Vec<f64>>,
) -> Result<usize> {
    let mut rng = Rng::new(seed);
    let mut mismatches = 0;
    for _ in 0..count {
        let n = 2 + rng.below(63);
        let k = 1 + rng.below(n - 1);
        let mut v = Vec::with_capacity(n);
        let mut level = -(n as f64) * gap / 2.0;
        for _ in 0..n {
            v.push(level);
            level += gap + rng.uniform() * gap;
        }
        rng.shuffle(&mut v);
        let s = ScoreVector::new(v)?;
        let lambda = solve(&s, k)?;
        let rounded: Vec<bool> = lambda.iter().map(|&l| l >= 0.5).collect();
        if rounded != hard_topk_mask(s.as_slice(), k)? {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Relative error with an absolute floor so coordinates whose true
/// derivative is zero compare against finite-difference noise sensibly.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GradStats {
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Coordinates excluded because the perturbation changed the hard
    /// selection (the function is discontinuous there).
    pub skipped: usize,
}

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude a coordinate is judged on absolute error; central
/// differences at `FD_STEP` carry ~3e-9 of roundoff on these layers.
pub const FD_FLOOR: f64 = 1e-5;

/// `soft_topk_backward` against central differences of `gᵀλ(s)`.
pub fn soft_topk_gradcheck(seed: u64, count: usize, sched: &EpsSchedule) -> Result<GradStats> {
    let mut rng = Rng::new(seed);
    let mut stats = GradStats::default();
    for _ in 0..count {
        let n = 2 + rng.below(7);
        let k = 1 + rng.below(n - 1);
        let s: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let analytic = soft_topk_backward(&ScoreVector::new(s.clone())?, k, sched, &g)?;
        let f = |v: &[f64]| -> Result<f64> {
            let l = soft_topk(&ScoreVector::new(v.to_vec())?, k, sched)?.lambda;
            Ok(l.iter().zip(&g).map(|(a, b)| a * b).sum())
        };
        for i in 0..n {
            let mut p = s.clone();
            p[i] += FD_STEP;
            let up = f(&p)?;
            p[i] -= 2.0 * FD_STEP;
            let down = f(&p)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            stats.max_rel_err = stats.max_rel_err.max(relative_error(analytic[i], numeric, FD_FLOOR));
            stats.coordinates += 1;
        }
        stats.instances += 1;
    }
    Ok(stats)
}

/// A small random layer config cycling through router, attention and
/// adapter variants.
pub fn small_config(rng: &mut Rng, index: usize, sched: EpsSchedule) -> CodaConfig {
    let heads = 1 + rng.below(2);
    let d = heads * (2 + rng.below(8 / heads - 1));
    let n = 3 + rng.below(6);
    let k = 1 + rng.below(n - 1);
    let router = [RouterVariant::SoftTopk, RouterVariant::SigmoidGate, RouterVariant::Truncation][index % 3];
    let attention = [AttentionVariant::KToK, AttentionVariant::KToAll][(index / 3) % 2];
    let adapter = if (index / 6).is_multiple_of(2) {
        AdapterKind::Parallel
    } else {
        AdapterKind::Lora { rank: 2, alpha: 4.0 }
    };
    CodaConfig {
        n,
        d,
        heads,
        d_ffn: 2 + rng.below(7),
        d_adpt: 1 + rng.below(4),
        capacity: Capacity::Tokens(k),
        attention,
        router,
        schedule: sched,
        adapter,
        ..CodaConfig::default()
    }
}

/// Parameters with every trainable tensor randomized, so no gradient path
/// is switched off by zero initialization.
pub fn random_params(cfg: &CodaConfig, rng: &mut Rng) -> CodaLayerParams {
    let mut p = CodaLayerParams::init(cfg, rng);
    for (name, m) in p.trainable.tensors_mut() {
        let shift = if name.ends_with("_gain") { 1.0 } else { 0.0 };
        for v in m.data_mut() {
            *v = shift + 0.5 * rng.normal();
        }
    }
    p
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `layer_backward` against central differences of `⟨G, Y⟩` for every
/// trainable coordinate and every input coordinate.
pub fn layer_gradcheck(seed: u64, count: usize, sched: EpsSchedule) -> Result<GradStats> {
    let mut rng = Rng::new(seed);
    let mut stats = GradStats::default();
    for index in 0..count {
        let cfg = small_config(&mut rng, index, sched);
        let params = random_params(&cfg, &mut rng);
        let x = rng.gaussian_matrix(cfg.n, cfg.d, 1.0);
        let g = rng.gaussian_matrix(cfg.n, cfg.d, 1.0);
        let out = layer_forward(&x, &params, &cfg)?;
        let grads = layer_backward(&out, &g)?;
        let base_sel = out.selection.selected_indices.clone();

        // None when the perturbation flips the hard selection.
        let eval = |x: &Matrix, p: &CodaLayerParams| -> Result<Option<f64>> {
            let o = layer_forward(x, p, &cfg)?;
            Ok((o.selection.selected_indices == base_sel).then(|| inner(&g, &o.y)))
        };
        let mut compare = |analytic: f64, up: Option<f64>, down: Option<f64>| match (up, down) {
            (Some(u), Some(d)) => {
                let numeric = (u - d) / (2.0 * FD_STEP);
                stats.max_rel_err = stats.max_rel_err.max(relative_error(analytic, numeric, FD_FLOOR));
                stats.coordinates += 1;
            }
            _ => stats.skipped += 1,
        };

        let names: Vec<String> = params.trainable.tensors().into_iter().map(|(n, _)| n).collect();
        let grad_tensors = grads.trainable.tensors();
        for (t, name) in names.iter().enumerate() {
            let len = grad_tensors[t].1.len();
            for j in 0..len {
                let mut p = params.clone();
                let mut slots = p.trainable.tensors_mut();
                debug_assert_eq!(&slots[t].0, name);
                slots[t].1.data_mut()[j] += FD_STEP;
                let up = eval(&x, &p)?;
                let mut slots = p.trainable.tensors_mut();
                slots[t].1.data_mut()[j] -= 2.0 * FD_STEP;
                let down = eval(&x, &p)?;
                compare(grad_tensors[t].1.data()[j], up, down);
            }
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += FD_STEP;
            let up = eval(&xp, &params)?;
            xp.data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xp, &params)?;
            compare(grads.x.data()[j], up, down);
        }
        stats.instances += 1;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DenseStats {
    pub configs: usize,
    /// max |Y_coda − Y_dense| at k = n
    pub max_abs_diff: f64,
    /// Unselected rows at k < n where `Y ≠ X + Z_adapter` bit for bit.
    pub unselected_violations: usize,
    pub unselected_rows: usize,
}

pub fn dense_equivalence(seed: u64, count: usize) -> Result<DenseStats> {
    let mut rng = Rng::new(seed);
    let mut stats = DenseStats::default();
    for index in 0..count {
        let sched = if index % 2 == 0 { EpsSchedule::TEXT } else { EpsSchedule::SPEECH };
        let cfg = small_config(&mut rng, index, sched);
        let params = random_params(&cfg, &mut rng);
        let x = rng.gaussian_matrix(cfg.n, cfg.d, 1.0);

        // The sigmoid gate scales the branch by σ(s) < 1 even when every
        // token is kept, so it has no dense counterpart.
        let router = match cfg.router {
            RouterVariant::SigmoidGate => RouterVariant::SoftTopk,
            r => r,
        };
        let full = CodaConfig {
            capacity: Capacity::Tokens(cfg.n),
            router,
            ..cfg.clone()
        };
        let coda = layer_forward(&x, &params, &full)?;
        let dense = dense_layer_forward(&x, &params, &full)?;
        stats.max_abs_diff = stats.max_abs_diff.max(coda.y.max_abs_diff(&dense.y));

        let out = layer_forward(&x, &params, &cfg)?;
        let chosen = out.selection.is_selected();
        for j in (0..cfg.n).filter(|&j| !chosen[j]) {
            stats.unselected_rows += 1;
            let want: Vec<f64> = x.row(j).iter().zip(out.z_adapter.row(j)).map(|(a, b)| a + b).collect();
            if out.y.row(j) != want.as_slice() {
                stats.unselected_violations += 1;
            }
        }
        stats.configs += 1;
    }
    Ok(stats)
}

/// Layer config shaped like a Base text encoder layer.
pub fn base_config(n: usize, r: f64) -> CodaConfig {
    CodaConfig {
        n,
        d: 768,
        heads: 12,
        d_ffn: 3072,
        d_adpt: 64,
        capacity: Capacity::Reduction(r),
        ..CodaConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsAgreement {
    pub closed_form: u64,
    pub counted: u64,
    pub rel_diff: f64,
}

/// Closed-form count versus multiply-adds actually executed by one
/// `layer_forward` (or the dense baseline when `dense`).
pub fn flops_agreement(cfg: &CodaConfig, seed: u64, dense: bool) -> Result<FlopsAgreement> {
    let mut rng = Rng::new(seed);
    let params = CodaLayerParams::init(cfg, &mut rng);
    let x = rng.gaussian_matrix(cfg.n, cfg.d, 1.0);
    let (out, counted) = flops::measure(|| {
        if dense {
            dense_layer_forward(&x, &params, cfg)
        } else {
            layer_forward(&x, &params, cfg)
        }
    });
    out?;
    let report = count_flops(cfg);
    let closed_form = if dense { report.dense_total } else { report.coda_total };
    Ok(FlopsAgreement {
        closed_form,
        counted,
        rel_diff: (closed_form as f64 - counted as f64).abs() / counted as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Census {
    pub trainable: usize,
    pub frozen: usize,
    pub adapter: usize,
    pub router: usize,
    pub layer_norm: usize,
}

impl Census {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / (self.trainable + self.frozen) as f64
    }
}

pub fn parameter_census(cfg: &CodaConfig) -> Census {
    let p = CodaLayerParams::init(cfg, &mut Rng::new(0));
    let t = &p.trainable;
    Census {
        trainable: t.num_params(),
        frozen: p.frozen.num_params(),
        adapter: t.adapter.num_params(),
        router: t.router.w.len(),
        layer_norm: t.ln_att.gain.len() + t.ln_att.bias.len() + t.ln_ffn.gain.len() + t.ln_ffn.bias.len(),
    }
}

/// The fast property suite behind the `verify` command. Sizes are smaller
/// than the full acceptance run but cover the same properties.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = Rng::new(seed);
    let mut sub = || rng.next_u64();

    // The oracle check uses a longer unroll than the default schedules:
    // T = 20 is not enough for the dual iteration to converge at small ε.
    for (label, sched) in [
        ("speech", EpsSchedule { iterations: 200, ..EpsSchedule::SPEECH }),
        ("text", EpsSchedule { iterations: 2000, ..EpsSchedule::TEXT }),
    ] {
        let o = oracle_equivalence(sub(), 8, &sched, 1e-3)?;
        out.push(Check::below(
            &format!("soft_topk_oracle_{label}"),
            o.max_lambda_err,
            1e-3,
            format!("{} cases; T={}; max residual/k {:.3e}", o.cases, sched.iterations, o.max_residual_ratio),
        ));
    }
    out.push(Check::below(
        "softmax_limit_k1",
        softmax_limit(sub(), 100, &EpsSchedule::TEXT)?,
        1e-3,
        "100 instances at eps=0.03".into(),
    ));
    // Exact solution: the unrolled iteration stalls far from the fixed
    // point at eps = 1e-3.
    out.push(Check::equal(
        "hard_limit_mismatches",
        hard_limit(sub(), 100, 0.5, |s, k| Ok(oracle_bisection(s, k, 1e-3)?.lambda))? as f64,
        0.0,
        "100 instances; exact solve at eps=1e-3; gaps >= 0.5".into(),
    ));
    let g = soft_topk_gradcheck(sub(), 100, &EpsSchedule::TEXT)?;
    out.push(Check::below(
        "soft_topk_backward_fd",
        g.max_rel_err,
        1e-3,
        format!("{} instances; {} coordinates", g.instances, g.coordinates),
    ));
    for (label, sched) in [("speech", EpsSchedule::SPEECH), ("text", EpsSchedule::TEXT)] {
        let g = layer_gradcheck(sub(), 24, sched)?;
        out.push(Check::below(
            &format!("layer_backward_fd_{label}"),
            g.max_rel_err,
            1e-3,
            format!("{} instances; {} coordinates; {} skipped", g.instances, g.coordinates, g.skipped),
        ));
    }
    let d = dense_equivalence(sub(), 50)?;
    out.push(Check::below(
        "dense_equivalence_k_eq_n",
        d.max_abs_diff,
        1e-9,
        format!("{} configs", d.configs),
    ));
    out.push(Check::equal(
        "unselected_rows_exact",
        d.unselected_violations as f64,
        0.0,
        format!("{} unselected rows", d.unselected_rows),
    ));
    for cfg in [
        CodaConfig { n: 16, d: 32, ..CodaConfig::default() },
        CodaConfig {
            n: 24,
            d: 16,
            heads: 2,
            d_ffn: 40,
            attention: AttentionVariant::KToAll,
            adapter: AdapterKind::LORA_DEFAULT,
            capacity: Capacity::Reduction(3.0),
            ..CodaConfig::default()
        },
    ] {
        for dense in [false, true] {
            let f = flops_agreement(&cfg, sub(), dense)?;
            out.push(Check::below(
                &format!(
                    "flops_counter_{}_{}_{}",
                    if dense { "dense" } else { "coda" },
                    cfg.attention.name(),
                    cfg.adapter.name()
                ),
                f.rel_diff,
                0.01,
                format!("closed form {} counted {}", f.closed_form, f.counted),
            ));
        }
    }
    let r = count_flops(&CodaConfig {
        capacity: Capacity::Tokens(192),
        ..base_config(512, 1.0)
    });
    out.push(Check::equal(
        "linear_term_reduction_512_192",
        r.linear_term_reduction(),
        512.0 / 192.0,
        "k-to-k projections plus FFN".into(),
    ));
    let worst_share = [768usize, 1024, 2048]
        .iter()
        .map(|&d| {
            let cfg = CodaConfig {
                d,
                d_ffn: 4 * d,
                heads: d / 64,
                ..base_config(512, 3.0)
            };
            count_flops(&cfg).soft_topk_share()
        })
        .fold(0.0, f64::max);
    out.push(Check::below(
        "soft_topk_flops_share",
        worst_share,
        0.02,
        "n=512 r=3 d in {768;1024;2048}".into(),
    ));
    let c = parameter_census(&base_config(512, 3.0));
    out.push(Check::below(
        "trainable_fraction_base",
        c.fraction(),
        0.03,
        format!("{} trainable of {}", c.trainable, c.trainable + c.frozen),
    ));
    out.push(Check::equal(
        "census_partition",
        (c.trainable - c.adapter - c.router - c.layer_norm) as f64,
        0.0,
        format!("router {} = d", c.router),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-12, 1e-6), 1e-6);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }

    #[test]
    fn csv_escapes_commas() {
        let c = Check::below("x", 1.0, 2.0, "a, b".into());
        assert_eq!(c.to_csv(), "x,1.000000e0,2.000000e0,true,a; b");
    }

    #[test]
    fn small_configs_are_valid() {
        let mut rng = Rng::new(0);
        for i in 0..60 {
            let cfg = small_config(&mut rng, i, EpsSchedule::TEXT);
            cfg.validate().unwrap();
            assert!(cfg.n <= 8 && cfg.d <= 8 && cfg.k() < cfg.n);
        }
    }
}
