//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if
//! any criterion fails. Informational lines start with `INFO`.

use std::process::Command;
use std::time::Instant;

use coda_core::training::{eval_set, eval_tradeoff, train, Encoder, SyntheticTask, TrainConfig, TrainOutcome};
use coda_core::verify::{
    base_config, dense_equivalence, flops_agreement, hard_limit, layer_gradcheck, oracle_equivalence,
    parameter_census, soft_topk_gradcheck, softmax_limit,
};
use coda_core::soft_topk::{oracle_bisection, soft_topk};
use coda_core::{count_flops, AttentionVariant, AdapterKind, Capacity, CodaConfig, EpsSchedule, RouterVariant};

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn criterion(&mut self, id: &str, passed: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failed.push(id.to_string());
        }
    }
}

fn info(detail: String) {
    println!("INFO {detail}");
}

fn c1_oracle(r: &mut Report) {
    let t = Instant::now();
    // 15 (n, k) cells after deduplication
    let o = oracle_equivalence(101, 34, &EpsSchedule::TEXT, 1e-3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = o.cases >= 500 && o.max_lambda_err < 1e-3 && o.max_residual_ratio < 1e-3 && secs < 10.0;
    r.criterion(
        "1 soft top-k matches oracle",
        ok,
        format!(
            "{} vectors, T=20 eps=0.03 beta=0.7: max |λ-λ*| = {:.3e} (< 1e-3), max |1ᵀλ-k|/k = {:.3e} (< 1e-3), {} failing, {secs:.2}s",
            o.cases, o.max_lambda_err, o.max_residual_ratio, o.failing_cases
        ),
    );
    let s = oracle_equivalence(102, 34, &EpsSchedule::SPEECH, 1e-3).unwrap();
    info(format!(
        "speech schedule T=20 eps=1: max |λ-λ*| = {:.3e}, max residual/k = {:.3e}, {} of {} failing",
        s.max_lambda_err, s.max_residual_ratio, s.failing_cases, s.cases
    ));
    for t in [200, 2000] {
        let sched = EpsSchedule { iterations: t, ..EpsSchedule::TEXT };
        let o = oracle_equivalence(101, 34, &sched, 1e-3).unwrap();
        info(format!(
            "text schedule T={t}: max |λ-λ*| = {:.3e}, max residual/k = {:.3e}, {} of {} failing",
            o.max_lambda_err, o.max_residual_ratio, o.failing_cases, o.cases
        ));
    }
}

fn c2_limits(r: &mut Report) {
    let soft = softmax_limit(201, 100, &EpsSchedule::TEXT).unwrap();
    let sharp = EpsSchedule {
        eps_target: 1e-3,
        ..EpsSchedule::TEXT
    };
    let iterative = hard_limit(202, 100, 0.5, |s, k| Ok(soft_topk(s, k, &sharp)?.lambda)).unwrap();
    r.criterion(
        "2 limit behaviours",
        soft < 1e-3 && iterative == 0,
        format!(
            "k=1 vs softmax(s/eps): max err {soft:.3e} (< 1e-3); eps=1e-3 T=20 rounds to hard top-k on {} of 100 (need 100)",
            100 - iterative
        ),
    );
    let exact = hard_limit(202, 100, 0.5, |s, k| Ok(oracle_bisection(s, k, 1e-3)?.lambda)).unwrap();
    info(format!("exact solution at eps=1e-3 rounds to hard top-k on {} of 100", 100 - exact));
    for t in [200, 2000] {
        let longer = EpsSchedule { iterations: t, ..sharp };
        let m = hard_limit(202, 100, 0.5, |s, k| Ok(soft_topk(s, k, &longer)?.lambda)).unwrap();
        info(format!("iterative eps=1e-3 T={t} rounds to hard top-k on {} of 100", 100 - m));
    }
}

fn c3_gradients(r: &mut Report) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut skipped = 0;
    let mut coords = 0;
    for (label, seed, sched) in [("text", 301, EpsSchedule::TEXT), ("speech", 302, EpsSchedule::SPEECH)] {
        let s = soft_topk_gradcheck(seed, 100, &sched).unwrap();
        let l = layer_gradcheck(seed + 10, 100, sched).unwrap();
        worst = worst.max(s.max_rel_err).max(l.max_rel_err);
        skipped += l.skipped;
        coords += l.coordinates;
        parts.push(format!(
            "{label}: soft top-k {:.2e} over {} instances, layer {:.2e} over {} instances",
            s.max_rel_err, s.instances, l.max_rel_err, l.instances
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    r.criterion(
        "3 gradient fidelity",
        worst < 1e-3 && secs < 60.0,
        format!(
            "max relative error {worst:.3e} (< 1e-3); {}; {skipped} of {} layer coordinates skipped at selection flips; {secs:.1}s",
            parts.join("; "),
            coords + skipped
        ),
    );
}

fn c4_dense(r: &mut Report) {
    let d = dense_equivalence(401, 50).unwrap();
    r.criterion(
        "4 dense equivalence",
        d.max_abs_diff < 1e-9 && d.unselected_violations == 0,
        format!(
            "{} configs: max |Y-Y_dense| at k=n {:.3e} (< 1e-9); {} of {} unselected rows differ from x + Z_adapter",
            d.configs, d.max_abs_diff, d.unselected_violations, d.unselected_rows
        ),
    );
}

fn task_config(router: RouterVariant) -> CodaConfig {
    CodaConfig {
        n: 16,
        d: 32,
        heads: 4,
        d_ffn: 64,
        d_adpt: 64,
        capacity: Capacity::Reduction(4.0),
        router,
        schedule: EpsSchedule::SPEECH,
        ..CodaConfig::default()
    }
}

/// Mean final-layer λ on planted tokens over mean λ elsewhere.
fn lambda_contrast(model: &Encoder, task: &SyntheticTask) -> f64 {
    let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0usize, 0usize);
    for ex in eval_set(task, 256).unwrap() {
        let pass = model.forward(&ex.x, model.config.k()).unwrap();
        for (i, l) in pass.lambdas.last().unwrap().iter().enumerate() {
            if ex.relevant.contains(&i) {
                on += l;
                n_on += 1;
            } else {
                off += l;
                n_off += 1;
            }
        }
    }
    (on / n_on as f64) / (off / n_off as f64)
}

fn c5_router_learning(r: &mut Report) {
    let t = Instant::now();
    let task = SyntheticTask::default();
    let seeds = [0u64, 1, 2];
    let run = |router, seed| -> TrainOutcome {
        train(&task, &task_config(router), &TrainConfig { seed, ..TrainConfig::default() }).unwrap()
    };
    let mut soft = Vec::new();
    let mut sig = Vec::new();
    let mut trunc = Vec::new();
    let mut contrast = Vec::new();
    for &seed in &seeds {
        let s = run(RouterVariant::SoftTopk, seed);
        contrast.push(lambda_contrast(&s.model, &task));
        soft.push(s.final_metrics().clone());
        sig.push(run(RouterVariant::SigmoidGate, seed).final_metrics().clone());
        trunc.push(run(RouterVariant::Truncation, seed).final_metrics().clone());
    }
    let secs = t.elapsed().as_secs_f64();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let recall = mean(soft.iter().map(|m| m.selection_recall).collect());
    let gap = mean(soft.iter().zip(&trunc).map(|(s, t)| s.eval_accuracy - t.eval_accuracy).collect());
    let sig_below = sig.iter().zip(&soft).filter(|(g, s)| g.eval_accuracy < s.eval_accuracy).count();
    let fmt = |v: &[coda_core::training::MetricsRow], f: fn(&coda_core::training::MetricsRow) -> f64| {
        v.iter().map(|m| format!("{:.3}", f(m))).collect::<Vec<_>>().join("/")
    };
    r.criterion(
        "5 router learning",
        recall > 0.9 && gap > 0.10 && sig_below >= 2 && secs < 600.0,
        format!(
            "soft top-k recall {recall:.3} (> 0.9, per seed {}); accuracy soft {} sigmoid {} truncation {}; mean gap over truncation {:.1} points (> 10); sigmoid below soft top-k on {sig_below} of 3 seeds (>= 2); {secs:.0}s",
            fmt(&soft, |m| m.selection_recall),
            fmt(&soft, |m| m.eval_accuracy),
            fmt(&sig, |m| m.eval_accuracy),
            fmt(&trunc, |m| m.eval_accuracy),
            100.0 * gap
        ),
    );
    let per_layer: Vec<String> = soft
        .iter()
        .map(|m| m.layer_recall.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("+"))
        .collect();
    info(format!("soft top-k recall by layer per seed: {}", per_layer.join(", ")));
    info(format!(
        "final-layer λ contrast planted/other per seed: {} (>= 2 expected)",
        contrast.iter().map(|c| format!("{c:.2}")).collect::<Vec<_>>().join("/")
    ));
}

fn tradeoff_info() {
    let task = SyntheticTask::default();
    let rs = [1.0, 3.0, 5.0];
    let mut acc = vec![0.0; rs.len()];
    let mut monotone = 0;
    for seed in 0..3u64 {
        let rows = eval_tradeoff(
            &task,
            &task_config(RouterVariant::SoftTopk),
            &TrainConfig { seed, ..TrainConfig::default() },
            &rs,
        )
        .unwrap();
        monotone += usize::from(rows.windows(2).all(|w| w[1].accuracy <= w[0].accuracy));
        for (a, row) in acc.iter_mut().zip(&rows) {
            *a += row.accuracy / 3.0;
        }
    }
    info(format!(
        "trade-off r=1/3/5 mean accuracy {:.3}/{:.3}/{:.3}; r=3 drop {:.3} vs r=5 drop {:.3}; non-increasing on {monotone} of 3 seeds",
        acc[0],
        acc[1],
        acc[2],
        acc[0] - acc[1],
        acc[0] - acc[2]
    ));
}

fn c6_flops(r: &mut Report) {
    let configs = [
        CodaConfig {
            n: 64,
            d: 128,
            heads: 4,
            d_ffn: 512,
            d_adpt: 32,
            capacity: Capacity::Reduction(3.0),
            ..CodaConfig::default()
        },
        CodaConfig {
            n: 48,
            d: 96,
            heads: 3,
            d_ffn: 384,
            attention: AttentionVariant::KToAll,
            adapter: AdapterKind::LORA_DEFAULT,
            capacity: Capacity::Tokens(10),
            ..CodaConfig::default()
        },
    ];
    let mut worst = 0.0f64;
    for (i, cfg) in configs.iter().enumerate() {
        for dense in [false, true] {
            worst = worst.max(flops_agreement(cfg, 600 + i as u64, dense).unwrap().rel_diff);
        }
    }
    let reduction = count_flops(&CodaConfig {
        capacity: Capacity::Tokens(192),
        ..base_config(512, 1.0)
    })
    .linear_term_reduction();
    let share = [768usize, 1024, 2048]
        .iter()
        .flat_map(|&d| {
            [2.0, 3.0, 5.0].map(|r| {
                count_flops(&CodaConfig {
                    d,
                    d_ffn: 4 * d,
                    heads: d / 64,
                    ..base_config(512, r)
                })
                .soft_topk_share()
            })
        })
        .fold(0.0, f64::max);
    r.criterion(
        "6 FLOPs accounting",
        worst < 0.01 && reduction == 512.0 / 192.0 && share < 0.02,
        format!(
            "closed form vs counted max rel diff {worst:.2e} (< 1%); projection+FFN reduction at n=512 k=192 {reduction:.6} (= n/k {:.6}); max soft top-k share for d >= 768 {share:.2e} (< 2%)",
            512.0 / 192.0
        ),
    );
}

fn c7_determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| -> Vec<u8> {
        let out = Command::new(env!("CARGO_BIN_EXE_coda")).args(args).output().unwrap();
        assert!(out.status.code().is_some_and(|c| c <= 2), "{out:?}");
        out.stdout
    };
    let v1 = run(&["verify", "--seed", "7"]);
    let v2 = run(&["verify", "--seed", "7"]);
    let train = |tag: &str| -> Vec<u8> {
        let p = dir.path().join(format!("m{tag}.csv"));
        run(&["train", "--seed", "5", "--steps", "300", "--metrics", p.to_str().unwrap()]);
        std::fs::read(p).unwrap()
    };
    let (ma, mb) = (train("a"), train("b"));
    let same_train = ma == mb && !ma.is_empty();
    let bytes = ma.len();
    r.criterion(
        "7 determinism",
        v1 == v2 && !v1.is_empty() && same_train,
        format!(
            "verify seed 7 twice: {} ({} bytes); train seed 5 300 steps twice: {} ({bytes} bytes)",
            if v1 == v2 { "identical" } else { "differ" },
            v1.len(),
            if same_train { "identical" } else { "differ" }
        ),
    );
}

fn c8_census(r: &mut Report) {
    let c = parameter_census(&base_config(512, 3.0));
    r.criterion(
        "8 parameter census",
        c.fraction() < 0.03,
        format!(
            "d=768 d_ffn=3072 d_adpt=64: {} trainable of {} ({:.3}%, < 3%)",
            c.trainable,
            c.trainable + c.frozen,
            100.0 * c.fraction()
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags; a name filter that matches nothing
    // skips the suite.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut r = Report { failed: Vec::new() };
    c1_oracle(&mut r);
    c2_limits(&mut r);
    c3_gradients(&mut r);
    c4_dense(&mut r);
    c5_router_learning(&mut r);
    tradeoff_info();
    c6_flops(&mut r);
    c7_determinism(&mut r);
    c8_census(&mut r);
    if r.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: {} failing: {}", r.failed.len(), r.failed.join(", "));
        std::process::exit(1);
    }
}
