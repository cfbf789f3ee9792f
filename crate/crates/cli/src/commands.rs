use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use coda_core::soft_topk::{oracle_bisection, soft_topk};
use coda_core::training::{self, SyntheticTask, TrainConfig};
use coda_core::{checkpoint, count_flops, verify, Capacity, CodaConfig, CodaError, EpsSchedule, Matrix, Result, ScoreVector};

use crate::{FlopsArgs, HeatmapArgs, RouteArgs, TrainArgs, VerifyArgs, EXIT_VERIFY};

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn route(a: RouteArgs) -> Result<u8> {
    let m = Matrix::read_text_file(&a.scores)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(CodaError::Input(format!(
            "score file must hold a 1×n vector, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let s = ScoreVector::new(m.into_data())?;
    let sched = EpsSchedule {
        eps0: a.eps0,
        eps_target: a.eps,
        beta: a.beta,
        iterations: a.iterations,
    };
    let it = soft_topk(&s, a.k, &sched)?;
    let or = oracle_bisection(&s, a.k, a.eps)?;
    let mut out = String::from("index,score,lambda,oracle_lambda,delta,a,oracle_a,residual\n");
    for (i, ((score, l), ol)) in s.as_slice().iter().zip(&it.lambda).zip(&or.lambda).enumerate() {
        let _ = writeln!(
            out,
            "{i},{score:?},{l:?},{ol:?},{:?},{:?},{:?},{:?}",
            (l - ol).abs(),
            it.a,
            or.a,
            it.constraint_residual
        );
    }
    emit(None, &out)?;
    Ok(0)
}

/// The `train` config file. Every section and field is optional; a missing
/// `model` section trains at ε = 1 (the sharper text preset barely moves
/// the router on this task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub model: CodaConfig,
    pub task: SyntheticTask,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            model: CodaConfig {
                schedule: EpsSchedule::SPEECH,
                ..CodaConfig::default()
            },
            task: SyntheticTask::default(),
            train: TrainConfig::default(),
        }
    }
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let mut run: TrainRun = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainRun::default(),
    };
    if let Some(v) = a.steps {
        run.train.steps = v;
    }
    if let Some(v) = a.lr {
        run.train.lr = v;
    }
    if let Some(v) = a.seed {
        run.train.seed = v;
    }
    if let Some(v) = &a.router {
        run.model.router = v.parse()?;
    }
    if let Some(v) = a.r {
        run.model.capacity = Capacity::Reduction(v);
    }
    let outcome = training::train(&run.task, &run.model, &run.train)?;
    emit(a.metrics.as_deref(), &outcome.trace_csv())?;
    if let Some(p) = &a.checkpoint {
        checkpoint::save(&outcome.model, p)?;
    }
    let last = outcome.final_metrics();
    eprintln!(
        "router={} k={} steps={} eval_accuracy={:.4} selection_recall={:.4}",
        run.model.router.name(),
        run.model.k(),
        last.step,
        last.eval_accuracy,
        last.selection_recall
    );
    Ok(0)
}

pub fn flops(a: FlopsArgs) -> Result<u8> {
    let mut cfg: CodaConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CodaConfig::default(),
    };
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.d {
        cfg.d = v;
    }
    if let Some(v) = a.heads {
        cfg.heads = v;
    }
    if let Some(v) = a.d_ffn {
        cfg.d_ffn = v;
    }
    if let Some(v) = a.d_adpt {
        cfg.d_adpt = v;
    }
    if let Some(v) = a.r {
        cfg.capacity = Capacity::Reduction(v);
    }
    if let Some(v) = a.k {
        cfg.capacity = Capacity::Tokens(v);
    }
    if let Some(v) = &a.attention {
        cfg.attention = serde_json::from_value(serde_json::Value::String(v.clone()))
            .map_err(|_| CodaError::Input(format!("unknown attention variant {v:?}")))?;
    }
    if let Some(v) = a.iterations {
        cfg.schedule.iterations = v;
    }
    cfg.validate()?;
    let r = count_flops(&cfg);
    let mut out = String::from("term,coda,dense\n");
    let rows = [
        ("attention_proj", r.coda.attention_proj, r.dense.attention_proj),
        ("attention_matmul", r.coda.attention_matmul, r.dense.attention_matmul),
        ("ffn", r.coda.ffn, r.dense.ffn),
        ("adapter", r.coda.adapter, r.dense.adapter),
        ("router_score", r.coda.router_score, r.dense.router_score),
        ("soft_topk_iters", r.coda.soft_topk_iters, r.dense.soft_topk_iters),
        ("total", r.coda_total, r.dense_total),
    ];
    for (name, c, d) in rows {
        let _ = writeln!(out, "{name},{c},{d}");
    }
    let _ = writeln!(out, "speedup,{:.6},1", r.speedup);
    emit(None, &out)?;
    Ok(0)
}

/// Optional `# grid H W` declaration in a fixture.
pub fn parse_grid(text: &str) -> Result<Option<(usize, usize)>> {
    for line in text.lines() {
        let Some(rest) = line.trim().strip_prefix('#') else {
            continue;
        };
        let mut parts = rest.split_whitespace();
        if parts.next() != Some("grid") {
            continue;
        }
        let dims: Vec<usize> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CodaError::Parse(format!("bad grid declaration {line:?}: {e}")))?;
        let [h, w] = dims[..] else {
            return Err(CodaError::Parse(format!("grid declaration needs `H W`, got {line:?}")));
        };
        return Ok(Some((h, w)));
    }
    Ok(None)
}

/// Binary PGM (P5) with λ ∈ [0, 1] mapped to 0..=255.
pub fn pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn layer_path(prefix: &Path, layer: usize, ext: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!("_layer{layer}.{ext}"));
    prefix.with_file_name(name)
}

pub fn heatmap(a: HeatmapArgs) -> Result<u8> {
    let model = checkpoint::load(&a.checkpoint)?;
    let text = std::fs::read_to_string(&a.input)?;
    let x = Matrix::from_text(&text)?;
    let cfg = &model.config;
    if x.shape() != (cfg.n, cfg.d) {
        return Err(CodaError::Input(format!(
            "fixture is {}x{} but checkpoint expects {}x{}",
            x.rows(),
            x.cols(),
            cfg.n,
            cfg.d
        )));
    }
    let (h, w) = parse_grid(&text)?.unwrap_or((1, cfg.n));
    if h * w != cfg.n {
        return Err(CodaError::Input(format!("grid {h}x{w} does not cover {} tokens", cfg.n)));
    }
    let layers: Vec<usize> = if a.layers.is_empty() {
        (0..model.layers.len()).collect()
    } else {
        a.layers.clone()
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.layers.len()) {
        return Err(CodaError::Input(format!(
            "layer {bad} out of range (checkpoint has {})",
            model.layers.len()
        )));
    }
    let pass = model.forward(&x, cfg.k())?;
    for &l in &layers {
        let lambda = &pass.lambdas[l];
        let chosen = pass.selections[l].is_selected();
        std::fs::write(layer_path(&a.out, l, "pgm"), pgm(lambda, h, w))?;
        let mut csv = String::from("index,row,col,lambda,selected\n");
        for (i, v) in lambda.iter().enumerate() {
            let _ = writeln!(csv, "{i},{},{},{v:?},{}", i / w, i % w, u8::from(chosen[i]));
        }
        std::fs::write(layer_path(&a.out, l, "csv"), csv)?;
    }
    Ok(0)
}

pub fn verify(a: VerifyArgs) -> Result<u8> {
    let checks = verify::run_suite(a.seed)?;
    emit(a.out.as_deref(), &verify::report_csv(&checks))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}
