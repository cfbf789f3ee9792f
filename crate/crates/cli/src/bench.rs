//! `bench`: wall-clock and FLOPs over a grid of layer configs.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use coda_core::layer::layer_forward;
use coda_core::router::scores;
use coda_core::soft_topk::soft_topk;
use coda_core::{
    count_flops, AttentionVariant, Capacity, CodaConfig, CodaError, CodaLayerParams, Result, Rng, RouterVariant,
    ScoreVector,
};

use crate::commands::{emit, read_json};
use crate::BenchArgs;

pub const THREADS_ENV: &str = "CODA_BENCH_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchDims {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub d_adpt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub dims: Vec<BenchDims>,
    pub r_values: Vec<f64>,
    pub attention: Vec<AttentionVariant>,
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    pub output: Option<PathBuf>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            dims: vec![BenchDims {
                n: 128,
                d: 64,
                heads: 4,
                d_ffn: 256,
                d_adpt: 16,
            }],
            r_values: vec![1.0, 2.0, 3.0, 4.0],
            attention: vec![AttentionVariant::KToK],
            seeds: vec![0],
            repetitions: 5,
            output: None,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.r_values.is_empty() || self.attention.is_empty() || self.seeds.is_empty() {
            return Err(CodaError::Input("bench grid is empty".into()));
        }
        if self.repetitions == 0 {
            return Err(CodaError::Input("repetitions must be >= 1".into()));
        }
        for cfg in self.points().iter().map(|p| &p.0) {
            cfg.validate()?;
        }
        Ok(())
    }

    fn points(&self) -> Vec<(CodaConfig, f64, u64)> {
        let mut out = Vec::new();
        for dims in &self.dims {
            for &r in &self.r_values {
                for &attention in &self.attention {
                    for &seed in &self.seeds {
                        let cfg = CodaConfig {
                            n: dims.n,
                            d: dims.d,
                            heads: dims.heads,
                            d_ffn: dims.d_ffn,
                            d_adpt: dims.d_adpt,
                            capacity: Capacity::Reduction(r),
                            attention,
                            ..CodaConfig::default()
                        };
                        out.push((cfg, r, seed));
                    }
                }
            }
        }
        out
    }
}

pub fn config_hash(cfg: &CodaConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub config_hash: String,
    pub n: usize,
    pub d: usize,
    pub r: f64,
    pub k: usize,
    pub variant: &'static str,
    pub seed: u64,
    pub flops_cond: u64,
    pub flops_dense: u64,
    pub model_speedup: f64,
    pub wall_ms: f64,
    pub topk_wall_ms: f64,
    pub topk_wall_share: f64,
    pub topk_flops_share: f64,
}

pub const CSV_HEADER: &str = "config_hash,n,d,r,k,variant,seed,flops_cond,flops_dense,model_speedup,wall_ms,topk_wall_ms,topk_wall_share,topk_flops_share";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.4},{:.4},{:.6},{:.6}",
            self.config_hash,
            self.n,
            self.d,
            self.r,
            self.k,
            self.variant,
            self.seed,
            self.flops_cond,
            self.flops_dense,
            self.model_speedup,
            self.wall_ms,
            self.topk_wall_ms,
            self.topk_wall_share,
            self.topk_flops_share
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// One grid point, single-threaded.
pub fn bench_point(cfg: &CodaConfig, r: f64, seed: u64, reps: usize) -> Result<BenchRow> {
    let mut rng = Rng::new(seed);
    let params = CodaLayerParams::init(cfg, &mut rng);
    let x = rng.gaussian_matrix(cfg.n, cfg.d, 1.0);
    let wall_ms = time_ms(reps, || layer_forward(&x, &params, cfg).map(drop))?;
    let k = cfg.k();
    let s = ScoreVector::new(scores(&x, &params.trainable.router)?)?;
    let topk_wall_ms = if cfg.router == RouterVariant::SoftTopk {
        time_ms(reps, || soft_topk(&s, k, &cfg.schedule).map(drop))?
    } else {
        0.0
    };
    let report = count_flops(cfg);
    Ok(BenchRow {
        config_hash: config_hash(cfg),
        n: cfg.n,
        d: cfg.d,
        r,
        k,
        variant: cfg.attention.name(),
        seed,
        flops_cond: report.coda_total,
        flops_dense: report.dense_total,
        model_speedup: report.speedup,
        wall_ms,
        topk_wall_ms,
        topk_wall_share: topk_wall_ms / wall_ms,
        topk_flops_share: report.soft_topk_share(),
    })
}

/// Runs the grid, points in parallel; rows come back in grid order.
pub fn run_spec(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| CodaError::Input(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CodaError::State(format!("thread pool: {e}")))?;
    let points = spec.points();
    pool.install(|| {
        points
            .par_iter()
            .map(|(cfg, r, seed)| bench_point(cfg, *r, *seed, spec.repetitions))
            .collect()
    })
}

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for row in rows {
        let _ = writeln!(s, "{}", row.to_csv());
    }
    s
}

pub fn run(a: BenchArgs) -> Result<u8> {
    let spec: BenchSpec = read_json(&a.spec)?;
    let rows = run_spec(&spec)?;
    let out = a.out.or(spec.output);
    emit(out.as_deref(), &rows_csv(&rows))?;
    Ok(0)
}
