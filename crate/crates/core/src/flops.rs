//! Closed-form multiply-add counts for one layer forward pass.
//!
//! The counts mirror exactly what [`crate::layer::layer_forward`] and
//! [`crate::layer::dense_layer_forward`] execute through
//! [`crate::tensor::matmul`] plus the soft top-k scalar work, so they can be
//! checked against the thread-local counter in [`crate::tensor::flops`].

use serde::Serialize;

use crate::layer::{AdapterKind, AttentionVariant, CodaConfig};
use crate::router::RouterVariant;
use crate::soft_topk::OPS_PER_TOKEN_ITERATION;

/// Per-branch multiply-add counts for one branch layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct BranchFlops {
    pub attention_proj: u64,
    pub attention_matmul: u64,
    pub ffn: u64,
    pub adapter: u64,
    pub router_score: u64,
    pub soft_topk_iters: u64,
}

impl BranchFlops {
    pub fn total(&self) -> u64 {
        self.attention_proj + self.attention_matmul + self.ffn + self.adapter + self.router_score + self.soft_topk_iters
    }

    /// Attention and feed-forward terms only.
    pub fn transformer(&self) -> u64 {
        self.attention_proj + self.attention_matmul + self.ffn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsReport {
    pub n: u64,
    pub k: u64,
    pub coda: BranchFlops,
    pub dense: BranchFlops,
    pub coda_total: u64,
    pub dense_total: u64,
    /// `dense_total / coda_total`.
    pub speedup: f64,
}

impl FlopsReport {
    /// Share of the conditional layer spent in the soft top-k iterations.
    pub fn soft_topk_share(&self) -> f64 {
        self.coda.soft_topk_iters as f64 / self.coda_total as f64
    }

    /// Ratio of the attention-projection plus FFN terms, dense over
    /// conditional. These scale linearly in the routed token count.
    pub fn linear_term_reduction(&self) -> f64 {
        (self.dense.attention_proj + self.dense.ffn) as f64 / (self.coda.attention_proj + self.coda.ffn) as f64
    }

    pub fn transformer_speedup(&self) -> f64 {
        self.dense.transformer() as f64 / self.coda.transformer() as f64
    }
}

fn adapter_flops(cfg: &CodaConfig) -> u64 {
    let (n, d, f) = (cfg.n as u64, cfg.d as u64, cfg.d_ffn as u64);
    match cfg.adapter {
        AdapterKind::Parallel => 2 * n * d * cfg.d_adpt as u64,
        // merging A·B into each of the six projections
        AdapterKind::Lora { rank, .. } => {
            let r = rank as u64;
            4 * d * r * d + d * r * f + f * r * d
        }
    }
}

pub fn count_flops(cfg: &CodaConfig) -> FlopsReport {
    let (n, d, f) = (cfg.n as u64, cfg.d as u64, cfg.d_ffn as u64);
    let k = cfg.k() as u64;
    let adapter = adapter_flops(cfg);

    let dense = BranchFlops {
        attention_proj: 4 * n * d * d,
        attention_matmul: 2 * n * n * d,
        ffn: 2 * n * d * f,
        adapter,
        router_score: 0,
        soft_topk_iters: 0,
    };

    let (attention_proj, attention_matmul) = match cfg.attention {
        AttentionVariant::KToK => (4 * k * d * d, 2 * k * k * d),
        AttentionVariant::KToAll => (2 * k * d * d + 2 * n * d * d, 2 * k * n * d),
    };
    let router_score = if cfg.router.uses_scores() { n * d } else { 0 };
    let soft_topk_iters = if cfg.router == RouterVariant::SoftTopk && k < n {
        OPS_PER_TOKEN_ITERATION * cfg.schedule.iterations as u64 * n
    } else {
        0
    };
    let coda = BranchFlops {
        attention_proj,
        attention_matmul,
        ffn: 2 * k * d * f,
        adapter,
        router_score,
        soft_topk_iters,
    };
    let coda_total = coda.total();
    let dense_total = dense.total();
    FlopsReport {
        n,
        k,
        coda,
        dense,
        coda_total,
        dense_total,
        speedup: dense_total as f64 / coda_total as f64,
    }
}
