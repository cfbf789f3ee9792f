//! The conditional adapter encoder layer.
//!
//! ```text
//! X_norm   = LN_att(X)
//! Z_adapt  = F_adapter(X_norm)                      all n tokens
//! m, P     = F_router(X_norm)
//! X_routed = P X_norm                               k tokens
//! Z̄        = F_att(X_routed [, X_norm])
//! Z_routed = F_ffn(LN_ffn(X_routed + Z̄))
//! Z_cond   = Pᵀ (Z̄ + Z_routed)
//! Y        = X + Z_adapt + m ⊙ Z_cond
//! ```
//!
//! The Transformer weights are frozen; adapter, router and layer-norm
//! parameters are trainable. Forward passes record onto an
//! [`autodiff::Tape`](crate::autodiff::Tape) so the same graph serves the
//! backward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{CodaError, Result};
use crate::router::{self, RouterParams, RouterVariant, SelectionResult};
use crate::soft_topk::EpsSchedule;
use crate::tensor::{Matrix, Rng, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionVariant {
    /// Selected tokens attend only to each other.
    #[default]
    #[serde(rename = "k_to_k")]
    KToK,
    /// Selected tokens query all n tokens as keys and values.
    #[serde(rename = "k_to_all")]
    KToAll,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::KToK => "k_to_k",
            AttentionVariant::KToAll => "k_to_all",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = CodaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_to_k" => Ok(AttentionVariant::KToK),
            "k_to_all" => Ok(AttentionVariant::KToAll),
            other => Err(CodaError::Input(format!("unknown attention variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    /// Bottleneck FFN `up(relu(down(x)))` run on every token.
    #[default]
    Parallel,
    /// Low-rank deltas `(alpha / rank) A B` on every projection matrix.
    Lora { rank: usize, alpha: f64 },
}

impl AdapterKind {
    pub const LORA_DEFAULT: AdapterKind = AdapterKind::Lora { rank: 4, alpha: 16.0 };

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Parallel => "parallel",
            AdapterKind::Lora { .. } => "lora",
        }
    }
}

/// How many tokens the conditional branch processes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    /// `k = ⌈n / r⌉`.
    Reduction(f64),
    Tokens(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodaConfig {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub d_adpt: usize,
    pub capacity: Capacity,
    pub attention: AttentionVariant,
    pub router: RouterVariant,
    pub schedule: EpsSchedule,
    pub adapter: AdapterKind,
    pub layer_norm_eps: f64,
}

impl Default for CodaConfig {
    fn default() -> Self {
        Self {
            n: 16,
            d: 32,
            heads: 4,
            d_ffn: 64,
            d_adpt: 64,
            capacity: Capacity::Reduction(4.0),
            attention: AttentionVariant::KToK,
            router: RouterVariant::SoftTopk,
            schedule: EpsSchedule::TEXT,
            adapter: AdapterKind::Parallel,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

/// `⌈n / r⌉`, clamped to `[1, n]`. A tiny slack absorbs representation error
/// in `r` (e.g. 512 / 2.667 selects 192, not 193).
pub fn capacity_from_reduction(n: usize, r: f64) -> usize {
    let raw = n as f64 / r;
    let k = (raw - 1e-9).ceil().max(1.0) as usize;
    k.min(n)
}

impl CodaConfig {
    pub fn k(&self) -> usize {
        match self.capacity {
            Capacity::Reduction(r) => capacity_from_reduction(self.n, r),
            Capacity::Tokens(k) => k,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.heads == 0 || self.d_ffn == 0 {
            return Err(CodaError::Input(format!("zero-sized dimension in {self:?}")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(CodaError::Input(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if let Capacity::Reduction(r) = self.capacity {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(CodaError::Input(format!("reduction factor must be >= 1, got {r}")));
            }
        }
        if matches!(self.adapter, AdapterKind::Parallel) && self.d_adpt == 0 {
            return Err(CodaError::Input("parallel adapter needs d_adpt >= 1".into()));
        }
        if let AdapterKind::Lora { rank, alpha } = self.adapter {
            if rank == 0 || !alpha.is_finite() {
                return Err(CodaError::Input(format!("invalid LoRA rank={rank} alpha={alpha}")));
            }
        }
        let k = self.k();
        if k < 1 || k > self.n {
            return Err(CodaError::Capacity { k, n: self.n });
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(CodaError::Input("layer_norm_eps must be > 0".into()));
        }
        self.schedule.validate()
    }
}

/// Pretrained Transformer weights. Never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_in: Matrix,
    pub ffn_out: Matrix,
    pub heads: usize,
}

impl FrozenLayerWeights {
    /// Gaussian weights with std `1/sqrt(fan_in)` standing in for a
    /// pretrained layer.
    pub fn init(d: usize, d_ffn: usize, heads: usize, rng: &mut Rng) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (d_ffn as f64).sqrt();
        Self {
            wq: rng.gaussian_matrix(d, d, sd),
            wk: rng.gaussian_matrix(d, d, sd),
            wv: rng.gaussian_matrix(d, d, sd),
            wo: rng.gaussian_matrix(d, d, sd),
            ffn_in: rng.gaussian_matrix(d, d_ffn, sd),
            ffn_out: rng.gaussian_matrix(d_ffn, d, sf),
            heads,
        }
    }

    pub fn zeros(d: usize, d_ffn: usize, heads: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_in: Matrix::zeros(d, d_ffn),
            ffn_out: Matrix::zeros(d_ffn, d),
            heads,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_in", &self.ffn_in),
            ("ffn_out", &self.ffn_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ffn_in", &mut self.ffn_in),
            ("ffn_out", &mut self.ffn_out),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn d(&self) -> usize {
        self.wq.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    /// 1×d
    pub gain: Matrix,
    /// 1×d
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// rows_of_W × rank
    pub a: Matrix,
    /// rank × cols_of_W
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterWeights {
    Parallel {
        /// d × d_adpt
        down: Matrix,
        /// d_adpt × d
        up: Matrix,
    },
    Lora {
        rank: usize,
        alpha: f64,
        /// Deltas for wq, wk, wv, wo, ffn_in, ffn_out, in that order.
        pairs: Vec<LoraPair>,
    },
}

pub const LORA_TARGETS: [&str; 6] = ["wq", "wk", "wv", "wo", "ffn_in", "ffn_out"];

impl AdapterWeights {
    /// Up-projection (and LoRA `B`) start at zero so a fresh layer ignores
    /// the adapter.
    pub fn init(kind: AdapterKind, d: usize, d_ffn: usize, d_adpt: usize, rng: &mut Rng) -> Self {
        match kind {
            AdapterKind::Parallel => AdapterWeights::Parallel {
                down: rng.gaussian_matrix(d, d_adpt, 1.0 / (d as f64).sqrt()),
                up: Matrix::zeros(d_adpt, d),
            },
            AdapterKind::Lora { rank, alpha } => {
                let shapes = [(d, d), (d, d), (d, d), (d, d), (d, d_ffn), (d_ffn, d)];
                let pairs = shapes
                    .iter()
                    .map(|&(r, c)| LoraPair {
                        a: rng.gaussian_matrix(r, rank, 1.0 / (r as f64).sqrt()),
                        b: Matrix::zeros(rank, c),
                    })
                    .collect();
                AdapterWeights::Lora { rank, alpha, pairs }
            }
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterWeights::Parallel { .. } => AdapterKind::Parallel,
            AdapterWeights::Lora { rank, alpha, .. } => AdapterKind::Lora {
                rank: *rank,
                alpha: *alpha,
            },
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            AdapterWeights::Parallel { down, up } => {
                vec![("down".to_string(), down), ("up".to_string(), up)]
            }
            AdapterWeights::Lora { pairs, .. } => pairs
                .iter()
                .zip(LORA_TARGETS)
                .flat_map(|(p, name)| [(format!("lora_{name}_a"), &p.a), (format!("lora_{name}_b"), &p.b)])
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            AdapterWeights::Parallel { down, up } => {
                vec![("down".to_string(), down), ("up".to_string(), up)]
            }
            AdapterWeights::Lora { pairs, .. } => pairs
                .iter_mut()
                .zip(LORA_TARGETS)
                .flat_map(|(p, name)| {
                    [
                        (format!("lora_{name}_a"), &mut p.a),
                        (format!("lora_{name}_b"), &mut p.b),
                    ]
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Everything that receives gradients in one layer. Also used as the
/// gradient container returned by [`layer_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableLayerParams {
    pub adapter: AdapterWeights,
    pub router: RouterParams,
    pub ln_att: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

impl TrainableLayerParams {
    pub fn init(cfg: &CodaConfig, rng: &mut Rng) -> Self {
        Self {
            adapter: AdapterWeights::init(cfg.adapter, cfg.d, cfg.d_ffn, cfg.d_adpt, rng),
            router: RouterParams::init(cfg.d, rng),
            ln_att: LayerNormParams::identity(cfg.d),
            ln_ffn: LayerNormParams::identity(cfg.d),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.adapter.tensors();
        out.push(("router_w".into(), &self.router.w));
        out.push(("ln_att_gain".into(), &self.ln_att.gain));
        out.push(("ln_att_bias".into(), &self.ln_att.bias));
        out.push(("ln_ffn_gain".into(), &self.ln_ffn.gain));
        out.push(("ln_ffn_bias".into(), &self.ln_ffn.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.adapter.tensors_mut();
        out.push(("router_w".into(), &mut self.router.w));
        out.push(("ln_att_gain".into(), &mut self.ln_att.gain));
        out.push(("ln_att_bias".into(), &mut self.ln_att.bias));
        out.push(("ln_ffn_gain".into(), &mut self.ln_ffn.gain));
        out.push(("ln_ffn_bias".into(), &mut self.ln_ffn.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.max_abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodaLayerParams {
    pub frozen: FrozenLayerWeights,
    pub trainable: TrainableLayerParams,
}

impl CodaLayerParams {
    pub fn init(cfg: &CodaConfig, rng: &mut Rng) -> Self {
        Self {
            frozen: FrozenLayerWeights::init(cfg.d, cfg.d_ffn, cfg.heads, rng),
            trainable: TrainableLayerParams::init(cfg, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.frozen.num_params() + self.trainable.num_params()
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_in: Var,
    ffn_out: Var,
    heads: usize,
    adapter: AdapterVars,
    router_w: Var,
    ln_att: (Var, Var),
    ln_ffn: (Var, Var),
}

#[derive(Debug, Clone)]
enum AdapterVars {
    Parallel { down: Var, up: Var },
    Lora { scale: f64, pairs: Vec<(Var, Var)> },
}

impl LayerVars {
    /// Registers the layer on `tape`: frozen weights as constants, the rest
    /// as parameters.
    pub fn register(tape: &mut Tape, params: &CodaLayerParams) -> Self {
        let f = &params.frozen;
        let t = &params.trainable;
        let adapter = match &t.adapter {
            AdapterWeights::Parallel { down, up } => AdapterVars::Parallel {
                down: tape.param(down.clone()),
                up: tape.param(up.clone()),
            },
            AdapterWeights::Lora { rank, alpha, pairs } => AdapterVars::Lora {
                scale: alpha / *rank as f64,
                pairs: pairs
                    .iter()
                    .map(|p| (tape.param(p.a.clone()), tape.param(p.b.clone())))
                    .collect(),
            },
        };
        Self {
            wq: tape.constant(f.wq.clone()),
            wk: tape.constant(f.wk.clone()),
            wv: tape.constant(f.wv.clone()),
            wo: tape.constant(f.wo.clone()),
            ffn_in: tape.constant(f.ffn_in.clone()),
            ffn_out: tape.constant(f.ffn_out.clone()),
            heads: f.heads,
            adapter,
            router_w: tape.param(t.router.w.clone()),
            ln_att: (tape.param(t.ln_att.gain.clone()), tape.param(t.ln_att.bias.clone())),
            ln_ffn: (tape.param(t.ln_ffn.gain.clone()), tape.param(t.ln_ffn.bias.clone())),
        }
    }

    /// Collects this layer's parameter gradients into a params-shaped struct.
    pub fn gradients(&self, grads: &Gradients, like: &TrainableLayerParams) -> TrainableLayerParams {
        let pick = |v: Var, m: &Matrix| grads.get_or_zeros(v, m.shape());
        let adapter = match (&self.adapter, &like.adapter) {
            (AdapterVars::Parallel { down, up }, AdapterWeights::Parallel { down: dm, up: um }) => {
                AdapterWeights::Parallel {
                    down: pick(*down, dm),
                    up: pick(*up, um),
                }
            }
            (AdapterVars::Lora { pairs, .. }, AdapterWeights::Lora { rank, alpha, pairs: pm }) => {
                AdapterWeights::Lora {
                    rank: *rank,
                    alpha: *alpha,
                    pairs: pairs
                        .iter()
                        .zip(pm)
                        .map(|(&(a, b), p)| LoraPair {
                            a: pick(a, &p.a),
                            b: pick(b, &p.b),
                        })
                        .collect(),
                }
            }
            _ => unreachable!("vars registered from the same params"),
        };
        TrainableLayerParams {
            adapter,
            router: RouterParams {
                w: pick(self.router_w, &like.router.w),
            },
            ln_att: LayerNormParams {
                gain: pick(self.ln_att.0, &like.ln_att.gain),
                bias: pick(self.ln_att.1, &like.ln_att.bias),
            },
            ln_ffn: LayerNormParams {
                gain: pick(self.ln_ffn.0, &like.ln_ffn.gain),
                bias: pick(self.ln_ffn.1, &like.ln_ffn.bias),
            },
        }
    }

    /// Projection weight with its LoRA delta merged in, if any.
    fn weight(&self, tape: &mut Tape, which: usize) -> Result<Var> {
        let base = [self.wq, self.wk, self.wv, self.wo, self.ffn_in, self.ffn_out][which];
        match &self.adapter {
            AdapterVars::Lora { scale, pairs } => {
                let (a, b) = pairs[which];
                let ab = tape.matmul(a, b)?;
                let delta = tape.scale(ab, *scale);
                tape.add(base, delta)
            }
            AdapterVars::Parallel { .. } => Ok(base),
        }
    }
}

/// Node handles of one layer's forward graph.
#[derive(Debug, Clone)]
pub struct LayerGraph {
    pub y: Var,
    pub x_norm: Var,
    /// `None` for LoRA, whose adapter lives inside the projections.
    pub z_adapter: Option<Var>,
    /// `Pᵀ(Z̄ + Z_routed)` before gating.
    pub z_cond: Var,
    pub selection: SelectionResult,
}

fn adapter_graph(tape: &mut Tape, x_norm: Var, vars: &LayerVars) -> Result<Option<Var>> {
    match vars.adapter {
        AdapterVars::Parallel { down, up } => {
            let h = tape.matmul(x_norm, down)?;
            let h = tape.relu(h);
            Ok(Some(tape.matmul(h, up)?))
        }
        AdapterVars::Lora { .. } => Ok(None),
    }
}

/// Multi-head scaled dot-product attention with output projection.
pub fn attention_graph(tape: &mut Tape, q_src: Var, kv_src: Var, vars: &LayerVars) -> Result<Var> {
    let (wq, wk, wv, wo) = (
        vars.weight(tape, 0)?,
        vars.weight(tape, 1)?,
        vars.weight(tape, 2)?,
        vars.weight(tape, 3)?,
    );
    let d = tape.value(q_src).cols();
    if tape.value(kv_src).cols() != d {
        return Err(CodaError::dim("attention", tape.value(q_src).shape(), tape.value(kv_src).shape()));
    }
    let heads = vars.heads;
    let dh = d / heads;
    let q = tape.matmul(q_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let probs = tape.row_softmax(logits);
        outs.push(tape.matmul(probs, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(joined, wo)
}

fn ffn_graph(tape: &mut Tape, x: Var, vars: &LayerVars) -> Result<Var> {
    let w_in = vars.weight(tape, 4)?;
    let w_out = vars.weight(tape, 5)?;
    let h = tape.matmul(x, w_in)?;
    let h = tape.relu(h);
    tape.matmul(h, w_out)
}

/// Router on the tape: returns the gating column `m` (n×1) and the
/// selection. The hard top-k choice is a constant of the graph.
fn router_graph(
    tape: &mut Tape,
    x_norm: Var,
    vars: &LayerVars,
    k: usize,
    variant: RouterVariant,
    sched: &EpsSchedule,
) -> Result<(Var, SelectionResult)> {
    let n = tape.value(x_norm).rows();
    if k < 1 || k > n {
        return Err(CodaError::Capacity { k, n });
    }
    let lambda = match variant {
        RouterVariant::SoftTopk => {
            let s = tape.matmul(x_norm, vars.router_w)?;
            tape.soft_topk(s, k, *sched)?
        }
        RouterVariant::SigmoidGate => {
            let s = tape.matmul(x_norm, vars.router_w)?;
            tape.sigmoid(s)
        }
        RouterVariant::Truncation => {
            tape.constant(Matrix::column_vector(&router::truncation_lambda(n, k)))
        }
    };
    let selection = router::select(tape.value(lambda).data().to_vec(), k, variant)?;
    let keep: Vec<f64> = selection
        .is_selected()
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    let m = tape.mask(lambda, keep)?;
    Ok((m, selection))
}

/// Records the conditional layer on `tape` with capacity `k`.
pub fn layer_graph(tape: &mut Tape, x: Var, vars: &LayerVars, cfg: &CodaConfig, k: usize) -> Result<LayerGraph> {
    let n = tape.value(x).rows();
    let x_norm = tape.layer_norm(x, vars.ln_att.0, vars.ln_att.1, cfg.layer_norm_eps)?;
    let z_adapter = adapter_graph(tape, x_norm, vars)?;
    let (m, selection) = router_graph(tape, x_norm, vars, k, cfg.router, &cfg.schedule)?;
    let x_routed = tape.gather_rows(x_norm, &selection.selected_indices)?;
    let kv = match cfg.attention {
        AttentionVariant::KToK => x_routed,
        AttentionVariant::KToAll => x_norm,
    };
    let z_bar = attention_graph(tape, x_routed, kv, vars)?;
    let resid = tape.add(x_routed, z_bar)?;
    let h = tape.layer_norm(resid, vars.ln_ffn.0, vars.ln_ffn.1, cfg.layer_norm_eps)?;
    let z_routed = ffn_graph(tape, h, vars)?;
    let both = tape.add(z_bar, z_routed)?;
    let z_cond = tape.scatter_rows(both, &selection.selected_indices, n)?;
    let gated = tape.scale_rows(z_cond, m)?;
    let y = merge(tape, x, z_adapter, gated)?;
    Ok(LayerGraph {
        y,
        x_norm,
        z_adapter,
        z_cond,
        selection,
    })
}

fn merge(tape: &mut Tape, x: Var, z_adapter: Option<Var>, branch: Var) -> Result<Var> {
    let base = match z_adapter {
        Some(z) => tape.add(x, z)?,
        None => x,
    };
    tape.add(base, branch)
}

/// Records the dense parallel-adapter baseline: every token through the
/// frozen branch, no router.
pub fn dense_layer_graph(tape: &mut Tape, x: Var, vars: &LayerVars, cfg: &CodaConfig) -> Result<LayerGraph> {
    let n = tape.value(x).rows();
    let x_norm = tape.layer_norm(x, vars.ln_att.0, vars.ln_att.1, cfg.layer_norm_eps)?;
    let z_adapter = adapter_graph(tape, x_norm, vars)?;
    let z_bar = attention_graph(tape, x_norm, x_norm, vars)?;
    let resid = tape.add(x_norm, z_bar)?;
    let h = tape.layer_norm(resid, vars.ln_ffn.0, vars.ln_ffn.1, cfg.layer_norm_eps)?;
    let z_ffn = ffn_graph(tape, h, vars)?;
    let z_cond = tape.add(z_bar, z_ffn)?;
    let y = merge(tape, x, z_adapter, z_cond)?;
    Ok(LayerGraph {
        y,
        x_norm,
        z_adapter,
        z_cond,
        selection: SelectionResult::all(n),
    })
}

/// Recorded graph kept for [`layer_backward`].
#[derive(Debug, Clone)]
pub struct LayerCache {
    tape: Tape,
    x: Var,
    y: Var,
    vars: LayerVars,
    like: TrainableLayerParams,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub y: Matrix,
    pub selection: SelectionResult,
    pub z_adapter: Matrix,
    pub z_cond: Matrix,
    cache: Option<LayerCache>,
}

impl LayerOutput {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops the recorded graph; a later backward call fails.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub trainable: TrainableLayerParams,
    pub x: Matrix,
}

fn check_input(x: &Matrix, params: &CodaLayerParams, cfg: &CodaConfig) -> Result<()> {
    cfg.validate()?;
    if x.cols() != params.frozen.d() || x.cols() != cfg.d || x.rows() != cfg.n {
        return Err(CodaError::dim("layer_forward", x.shape(), (cfg.n, cfg.d)));
    }
    if params.frozen.heads != cfg.heads {
        return Err(CodaError::Input(format!(
            "weights have {} heads, config {}",
            params.frozen.heads, cfg.heads
        )));
    }
    Ok(())
}

fn finish(tape: Tape, x: Var, vars: LayerVars, graph: LayerGraph, params: &CodaLayerParams) -> LayerOutput {
    let n = tape.value(graph.y).rows();
    let d = tape.value(graph.y).cols();
    let z_adapter = graph
        .z_adapter
        .map(|v| tape.value(v).clone())
        .unwrap_or_else(|| Matrix::zeros(n, d));
    LayerOutput {
        y: tape.value(graph.y).clone(),
        selection: graph.selection,
        z_adapter,
        z_cond: tape.value(graph.z_cond).clone(),
        cache: Some(LayerCache {
            tape,
            x,
            y: graph.y,
            vars,
            like: params.trainable.clone(),
        }),
    }
}

/// One conditional layer forward pass at the configured capacity.
pub fn layer_forward(x: &Matrix, params: &CodaLayerParams, cfg: &CodaConfig) -> Result<LayerOutput> {
    check_input(x, params, cfg)?;
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let vars = LayerVars::register(&mut tape, params);
    let graph = layer_graph(&mut tape, xv, &vars, cfg, cfg.k())?;
    Ok(finish(tape, xv, vars, graph, params))
}

/// Dense parallel-adapter baseline (all tokens, `m = 1`).
pub fn dense_layer_forward(x: &Matrix, params: &CodaLayerParams, cfg: &CodaConfig) -> Result<LayerOutput> {
    check_input(x, params, cfg)?;
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let vars = LayerVars::register(&mut tape, params);
    let graph = dense_layer_graph(&mut tape, xv, &vars, cfg)?;
    Ok(finish(tape, xv, vars, graph, params))
}

/// Gradients of `⟨dy, Y⟩` with respect to the trainable parameters and the
/// layer input. Frozen weights get none.
pub fn layer_backward(out: &LayerOutput, dy: &Matrix) -> Result<LayerGradients> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| CodaError::State("layer_backward called without a forward cache".into()))?;
    let grads = cache.tape.backward(cache.y, dy)?;
    let x_shape = cache.tape.value(cache.x).shape();
    Ok(LayerGradients {
        trainable: cache.vars.gradients(&grads, &cache.like),
        x: grads.get_or_zeros(cache.x, x_shape),
    })
}

/// `F_adapter(X_norm)`. Zero for LoRA, whose deltas act inside the
/// projections.
pub fn adapter_forward(x_norm: &Matrix, adapter: &AdapterWeights) -> Result<Matrix> {
    match adapter {
        AdapterWeights::Parallel { down, up } => {
            let h = crate::tensor::matmul(x_norm, down)?.map(|v| v.max(0.0));
            crate::tensor::matmul(&h, up)
        }
        AdapterWeights::Lora { .. } => Ok(Matrix::zeros(x_norm.rows(), x_norm.cols())),
    }
}

/// Multi-head attention of `q_src` over `kv_src` (`kv_src = q_src` for
/// k-to-k, the full normalized input for k-to-all).
pub fn attention(q_src: &Matrix, kv_src: &Matrix, frozen: &FrozenLayerWeights, adapter: &AdapterWeights) -> Result<Matrix> {
    let d = frozen.d();
    if q_src.cols() != d {
        return Err(CodaError::dim("attention", q_src.shape(), (frozen.wq.rows(), d)));
    }
    if !d.is_multiple_of(frozen.heads) {
        return Err(CodaError::Input(format!("d={d} not divisible by heads={}", frozen.heads)));
    }
    let params = CodaLayerParams {
        frozen: frozen.clone(),
        trainable: TrainableLayerParams {
            adapter: adapter.clone(),
            router: RouterParams::new(vec![0.0; d]),
            ln_att: LayerNormParams::identity(d),
            ln_ffn: LayerNormParams::identity(d),
        },
    };
    let mut tape = Tape::new();
    let q = tape.constant(q_src.clone());
    let kv = tape.constant(kv_src.clone());
    let vars = LayerVars::register(&mut tape, &params);
    let out = attention_graph(&mut tape, q, kv, &vars)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{layer_norm, matmul, row_softmax};

    fn cfg(n: usize, d: usize, heads: usize, k: usize) -> CodaConfig {
        CodaConfig {
            n,
            d,
            heads,
            d_ffn: 2 * d,
            d_adpt: 2,
            capacity: Capacity::Tokens(k),
            schedule: EpsSchedule::SPEECH,
            ..CodaConfig::default()
        }
    }

    fn random_params(c: &CodaConfig, rng: &mut Rng) -> CodaLayerParams {
        let mut p = CodaLayerParams::init(c, rng);
        // non-zero adapter so every path carries signal
        for (_, m) in p.trainable.tensors_mut() {
            *m = m.add(&rng.gaussian_matrix(m.rows(), m.cols(), 0.3)).unwrap();
        }
        p
    }

    #[test]
    fn capacity_ceiling() {
        assert_eq!(capacity_from_reduction(512, 2.667), 192);
        assert_eq!(capacity_from_reduction(512, 3.0), 171);
        assert_eq!(capacity_from_reduction(16, 4.0), 4);
        assert_eq!(capacity_from_reduction(10, 1.0), 10);
        assert_eq!(capacity_from_reduction(3, 100.0), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = CodaConfig::default();
        c.validate().unwrap();
        c.heads = 5;
        assert!(c.validate().is_err());
        let c = CodaConfig {
            capacity: Capacity::Tokens(17),
            ..CodaConfig::default()
        };
        assert!(matches!(c.validate(), Err(CodaError::Capacity { .. })));
        let json = serde_json::to_string(&CodaConfig::default()).unwrap();
        let back: CodaConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, CodaConfig::default());
        let partial: CodaConfig =
            serde_json::from_str(r#"{"n": 8, "capacity": {"tokens": 2}, "adapter": {"kind": "lora", "rank": 2, "alpha": 4.0}}"#)
                .unwrap();
        assert_eq!(partial.k(), 2);
        assert_eq!(partial.adapter, AdapterKind::Lora { rank: 2, alpha: 4.0 });
    }

    #[test]
    fn adapter_forward_cases() {
        let mut rng = Rng::new(1);
        let x = rng.gaussian_matrix(4, 8, 1.0);
        let zero_up = AdapterWeights::Parallel {
            down: rng.gaussian_matrix(8, 2, 1.0),
            up: Matrix::zeros(2, 8),
        };
        assert_eq!(adapter_forward(&x, &zero_up).unwrap().max_abs(), 0.0);

        // down = e_1, up = e_2ᵀ: output column 2 = relu(x[:,1])
        let mut down = Matrix::zeros(8, 1);
        down.set(1, 0, 1.0);
        let mut up = Matrix::zeros(1, 8);
        up.set(0, 2, 1.0);
        let out = adapter_forward(&x, &AdapterWeights::Parallel { down, up }).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                let expect = if c == 2 { x.get(r, 1).max(0.0) } else { 0.0 };
                assert_eq!(out.get(r, c), expect);
            }
        }

        let down = rng.gaussian_matrix(8, 2, 1.0);
        let up = rng.gaussian_matrix(2, 8, 1.0);
        let reference = matmul(&matmul(&x, &down).unwrap().map(|v| v.max(0.0)), &up).unwrap();
        let out = adapter_forward(&x, &AdapterWeights::Parallel { down, up }).unwrap();
        assert!(out.max_abs_diff(&reference) < 1e-12);
        assert!(adapter_forward(&x, &AdapterWeights::Parallel {
            down: Matrix::zeros(7, 2),
            up: Matrix::zeros(2, 8)
        })
        .is_err());
    }

    /// One head at a time, concatenated, then projected.
    fn per_head_reference(q_src: &Matrix, kv: &Matrix, f: &FrozenLayerWeights) -> Matrix {
        let d = f.d();
        let dh = d / f.heads;
        let q = matmul(q_src, &f.wq).unwrap();
        let k = matmul(kv, &f.wk).unwrap();
        let v = matmul(kv, &f.wv).unwrap();
        let mut concat = Matrix::zeros(q_src.rows(), d);
        for h in 0..f.heads {
            let mut scores = Matrix::zeros(q_src.rows(), kv.rows());
            for i in 0..q_src.rows() {
                for j in 0..kv.rows() {
                    let mut dot = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        dot += q.get(i, c) * k.get(j, c);
                    }
                    scores.set(i, j, dot / (dh as f64).sqrt());
                }
            }
            let p = row_softmax(&scores);
            for i in 0..q_src.rows() {
                for c in h * dh..(h + 1) * dh {
                    let mut acc = 0.0;
                    for j in 0..kv.rows() {
                        acc += p.get(i, j) * v.get(j, c);
                    }
                    concat.set(i, c, acc);
                }
            }
        }
        matmul(&concat, &f.wo).unwrap()
    }

    #[test]
    fn attention_matches_per_head_reference() {
        let mut rng = Rng::new(2);
        let f = FrozenLayerWeights::init(8, 16, 2, &mut rng);
        let adapter = AdapterWeights::init(AdapterKind::Parallel, 8, 16, 2, &mut rng);
        let q = rng.gaussian_matrix(3, 8, 1.0);
        let kv = rng.gaussian_matrix(5, 8, 1.0);
        let out = attention(&q, &kv, &f, &adapter).unwrap();
        assert!(out.max_abs_diff(&per_head_reference(&q, &kv, &f)) < 1e-12);
    }

    #[test]
    fn attention_single_key_and_zero_weights() {
        let mut rng = Rng::new(3);
        let f = FrozenLayerWeights::init(4, 8, 2, &mut rng);
        let adapter = AdapterWeights::init(AdapterKind::Parallel, 4, 8, 2, &mut rng);
        let row = rng.gaussian_matrix(1, 4, 1.0);
        let out = attention(&row, &row, &f, &adapter).unwrap();
        let expect = matmul(&matmul(&row, &f.wv).unwrap(), &f.wo).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
        let zero = FrozenLayerWeights::zeros(4, 8, 2);
        assert_eq!(attention(&row, &row, &zero, &adapter).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn lora_merges_deltas_into_projections() {
        let mut rng = Rng::new(4);
        let f = FrozenLayerWeights::init(4, 8, 1, &mut rng);
        let mut adapter = AdapterWeights::init(AdapterKind::LORA_DEFAULT, 4, 8, 2, &mut rng);
        let q = rng.gaussian_matrix(2, 4, 1.0);
        let plain = attention(&q, &q, &f, &AdapterWeights::init(AdapterKind::Parallel, 4, 8, 2, &mut rng)).unwrap();
        // zero-initialized B: no change
        assert!(attention(&q, &q, &f, &adapter).unwrap().max_abs_diff(&plain) < 1e-12);
        let AdapterWeights::Lora { pairs, .. } = &mut adapter else { unreachable!() };
        for p in pairs.iter_mut() {
            p.b = rng.gaussian_matrix(p.b.rows(), p.b.cols(), 1.0);
        }
        let mut merged = f.clone();
        let scale = 16.0 / 4.0;
        for (i, (_, w)) in merged.tensors_mut().into_iter().enumerate() {
            let p = &pairs[i];
            *w = w.add(&matmul(&p.a, &p.b).unwrap().scale(scale)).unwrap();
        }
        let expect = per_head_reference(&q, &q, &merged);
        assert!(attention(&q, &q, &f, &adapter).unwrap().max_abs_diff(&expect) < 1e-10);
        assert_eq!(adapter_forward(&q, &adapter).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn full_capacity_equals_dense() {
        let mut rng = Rng::new(5);
        for attention in [AttentionVariant::KToK, AttentionVariant::KToAll] {
            for adapter in [AdapterKind::Parallel, AdapterKind::LORA_DEFAULT] {
                let c = CodaConfig {
                    attention,
                    adapter,
                    ..cfg(6, 8, 2, 6)
                };
                let p = random_params(&c, &mut rng);
                let x = rng.gaussian_matrix(6, 8, 1.0);
                let cond = layer_forward(&x, &p, &c).unwrap();
                let dense = dense_layer_forward(&x, &p, &c).unwrap();
                assert!(cond.y.max_abs_diff(&dense.y) <= 1e-9);
            }
        }
    }

    #[test]
    fn unselected_rows_skip_conditional_branch() {
        let mut rng = Rng::new(6);
        let c = cfg(8, 8, 2, 3);
        let p = random_params(&c, &mut rng);
        let x = rng.gaussian_matrix(8, 8, 1.0);
        let out = layer_forward(&x, &p, &c).unwrap();
        let chosen = out.selection.is_selected();
        let base = x.add(&out.z_adapter).unwrap();
        for j in 0..8 {
            if !chosen[j] {
                assert_eq!(out.y.row(j), base.row(j));
            }
        }
        assert_eq!(out.y.shape(), x.shape());
    }

    #[test]
    fn selected_rows_match_dense_layer_on_subsequence() {
        let mut rng = Rng::new(7);
        let c = cfg(8, 8, 2, 3);
        let p = random_params(&c, &mut rng);
        let x = rng.gaussian_matrix(8, 8, 1.0);
        let out = layer_forward(&x, &p, &c).unwrap();
        let idx = &out.selection.selected_indices;
        // oracle: normalize, gather, then run a dense branch on the k rows
        let ln = &p.trainable.ln_att;
        let x_norm = layer_norm(&x, ln.gain.data(), ln.bias.data(), c.layer_norm_eps).unwrap();
        let routed = x_norm.gather_rows(idx).unwrap();
        let z_bar = per_head_reference(&routed, &routed, &p.frozen);
        let lf = &p.trainable.ln_ffn;
        let h = layer_norm(&routed.add(&z_bar).unwrap(), lf.gain.data(), lf.bias.data(), c.layer_norm_eps).unwrap();
        let ffn = matmul(&matmul(&h, &p.frozen.ffn_in).unwrap().map(|v| v.max(0.0)), &p.frozen.ffn_out).unwrap();
        let branch = z_bar.add(&ffn).unwrap();
        let gated = out.z_cond.scale_rows(&out.selection.m).unwrap();
        for (i, &j) in idx.iter().enumerate() {
            for c in 0..8 {
                let expect = out.selection.m[j] * branch.get(i, c);
                assert!((gated.get(j, c) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn k_to_all_differs_below_full_capacity() {
        let mut rng = Rng::new(8);
        let base = cfg(8, 8, 2, 3);
        let p = random_params(&base, &mut rng);
        let x = rng.gaussian_matrix(8, 8, 1.0);
        let kk = layer_forward(&x, &p, &base).unwrap();
        let ka = layer_forward(&x, &p, &CodaConfig {
            attention: AttentionVariant::KToAll,
            ..base
        })
        .unwrap();
        assert!(kk.y.max_abs_diff(&ka.y) > 0.0);
    }

    #[test]
    fn backward_cases() {
        let mut rng = Rng::new(9);
        let c = cfg(6, 4, 2, 2);
        let p = random_params(&c, &mut rng);
        let x = rng.gaussian_matrix(6, 4, 1.0);
        let out = layer_forward(&x, &p, &c).unwrap();
        let g = layer_backward(&out, &Matrix::zeros(6, 4)).unwrap();
        assert_eq!(g.trainable.max_abs(), 0.0);

        let trunc = CodaConfig {
            router: RouterVariant::Truncation,
            ..c.clone()
        };
        let out = layer_forward(&x, &p, &trunc).unwrap();
        let g = layer_backward(&out, &rng.gaussian_matrix(6, 4, 1.0)).unwrap();
        assert_eq!(g.trainable.router.w.max_abs(), 0.0);

        for v in [RouterVariant::SoftTopk, RouterVariant::SigmoidGate] {
            let out = layer_forward(&x, &p, &CodaConfig { router: v, ..c.clone() }).unwrap();
            let g = layer_backward(&out, &rng.gaussian_matrix(6, 4, 1.0)).unwrap();
            assert!(g.trainable.router.w.max_abs() > 0.0, "{v:?}");
        }

        let stale = layer_forward(&x, &p, &c).unwrap().without_cache();
        assert!(matches!(layer_backward(&stale, &Matrix::zeros(6, 4)), Err(CodaError::State(_))));
    }

    #[test]
    fn parameter_census() {
        let c = CodaConfig {
            n: 8,
            d: 16,
            heads: 2,
            d_ffn: 32,
            d_adpt: 4,
            ..CodaConfig::default()
        };
        let p = CodaLayerParams::init(&c, &mut Rng::new(1));
        assert_eq!(p.trainable.num_params(), 2 * 16 * 4 + 16 + 4 * 16);
        assert_eq!(p.frozen.num_params(), 4 * 16 * 16 + 2 * 16 * 32);
    }
}
