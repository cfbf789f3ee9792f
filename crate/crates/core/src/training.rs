//! Toy trainer: a planted-relevance classification task, capacity
//! annealing, and SGD with momentum on the trainable parameters only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CodaError, Result};
use crate::flops::{count_flops, FlopsReport};
use crate::layer::{self, Capacity, CodaConfig, CodaLayerParams, LayerVars, TrainableLayerParams};
use crate::router::SelectionResult;
use crate::tensor::{Matrix, Rng};

/// A sequence classification task where only `relevant_count` tokens
/// carry the label.
///
/// Tokens are rows of a random embedding table. Relevant positions get a
/// fixed marker offset added; the label is the sign of a fixed readout
/// (orthogonal to the marker) of the mean relevant embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub n: usize,
    pub d: usize,
    pub vocab: usize,
    pub relevant_count: usize,
    pub seed: u64,
    /// Norm of the marker offset.
    pub marker_scale: f64,
    /// Std of a per-example shift along the marker direction applied to
    /// every token, so relevance is only detectable relative to the other
    /// tokens of the same sequence.
    pub background_scale: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            n: 16,
            d: 32,
            vocab: 64,
            relevant_count: 3,
            seed: 0,
            marker_scale: 4.0,
            background_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Matrix,
    pub label: usize,
    /// Planted positions, ascending.
    pub relevant: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskGenerator {
    spec: SyntheticTask,
    embeddings: Matrix,
    marker: Vec<f64>,
    readout: Vec<f64>,
    rng: Rng,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn make_task(spec: &SyntheticTask) -> Result<TaskGenerator> {
    if spec.n == 0 || spec.d < 2 || spec.vocab == 0 {
        return Err(CodaError::Input(format!("degenerate task {spec:?}")));
    }
    if spec.relevant_count == 0 || spec.relevant_count > spec.n {
        return Err(CodaError::Input(format!(
            "relevant_count {} must be in [1, {}]",
            spec.relevant_count, spec.n
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let embeddings = rng.gaussian_matrix(spec.vocab, spec.d, 1.0);
    let mut marker: Vec<f64> = (0..spec.d).map(|_| rng.normal()).collect();
    let norm = dot(&marker, &marker).sqrt();
    marker.iter_mut().for_each(|v| *v *= spec.marker_scale / norm);
    let mut readout: Vec<f64> = (0..spec.d).map(|_| rng.normal()).collect();
    // Gram-Schmidt against the marker
    let proj = dot(&readout, &marker) / dot(&marker, &marker);
    readout.iter_mut().zip(&marker).for_each(|(r, m)| *r -= proj * m);
    let data_rng = rng.fork(1);
    Ok(TaskGenerator {
        spec: spec.clone(),
        embeddings,
        marker,
        readout,
        rng: data_rng,
    })
}

impl TaskGenerator {
    pub fn spec(&self) -> &SyntheticTask {
        &self.spec
    }

    pub fn readout(&self) -> &[f64] {
        &self.readout
    }

    pub fn marker(&self) -> &[f64] {
        &self.marker
    }

    /// A generator over the same task (embeddings, marker, readout) with an
    /// independent example stream.
    pub fn with_stream(&self, tag: u64) -> TaskGenerator {
        TaskGenerator {
            rng: Rng::new(self.spec.seed).fork(tag.wrapping_add(2)),
            ..self.clone()
        }
    }

    pub fn sample(&mut self) -> Example {
        let TaskGenerator {
            spec,
            embeddings,
            marker,
            readout,
            rng,
        } = self;
        let relevant = rng.distinct(spec.n, spec.relevant_count);
        let mut x = Matrix::zeros(spec.n, spec.d);
        for i in 0..spec.n {
            let tok = rng.below(spec.vocab);
            x.row_mut(i).copy_from_slice(embeddings.row(tok));
        }
        let score: f64 = relevant.iter().map(|&i| dot(x.row(i), readout)).sum::<f64>() / relevant.len() as f64;
        for &i in &relevant {
            x.row_mut(i).iter_mut().zip(marker.iter()).for_each(|(v, m)| *v += m);
        }
        let shift = rng.normal() * spec.background_scale / spec.marker_scale;
        if shift != 0.0 {
            for i in 0..spec.n {
                x.row_mut(i).iter_mut().zip(marker.iter()).for_each(|(v, m)| *v += shift * m);
            }
        }
        Example {
            x,
            label: usize::from(score > 0.0),
            relevant,
        }
    }

    pub fn batch(&mut self, size: usize) -> Vec<Example> {
        (0..size).map(|_| self.sample()).collect()
    }

    /// The planted readout applied to an example's relevant rows.
    pub fn planted_label(&self, ex: &Example) -> usize {
        let score: f64 = ex.relevant.iter().map(|&i| dot(ex.x.row(i), &self.readout)).sum::<f64>()
            / ex.relevant.len() as f64;
        usize::from(score > 0.0)
    }
}

/// Linear capacity annealing from `n` down to `k_end` over the first
/// `warmup_fraction` of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub k_start: usize,
    pub k_end: usize,
    pub warmup_fraction: f64,
}

impl AnnealSchedule {
    pub fn new(n: usize, k_end: usize, warmup_fraction: f64) -> Self {
        Self {
            k_start: n,
            k_end,
            warmup_fraction,
        }
    }
}

pub fn anneal_capacity(step: usize, total: usize, sched: &AnnealSchedule) -> usize {
    let warmup = (sched.warmup_fraction * total as f64).ceil() as usize;
    if step >= warmup || warmup == 0 {
        return sched.k_end;
    }
    let frac = step as f64 / warmup as f64;
    let k = sched.k_start as f64 - frac * (sched.k_start as f64 - sched.k_end as f64);
    (k.round() as usize).clamp(sched.k_end, sched.k_start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_size: usize,
    pub warmup_fraction: f64,
    pub layers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            eval_interval: 100,
            eval_size: 256,
            warmup_fraction: 0.1,
            layers: 2,
            seed: 0,
        }
    }
}

/// Stack of conditional layers with a mean-pooled linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: CodaConfig,
    pub layers: Vec<CodaLayerParams>,
    /// d × 2
    pub head_w: Matrix,
    /// 1 × 2
    pub head_b: Matrix,
}

/// Gradient (or momentum) buffers for everything trainable in an encoder.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub layers: Vec<TrainableLayerParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub layer_vars: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
    pub selections: Vec<SelectionResult>,
    /// λ per layer (the router's normalized scores).
    pub lambdas: Vec<Vec<f64>>,
}

impl Encoder {
    pub fn init(config: &CodaConfig, layers: usize, rng: &mut Rng) -> Self {
        let layers = (0..layers).map(|_| CodaLayerParams::init(config, rng)).collect();
        Self {
            config: config.clone(),
            layers,
            head_w: rng.gaussian_matrix(config.d, 2, 1.0 / (config.d as f64).sqrt()),
            head_b: Matrix::zeros(1, 2),
        }
    }

    pub fn forward(&self, x: &Matrix, k: usize) -> Result<ForwardPass> {
        if x.shape() != (self.config.n, self.config.d) {
            return Err(CodaError::dim("encoder", x.shape(), (self.config.n, self.config.d)));
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        let mut selections = Vec::with_capacity(self.layers.len());
        let mut lambdas = Vec::with_capacity(self.layers.len());
        for params in &self.layers {
            let vars = LayerVars::register(&mut tape, params);
            let graph = layer::layer_graph(&mut tape, h, &vars, &self.config, k)?;
            h = graph.y;
            lambdas.push(graph.selection.lambda.clone());
            selections.push(graph.selection);
            layer_vars.push(vars);
        }
        let pooled = tape.mean_rows(h);
        let head_w = tape.param(self.head_w.clone());
        let head_b = tape.param(self.head_b.clone());
        let logits = tape.matmul(pooled, head_w)?;
        let logits = tape.add_row(logits, head_b)?;
        Ok(ForwardPass {
            tape,
            logits,
            layer_vars,
            head_w,
            head_b,
            selections,
            lambdas,
        })
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            layers: self.layers.iter().map(|l| l.trainable.zeros_like()).collect(),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: Matrix::zeros(1, 2),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| l.trainable.num_params()).sum::<usize>() + self.head_w.len() + self.head_b.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.layers.iter().map(|l| l.frozen.num_params()).sum()
    }

    /// FNV-1a over the bit patterns of every frozen weight.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for (_, m) in layer.frozen.tensors() {
                for v in m.data() {
                    for byte in v.to_bits().to_le_bytes() {
                        h ^= u64::from(byte);
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.trainable.tensors_mut().into_iter().map(|(_, m)| m));
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

impl EncoderGrads {
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut().into_iter().map(|(_, m)| m));
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn router_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.router.w.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Fraction of planted tokens among the routed ones, normalized by the best
/// achievable count `min(relevant, k)`.
pub fn selection_recall(sel: &SelectionResult, relevant: &[usize]) -> f64 {
    let chosen = sel.is_selected();
    let hits = relevant.iter().filter(|&&i| chosen[i]).count();
    hits as f64 / relevant.len().min(sel.k()) as f64
}

#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub layer_recall: Vec<f64>,
}

/// Loss, gradient and metrics for a batch. Gradients are averaged.
pub fn batch_gradients(model: &Encoder, batch: &[Example], k: usize) -> Result<(EncoderGrads, BatchStats)> {
    let mut grads = model.zero_grads();
    let mut stats = BatchStats::default();
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let pass = model.forward(&ex.x, k)?;
        let logits = pass.tape.value(pass.logits).data().to_vec();
        let p = softmax2(&logits);
        stats.loss -= p[ex.label].max(1e-300).ln() * scale;
        if usize::from(p[1] > p[0]) == ex.label {
            stats.accuracy += scale;
        }
        stats.recall += scale * mean_recall(&pass.selections, &ex.relevant);
        let mut seed = Matrix::row_vector(&p);
        seed.data_mut()[ex.label] -= 1.0;
        let seed = seed.scale(scale);
        let g = pass.tape.backward(pass.logits, &seed)?;
        for ((vars, acc), params) in pass.layer_vars.iter().zip(&mut grads.layers).zip(&model.layers) {
            let lg = vars.gradients(&g, &params.trainable);
            for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(lg.tensors()) {
                a.add_assign(b)?;
            }
        }
        grads.head_w.add_assign(&g.get_or_zeros(pass.head_w, model.head_w.shape()))?;
        grads.head_b.add_assign(&g.get_or_zeros(pass.head_b, model.head_b.shape()))?;
    }
    Ok((grads, stats))
}

fn mean_recall(selections: &[SelectionResult], relevant: &[usize]) -> f64 {
    selections.iter().map(|s| selection_recall(s, relevant)).sum::<f64>() / selections.len() as f64
}

pub fn evaluate(model: &Encoder, examples: &[Example], k: usize) -> Result<BatchStats> {
    let mut stats = BatchStats::default();
    let scale = 1.0 / examples.len() as f64;
    for ex in examples {
        let pass = model.forward(&ex.x, k)?;
        let p = softmax2(pass.tape.value(pass.logits).data());
        stats.loss -= p[ex.label].max(1e-300).ln() * scale;
        if usize::from(p[1] > p[0]) == ex.label {
            stats.accuracy += scale;
        }
        stats.layer_recall.resize(pass.selections.len(), 0.0);
        for (acc, sel) in stats.layer_recall.iter_mut().zip(&pass.selections) {
            *acc += scale * selection_recall(sel, &ex.relevant);
        }
    }
    stats.recall = stats.layer_recall.iter().sum::<f64>() / stats.layer_recall.len() as f64;
    Ok(stats)
}

/// SGD with momentum over the trainable parameters.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: EncoderGrads,
}

impl Momentum {
    pub fn new(model: &Encoder, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: model.zero_grads(),
        }
    }

    pub fn step(&mut self, model: &mut Encoder, grads: &mut EncoderGrads) {
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, v), g) in model
            .trainable_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors_mut())
        {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub k: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Mean of `layer_recall`.
    pub selection_recall: f64,
    pub layer_recall: Vec<f64>,
}

impl MetricsRow {
    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("step,k,train_loss,eval_loss,eval_accuracy,selection_recall");
        for l in 0..layers {
            h.push_str(&format!(",recall_layer{l}"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{:.10},{:.10},{:.10},{:.10}",
            self.step, self.k, self.train_loss, self.eval_loss, self.eval_accuracy, self.selection_recall
        );
        for r in &self.layer_recall {
            s.push_str(&format!(",{r:.10}"));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Encoder,
    pub trace: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> &MetricsRow {
        self.trace.last().expect("trace always has an initial row")
    }

    pub fn trace_csv(&self) -> String {
        let mut s = MetricsRow::csv_header(self.model.layers.len());
        s.push('\n');
        for row in &self.trace {
            s.push_str(&row.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Checks the task and model agree on shapes.
fn check_shapes(task: &SyntheticTask, cfg: &CodaConfig) -> Result<()> {
    if task.n != cfg.n || task.d != cfg.d {
        return Err(CodaError::Input(format!(
            "task is {}x{} but model expects {}x{}",
            task.n, task.d, cfg.n, cfg.d
        )));
    }
    cfg.validate()
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Encoder,
    pub optimizer: Momentum,
    pub step: usize,
    /// Training example stream.
    pub stream: TaskGenerator,
}

impl TrainState {
    pub fn new(task: &SyntheticTask, cfg: &CodaConfig, tc: &TrainConfig) -> Result<Self> {
        check_shapes(task, cfg)?;
        let generator = make_task(task)?;
        let mut rng = Rng::new(tc.seed);
        let model = Encoder::init(cfg, tc.layers.max(1), &mut rng);
        Ok(Self {
            optimizer: Momentum::new(&model, tc.lr, tc.momentum),
            model,
            step: 0,
            stream: generator.with_stream(tc.seed.wrapping_mul(31).wrapping_add(1)),
        })
    }

    /// One optimizer step at capacity `k`; returns the batch statistics.
    pub fn advance(&mut self, batch_size: usize, k: usize) -> Result<BatchStats> {
        let batch = self.stream.batch(batch_size.max(1));
        let (mut grads, stats) = batch_gradients(&self.model, &batch, k)?;
        if !stats.loss.is_finite() {
            return Err(CodaError::Divergence {
                step: self.step,
                loss: stats.loss,
            });
        }
        self.optimizer.step(&mut self.model, &mut grads);
        self.step += 1;
        Ok(stats)
    }
}

/// Held-out examples shared by every run on the same task.
pub fn eval_set(task: &SyntheticTask, size: usize) -> Result<Vec<Example>> {
    Ok(make_task(task)?.with_stream(u64::MAX).batch(size.max(1)))
}

pub fn train(task: &SyntheticTask, cfg: &CodaConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::new(task, cfg, tc)?;
    let eval_set = eval_set(task, tc.eval_size)?;
    let anneal = AnnealSchedule::new(cfg.n, cfg.k(), tc.warmup_fraction);
    let row = |state: &TrainState, train_loss: f64| -> Result<MetricsRow> {
        let k = anneal_capacity(state.step, tc.steps, &anneal);
        let ev = evaluate(&state.model, &eval_set, k)?;
        if !ev.loss.is_finite() {
            return Err(CodaError::Divergence {
                step: state.step,
                loss: ev.loss,
            });
        }
        Ok(MetricsRow {
            step: state.step,
            k,
            train_loss,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
            selection_recall: ev.recall,
            layer_recall: ev.layer_recall,
        })
    };

    let mut trace = vec![row(&state, f64::NAN)?];
    let mut window_loss = 0.0;
    let mut window_steps = 0;
    while state.step < tc.steps {
        let k = anneal_capacity(state.step, tc.steps, &anneal);
        window_loss += state.advance(tc.batch_size, k)?.loss;
        window_steps += 1;
        if state.step % tc.eval_interval.max(1) == 0 || state.step == tc.steps {
            trace.push(row(&state, window_loss / window_steps as f64)?);
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    Ok(TrainOutcome {
        model: state.model,
        trace,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub r: f64,
    pub k: usize,
    pub accuracy: f64,
    pub flops: FlopsReport,
}

/// Trains one model per reduction factor and reports final accuracy with
/// the FLOPs of the corresponding layer.
pub fn eval_tradeoff(task: &SyntheticTask, cfg: &CodaConfig, tc: &TrainConfig, r_values: &[f64]) -> Result<Vec<TradeoffRow>> {
    r_values
        .iter()
        .map(|&r| {
            let c = CodaConfig {
                capacity: Capacity::Reduction(r),
                ..cfg.clone()
            };
            let out = train(task, &c, tc)?;
            Ok(TradeoffRow {
                r,
                k: c.k(),
                accuracy: out.final_metrics().eval_accuracy,
                flops: count_flops(&c),
            })
        })
        .collect()
}
