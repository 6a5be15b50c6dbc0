//! A small hybrid grid classifier trained end to end with hand-written
//! gradients.
//!
//! ```text
//! x0 = W_e p + b_e + pos
//! x_{l+1} = x_l + MHA_l(LN_l(x_l))      ripple below, linearized above
//! logits = W_h mean_t(x_L) + b_h
//! ```

use rayon::prelude::*;

use crate::attention::{
    groups_at, multi_head_ripple, AttentionBackend, MultiHeadOutput, MultiHeadParams, RippleHead, RippleOptions,
};
use crate::error::{arg_err, Result, RippleError};
use crate::featmap::{FeatureMapKind, FeatureMapParams};
use crate::grad::{finite_diff_check, multi_head_vjp, FdMode, FdReport};
use crate::grid::{GridShape, TokenField};
use crate::tasks::Task;
use crate::tensor::{DenseField, Matrix, SeededRng};
use crate::vicinal::{PartitionKind, PartitionScheme};
use crate::weights::{jsd, scheme_weights, SchemeKind, WeightScheme};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub grid: GridShape,
    pub patch_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    /// The lowest `ripple_layers` blocks use ripple attention.
    pub ripple_layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub scheme: SchemeKind,
    pub partition: PartitionScheme,
    pub featmap: FeatureMapKind,
    /// Width of the stick-unit embeddings.
    pub stick_dim: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn for_task(task: &Task, grid: GridShape, seed: u64) -> Self {
        Self {
            grid,
            patch_dim: task.channels(),
            model_dim: 16,
            layers: 2,
            ripple_layers: 1,
            heads: 2,
            classes: task.classes(),
            scheme: SchemeKind::LearnedSbt,
            partition: PartitionScheme::unit_ring(4, 1e-3).expect("valid defaults"),
            featmap: FeatureMapKind::DeterministicAdaptive,
            stick_dim: 8,
            epsilon: crate::attention::DEFAULT_EPSILON,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ripple_layers > self.layers {
            return arg_err(format!("{} ripple layers exceed {} layers", self.ripple_layers, self.layers));
        }
        if self.patch_dim == 0 || self.model_dim == 0 || self.classes == 0 || self.stick_dim == 0 {
            return arg_err("model dimensions must be positive");
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return arg_err(format!("{} heads do not divide model width {}", self.heads, self.model_dim));
        }
        Ok(())
    }

    fn options(&self) -> RippleOptions {
        RippleOptions::new(self.partition).with_epsilon(self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub attn: MultiHeadParams,
    pub ripple: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    /// `model × patch`.
    pub embed: Matrix,
    pub embed_bias: Vec<f64>,
    /// Learned position embedding, `tokens × model`.
    pub pos: Vec<f64>,
    pub blocks: Vec<Block>,
    /// `classes × model`.
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

impl ToyParams {
    pub fn init(cfg: &ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let m = cfg.model_dim;
        let hd = m / cfg.heads;
        let embed = Matrix::gaussian(m, cfg.patch_dim, &mut rng, 1.0 / (cfg.patch_dim as f64).sqrt());
        let pos = rng.normals(cfg.grid.tokens() * m, 0.0, 0.1);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ripple = l < cfg.ripple_layers;
            let mut heads = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                let scheme = if ripple {
                    WeightScheme::init(cfg.scheme, cfg.partition.r_max, cfg.stick_dim, hd, &mut rng, 0.5)
                } else {
                    WeightScheme::uniform()
                };
                let featmap = FeatureMapParams::new(cfg.featmap, hd, hd, hd, &mut rng)?;
                heads.push(RippleHead { scheme, featmap });
            }
            blocks.push(Block {
                ln_gain: vec![1.0; m],
                ln_bias: vec![0.0; m],
                attn: MultiHeadParams::init(m, heads, &mut rng)?,
                ripple,
            });
        }
        Ok(Self {
            embed,
            embed_bias: vec![0.0; m],
            pos,
            blocks,
            head: Matrix::gaussian(cfg.classes, m, &mut rng, 0.1 / (m as f64).sqrt()),
            head_bias: vec![0.0; cfg.classes],
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every trainable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embed.data, &self.embed_bias, &self.pos];
        for b in &self.blocks {
            out.push(&b.ln_gain);
            out.push(&b.ln_bias);
            out.extend(b.attn.tensors());
        }
        out.push(&self.head.data);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embed.data, &mut self.embed_bias, &mut self.pos];
        for b in &mut self.blocks {
            out.push(&mut b.ln_gain);
            out.push(&mut b.ln_bias);
            out.extend(b.attn.tensors_mut());
        }
        out.push(&mut self.head.data);
        out.push(&mut self.head_bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string(), "embed_bias".into(), "pos".into()];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(format!("block{l}.ln_gain"));
            out.push(format!("block{l}.ln_bias"));
            for n in ["wq", "wk", "wv", "wo"] {
                out.push(format!("block{l}.{n}"));
            }
            for (h, head) in b.attn.heads.iter().enumerate() {
                if head.featmap.is_trainable() {
                    for n in ["w1", "w2", "b2"] {
                        out.push(format!("block{l}.head{h}.featmap.{n}"));
                    }
                }
                if head.scheme.params.is_some() {
                    out.push(format!("block{l}.head{h}.stick.embeddings"));
                    out.push(format!("block{l}.head{h}.stick.projection"));
                }
            }
        }
        out.push("head".into());
        out.push("head_bias".into());
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// All parameters concatenated into one vector field.
    pub fn to_field(&self) -> Result<DenseField> {
        let flat: Vec<f64> = self.tensors().concat();
        DenseField::new(vec![flat.len()], flat)
    }

    /// Loads a flat checkpoint into a model of the same architecture.
    pub fn load_field(&mut self, field: &DenseField) -> Result<()> {
        if field.dims() != [self.count()] {
            return arg_err(format!("checkpoint holds {:?} values, model has {}", field.dims(), self.count()));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&field.data()[at..at + t.len()]);
            at += t.len();
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Scales every tensor down so the global L2 norm is at most `max`.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm();
        if n > max {
            for t in self.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= max / n);
            }
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

struct BlockTrace {
    input: TokenField,
    xhat: TokenField,
    inv_std: Vec<f64>,
    normed: TokenField,
    attn: MultiHeadOutput,
}

/// Forward intermediates of one sample.
pub struct SampleTrace {
    input: TokenField,
    blocks: Vec<BlockTrace>,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

fn layer_norm(x: &TokenField, gain: &[f64], bias: &[f64]) -> (TokenField, TokenField, Vec<f64>) {
    let m = x.channels();
    let mut xhat = TokenField::zeros(x.shape(), m);
    let mut out = TokenField::zeros(x.shape(), m);
    let mut inv_std = Vec::with_capacity(x.shape().tokens());
    for t in 0..x.shape().tokens() {
        let v = x.token(t);
        let mean = v.iter().sum::<f64>() / m as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..m {
            let h = (v[c] - mean) * is;
            xhat.token_mut(t)[c] = h;
            out.token_mut(t)[c] = gain[c] * h + bias[c];
        }
    }
    (out, xhat, inv_std)
}

fn layer_norm_vjp(xhat: &[f64], inv_std: f64, gain: &[f64], up: &[f64], grad_x: &mut [f64], grad_gain: &mut [f64], grad_bias: &mut [f64]) {
    let m = xhat.len() as f64;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for c in 0..xhat.len() {
        grad_gain[c] += up[c] * xhat[c];
        grad_bias[c] += up[c];
        let g = up[c] * gain[c];
        mean_g += g;
        mean_gx += g * xhat[c];
    }
    mean_g /= m;
    mean_gx /= m;
    for c in 0..xhat.len() {
        let g = up[c] * gain[c];
        grad_x[c] += inv_std * (g - mean_g - xhat[c] * mean_gx);
    }
}

fn forward_sample(params: &ToyParams, cfg: &ToyModelConfig, x: &TokenField) -> Result<SampleTrace> {
    if x.shape() != cfg.grid || x.channels() != cfg.patch_dim {
        return arg_err(format!(
            "input is {}x{}x{}, model expects {}x{}x{}",
            x.shape().height,
            x.shape().width,
            x.channels(),
            cfg.grid.height,
            cfg.grid.width,
            cfg.patch_dim
        ));
    }
    let m = cfg.model_dim;
    let tokens = cfg.grid.tokens();
    let mut h = TokenField::zeros(cfg.grid, m);
    for t in 0..tokens {
        let o = h.token_mut(t);
        params.embed.matvec_into(x.token(t), o);
        for c in 0..m {
            o[c] += params.embed_bias[c] + params.pos[t * m + c];
        }
    }
    let opts = cfg.options();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (normed, xhat, inv_std) = layer_norm(&h, &b.ln_gain, &b.ln_bias);
        let backend = if b.ripple { AttentionBackend::Dp } else { AttentionBackend::Linearized };
        let attn = multi_head_ripple(&normed, &b.attn, &opts, backend)?;
        let mut next = h.clone();
        for (a, y) in next.data_mut().iter_mut().zip(attn.out.data()) {
            *a += y;
        }
        blocks.push(BlockTrace {
            input: h,
            xhat,
            inv_std,
            normed,
            attn,
        });
        h = next;
    }
    let mut pooled = vec![0.0; m];
    for t in 0..tokens {
        for (p, v) in pooled.iter_mut().zip(h.token(t)) {
            *p += v / tokens as f64;
        }
    }
    let mut logits = params.head.matvec(&pooled);
    for (l, b) in logits.iter_mut().zip(&params.head_bias) {
        *l += b;
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(RippleError::Numeric("non-finite logits".into()));
    }
    Ok(SampleTrace {
        input: x.clone(),
        blocks,
        pooled,
        logits,
    })
}

fn backward_sample(params: &ToyParams, cfg: &ToyModelConfig, trace: &SampleTrace, grad_logits: &[f64]) -> Result<ToyParams> {
    let mut g = params.zeros_like();
    let m = cfg.model_dim;
    let tokens = cfg.grid.tokens();
    g.head.add_outer(1.0, grad_logits, &trace.pooled);
    for (a, b) in g.head_bias.iter_mut().zip(grad_logits) {
        *a += b;
    }
    let grad_pooled = params.head.matvec_t(grad_logits);
    let mut grad_h = TokenField::zeros(cfg.grid, m);
    for t in 0..tokens {
        for (o, p) in grad_h.token_mut(t).iter_mut().zip(&grad_pooled) {
            *o = p / tokens as f64;
        }
    }
    for (l, (b, bt)) in params.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        let (grad_normed, attn_grads) = multi_head_vjp(&bt.normed, &b.attn, &bt.attn, &grad_h)?;
        let gb = &mut g.blocks[l];
        for (a, x) in gb.attn.tensors_mut().into_iter().zip(attn_grads.tensors()) {
            a.copy_from_slice(x);
        }
        for t in 0..tokens {
            layer_norm_vjp(
                bt.xhat.token(t),
                bt.inv_std[t],
                &b.ln_gain,
                grad_normed.token(t),
                grad_h.token_mut(t),
                &mut gb.ln_gain,
                &mut gb.ln_bias,
            );
        }
        let _ = &bt.input;
    }
    for t in 0..tokens {
        let gt = grad_h.token(t);
        g.embed.add_outer(1.0, gt, trace.input.token(t));
        for c in 0..m {
            g.embed_bias[c] += gt[c];
            g.pos[t * m + c] += gt[c];
        }
    }
    Ok(g)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Logits and traces for a batch.
pub fn model_forward(batch: &[TokenField], params: &ToyParams, cfg: &ToyModelConfig) -> Result<(Vec<Vec<f64>>, Vec<SampleTrace>)> {
    let traces: Vec<SampleTrace> = batch
        .par_iter()
        .map(|x| forward_sample(params, cfg, x))
        .collect::<Result<_>>()?;
    Ok((traces.iter().map(|t| t.logits.clone()).collect(), traces))
}

/// Gradients of the mean cross-entropy over the batch, and that loss.
pub fn model_backward(traces: &[SampleTrace], labels: &[usize], params: &ToyParams, cfg: &ToyModelConfig) -> Result<(ToyParams, f64)> {
    if traces.len() != labels.len() || traces.is_empty() {
        return arg_err("one label per traced sample is required");
    }
    if labels.iter().any(|&l| l >= cfg.classes) {
        return arg_err("label out of range");
    }
    let n = traces.len() as f64;
    let per_sample: Vec<ToyParams> = traces
        .par_iter()
        .zip(labels.par_iter())
        .map(|(tr, &y)| {
            let mut d = softmax(&tr.logits);
            d[y] -= 1.0;
            d.iter_mut().for_each(|v| *v /= n);
            backward_sample(params, cfg, tr, &d)
        })
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for g in &per_sample {
        grads.add_assign(g);
    }
    let loss = traces.iter().zip(labels).map(|(t, &y)| cross_entropy(&t.logits, y)).sum::<f64>() / n;
    Ok((grads, loss))
}

/// Mean cross-entropy and accuracy on a labelled set.
pub fn evaluate(inputs: &[TokenField], labels: &[usize], params: &ToyParams, cfg: &ToyModelConfig) -> Result<(f64, f64, Option<f64>)> {
    let (logits, traces) = model_forward(inputs, params, cfg)?;
    let n = inputs.len() as f64;
    let loss = logits.iter().zip(labels).map(|(l, &y)| cross_entropy(l, y)).sum::<f64>() / n;
    let acc = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count() as f64 / n;
    Ok((loss, acc, mean_jsd(&traces, cfg)?))
}

/// Mean Jensen–Shannon divergence between the weights used by every ripple
/// head and fixed exponential decay over the same groups.
pub fn mean_jsd(traces: &[SampleTrace], cfg: &ToyModelConfig) -> Result<Option<f64>> {
    let fixed = WeightScheme::fixed_exponential();
    let mut total = 0.0;
    let mut count = 0usize;
    for tr in traces {
        for bt in tr.blocks.iter().take(cfg.ripple_layers) {
            for head in &bt.attn.heads {
                let Some(tape) = &head.tape else { continue };
                for (t, w) in tape.weights.iter().enumerate() {
                    let g = groups_at(&cfg.partition, cfg.grid, t);
                    let reference = scheme_weights(&fixed, &[], g, cfg.partition.r_max, cfg.partition.tau)?;
                    total += jsd(&w.to_dense(), &reference.to_dense())?;
                    count += 1;
                }
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum SGD.
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => arg_err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &ToyParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind,
            lr,
            momentum,
            step: 0,
            first: zeros.clone(),
            second: if kind == OptimizerKind::Adam { zeros } else { Vec::new() },
        }
    }

    pub fn apply(&mut self, params: &mut ToyParams, grads: &ToyParams) {
        self.step += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((x, m), gv) in p.iter_mut().zip(&mut self.first[i]).zip(g) {
                        *m = self.momentum * *m + gv;
                        *x -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    for (((x, m), v), gv) in p.iter_mut().zip(&mut self.first[i]).zip(&mut self.second[i]).zip(g) {
                        *m = b1 * *m + (1.0 - b1) * gv;
                        *v = b2 * *v + (1.0 - b2) * gv * gv;
                        *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    /// Size of the fixed training set; metrics are computed over all of it.
    pub train_size: usize,
    pub log_every: usize,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 16,
            lr: 0.05,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            train_size: 128,
            log_every: 10,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_jsd: Option<f64>,
}

pub struct TrainState {
    pub params: ToyParams,
    pub optimizer: Optimizer,
    pub step: usize,
    pub loss_history: Vec<f64>,
}

pub struct TrainReport {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.metrics.first().map_or(f64::NAN, |m| m.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.loss)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,accuracy,mean_jsd\n");
        for m in &self.metrics {
            let j = m.mean_jsd.map(|j| format!("{j:.10}")).unwrap_or_default();
            s.push_str(&format!("{},{:.10},{:.6},{}\n", m.step, m.loss, m.accuracy, j));
        }
        s
    }
}

/// Trains on a fixed synthetic set and logs metrics every `log_every` steps
/// (plus the first and last).
pub fn train_demo(task: &Task, cfg: &ToyModelConfig, train: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.batch == 0 || train.train_size == 0 || train.log_every == 0 {
        return arg_err("batch, train_size and log_every must be positive");
    }
    if task.channels() != cfg.patch_dim || task.classes() != cfg.classes {
        return arg_err("model configuration does not match the task");
    }
    let mut rng = SeededRng::new(train.seed);
    let (inputs, labels) = task.dataset(cfg.grid, train.train_size, &mut rng)?;
    let mut params = ToyParams::init(cfg)?;
    let mut optimizer = Optimizer::new(train.optimizer, train.lr, train.momentum, &params);
    let mut metrics = Vec::new();
    let mut loss_history = Vec::with_capacity(train.steps);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();

    let log = |step: usize, params: &ToyParams, metrics: &mut Vec<MetricRow>| -> Result<()> {
        let (loss, accuracy, mean_jsd) = evaluate(&inputs, &labels, params, cfg)?;
        if !loss.is_finite() {
            return Err(RippleError::Numeric(format!("training diverged at step {step}: loss {loss}")));
        }
        metrics.push(MetricRow { step, loss, accuracy, mean_jsd });
        Ok(())
    };
    log(0, &params, &mut metrics)?;
    for step in 1..=train.steps {
        let mut bx = Vec::with_capacity(train.batch);
        let mut by = Vec::with_capacity(train.batch);
        for _ in 0..train.batch.min(inputs.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            bx.push(inputs[order[cursor]].clone());
            by.push(labels[order[cursor]]);
            cursor += 1;
        }
        let (_, traces) = model_forward(&bx, &params, cfg)?;
        let (mut grads, loss) = model_backward(&traces, &by, &params, cfg)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(RippleError::Numeric(format!("training diverged at step {step}: batch loss {loss}")));
        }
        if let Some(max) = train.clip_norm {
            grads.clip_norm(max);
        }
        optimizer.apply(&mut params, &grads);
        if !params.is_finite() {
            return Err(RippleError::Numeric(format!("parameters became non-finite at step {step}")));
        }
        loss_history.push(loss);
        if step % train.log_every == 0 || step == train.steps {
            log(step, &params, &mut metrics)?;
        }
    }
    Ok(TrainReport {
        state: TrainState {
            params,
            optimizer,
            step: train.steps,
            loss_history,
        },
        metrics,
    })
}

/// Finite-difference check of every model parameter on a small batch.
pub fn model_gradcheck(task: &Task, cfg: &ToyModelConfig, batch: usize, step: f64, tolerance: f64) -> Result<Vec<(String, FdReport)>> {
    let params = ToyParams::init(cfg)?;
    let mut rng = SeededRng::new(cfg.seed ^ 0x5eed);
    let (inputs, labels) = task.dataset(cfg.grid, batch, &mut rng)?;
    let (_, traces) = model_forward(&inputs, &params, cfg)?;
    let (grads, _) = model_backward(&traces, &labels, &params, cfg)?;
    let loss = |p: &ToyParams| -> f64 {
        match model_forward(&inputs, p, cfg) {
            Ok((logits, _)) => logits.iter().zip(&labels).map(|(l, &y)| cross_entropy(l, y)).sum::<f64>() / batch as f64,
            Err(_) => f64::NAN,
        }
    };
    let names = params.tensor_names();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (i, (name, a)) in names.into_iter().zip(&analytic).enumerate() {
        let base = work.tensors()[i].to_vec();
        let rep = finite_diff_check(
            |x| {
                work.tensors_mut()[i].copy_from_slice(x);
                loss(&work)
            },
            &base,
            a,
            step,
            tolerance,
            FdMode::Auto {
                cutoff: 256,
                probes: 24,
                seed: cfg.seed,
            },
        )?;
        work.tensors_mut()[i].copy_from_slice(&base);
        out.push((name, rep));
    }
    Ok(out)
}

/// The small configuration used for model-level gradient checks.
pub fn gradcheck_config(task: &Task, seed: u64) -> ToyModelConfig {
    let mut cfg = ToyModelConfig::for_task(task, GridShape::square(4).expect("4x4"), seed);
    cfg.model_dim = 8;
    cfg.partition = PartitionScheme::new(PartitionKind::UnitRing, 2, 1e-3).expect("valid");
    cfg
}
