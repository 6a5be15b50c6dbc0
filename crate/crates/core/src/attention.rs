//! Attention variants over token grids.
//!
//! `softmax_attention` and `linearized_attention` are the flat baselines.
//! Ripple attention reweights the linearized sums by vicinal group:
//!
//! ```text
//! y_ij = φ(q_ij)ᵀ Σ_r α_r Σ_{N_r} φ(k) vᵀ  /  (φ(q_ij)ᵀ Σ_r α_r Σ_{N_r} φ(k) + ε)
//! ```
//!
//! [`ripple_naive`] evaluates that literally, which is quadratic in the token
//! count. [`ripple_dp`] reads every group sum out of two summed-area tables,
//! one over the unrolled outer products `φ(k) vᵀ` and one over `φ(k)`.

use rayon::prelude::*;

use crate::error::{arg_err, Result, RippleError};
use crate::featmap::{feature_into, FeatureMapParams};
use crate::grid::{GridShape, TokenField};
use crate::sat::SummedAreaTable;
use crate::tensor::Matrix;
use crate::vicinal::{cheb, max_distance, PartitionKind, PartitionScheme};
use crate::weights::{scheme_weights, SpatialWeights, WeightScheme};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Per-head parameters: the weight scheme and the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RippleHead {
    pub scheme: WeightScheme,
    pub featmap: FeatureMapParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RippleOptions {
    pub partition: PartitionScheme,
    pub epsilon: f64,
    /// Spread queries over the rayon pool. Results are bitwise identical
    /// either way because every query is reduced independently.
    pub parallel: bool,
}

impl RippleOptions {
    pub fn new(partition: PartitionScheme) -> Self {
        Self {
            partition,
            epsilon: DEFAULT_EPSILON,
            parallel: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return arg_err(format!("epsilon must be finite and nonnegative, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTape {
    pub q: TokenField,
    pub k: TokenField,
    pub v: TokenField,
    pub phi_q: TokenField,
    pub phi_k: TokenField,
    /// Over `φ(k) vᵀ`, feature index major, value index minor.
    pub sat_kv: SummedAreaTable,
    pub sat_k: SummedAreaTable,
    pub weights: Vec<SpatialWeights>,
    /// `φ(q)ᵀ Σ α φ(k) + ε` per query.
    pub denominators: Vec<f64>,
    pub out: TokenField,
    /// True when the weights were supplied by the caller rather than
    /// generated from the values, so no gradient flows through them.
    pub fixed_weights: bool,
    pub partition: PartitionScheme,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RippleStats {
    /// Largest number of group reductions performed for a single query,
    /// counting the merged tail as one.
    pub max_group_iterations: usize,
    pub window_fetches: u64,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: TokenField,
    pub tape: Option<AttentionTape>,
    pub stats: RippleStats,
}

fn check_qkv(q: &TokenField, k: &TokenField, v: &TokenField, featmap: &FeatureMapParams) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return arg_err("query, key and value grids must share one shape");
    }
    if q.channels() != k.channels() {
        return arg_err(format!(
            "queries have {} channels, keys {}",
            q.channels(),
            k.channels()
        ));
    }
    if q.channels() != featmap.input_dim() {
        return arg_err(format!(
            "feature map expects {} channels, queries have {}",
            featmap.input_dim(),
            q.channels()
        ));
    }
    Ok(())
}

fn map_tokens(x: &TokenField, featmap: &FeatureMapParams) -> TokenField {
    let dp = featmap.output_dim();
    let mut out = TokenField::zeros(x.shape(), dp);
    for t in 0..x.shape().tokens() {
        feature_into(x.token(t), featmap, out.token_mut(t));
    }
    out
}

fn finish_query(phi_q: &[f64], num: &[f64], den: &[f64], epsilon: f64, out: &mut [f64]) -> Result<f64> {
    let c = out.len();
    let b = phi_q.iter().zip(den).map(|(a, d)| a * d).sum::<f64>() + epsilon;
    if b == 0.0 || !b.is_finite() {
        return Err(RippleError::Numeric(format!("attention denominator is {b}")));
    }
    out.fill(0.0);
    for (d, pq) in phi_q.iter().enumerate() {
        if *pq == 0.0 {
            continue;
        }
        for (o, n) in out.iter_mut().zip(&num[d * c..(d + 1) * c]) {
            *o += pq * n;
        }
    }
    for o in out.iter_mut() {
        *o /= b;
    }
    if out.iter().any(|o| !o.is_finite()) {
        return Err(RippleError::Numeric("attention output is not finite".into()));
    }
    Ok(b)
}

/// Softmax attention `softmax(K q)ᵀ V` with the full score matrix.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols != k.cols || k.rows != v.rows {
        return arg_err("softmax attention shapes do not agree");
    }
    if k.rows == 0 {
        return arg_err("softmax attention needs at least one key");
    }
    let (n, m) = (q.rows, k.rows);
    let mut scores = Matrix::zeros(n, m);
    for i in 0..n {
        let qi = q.row(i);
        for j in 0..m {
            scores.data[i * m + j] = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
        }
    }
    for row in scores.data.chunks_mut(m) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    let mut out = Matrix::zeros(n, v.cols);
    for i in 0..n {
        let oi = &mut out.data[i * v.cols..(i + 1) * v.cols];
        for j in 0..m {
            let p = scores.data[i * m + j];
            for (o, x) in oi.iter_mut().zip(v.row(j)) {
                *o += p * x;
            }
        }
    }
    Ok(out)
}

/// Linearized attention. Keys are streamed once into `Σ φ(k) vᵀ` and
/// `Σ φ(k)`; no per-token features are kept.
pub fn linearized_attention(q: &Matrix, k: &Matrix, v: &Matrix, featmap: &FeatureMapParams, epsilon: f64) -> Result<Matrix> {
    if q.cols != featmap.input_dim() || k.cols != featmap.input_dim() || k.rows != v.rows {
        return arg_err("linearized attention shapes do not agree");
    }
    let (dp, c) = (featmap.output_dim(), v.cols);
    let mut kv = vec![0.0; dp * c];
    let mut ks = vec![0.0; dp];
    let mut phi = vec![0.0; dp];
    for j in 0..k.rows {
        feature_into(k.row(j), featmap, &mut phi);
        let vj = v.row(j);
        for d in 0..dp {
            ks[d] += phi[d];
            for (acc, x) in kv[d * c..(d + 1) * c].iter_mut().zip(vj) {
                *acc += phi[d] * x;
            }
        }
    }
    let mut out = Matrix::zeros(q.rows, c);
    for i in 0..q.rows {
        feature_into(q.row(i), featmap, &mut phi);
        finish_query(&phi, &kv, &ks, epsilon, &mut out.data[i * c..(i + 1) * c])?;
    }
    Ok(out)
}

/// Spatial weights for every query, generated from that query's value vector.
pub fn query_weights(
    scheme: &WeightScheme,
    partition: &PartitionScheme,
    v: &TokenField,
) -> Result<Vec<SpatialWeights>> {
    let shape = v.shape();
    (0..shape.tokens())
        .map(|t| weights_at(scheme, partition, v, t))
        .collect()
}

fn weights_at(scheme: &WeightScheme, partition: &PartitionScheme, v: &TokenField, t: usize) -> Result<SpatialWeights> {
    let shape = v.shape();
    let groups = partition.groups_for_distance(max_distance(shape, shape.pos(t)));
    scheme_weights(scheme, v.token(t), groups, partition.r_max, partition.tau)
}

/// Number of groups for the query at flat index `t`.
pub fn groups_at(partition: &PartitionScheme, shape: GridShape, t: usize) -> usize {
    partition.groups_for_distance(max_distance(shape, shape.pos(t)))
}

fn check_weights(weights: &[SpatialWeights], partition: &PartitionScheme, shape: GridShape) -> Result<()> {
    if weights.len() != shape.tokens() {
        return arg_err(format!("{} weight vectors for {} queries", weights.len(), shape.tokens()));
    }
    for (t, w) in weights.iter().enumerate() {
        let g = groups_at(partition, shape, t);
        if w.num_groups() != g {
            return arg_err(format!("query {t} has {g} groups but its weights cover {}", w.num_groups()));
        }
    }
    Ok(())
}

/// Literal evaluation: every key is binned into its group, group sums of
/// `φ(k) vᵀ` and `φ(k)` are formed and weighted.
pub fn ripple_naive(q: &TokenField, k: &TokenField, v: &TokenField, head: &RippleHead, opts: &RippleOptions) -> Result<AttentionOutput> {
    let weights = query_weights(&head.scheme, &opts.partition, v)?;
    ripple_naive_with_weights(q, k, v, &head.featmap, &weights, opts)
}

pub fn ripple_naive_with_weights(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    featmap: &FeatureMapParams,
    weights: &[SpatialWeights],
    opts: &RippleOptions,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, featmap)?;
    opts.validate()?;
    let shape = q.shape();
    check_weights(weights, &opts.partition, shape)?;
    let (dp, c) = (featmap.output_dim(), v.channels());
    let phi_q = map_tokens(q, featmap);
    let phi_k = map_tokens(k, featmap);
    let mut out = TokenField::zeros(shape, c);
    let mut max_iters = 0;
    for t in 0..shape.tokens() {
        let qp = shape.pos(t);
        let w = &weights[t];
        let g = w.num_groups();
        let mut group_kv = vec![0.0; g * dp * c];
        let mut group_k = vec![0.0; g * dp];
        for m in 0..shape.tokens() {
            let r = opts.partition.group_of_distance(cheb(qp, shape.pos(m)));
            let (pk, vm) = (phi_k.token(m), v.token(m));
            for d in 0..dp {
                group_k[r * dp + d] += pk[d];
                let row = &mut group_kv[(r * dp + d) * c..(r * dp + d + 1) * c];
                for (acc, x) in row.iter_mut().zip(vm) {
                    *acc += pk[d] * x;
                }
            }
        }
        let mut num = vec![0.0; dp * c];
        let mut den = vec![0.0; dp];
        for r in 0..g {
            let a = w.alpha(r);
            for (n, x) in num.iter_mut().zip(&group_kv[r * dp * c..(r + 1) * dp * c]) {
                *n += a * x;
            }
            for (n, x) in den.iter_mut().zip(&group_k[r * dp..(r + 1) * dp]) {
                *n += a * x;
            }
        }
        max_iters = max_iters.max(g);
        finish_query(phi_q.token(t), &num, &den, opts.epsilon, out.token_mut(t))?;
    }
    Ok(AttentionOutput {
        out,
        tape: None,
        stats: RippleStats {
            max_group_iterations: max_iters,
            window_fetches: 0,
        },
    })
}

/// Scratch buffers for one query of the dynamic program.
pub(crate) struct DpScratch {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    prev_kv: Vec<f64>,
    prev_k: Vec<f64>,
    cur_kv: Vec<f64>,
    cur_k: Vec<f64>,
}

impl DpScratch {
    pub fn new(kv: usize, k: usize) -> Self {
        Self {
            num: vec![0.0; kv],
            den: vec![0.0; k],
            prev_kv: vec![0.0; kv],
            prev_k: vec![0.0; k],
            cur_kv: vec![0.0; kv],
            cur_k: vec![0.0; k],
        }
    }
}

/// Weighted group sums for query `t`, ascending in `r` with the previous
/// window carried over so each group costs one window lookup per table.
/// Returns the number of group iterations.
pub(crate) fn dp_accumulate(
    t: usize,
    w: &SpatialWeights,
    partition: &PartitionScheme,
    sat_kv: &SummedAreaTable,
    sat_k: &SummedAreaTable,
    s: &mut DpScratch,
) -> usize {
    s.num.fill(0.0);
    s.den.fill(0.0);
    s.prev_kv.fill(0.0);
    s.prev_k.fill(0.0);
    let hat = w.hat_r();
    for (r, &a) in w.head().iter().enumerate() {
        let (_, hi) = partition.band(r);
        s.cur_kv.fill(0.0);
        s.cur_k.fill(0.0);
        sat_kv.window_acc(t, Some(hi), 1.0, &mut s.cur_kv);
        sat_k.window_acc(t, Some(hi), 1.0, &mut s.cur_k);
        for ((n, c), p) in s.num.iter_mut().zip(&s.cur_kv).zip(&s.prev_kv) {
            *n += a * (c - p);
        }
        for ((n, c), p) in s.den.iter_mut().zip(&s.cur_k).zip(&s.prev_k) {
            *n += a * (c - p);
        }
        std::mem::swap(&mut s.prev_kv, &mut s.cur_kv);
        std::mem::swap(&mut s.prev_k, &mut s.cur_k);
    }
    if w.has_tail() {
        let a = w.merged_weight();
        for ((n, tot), p) in s.num.iter_mut().zip(sat_kv.total()).zip(&s.prev_kv) {
            *n += a * (tot - p);
        }
        for ((n, tot), p) in s.den.iter_mut().zip(sat_k.total()).zip(&s.prev_k) {
            *n += a * (tot - p);
        }
        hat + 1
    } else {
        hat
    }
}

pub(crate) fn build_sats(phi_k: &TokenField, v: &TokenField) -> (SummedAreaTable, SummedAreaTable) {
    let (dp, c) = (phi_k.channels(), v.channels());
    let sat_kv = SummedAreaTable::from_fn(phi_k.shape(), dp * c, |t, out| {
        let (pk, vt) = (phi_k.token(t), v.token(t));
        for d in 0..dp {
            for (o, x) in out[d * c..(d + 1) * c].iter_mut().zip(vt) {
                *o = pk[d] * x;
            }
        }
    });
    let sat_k = SummedAreaTable::build(phi_k);
    (sat_kv, sat_k)
}

/// Whether to keep the forward intermediates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    Keep,
    Discard,
}

/// Ripple attention through summed-area tables.
pub fn ripple_dp(q: &TokenField, k: &TokenField, v: &TokenField, head: &RippleHead, opts: &RippleOptions) -> Result<AttentionOutput> {
    ripple_dp_mode(q, k, v, head, opts, TapeMode::Keep)
}

/// As [`ripple_dp`]; with `TapeMode::Discard` the weights are generated
/// query by query and dropped, so memory does not depend on `R_max`.
pub fn ripple_dp_mode(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    head: &RippleHead,
    opts: &RippleOptions,
    mode: TapeMode,
) -> Result<AttentionOutput> {
    match mode {
        TapeMode::Keep => {
            let weights = query_weights(&head.scheme, &opts.partition, v)?;
            dp_core(q, k, v, &head.featmap, WeightSource::Given(weights, false), opts, mode)
        }
        TapeMode::Discard => dp_core(q, k, v, &head.featmap, WeightSource::Scheme(&head.scheme), opts, mode),
    }
}

/// DP forward with caller-supplied weights (treated as constants by the backward pass).
pub fn ripple_dp_with_weights(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    featmap: &FeatureMapParams,
    weights: Vec<SpatialWeights>,
    opts: &RippleOptions,
) -> Result<AttentionOutput> {
    dp_core(q, k, v, featmap, WeightSource::Given(weights, true), opts, TapeMode::Keep)
}

/// Ripple attention over dyadic distance bands.
pub fn ripple_dp_dyadic(q: &TokenField, k: &TokenField, v: &TokenField, head: &RippleHead, opts: &RippleOptions) -> Result<AttentionOutput> {
    if opts.partition.kind != PartitionKind::Dyadic {
        return arg_err("ripple_dp_dyadic needs a dyadic partition");
    }
    ripple_dp(q, k, v, head, opts)
}

enum WeightSource<'a> {
    /// Precomputed weights and whether they are fixed constants.
    Given(Vec<SpatialWeights>, bool),
    Scheme(&'a WeightScheme),
}

fn dp_core(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    featmap: &FeatureMapParams,
    source: WeightSource<'_>,
    opts: &RippleOptions,
    mode: TapeMode,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, featmap)?;
    opts.validate()?;
    let shape = q.shape();
    if let WeightSource::Given(w, _) = &source {
        check_weights(w, &opts.partition, shape)?;
    }
    let (dp, c) = (featmap.output_dim(), v.channels());
    let phi_q = map_tokens(q, featmap);
    let phi_k = map_tokens(k, featmap);
    let (sat_kv, sat_k) = build_sats(&phi_k, v);

    let run_query = |t: usize, s: &mut DpScratch, out: &mut [f64]| -> Result<(f64, usize)> {
        let owned;
        let w = match &source {
            WeightSource::Given(ws, _) => &ws[t],
            WeightSource::Scheme(scheme) => {
                owned = weights_at(scheme, &opts.partition, v, t)?;
                &owned
            }
        };
        let iters = dp_accumulate(t, w, &opts.partition, &sat_kv, &sat_k, s);
        let b = finish_query(phi_q.token(t), &s.num, &s.den, opts.epsilon, out)?;
        Ok((b, iters))
    };

    let mut out = TokenField::zeros(shape, c);
    let mut denominators = vec![0.0; shape.tokens()];
    let mut iters = vec![0usize; shape.tokens()];
    if opts.parallel {
        out.data_mut()
            .par_chunks_mut(c)
            .zip(denominators.par_iter_mut())
            .zip(iters.par_iter_mut())
            .enumerate()
            .try_for_each_init(
                || DpScratch::new(dp * c, dp),
                |s, (t, ((o, b), it))| -> Result<()> {
                    (*b, *it) = run_query(t, s, o)?;
                    Ok(())
                },
            )?;
    } else {
        let mut s = DpScratch::new(dp * c, dp);
        for t in 0..shape.tokens() {
            (denominators[t], iters[t]) = run_query(t, &mut s, out.token_mut(t))?;
        }
    }
    let stats = RippleStats {
        max_group_iterations: iters.iter().copied().max().unwrap_or(0),
        window_fetches: 2 * iters.iter().map(|&i| i as u64).sum::<u64>(),
    };
    let tape = match (mode, source) {
        (TapeMode::Keep, WeightSource::Given(weights, fixed)) => Some(AttentionTape {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            phi_q,
            phi_k,
            sat_kv,
            sat_k,
            weights,
            denominators,
            out: out.clone(),
            fixed_weights: fixed,
            partition: opts.partition,
            epsilon: opts.epsilon,
        }),
        _ => None,
    };
    Ok(AttentionOutput { out, tape, stats })
}

/// Per query, softmax attention inside each group, mixed by `α`.
/// Groups with no members contribute nothing.
pub fn ripple_softmax_reference(
    q: &TokenField,
    k: &TokenField,
    v: &TokenField,
    weights: &[SpatialWeights],
    partition: &PartitionScheme,
) -> Result<TokenField> {
    if partition.kind != PartitionKind::UnitRing {
        return arg_err("the ripple-softmax reference is defined for unit rings");
    }
    if q.shape() != k.shape() || q.shape() != v.shape() || q.channels() != k.channels() {
        return arg_err("query, key and value grids do not agree");
    }
    let shape = q.shape();
    check_weights(weights, partition, shape)?;
    let c = v.channels();
    let mut out = TokenField::zeros(shape, c);
    for t in 0..shape.tokens() {
        let qp = shape.pos(t);
        let g = weights[t].num_groups();
        let scores: Vec<f64> = (0..shape.tokens())
            .map(|m| q.token(t).iter().zip(k.token(m)).map(|(a, b)| a * b).sum())
            .collect();
        let groups: Vec<usize> = (0..shape.tokens())
            .map(|m| partition.group_of_distance(cheb(qp, shape.pos(m))))
            .collect();
        let mut mx = vec![f64::NEG_INFINITY; g];
        for (s, &r) in scores.iter().zip(&groups) {
            mx[r] = mx[r].max(*s);
        }
        let mut z = vec![0.0; g];
        let mut acc = vec![0.0; g * c];
        for m in 0..shape.tokens() {
            let r = groups[m];
            let e = (scores[m] - mx[r]).exp();
            z[r] += e;
            for (a, x) in acc[r * c..(r + 1) * c].iter_mut().zip(v.token(m)) {
                *a += e * x;
            }
        }
        let o = out.token_mut(t);
        for r in 0..g {
            if z[r] == 0.0 {
                continue;
            }
            let a = weights[t].alpha(r) / z[r];
            for (oo, x) in o.iter_mut().zip(&acc[r * c..(r + 1) * c]) {
                *oo += a * x;
            }
        }
    }
    Ok(out)
}

/// Which kernel a multi-head layer runs per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionBackend {
    /// Summed-area-table ripple attention.
    Dp,
    /// Enumerating oracle; no tape.
    Naive,
    /// Plain linearized attention, expressed as ripple attention with every
    /// group weighted by one.
    Linearized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    /// `model × model` projections; rows are output channels.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: Vec<RippleHead>,
}

impl RippleHead {
    /// Trainable tensors: feature map first, then stick parameters.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.featmap.tensors();
        if let Some(p) = &self.scheme.params {
            out.push(&p.unit_embeddings.data);
            out.push(&p.value_projection.data);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.featmap.tensors_mut();
        if let Some(p) = &mut self.scheme.params {
            out.push(&mut p.unit_embeddings.data);
            out.push(&mut p.value_projection.data);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut scheme = self.scheme.clone();
        scheme.params = scheme.params.as_ref().map(|p| p.zeros_like());
        Self {
            scheme,
            featmap: self.featmap.zeros_like(),
        }
    }
}

impl MultiHeadParams {
    /// Gaussian projections with standard deviation `1/√model`.
    pub fn init(model_dim: usize, heads: Vec<RippleHead>, rng: &mut crate::tensor::SeededRng) -> Result<Self> {
        let std = 1.0 / (model_dim as f64).sqrt();
        let p = Self {
            wq: Matrix::gaussian(model_dim, model_dim, rng, std),
            wk: Matrix::gaussian(model_dim, model_dim, rng, std),
            wv: Matrix::gaussian(model_dim, model_dim, rng, std),
            wo: Matrix::gaussian(model_dim, model_dim, rng, std),
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            heads: self.heads.iter().map(RippleHead::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.wq.data, &self.wk.data, &self.wv.data, &self.wo.data];
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.wq.data, &mut self.wk.data, &mut self.wv.data, &mut self.wo.data];
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_dim();
        if self.heads.is_empty() || m % self.heads.len() != 0 {
            return arg_err(format!("{} heads do not divide model width {m}", self.heads.len()));
        }
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.rows != m || w.cols != m {
                return arg_err(format!("projection is {}x{}, expected {m}x{m}", w.rows, w.cols));
            }
        }
        let hd = self.head_dim();
        if self.heads.iter().any(|h| h.featmap.input_dim() != hd) {
            return arg_err(format!("every head's feature map must take {hd} inputs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    pub out: TokenField,
    /// Concatenated head outputs before the output projection.
    pub concat: TokenField,
    pub heads: Vec<AttentionOutput>,
}

/// Applies `w` to every token.
pub fn project(x: &TokenField, w: &Matrix) -> TokenField {
    let mut out = TokenField::zeros(x.shape(), w.rows);
    for t in 0..x.shape().tokens() {
        w.matvec_into(x.token(t), out.token_mut(t));
    }
    out
}

/// Channels `start..start + len` of every token.
pub fn slice_channels(x: &TokenField, start: usize, len: usize) -> TokenField {
    let mut out = TokenField::zeros(x.shape(), len);
    for t in 0..x.shape().tokens() {
        out.token_mut(t).copy_from_slice(&x.token(t)[start..start + len]);
    }
    out
}

pub fn multi_head_ripple(
    x: &TokenField,
    params: &MultiHeadParams,
    opts: &RippleOptions,
    backend: AttentionBackend,
) -> Result<MultiHeadOutput> {
    params.validate()?;
    if x.channels() != params.model_dim() {
        return arg_err(format!(
            "input has {} channels, layer expects {}",
            x.channels(),
            params.model_dim()
        ));
    }
    let (q, k, v) = (project(x, &params.wq), project(x, &params.wk), project(x, &params.wv));
    let hd = params.head_dim();
    let shape = x.shape();
    let mut concat = TokenField::zeros(shape, params.model_dim());
    let mut heads = Vec::with_capacity(params.heads.len());
    for (h, head) in params.heads.iter().enumerate() {
        let (qh, kh, vh) = (slice_channels(&q, h * hd, hd), slice_channels(&k, h * hd, hd), slice_channels(&v, h * hd, hd));
        let res = match backend {
            AttentionBackend::Dp => ripple_dp(&qh, &kh, &vh, head, opts)?,
            AttentionBackend::Naive => ripple_naive(&qh, &kh, &vh, head, opts)?,
            AttentionBackend::Linearized => {
                let ones = (0..shape.tokens())
                    .map(|t| SpatialWeights::ones(groups_at(&opts.partition, shape, t)))
                    .collect();
                ripple_dp_with_weights(&qh, &kh, &vh, &head.featmap, ones, opts)?
            }
        };
        for t in 0..shape.tokens() {
            concat.token_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(res.out.token(t));
        }
        heads.push(res);
    }
    let out = project(&concat, &params.wo);
    Ok(MultiHeadOutput { out, concat, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmap::FeatureMapKind;
    use crate::grid::{rel_error, Pos};
    use crate::tensor::SeededRng;
    use crate::weights::SchemeKind;

    pub(crate) fn instance(h: usize, w: usize, d: usize, seed: u64) -> (TokenField, TokenField, TokenField) {
        let shape = GridShape::new(h, w).unwrap();
        let mut rng = SeededRng::new(seed);
        (
            TokenField::gaussian(shape, d, &mut rng, 1.0),
            TokenField::gaussian(shape, d, &mut rng, 1.0),
            TokenField::gaussian(shape, d, &mut rng, 1.0),
        )
    }

    fn head(kind: SchemeKind, r_max: usize, d: usize, seed: u64) -> RippleHead {
        let mut rng = SeededRng::new(seed);
        RippleHead {
            scheme: WeightScheme::init(kind, r_max, 4, d, &mut rng, 1.0),
            featmap: FeatureMapParams::adaptive(d, d, d, &mut rng).unwrap(),
        }
    }

    fn positive(mut hd: RippleHead) -> RippleHead {
        hd.featmap.make_strictly_positive();
        hd
    }

    fn opts(r_max: usize) -> RippleOptions {
        RippleOptions::new(PartitionScheme::unit_ring(r_max, 0.01).unwrap())
    }

    #[test]
    fn softmax_examples() {
        let q = Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 3.0]).unwrap();
        let k = Matrix::from_vec(1, 2, vec![0.3, 0.7]).unwrap();
        let v = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = softmax_attention(&q, &k, &v).unwrap();
        assert_eq!(out.data, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let k2 = Matrix::from_vec(2, 2, vec![0.3, 0.7, 0.3, 0.7]).unwrap();
        let v2 = Matrix::from_vec(2, 1, vec![1.0, 5.0]).unwrap();
        let out = softmax_attention(&q, &k2, &v2).unwrap();
        assert!((out.data[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn softmax_matches_double_loop() {
        let mut rng = SeededRng::new(4);
        let q = Matrix::gaussian(5, 3, &mut rng, 1.0);
        let k = Matrix::gaussian(5, 3, &mut rng, 1.0);
        let v = Matrix::gaussian(5, 2, &mut rng, 1.0);
        let got = softmax_attention(&q, &k, &v).unwrap();
        for i in 0..5 {
            let e: Vec<f64> = (0..5)
                .map(|j| (0..3).map(|d| q.get(i, d) * k.get(j, d)).sum::<f64>().exp())
                .collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                let want: f64 = (0..5).map(|j| e[j] / z * v.get(j, c)).sum();
                assert!((got.get(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearized_matches_unfactored_form() {
        let mut rng = SeededRng::new(9);
        let fm = FeatureMapParams::adaptive(3, 4, 5, &mut rng).unwrap();
        let q = Matrix::gaussian(6, 3, &mut rng, 1.0);
        let k = Matrix::gaussian(7, 3, &mut rng, 1.0);
        let v = Matrix::gaussian(7, 2, &mut rng, 1.0);
        let got = linearized_attention(&q, &k, &v, &fm, 0.0).unwrap();
        let phi = |x: &[f64]| crate::featmap::feature_forward(x, &fm).unwrap();
        for i in 0..6 {
            let pq = phi(q.row(i));
            let s: Vec<f64> = (0..7).map(|j| crate::tensor::dot(&pq, &phi(k.row(j)))).collect();
            let z: f64 = s.iter().sum();
            for c in 0..2 {
                let want: f64 = (0..7).map(|j| s[j] / z * v.get(j, c)).sum();
                assert!((got.get(i, c) - want).abs() < 1e-12);
            }
        }
        // Single key, no stabilizer: the ratio cancels.
        let one = linearized_attention(&q, &Matrix::from_vec(1, 3, k.row(0).to_vec()).unwrap(), &Matrix::from_vec(1, 2, v.row(0).to_vec()).unwrap(), &fm, 0.0);
        if let Ok(one) = one {
            for i in 0..6 {
                assert!((one.get(i, 0) - v.get(0, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearized_is_permutation_invariant_in_keys() {
        let mut rng = SeededRng::new(10);
        let fm = FeatureMapParams::adaptive(3, 3, 3, &mut rng).unwrap();
        let q = Matrix::gaussian(4, 3, &mut rng, 1.0);
        let k = Matrix::gaussian(6, 3, &mut rng, 1.0);
        let v = Matrix::gaussian(6, 2, &mut rng, 1.0);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let kp = Matrix::from_vec(6, 3, perm.iter().flat_map(|&j| k.row(j).to_vec()).collect()).unwrap();
        let vp = Matrix::from_vec(6, 2, perm.iter().flat_map(|&j| v.row(j).to_vec()).collect()).unwrap();
        let a = linearized_attention(&q, &k, &v, &fm, 1e-6).unwrap();
        let b = linearized_attention(&q, &kp, &vp, &fm, 1e-6).unwrap();
        assert!(rel_error(&a.data, &b.data) < 1e-13);
    }

    #[test]
    fn zero_denominator_is_a_numeric_error() {
        let mut fm = FeatureMapParams::adaptive(2, 2, 2, &mut SeededRng::new(1)).unwrap();
        fm.w2 = Matrix::zeros(2, 4);
        fm.b2 = vec![-1.0, -1.0];
        let q = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let err = linearized_attention(&q, &q, &q, &fm, 0.0).unwrap_err();
        assert!(matches!(err, RippleError::Numeric(_)));
    }

    #[test]
    fn dp_matches_naive_across_schemes() {
        for kind in SchemeKind::ALL {
            for (h, w, seed) in [(6, 6, 1), (9, 9, 2), (4, 7, 3), (1, 5, 4)] {
                let (q, k, v) = instance(h, w, 3, seed);
                let hd = head(kind, 3, 3, seed + 100);
                let o = opts(3);
                let a = ripple_dp(&q, &k, &v, &hd, &o).unwrap();
                let b = ripple_naive(&q, &k, &v, &hd, &o).unwrap();
                let err = rel_error(a.out.data(), b.out.data());
                assert!(err < 1e-10, "{kind:?} {h}x{w}: {err}");
            }
        }
    }

    #[test]
    fn dyadic_dp_matches_naive() {
        let (q, k, v) = instance(9, 9, 3, 5);
        let hd = head(SchemeKind::LearnedSbt, 3, 3, 6);
        let o = RippleOptions::new(PartitionScheme::dyadic(3, 0.01).unwrap());
        let a = ripple_dp_dyadic(&q, &k, &v, &hd, &o).unwrap();
        let b = ripple_naive(&q, &k, &v, &hd, &o).unwrap();
        assert!(rel_error(a.out.data(), b.out.data()) < 1e-10);
        assert!(ripple_dp_dyadic(&q, &k, &v, &hd, &opts(3)).is_err());
    }

    #[test]
    fn single_token_returns_its_value() {
        let (q, k, v) = instance(1, 1, 3, 7);
        for kind in SchemeKind::ALL {
            let hd = positive(head(kind, 2, 3, 8));
            let o = opts(2).with_epsilon(0.0);
            let a = ripple_dp(&q, &k, &v, &hd, &o).unwrap();
            assert!(rel_error(a.out.data(), v.data()) < 1e-14);
            let w = query_weights(&hd.scheme, &o.partition, &v).unwrap();
            let s = ripple_softmax_reference(&q, &k, &v, &w, &o.partition).unwrap();
            assert!(rel_error(s.data(), v.data()) < 1e-14);
        }
    }

    #[test]
    fn self_only_weights_return_values() {
        let (q, k, v) = instance(5, 6, 3, 11);
        let fm = positive(head(SchemeKind::Uniform, 2, 3, 1)).featmap;
        let o = opts(2).with_epsilon(0.0);
        let weights: Vec<SpatialWeights> = (0..30)
            .map(|t| {
                let g = groups_at(&o.partition, q.shape(), t);
                let mut d = vec![0.0; g];
                d[0] = 1.0;
                SpatialWeights::from_dense(&d).unwrap()
            })
            .collect();
        let a = ripple_dp_with_weights(&q, &k, &v, &fm, weights.clone(), &o).unwrap();
        assert!(rel_error(a.out.data(), v.data()) < 1e-13);
        let s = ripple_softmax_reference(&q, &k, &v, &weights, &o.partition).unwrap();
        assert!(rel_error(s.data(), v.data()) < 1e-14);
    }

    #[test]
    fn uniform_weights_match_linearized() {
        let (q, k, v) = instance(6, 5, 3, 12);
        let hd = positive(head(SchemeKind::Uniform, 3, 3, 2));
        let o = opts(3).with_epsilon(0.0);
        let a = ripple_dp(&q, &k, &v, &hd, &o).unwrap();
        let lin = linearized_attention(&q.to_matrix(), &k.to_matrix(), &v.to_matrix(), &hd.featmap, 0.0).unwrap();
        assert!(rel_error(a.out.data(), &lin.data) < 1e-12);
    }

    #[test]
    fn parallel_and_serial_are_bitwise_equal() {
        let (q, k, v) = instance(9, 8, 3, 13);
        let hd = head(SchemeKind::LearnedSbt, 4, 3, 3);
        let a = ripple_dp(&q, &k, &v, &hd, &opts(4)).unwrap();
        let b = ripple_dp(&q, &k, &v, &hd, &opts(4).with_parallel(true)).unwrap();
        assert_eq!(a.out.data(), b.out.data());
        let c = ripple_dp_mode(&q, &k, &v, &hd, &opts(4), TapeMode::Discard).unwrap();
        assert_eq!(a.out.data(), c.out.data());
        assert!(c.tape.is_none());
    }

    #[test]
    fn softmax_reference_matches_enumeration() {
        let (q, k, v) = instance(5, 5, 2, 14);
        let hd = head(SchemeKind::FixedExponential, 3, 2, 4);
        let o = opts(3);
        let w = query_weights(&hd.scheme, &o.partition, &v).unwrap();
        let got = ripple_softmax_reference(&q, &k, &v, &w, &o.partition).unwrap();
        let shape = q.shape();
        let qp = Pos::new(2, 4);
        let t = shape.flat(qp);
        let mut want = [0.0; 2];
        for r in 0..w[t].num_groups() {
            let members = crate::vicinal::group_members(&o.partition, shape, qp, r).unwrap();
            let e: Vec<f64> = members.iter().map(|p| crate::tensor::dot(q.token(t), k.at(*p)).exp()).collect();
            let z: f64 = e.iter().sum();
            for (p, ei) in members.iter().zip(&e) {
                for c in 0..2 {
                    want[c] += w[t].alpha(r) * ei / z * v.at(*p)[c];
                }
            }
        }
        assert!(rel_error(got.token(t), &want) < 1e-12);
    }

    #[test]
    fn multi_head_matches_per_head_loop() {
        let shape = GridShape::new(8, 8).unwrap();
        let mut rng = SeededRng::new(15);
        let x = TokenField::gaussian(shape, 8, &mut rng, 1.0);
        let m = 8;
        let params = MultiHeadParams {
            wq: Matrix::gaussian(m, m, &mut rng, 0.4),
            wk: Matrix::gaussian(m, m, &mut rng, 0.4),
            wv: Matrix::gaussian(m, m, &mut rng, 0.4),
            wo: Matrix::gaussian(m, m, &mut rng, 0.4),
            heads: (0..4).map(|h| head(SchemeKind::LearnedSbt, 3, 2, 20 + h)).collect(),
        };
        let o = opts(3);
        let got = multi_head_ripple(&x, &params, &o, AttentionBackend::Dp).unwrap();
        let naive = multi_head_ripple(&x, &params, &o, AttentionBackend::Naive).unwrap();
        assert!(rel_error(got.out.data(), naive.out.data()) < 1e-10);

        let q = project(&x, &params.wq);
        let k = project(&x, &params.wk);
        let v = project(&x, &params.wv);
        let h1 = ripple_naive(&slice_channels(&q, 2, 2), &slice_channels(&k, 2, 2), &slice_channels(&v, 2, 2), &params.heads[1], &o).unwrap();
        let mine = slice_channels(&got.concat, 2, 2);
        assert!(rel_error(mine.data(), h1.out.data()) < 1e-10);
    }

    #[test]
    fn identical_heads_give_identical_outputs() {
        let shape = GridShape::new(5, 5).unwrap();
        let mut rng = SeededRng::new(16);
        let x = TokenField::gaussian(shape, 4, &mut rng, 1.0);
        let hd = head(SchemeKind::LearnedSbt, 2, 2, 30);
        let block = Matrix::gaussian(2, 4, &mut rng, 0.5);
        let stacked = Matrix::from_vec(4, 4, [block.data.clone(), block.data.clone()].concat()).unwrap();
        let params = MultiHeadParams {
            wq: stacked.clone(),
            wk: stacked.clone(),
            wv: stacked,
            wo: Matrix::gaussian(4, 4, &mut rng, 0.5),
            heads: vec![hd.clone(), hd],
        };
        let got = multi_head_ripple(&x, &params, &opts(2), AttentionBackend::Dp).unwrap();
        assert_eq!(slice_channels(&got.concat, 0, 2), slice_channels(&got.concat, 2, 2));
    }

    #[test]
    fn random_trig_feature_map_runs() {
        let (q, k, v) = instance(4, 4, 3, 17);
        let mut hd = head(SchemeKind::LearnedSbt, 2, 3, 5);
        hd.featmap = FeatureMapParams::new(FeatureMapKind::RandomTrig, 3, 4, 0, &mut SeededRng::new(2)).unwrap();
        let a = ripple_dp(&q, &k, &v, &hd, &opts(2)).unwrap();
        let b = ripple_naive(&q, &k, &v, &hd, &opts(2)).unwrap();
        assert!(rel_error(a.out.data(), b.out.data()) < 1e-8);
    }
}
