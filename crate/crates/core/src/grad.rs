//! Backward pass of ripple attention.
//!
//! For a query with output `y = φ(q)ᵀ N / b`, `b = φ(q)ᵀ D + ε`, the upstream
//! gradient `g` splits into two streams over the weighted group sums:
//! `U1 = φ(q) gᵀ / b` against `N` and `U2 = −φ(q) (g·y) / b` against `D`.
//!
//! Pixel gradients use the symmetry of Chebyshev groups: token `m` lies in
//! group `r` of query `i` exactly when `i` lies in group `r` of `m`, so
//! `∂L/∂x_m = Σ_r Σ_{i ∈ N_r(m)} α_r(i) U_i`. Every weight vector is split into
//! its shared tail weight (a constant over all groups) plus per-group offsets
//! on the head. The constant part is one global sum; each head offset is a
//! band sum over a summed-area table of `α`-scaled streams. That keeps the
//! cost at `O(H·W·R_max)` lookups.

use crate::attention::{dp_accumulate, ripple_dp, AttentionTape, DpScratch, MultiHeadOutput, MultiHeadParams, RippleHead, RippleOptions};
use crate::error::{arg_err, Result, RippleError};
use crate::featmap::{feature_forward, feature_vjp, feature_vjp_acc, FeatureMapKind, FeatureMapParams};
use crate::grid::{GridShape, TokenField};
use crate::sat::SummedAreaTable;
use crate::tensor::SeededRng;
use crate::vicinal::{PartitionKind, PartitionScheme};
use crate::weights::{scheme_weights, scheme_weights_vjp, SchemeKind, SpatialWeights, StickParams, WeightScheme};

/// `∂L/∂α` for one query in the same head-plus-tail layout as the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrad {
    pub head: Vec<f64>,
    /// Gradient with respect to the shared weight of the merged groups.
    pub tail: f64,
}

#[derive(Debug, Clone)]
pub struct RippleGradients {
    pub grad_q: TokenField,
    pub grad_k: TokenField,
    pub grad_v: TokenField,
    pub grad_alpha: Vec<AlphaGrad>,
    pub grad_featmap: FeatureMapParams,
    pub grad_stick: Option<StickParams>,
}

fn check_upstream(tape: &AttentionTape, upstream: &TokenField) -> Result<()> {
    if upstream.shape() != tape.out.shape() || upstream.channels() != tape.out.channels() {
        return arg_err("upstream gradient does not match the forward output");
    }
    Ok(())
}

/// The two gradient streams of every query, as fields over the grid.
fn streams(tape: &AttentionTape, upstream: &TokenField) -> (TokenField, TokenField) {
    let shape = tape.out.shape();
    let (dp, c) = (tape.phi_q.channels(), tape.out.channels());
    let mut u1 = TokenField::zeros(shape, dp * c);
    let mut u2 = TokenField::zeros(shape, dp);
    for t in 0..shape.tokens() {
        let (g, y, pq, b) = (upstream.token(t), tape.out.token(t), tape.phi_q.token(t), tape.denominators[t]);
        let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
        let row1 = u1.token_mut(t);
        for d in 0..dp {
            for (k, gc) in g.iter().enumerate() {
                row1[d * c + k] = pq[d] * gc / b;
            }
        }
        for (o, p) in u2.token_mut(t).iter_mut().zip(pq) {
            *o = -p * gy / b;
        }
    }
    (u1, u2)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `∂L/∂α` for every query, from window lookups on the tape's tables.
pub fn grad_alpha(tape: &AttentionTape, upstream: &TokenField) -> Result<Vec<AlphaGrad>> {
    check_upstream(tape, upstream)?;
    let (u1, u2) = streams(tape, upstream);
    Ok(alpha_from_streams(tape, &u1, &u2))
}

fn alpha_from_streams(tape: &AttentionTape, u1: &TokenField, u2: &TokenField) -> Vec<AlphaGrad> {
    let shape = tape.out.shape();
    let (kv, k) = (tape.sat_kv.channels(), tape.sat_k.channels());
    let mut prev_kv = vec![0.0; kv];
    let mut prev_k = vec![0.0; k];
    let mut cur_kv = vec![0.0; kv];
    let mut cur_k = vec![0.0; k];
    (0..shape.tokens())
        .map(|t| {
            let w = &tape.weights[t];
            let (a1, a2) = (u1.token(t), u2.token(t));
            prev_kv.fill(0.0);
            prev_k.fill(0.0);
            let mut head = Vec::with_capacity(w.hat_r());
            for r in 0..w.hat_r() {
                let (_, hi) = tape.partition.band(r);
                cur_kv.fill(0.0);
                cur_k.fill(0.0);
                tape.sat_kv.window_acc(t, Some(hi), 1.0, &mut cur_kv);
                tape.sat_k.window_acc(t, Some(hi), 1.0, &mut cur_k);
                head.push(dot(a1, &cur_kv) - dot(a1, &prev_kv) + dot(a2, &cur_k) - dot(a2, &prev_k));
                std::mem::swap(&mut prev_kv, &mut cur_kv);
                std::mem::swap(&mut prev_k, &mut cur_k);
            }
            let tail = if w.has_tail() {
                dot(a1, tape.sat_kv.total()) - dot(a1, &prev_kv) + dot(a2, tape.sat_k.total()) - dot(a2, &prev_k)
            } else {
                0.0
            };
            AlphaGrad { head, tail }
        })
        .collect()
}

/// `∂L/∂α_r` for every group of every query, one band lookup per group.
/// Costs `O(H·W·G)`; the compact [`grad_alpha`] is what the backward pass uses.
pub fn grad_alpha_dense(tape: &AttentionTape, upstream: &TokenField) -> Result<Vec<Vec<f64>>> {
    check_upstream(tape, upstream)?;
    let (u1, u2) = streams(tape, upstream);
    let shape = tape.out.shape();
    let mut bkv = vec![0.0; tape.sat_kv.channels()];
    let mut bk = vec![0.0; tape.sat_k.channels()];
    Ok((0..shape.tokens())
        .map(|t| {
            (0..tape.weights[t].num_groups())
                .map(|r| {
                    let (lo, hi) = tape.partition.band(r);
                    bkv.fill(0.0);
                    bk.fill(0.0);
                    tape.sat_kv.band_acc(t, lo, hi, 1.0, &mut bkv);
                    tape.sat_k.band_acc(t, lo, hi, 1.0, &mut bk);
                    dot(u1.token(t), &bkv) + dot(u2.token(t), &bk)
                })
                .collect()
        })
        .collect())
}

/// `∂L/∂x_m = Σ_i α_{group(i, m)}(i) · upstream_i` for a field `x` whose
/// group sums feed query `i` with weights `α(i)`.
pub fn grad_pixels(
    shape: GridShape,
    partition: &PartitionScheme,
    weights: &[SpatialWeights],
    upstream: &TokenField,
) -> Result<TokenField> {
    if upstream.shape() != shape || weights.len() != shape.tokens() {
        return arg_err("weights and upstream must cover the grid");
    }
    let ch = upstream.channels();
    let base = |w: &SpatialWeights| if w.has_tail() { w.merged_weight() } else { 0.0 };

    let mut constant = vec![0.0; ch];
    for (t, w) in weights.iter().enumerate() {
        let a = base(w);
        for (c, u) in constant.iter_mut().zip(upstream.token(t)) {
            *c += a * u;
        }
    }
    let mut out = TokenField::zeros(shape, ch);
    for t in 0..shape.tokens() {
        out.token_mut(t).copy_from_slice(&constant);
    }

    let max_hat = weights.iter().map(SpatialWeights::hat_r).max().unwrap_or(0);
    for r in 0..max_hat {
        let sat = SummedAreaTable::from_fn(shape, ch, |t, dst| {
            let w = &weights[t];
            let beta = if r < w.hat_r() { w.head()[r] - base(w) } else { 0.0 };
            for (d, u) in dst.iter_mut().zip(upstream.token(t)) {
                *d = beta * u;
            }
        });
        let (lo, hi) = partition.band(r);
        for m in 0..shape.tokens() {
            sat.band_acc(m, lo, hi, 1.0, out.token_mut(m));
        }
    }
    Ok(out)
}

/// Full reverse pass through one ripple-attention head.
pub fn ripple_vjp(tape: &AttentionTape, upstream: &TokenField, head: &RippleHead) -> Result<RippleGradients> {
    check_upstream(tape, upstream)?;
    let shape = tape.out.shape();
    let featmap = &head.featmap;
    let (dp, c) = (tape.phi_q.channels(), tape.out.channels());
    if featmap.output_dim() != dp {
        return arg_err("feature map does not match the tape");
    }
    let (u1, u2) = streams(tape, upstream);
    let grad_alpha = alpha_from_streams(tape, &u1, &u2);

    // Query side: ∂L/∂φ(q) = (N g − D (g·y)) / b.
    let mut grad_q = TokenField::zeros(shape, tape.q.channels());
    let mut grad_featmap = featmap.zeros_like();
    let mut scratch = DpScratch::new(dp * c, dp);
    let mut grad_phi = vec![0.0; dp];
    for t in 0..shape.tokens() {
        dp_accumulate(t, &tape.weights[t], &tape.partition, &tape.sat_kv, &tape.sat_k, &mut scratch);
        let (g, y, b) = (upstream.token(t), tape.out.token(t), tape.denominators[t]);
        let gy = dot(g, y);
        for d in 0..dp {
            grad_phi[d] = (dot(&scratch.num[d * c..(d + 1) * c], g) - scratch.den[d] * gy) / b;
        }
        feature_vjp_acc(tape.q.token(t), featmap, &grad_phi, grad_q.token_mut(t), &mut grad_featmap);
    }

    // Key/value side through the group sums.
    let g1 = grad_pixels(shape, &tape.partition, &tape.weights, &u1)?;
    let g2 = grad_pixels(shape, &tape.partition, &tape.weights, &u2)?;
    let mut grad_k = TokenField::zeros(shape, tape.k.channels());
    let mut grad_v = TokenField::zeros(shape, c);
    for m in 0..shape.tokens() {
        let (pk, vm, gkv, gk) = (tape.phi_k.token(m), tape.v.token(m), g1.token(m), g2.token(m));
        let gv = grad_v.token_mut(m);
        for d in 0..dp {
            let row = &gkv[d * c..(d + 1) * c];
            for (o, x) in gv.iter_mut().zip(row) {
                *o += pk[d] * x;
            }
            grad_phi[d] = dot(row, vm) + gk[d];
        }
        feature_vjp_acc(tape.k.token(m), featmap, &grad_phi, grad_k.token_mut(m), &mut grad_featmap);
    }

    // Weights generated from the values.
    let mut grad_stick = None;
    if !tape.fixed_weights && head.scheme.kind.is_learned() {
        let mut acc = head.scheme.params.as_ref().map(StickParams::zeros_like);
        for t in 0..shape.tokens() {
            let w = &tape.weights[t];
            let ga = &grad_alpha[t];
            let wg = scheme_weights_vjp(
                &head.scheme,
                tape.v.token(t),
                w.num_groups(),
                tape.partition.r_max,
                tape.partition.tau,
                &ga.head,
                ga.tail,
            )?;
            for (o, x) in grad_v.token_mut(t).iter_mut().zip(&wg.value) {
                *o += x;
            }
            if let (Some(a), Some(p)) = (acc.as_mut(), wg.params.as_ref()) {
                add_stick(a, p);
            }
        }
        grad_stick = acc;
    }

    let grads = RippleGradients {
        grad_q,
        grad_k,
        grad_v,
        grad_alpha,
        grad_featmap,
        grad_stick,
    };
    let finite = [&grads.grad_q, &grads.grad_k, &grads.grad_v].iter().all(|f| f.is_finite());
    if !finite {
        return Err(RippleError::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

pub(crate) fn add_stick(acc: &mut StickParams, x: &StickParams) {
    for (a, b) in acc.unit_embeddings.data.iter_mut().zip(&x.unit_embeddings.data) {
        *a += b;
    }
    for (a, b) in acc.value_projection.data.iter_mut().zip(&x.value_projection.data) {
        *a += b;
    }
}

/// Reverse pass through [`crate::attention::multi_head_ripple`]. Returns
/// `∂L/∂x` and gradients shaped like `params`. Needs per-head tapes, so the
/// naive backend is not differentiable here.
pub fn multi_head_vjp(
    x: &TokenField,
    params: &MultiHeadParams,
    forward: &MultiHeadOutput,
    upstream: &TokenField,
) -> Result<(TokenField, MultiHeadParams)> {
    if upstream.shape() != forward.out.shape() || upstream.channels() != forward.out.channels() {
        return arg_err("upstream gradient does not match the layer output");
    }
    let shape = x.shape();
    let (m, hd) = (params.model_dim(), params.head_dim());
    let mut grads = params.zeros_like();
    let mut grad_concat = TokenField::zeros(shape, m);
    for t in 0..shape.tokens() {
        grads.wo.add_outer(1.0, upstream.token(t), forward.concat.token(t));
        params.wo.matvec_t_acc(upstream.token(t), grad_concat.token_mut(t));
    }
    let mut gq = TokenField::zeros(shape, m);
    let mut gk = TokenField::zeros(shape, m);
    let mut gv = TokenField::zeros(shape, m);
    for (h, (head, res)) in params.heads.iter().zip(&forward.heads).enumerate() {
        let Some(tape) = &res.tape else {
            return arg_err("multi-head backward needs forward tapes");
        };
        let up = crate::attention::slice_channels(&grad_concat, h * hd, hd);
        let g = ripple_vjp(tape, &up, head)?;
        for t in 0..shape.tokens() {
            gq.token_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(g.grad_q.token(t));
            gk.token_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(g.grad_k.token(t));
            gv.token_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(g.grad_v.token(t));
        }
        let dst = &mut grads.heads[h];
        for (a, b) in dst.featmap.tensors_mut().into_iter().zip(g.grad_featmap.tensors()) {
            a.copy_from_slice(b);
        }
        if let (Some(a), Some(b)) = (dst.scheme.params.as_mut(), g.grad_stick.as_ref()) {
            *a = b.clone();
        }
    }
    let mut grad_x = TokenField::zeros(shape, m);
    for t in 0..shape.tokens() {
        let xt = x.token(t);
        grads.wq.add_outer(1.0, gq.token(t), xt);
        grads.wk.add_outer(1.0, gk.token(t), xt);
        grads.wv.add_outer(1.0, gv.token(t), xt);
        let gx = grad_x.token_mut(t);
        params.wq.matvec_t_acc(gq.token(t), gx);
        params.wk.matvec_t_acc(gk.token(t), gx);
        params.wv.matvec_t_acc(gv.token(t), gx);
    }
    Ok((grad_x, grads))
}

/// Coordinates with both analytic and numeric magnitude below this are
/// compared absolutely.
pub const FD_FLOOR: f64 = 1e-5;

pub fn fd_rel(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdMode {
    /// Differences along every coordinate.
    Full,
    /// Differences along random unit directions.
    Directional { probes: usize, seed: u64 },
    /// `Full` up to `cutoff` coordinates, directional above.
    Auto { cutoff: usize, probes: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate (or probe) index with the largest error.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub directional: bool,
    pub tolerance: f64,
    pub passed: bool,
}

/// Fourth-order central difference of `f` at 0. The plain two-point rule
/// leaves an O(h²) bias that swamps 1e-4 tolerances on curved leaves such as
/// the feature map's first layer.
fn five_point(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let (p1, m1, p2, m2) = (f(h), f(-h), f(2.0 * h), f(-2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Compares `analytic` against fourth-order central differences of `loss`
/// around `x`.
pub fn finite_diff_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    mode: FdMode,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return arg_err(format!("finite-difference step must be positive, got {step}"));
    }
    if x.len() != analytic.len() {
        return arg_err("gradient length does not match the point");
    }
    let directional = match mode {
        FdMode::Full => None,
        FdMode::Directional { probes, seed } => Some((probes, seed)),
        FdMode::Auto { cutoff, probes, seed } => (x.len() > cutoff).then_some((probes, seed)),
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        directional: directional.is_some(),
        tolerance,
        passed: true,
    };
    let record = |i: usize, a: f64, n: f64, report: &mut FdReport| {
        let e = if a.is_finite() && n.is_finite() { fd_rel(a, n) } else { f64::INFINITY };
        report.checked += 1;
        if report.checked == 1 || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    };
    let mut xp = x.to_vec();
    match directional {
        None => {
            for i in 0..x.len() {
                let n = five_point(|t| {
                    xp[i] = x[i] + t;
                    let f = loss(&xp);
                    xp[i] = x[i];
                    f
                }, step);
                record(i, analytic[i], n, &mut report);
            }
        }
        Some((probes, seed)) => {
            let mut rng = SeededRng::new(seed);
            for p in 0..probes {
                let mut u = rng.normals(x.len(), 0.0, 1.0);
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                u.iter_mut().for_each(|v| *v /= norm);
                let n = five_point(|t| {
                    for i in 0..x.len() {
                        xp[i] = x[i] + t * u[i];
                    }
                    loss(&xp)
                }, step);
                record(p, dot(analytic, &u), n, &mut report);
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

/// A self-contained single-head instance for gradient checks.
#[derive(Debug, Clone)]
pub struct AttentionCase {
    pub q: TokenField,
    pub k: TokenField,
    pub v: TokenField,
    pub head: RippleHead,
    pub opts: RippleOptions,
}

impl AttentionCase {
    pub fn random(side: usize, channels: usize, kind: SchemeKind, partition: PartitionKind, seed: u64) -> Result<Self> {
        let shape = GridShape::square(side)?;
        let mut rng = SeededRng::new(seed);
        let q = TokenField::gaussian(shape, channels, &mut rng, 1.0);
        let k = TokenField::gaussian(shape, channels, &mut rng, 1.0);
        let v = TokenField::gaussian(shape, channels, &mut rng, 1.0);
        let r_max = 3;
        let head = RippleHead {
            scheme: WeightScheme::init(kind, r_max, 4, channels, &mut rng, 1.0),
            featmap: FeatureMapParams::adaptive(channels, channels, channels, &mut rng)?,
        };
        let opts = RippleOptions::new(PartitionScheme::new(partition, r_max, 1e-3)?);
        Ok(Self { q, k, v, head, opts })
    }

    /// `Σ out²`.
    pub fn loss(&self) -> Result<f64> {
        let out = ripple_dp(&self.q, &self.k, &self.v, &self.head, &self.opts)?.out;
        Ok(out.data().iter().map(|x| x * x).sum())
    }

    pub fn gradients(&self) -> Result<RippleGradients> {
        let res = ripple_dp(&self.q, &self.k, &self.v, &self.head, &self.opts)?;
        let tape = res.tape.expect("tape kept");
        let mut up = res.out.clone();
        up.data_mut().iter_mut().for_each(|x| *x *= 2.0);
        ripple_vjp(&tape, &up, &self.head)
    }

    /// Names and mutable views of every differentiable leaf.
    fn leaves_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("q", self.q.data_mut()),
            ("k", self.k.data_mut()),
            ("v", self.v.data_mut()),
        ];
        let names = ["featmap.w1", "featmap.w2", "featmap.b2"];
        for (n, t) in names.iter().zip(self.head.featmap.tensors_mut()) {
            out.push((n, t));
        }
        if let Some(p) = self.head.scheme.params.as_mut() {
            out.push(("stick.embeddings", &mut p.unit_embeddings.data));
            out.push(("stick.projection", &mut p.value_projection.data));
        }
        out
    }

    fn grad_leaves(&self, g: &RippleGradients) -> Vec<Vec<f64>> {
        let mut out = vec![g.grad_q.data().to_vec(), g.grad_k.data().to_vec(), g.grad_v.data().to_vec()];
        for t in g.grad_featmap.tensors() {
            out.push(t.to_vec());
        }
        if let Some(p) = &g.grad_stick {
            out.push(p.unit_embeddings.data.clone());
            out.push(p.value_projection.data.clone());
        }
        out
    }

    /// Checks every leaf gradient of `Σ out²` against finite differences.
    pub fn check(&self, step: f64, tolerance: f64, mode: FdMode) -> Result<Vec<(String, FdReport)>> {
        let analytic = self.grad_leaves(&self.gradients()?);
        let mut probe = self.clone();
        let mut reports = Vec::with_capacity(analytic.len());
        for (leaf, a) in analytic.iter().enumerate() {
            let (name, base) = {
                let leaves = probe.leaves_mut();
                (leaves[leaf].0.to_string(), leaves[leaf].1.to_vec())
            };
            let report = finite_diff_check(
                |x| {
                    probe.leaves_mut()[leaf].1.copy_from_slice(x);
                    probe.loss().unwrap_or(f64::NAN)
                },
                &base,
                a,
                step,
                tolerance,
                mode,
            )?;
            probe.leaves_mut()[leaf].1.copy_from_slice(&base);
            reports.push((name, report));
        }
        Ok(reports)
    }
}

/// Checks [`crate::featmap::feature_vjp`] for `L = c·φ(x)` with random `x`,
/// parameters and cotangent `c`.
pub fn featmap_gradcheck(kind: FeatureMapKind, seed: u64, step: f64, tolerance: f64) -> Result<Vec<(String, FdReport)>> {
    let mut rng = SeededRng::new(seed);
    let (dim, freqs) = (4, 5);
    let params = FeatureMapParams::new(kind, dim, freqs, 6, &mut rng)?;
    let x = rng.normals(dim, 0.0, 0.7);
    let c = rng.normals(params.output_dim(), 0.0, 1.0);
    let loss = |x: &[f64], p: &FeatureMapParams| feature_forward(x, p).map_or(f64::NAN, |phi| dot(&phi, &c));
    let (gx, gp) = feature_vjp(&x, &params, &c)?;
    let mode = FdMode::Full;
    let mut out = vec![("x".to_string(), finite_diff_check(|xp| loss(xp, &params), &x, &gx, step, tolerance, mode)?)];
    let names = ["w1", "w2", "b2"];
    for (i, g) in gp.tensors().into_iter().enumerate() {
        let mut probe = params.clone();
        let base = probe.tensors()[i].to_vec();
        let rep = finite_diff_check(
            |v| {
                probe.tensors_mut()[i].copy_from_slice(v);
                loss(&x, &probe)
            },
            &base,
            g,
            step,
            tolerance,
            mode,
        )?;
        out.push((format!("featmap.{}", names[i]), rep));
    }
    Ok(out)
}

/// Checks [`scheme_weights_vjp`] for `L = Σ_r c_r α_r` over the dense weights
/// of a query with seven groups.
pub fn weights_gradcheck(kind: SchemeKind, seed: u64, step: f64, tolerance: f64) -> Result<Vec<(String, FdReport)>> {
    let mut rng = SeededRng::new(seed);
    let (r_max, groups, tau, dim) = (4, 7, 1e-3, 4);
    let scheme = WeightScheme::init(kind, r_max, 3, dim, &mut rng, 1.0);
    let value = rng.normals(dim, 0.0, 1.0);
    let c = rng.normals(groups, 0.0, 1.0);
    let loss = |v: &[f64], s: &WeightScheme| {
        scheme_weights(s, v, groups, r_max, tau).map_or(f64::NAN, |w| dot(&w.to_dense(), &c))
    };
    let w = scheme_weights(&scheme, &value, groups, r_max, tau)?;
    let hat = w.hat_r();
    let grads = scheme_weights_vjp(&scheme, &value, groups, r_max, tau, &c[..hat], c[hat..].iter().sum())?;
    let mode = FdMode::Full;
    let mut out = vec![(
        "value".to_string(),
        finite_diff_check(|v| loss(v, &scheme), &value, &grads.value, step, tolerance, mode)?,
    )];
    if let Some(gp) = &grads.params {
        for (i, name) in ["stick.embeddings", "stick.projection"].into_iter().enumerate() {
            let analytic = if i == 0 { &gp.unit_embeddings.data } else { &gp.value_projection.data };
            let mut probe = scheme.clone();
            let base = analytic_slot(&mut probe, i).to_vec();
            let rep = finite_diff_check(
                |v| {
                    analytic_slot(&mut probe, i).copy_from_slice(v);
                    loss(&value, &probe)
                },
                &base,
                analytic,
                step,
                tolerance,
                mode,
            )?;
            out.push((name.to_string(), rep));
        }
    }
    Ok(out)
}

fn analytic_slot(scheme: &mut WeightScheme, i: usize) -> &mut [f64] {
    let p = scheme.params.as_mut().expect("learned scheme");
    if i == 0 {
        &mut p.unit_embeddings.data
    } else {
        &mut p.value_projection.data
    }
}
