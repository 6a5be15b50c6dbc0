//! Spatial weights over vicinal groups.
//!
//! A query with `G` groups receives weights `α_0 .. α_{G-1}`. Every scheme
//! produces them in the same compact form: an explicit head `α_0 .. α_{ĥ-1}`
//! followed by a single weight shared by every group `r >= ĥ`. The attention
//! kernels rely on that shape to fold the whole tail into one window lookup.
//!
//! Learned weights come from a stick-breaking transform. Each of the `R_max`
//! stick units owns an embedding; a query's value vector is projected into
//! the embedding space, dotted with every unit embedding to give logits,
//! squashed by an offset sigmoid into stick fractions `s_r`, and the sticks
//! are broken in order. The remainder after the last unit (or after the
//! halting index, whichever comes first) is spread evenly over the
//! remaining groups.

use crate::error::{arg_err, Result};
use crate::tensor::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    LearnedSbt,
    FixedExponential,
    SoftmaxWeights,
    Truncated,
    Uniform,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::LearnedSbt,
        SchemeKind::FixedExponential,
        SchemeKind::SoftmaxWeights,
        SchemeKind::Truncated,
        SchemeKind::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::LearnedSbt => "sbt",
            SchemeKind::FixedExponential => "fixed-exp",
            SchemeKind::SoftmaxWeights => "softmax",
            SchemeKind::Truncated => "truncated",
            SchemeKind::Uniform => "uniform",
        }
    }

    /// Whether the scheme owns trainable stick parameters.
    pub fn is_learned(self) -> bool {
        matches!(
            self,
            SchemeKind::LearnedSbt | SchemeKind::SoftmaxWeights | SchemeKind::Truncated
        )
    }

    /// Number of stick-unit embeddings the scheme needs for a given `R_max`.
    pub fn units(self, r_max: usize) -> usize {
        match self {
            SchemeKind::SoftmaxWeights => r_max + 1,
            SchemeKind::LearnedSbt | SchemeKind::Truncated => r_max,
            SchemeKind::FixedExponential | SchemeKind::Uniform => 0,
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = crate::RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbt" | "learned" | "learned-sbt" => Ok(Self::LearnedSbt),
            "fixed-exp" | "fixed" | "fixed-exponential" => Ok(Self::FixedExponential),
            "softmax" | "softmax-weights" => Ok(Self::SoftmaxWeights),
            "truncated" => Ok(Self::Truncated),
            "uniform" => Ok(Self::Uniform),
            other => arg_err(format!(
                "unknown weight scheme `{other}` (expected sbt, fixed-exp, softmax, truncated or uniform)"
            )),
        }
    }
}

/// Divisor used when the tail groups share the leftover stick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeRule {
    /// `R − ĥ + 1`: the merged weights sum to the leftover mass exactly.
    #[default]
    Normalized,
    /// `R − ĥ + 2`: the tail comes up short and the weights sum below 1.
    Unnormalized,
}

/// Offset schedule of the modified sigmoid `1 / (1 + c_r · exp(−o_r))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmoidOffset {
    /// `c_r = R_max − r + 1`; zero logits then give uniform weights.
    #[default]
    Shifted,
    /// `c_r = R_max − r`, which pins the last stick fraction to 1.
    Unshifted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StickParams {
    /// One row per stick unit (`units × D_e`).
    pub unit_embeddings: Matrix,
    /// Projection of value vectors into the embedding space (`D_e × C`).
    pub value_projection: Matrix,
}

impl StickParams {
    pub fn new(unit_embeddings: Matrix, value_projection: Matrix) -> Result<Self> {
        if unit_embeddings.rows == 0 {
            return arg_err("stick parameters need at least one unit");
        }
        if unit_embeddings.cols != value_projection.rows {
            return arg_err(format!(
                "embedding width {} does not match projection rows {}",
                unit_embeddings.cols, value_projection.rows
            ));
        }
        if unit_embeddings.data.iter().chain(&value_projection.data).any(|x| !x.is_finite()) {
            return arg_err("stick parameters must be finite");
        }
        Ok(Self {
            unit_embeddings,
            value_projection,
        })
    }

    pub fn gaussian(units: usize, embed_dim: usize, value_dim: usize, rng: &mut SeededRng, stddev: f64) -> Self {
        Self {
            unit_embeddings: Matrix::gaussian(units, embed_dim, rng, stddev),
            value_projection: Matrix::gaussian(embed_dim, value_dim, rng, stddev),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            unit_embeddings: self.unit_embeddings.zeros_like(),
            value_projection: self.value_projection.zeros_like(),
        }
    }

    pub fn units(&self) -> usize {
        self.unit_embeddings.rows
    }

    pub fn value_dim(&self) -> usize {
        self.value_projection.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    pub kind: SchemeKind,
    pub params: Option<StickParams>,
    pub merge: MergeRule,
    pub offset: SigmoidOffset,
}

impl WeightScheme {
    pub fn new(kind: SchemeKind, params: Option<StickParams>) -> Result<Self> {
        match (kind.is_learned(), &params) {
            (true, None) => return arg_err(format!("scheme `{}` needs stick parameters", kind.name())),
            (false, Some(_)) => return arg_err(format!("scheme `{}` takes no parameters", kind.name())),
            _ => {}
        }
        Ok(Self {
            kind,
            params,
            merge: MergeRule::default(),
            offset: SigmoidOffset::default(),
        })
    }

    pub fn uniform() -> Self {
        Self::new(SchemeKind::Uniform, None).unwrap()
    }

    pub fn fixed_exponential() -> Self {
        Self::new(SchemeKind::FixedExponential, None).unwrap()
    }

    /// Draws stick parameters for `kind` (if it needs any) with the given scale.
    pub fn init(kind: SchemeKind, r_max: usize, embed_dim: usize, value_dim: usize, rng: &mut SeededRng, stddev: f64) -> Self {
        let params = kind
            .is_learned()
            .then(|| StickParams::gaussian(kind.units(r_max), embed_dim, value_dim, rng, stddev));
        Self::new(kind, params).unwrap()
    }

    pub fn with_merge(mut self, merge: MergeRule) -> Self {
        self.merge = merge;
        self
    }

    pub fn with_offset(mut self, offset: SigmoidOffset) -> Self {
        self.offset = offset;
        self
    }

    fn stick(&self, r_max: usize) -> Result<&StickParams> {
        let Some(p) = &self.params else {
            return arg_err(format!("scheme `{}` needs stick parameters", self.kind.name()));
        };
        let need = self.kind.units(r_max);
        if p.units() != need {
            return arg_err(format!(
                "scheme `{}` with r_max={r_max} needs {need} stick units, params have {}",
                self.kind.name(),
                p.units()
            ));
        }
        Ok(p)
    }
}

/// Weights for one query, head-plus-shared-tail form.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    head: Vec<f64>,
    tail: f64,
    num_groups: usize,
}

impl SpatialWeights {
    pub fn new(head: Vec<f64>, tail: f64, num_groups: usize) -> Result<Self> {
        if num_groups == 0 {
            return arg_err("a query has at least one group");
        }
        if head.len() > num_groups {
            return arg_err(format!("{} explicit weights for {num_groups} groups", head.len()));
        }
        if head.iter().chain(std::iter::once(&tail)).any(|a| !a.is_finite() || *a < 0.0) {
            return arg_err("spatial weights must be finite and nonnegative");
        }
        Ok(Self { head, tail, num_groups })
    }

    /// Explicit per-group weights (the tail is the last entries' shared value).
    pub fn from_dense(alphas: &[f64]) -> Result<Self> {
        let Some(&last) = alphas.last() else {
            return arg_err("empty weight vector");
        };
        // Fold trailing equal entries into the shared tail.
        let mut hat = alphas.len() - 1;
        while hat > 0 && alphas[hat - 1] == last {
            hat -= 1;
        }
        Self::new(alphas[..hat].to_vec(), last, alphas.len())
    }

    /// Every group weighted by one: plain linearized attention.
    pub fn ones(num_groups: usize) -> Self {
        Self {
            head: Vec::new(),
            tail: 1.0,
            num_groups,
        }
    }

    /// Index of the first merged group (`ĥ`).
    pub fn hat_r(&self) -> usize {
        self.head.len()
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    /// Weight shared by every group `r >= ĥ`.
    pub fn merged_weight(&self) -> f64 {
        self.tail
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn has_tail(&self) -> bool {
        self.head.len() < self.num_groups
    }

    pub fn alpha(&self, r: usize) -> f64 {
        assert!(r < self.num_groups, "group {r} out of range");
        self.head.get(r).copied().unwrap_or(self.tail)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.num_groups).map(|r| self.alpha(r)).collect()
    }

    pub fn sum(&self) -> f64 {
        self.head.iter().sum::<f64>() + self.tail * (self.num_groups - self.head.len()) as f64
    }
}

/// `o_r = e_r · (P v)` for every stick unit.
pub fn stick_logits(value: &[f64], params: &StickParams) -> Result<Vec<f64>> {
    if value.len() != params.value_dim() {
        return arg_err(format!(
            "value vector has {} entries, projection expects {}",
            value.len(),
            params.value_dim()
        ));
    }
    let projected = params.value_projection.matvec(value);
    Ok(params.unit_embeddings.matvec(&projected))
}

/// Stick fraction for unit `r` (1-based) out of `r_max`.
pub fn modified_sigmoid(logit: f64, r: usize, r_max: usize, offset: SigmoidOffset) -> f64 {
    debug_assert!(r >= 1 && r <= r_max);
    let c = match offset {
        SigmoidOffset::Shifted => (r_max - r + 1) as f64,
        SigmoidOffset::Unshifted => (r_max - r) as f64,
    };
    if c == 0.0 {
        return 1.0;
    }
    1.0 / (1.0 + (c.ln() - logit).exp())
}

/// Breaks a unit stick: `α_0 = s_1`, `α_r = s_{r+1} ∏_{r'<=r} (1 − s_{r'})`,
/// with an implicit terminal fraction `s_{R+1} = 1`.
pub fn stick_breaking(fractions: &[f64]) -> Result<Vec<f64>> {
    if let Some((k, s)) = fractions.iter().enumerate().find(|(_, s)| !(**s > 0.0 && **s < 1.0)) {
        return arg_err(format!("stick fraction s_{} = {s} lies outside (0, 1)", k + 1));
    }
    Ok(break_sticks(fractions))
}

pub(crate) fn break_sticks(fractions: &[f64]) -> Vec<f64> {
    let mut alphas = Vec::with_capacity(fractions.len() + 1);
    let mut remaining = 1.0;
    for &s in fractions {
        alphas.push(s * remaining);
        remaining *= 1.0 - s;
    }
    alphas.push(remaining);
    alphas
}

/// Reverse-mode derivative of [`break_sticks`]: maps `∂L/∂α` (length `R+1`)
/// to `∂L/∂s` (length `R`).
pub(crate) fn break_sticks_vjp(fractions: &[f64], grad_alpha: &[f64]) -> Vec<f64> {
    let n = fractions.len();
    debug_assert_eq!(grad_alpha.len(), n + 1);
    let mut prefix = Vec::with_capacity(n + 1);
    let mut p = 1.0;
    for &s in fractions {
        prefix.push(p);
        p *= 1.0 - s;
    }
    let mut grad_s = vec![0.0; n];
    let mut grad_rest = grad_alpha[n];
    for r in (0..n).rev() {
        let s = fractions[r];
        grad_s[r] = (grad_alpha[r] - grad_rest) * prefix[r];
        grad_rest = grad_alpha[r] * s + grad_rest * (1.0 - s);
    }
    grad_s
}

fn divisor(merge: MergeRule, num_groups: usize, hat: usize) -> f64 {
    let base = (num_groups - hat) as f64;
    match merge {
        MergeRule::Normalized => base,
        MergeRule::Unnormalized => base + 1.0,
    }
}

/// Halting index: the first `ĥ` whose remaining stick `1 − Σ_{r<=ĥ} α_r`
/// drops below `tau`, capped at the last slot.
fn halting_index(slots: &[f64], tau: f64) -> usize {
    let mut cum = 0.0;
    for (r, a) in slots.iter().enumerate() {
        cum += a;
        if 1.0 - cum < tau {
            return r;
        }
    }
    slots.len() - 1
}

/// Truncates `slots` (a simplex vector whose last slot stands for every group
/// from `slots.len() − 1` onward) and merges from the halting index.
fn truncate_slots(slots: &[f64], tau: f64, num_groups: usize, merge: MergeRule) -> SpatialWeights {
    debug_assert!(!slots.is_empty() && slots.len() <= num_groups);
    let hat = halting_index(slots, tau);
    let head = slots[..hat].to_vec();
    let leftover = (1.0 - head.iter().sum::<f64>()).max(0.0);
    SpatialWeights {
        head,
        tail: leftover / divisor(merge, num_groups, hat),
        num_groups,
    }
}

/// Halts the stick at the first index whose remaining length falls below
/// `tau` and shares the leftover mass among all groups from there on.
pub fn adaptive_truncate(alphas: &[f64], tau: f64, merge: MergeRule) -> Result<(usize, SpatialWeights)> {
    if alphas.is_empty() {
        return arg_err("empty weight vector");
    }
    if !(tau > 0.0 && tau < 1.0) {
        return arg_err(format!("tau must lie in (0, 1), got {tau}"));
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return arg_err("weights must be finite and nonnegative");
    }
    let w = truncate_slots(alphas, tau, alphas.len(), merge);
    Ok((w.hat_r(), w))
}

struct SbtTrace {
    fractions: Vec<f64>,
    slots: Vec<f64>,
    weights: SpatialWeights,
}

fn sbt_forward(scheme: &WeightScheme, value: &[f64], num_groups: usize, r_max: usize, tau: f64) -> Result<SbtTrace> {
    let params = scheme.stick(r_max)?;
    let logits = stick_logits(value, params)?;
    let used = r_max.min(num_groups - 1);
    let fractions: Vec<f64> = (1..=used)
        .map(|r| modified_sigmoid(logits[r - 1], r, r_max, scheme.offset))
        .collect();
    let slots = break_sticks(&fractions);
    let weights = truncate_slots(&slots, tau, num_groups, scheme.merge);
    Ok(SbtTrace {
        fractions,
        slots,
        weights,
    })
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Weights for one query with `num_groups` groups.
pub fn scheme_weights(
    scheme: &WeightScheme,
    value: &[f64],
    num_groups: usize,
    r_max: usize,
    tau: f64,
) -> Result<SpatialWeights> {
    if num_groups == 0 {
        return arg_err("a query has at least one group");
    }
    if r_max == 0 {
        return arg_err("r_max must be at least 1");
    }
    let g = num_groups;
    match scheme.kind {
        SchemeKind::Uniform => Ok(SpatialWeights {
            head: Vec::new(),
            tail: 1.0 / g as f64,
            num_groups: g,
        }),
        SchemeKind::FixedExponential => {
            let h = r_max.min(g - 1);
            let head: Vec<f64> = (0..h).map(|r| 0.5f64.powi(r as i32 + 1)).collect();
            let tail = 0.5f64.powi(h as i32) / (g - h) as f64;
            Ok(SpatialWeights { head, tail, num_groups: g })
        }
        SchemeKind::SoftmaxWeights => {
            let params = scheme.stick(r_max)?;
            let logits = stick_logits(value, params)?;
            let used = r_max.min(g - 1);
            let p = softmax(&logits[..=used]);
            Ok(SpatialWeights {
                head: p[..used].to_vec(),
                tail: p[used] / (g - used) as f64,
                num_groups: g,
            })
        }
        SchemeKind::LearnedSbt => Ok(sbt_forward(scheme, value, g, r_max, tau)?.weights),
        SchemeKind::Truncated => {
            let base = sbt_forward(scheme, value, g, r_max, tau)?.weights;
            let keep = r_max.min(g);
            let kept: Vec<f64> = (0..keep).map(|r| base.alpha(r)).collect();
            let z: f64 = kept.iter().sum();
            Ok(SpatialWeights {
                head: kept.into_iter().map(|a| a / z).collect(),
                tail: 0.0,
                num_groups: g,
            })
        }
    }
}

/// Gradients of a scalar loss with respect to the inputs of [`scheme_weights`].
#[derive(Debug, Clone)]
pub struct WeightGrads {
    pub value: Vec<f64>,
    pub params: Option<StickParams>,
}

/// Back-propagates `∂L/∂head` and `∂L/∂(shared tail weight)` through
/// [`scheme_weights`]. The halting index is treated as piecewise constant.
pub fn scheme_weights_vjp(
    scheme: &WeightScheme,
    value: &[f64],
    num_groups: usize,
    r_max: usize,
    tau: f64,
    grad_head: &[f64],
    grad_tail: f64,
) -> Result<WeightGrads> {
    let g = num_groups;
    let no_grad = || WeightGrads {
        value: vec![0.0; value.len()],
        params: scheme.params.as_ref().map(StickParams::zeros_like),
    };
    match scheme.kind {
        SchemeKind::Uniform | SchemeKind::FixedExponential => Ok(no_grad()),
        SchemeKind::SoftmaxWeights => {
            let params = scheme.stick(r_max)?;
            let logits = stick_logits(value, params)?;
            let used = r_max.min(g - 1);
            if grad_head.len() != used {
                return arg_err("head gradient does not match the forward weights");
            }
            let p = softmax(&logits[..=used]);
            let mut gp = grad_head.to_vec();
            gp.push(grad_tail / (g - used) as f64);
            let mean: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
            let mut grad_logits = vec![0.0; params.units()];
            for r in 0..=used {
                grad_logits[r] = p[r] * (gp[r] - mean);
            }
            Ok(logits_vjp(params, value, &grad_logits))
        }
        SchemeKind::LearnedSbt => sbt_vjp(scheme, value, g, r_max, tau, grad_head, grad_tail),
        SchemeKind::Truncated => {
            let base = sbt_forward(scheme, value, g, r_max, tau)?.weights;
            let keep = r_max.min(g);
            if grad_head.len() != keep {
                return arg_err("head gradient does not match the forward weights");
            }
            let kept: Vec<f64> = (0..keep).map(|r| base.alpha(r)).collect();
            let z: f64 = kept.iter().sum();
            let dotp: f64 = kept.iter().zip(grad_head).map(|(a, gr)| a / z * gr).sum();
            let grad_kept: Vec<f64> = grad_head.iter().map(|gr| (gr - dotp) / z).collect();
            let hat = base.hat_r();
            let base_head: Vec<f64> = grad_kept[..hat.min(keep)].to_vec();
            let base_tail: f64 = grad_kept.iter().skip(hat).sum();
            sbt_vjp(scheme, value, g, r_max, tau, &base_head, base_tail)
        }
    }
}

fn sbt_vjp(
    scheme: &WeightScheme,
    value: &[f64],
    num_groups: usize,
    r_max: usize,
    tau: f64,
    grad_head: &[f64],
    grad_tail: f64,
) -> Result<WeightGrads> {
    let params = scheme.stick(r_max)?;
    let trace = sbt_forward(scheme, value, num_groups, r_max, tau)?;
    let hat = trace.weights.hat_r();
    if grad_head.len() != hat {
        return arg_err("head gradient does not match the forward weights");
    }
    // tail = (1 − Σ_{r<ĥ} slot_r) / divisor
    let div = divisor(scheme.merge, num_groups, hat);
    let mut grad_slots = vec![0.0; trace.slots.len()];
    for r in 0..hat {
        grad_slots[r] = grad_head[r] - grad_tail / div;
    }
    let grad_s = break_sticks_vjp(&trace.fractions, &grad_slots);
    let mut grad_logits = vec![0.0; params.units()];
    for (k, (gs, s)) in grad_s.iter().zip(&trace.fractions).enumerate() {
        grad_logits[k] = gs * s * (1.0 - s);
    }
    Ok(logits_vjp(params, value, &grad_logits))
}

fn logits_vjp(params: &StickParams, value: &[f64], grad_logits: &[f64]) -> WeightGrads {
    let projected = params.value_projection.matvec(value);
    let mut grads = params.zeros_like();
    grads.unit_embeddings.add_outer(1.0, grad_logits, &projected);
    let grad_projected = params.unit_embeddings.matvec_t(grad_logits);
    grads.value_projection.add_outer(1.0, &grad_projected, value);
    WeightGrads {
        value: params.value_projection.matvec_t(&grad_projected),
        params: Some(grads),
    }
}

/// Jensen–Shannon divergence in bits. Shorter inputs are padded with zeros.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.iter().chain(q).any(|x| !x.is_finite() || *x < 0.0) {
        return arg_err("jsd inputs must be finite and nonnegative");
    }
    let n = p.len().max(q.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (at(p, i), at(q, i));
        let m = 0.5 * (a + b);
        total += 0.5 * (kl_to_mid(a, m) + kl_to_mid(b, m));
    }
    Ok(total.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn learned(kind: SchemeKind, r_max: usize, c: usize, seed: u64) -> WeightScheme {
        WeightScheme::init(kind, r_max, 5, c, &mut SeededRng::new(seed), 1.0)
    }

    #[test]
    fn stick_logit_examples() {
        let p = StickParams::gaussian(4, 3, 2, &mut SeededRng::new(1), 1.0);
        assert_eq!(stick_logits(&[0.0, 0.0], &p).unwrap(), vec![0.0; 4]);
        let scalar = StickParams::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(stick_logits(&[3.0], &scalar).unwrap(), vec![6.0]);
        assert!(stick_logits(&[1.0], &p).is_err());
    }

    #[test]
    fn stick_logits_match_dense_oracle() {
        let p = StickParams::gaussian(4, 3, 5, &mut SeededRng::new(2), 1.0);
        let v = SeededRng::new(3).normals(5, 0.0, 1.0);
        let got = stick_logits(&v, &p).unwrap();
        for r in 0..4 {
            let mut want = 0.0;
            for e in 0..3 {
                let mut proj = 0.0;
                for c in 0..5 {
                    proj += p.value_projection.get(e, c) * v[c];
                }
                want += p.unit_embeddings.get(r, e) * proj;
            }
            assert!(close(got[r], want, 1e-12));
        }
    }

    #[test]
    fn modified_sigmoid_examples() {
        assert!(close(modified_sigmoid(0.0, 1, 3, SigmoidOffset::Shifted), 0.25, 1e-15));
        assert!(close(modified_sigmoid(0.0, 3, 3, SigmoidOffset::Shifted), 0.5, 1e-15));
        assert_eq!(modified_sigmoid(0.0, 3, 3, SigmoidOffset::Unshifted), 1.0);
        assert!(close(modified_sigmoid(0.0, 1, 3, SigmoidOffset::Unshifted), 1.0 / 3.0, 1e-15));
        let mut prev = 0.0;
        for k in -40..=40 {
            let s = modified_sigmoid(k as f64, 2, 5, SigmoidOffset::Shifted);
            assert!(s > prev || (s == 1.0 && prev == 1.0));
            prev = s;
        }
        assert!(modified_sigmoid(40.0, 1, 5, SigmoidOffset::Shifted) > 1.0 - 1e-15);
    }

    #[test]
    fn stick_breaking_examples() {
        assert_eq!(stick_breaking(&[0.5, 0.5]).unwrap(), vec![0.5, 0.25, 0.25]);
        let tiny = stick_breaking(&[1e-12; 4]).unwrap();
        assert!(tiny[..4].iter().all(|a| *a < 1e-11));
        assert!(close(tiny[4], 1.0, 1e-10));
        assert!(stick_breaking(&[0.5, 1.0]).is_err());
        assert!(stick_breaking(&[0.0]).is_err());
        let s = SeededRng::new(4).normals(6, 0.0, 1.0);
        let s: Vec<f64> = s.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let a = stick_breaking(&s).unwrap();
        assert!(close(a.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn non_monotone_weights_are_expressible() {
        let a = stick_breaking(&[0.1, 0.9]).unwrap();
        assert!(a[1] > a[0]);
    }

    #[test]
    fn adaptive_truncate_examples() {
        let (hat, w) = adaptive_truncate(&[0.6, 0.3, 0.05, 0.03, 0.02], 0.1, MergeRule::Normalized).unwrap();
        assert_eq!(hat, 2);
        assert_eq!(w.head(), &[0.6, 0.3]);
        assert!(close(w.merged_weight(), 0.1 / 3.0, 1e-15));
        assert!(close(w.sum(), 1.0, 1e-12));

        let alphas = [0.5, 0.3, 0.15, 0.05];
        let (hat, w) = adaptive_truncate(&alphas, 1e-3, MergeRule::Normalized).unwrap();
        assert_eq!(hat, 3);
        for (a, b) in w.to_dense().iter().zip(&alphas) {
            assert!(close(*a, *b, 1e-15));
        }

        let eps = 1e-3;
        let (hat, w) = adaptive_truncate(&[1.0 - eps, eps / 2.0, eps / 2.0], 0.5, MergeRule::Normalized).unwrap();
        assert_eq!(hat, 0);
        assert!(w.to_dense().iter().all(|a| close(*a, 1.0 / 3.0, 1e-15)));

        let (_, w) = adaptive_truncate(&[0.6, 0.3, 0.05, 0.03, 0.02], 0.1, MergeRule::Unnormalized).unwrap();
        assert!(close(w.merged_weight(), 0.1 / 4.0, 1e-15));
        assert!(w.sum() < 1.0);
    }

    #[test]
    fn uniform_and_fixed_weights() {
        let u = scheme_weights(&WeightScheme::uniform(), &[], 5, 4, 0.001).unwrap();
        assert_eq!(u.to_dense(), vec![0.2; 5]);

        let f = scheme_weights(&WeightScheme::fixed_exponential(), &[], 9, 4, 0.001).unwrap();
        let d = f.to_dense();
        assert_eq!(&d[..4], &[0.5, 0.25, 0.125, 0.0625]);
        assert!(d[4..].iter().all(|a| close(*a, 0.0625 / 5.0, 1e-15)));
        assert!(close(f.sum(), 1.0, 1e-15));

        // Fewer groups than R_max: the last group takes the residual.
        let f = scheme_weights(&WeightScheme::fixed_exponential(), &[], 3, 4, 0.001).unwrap();
        assert_eq!(f.to_dense(), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn truncated_zeroes_far_groups() {
        let s = learned(SchemeKind::Truncated, 4, 3, 9);
        let v = [0.3, -1.0, 0.5];
        let w = scheme_weights(&s, &v, 9, 4, 0.001).unwrap();
        let d = w.to_dense();
        assert!(d[4..].iter().all(|a| *a == 0.0));
        assert!(close(d.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn degenerate_single_group() {
        for kind in SchemeKind::ALL {
            let s = learned(kind, 3, 2, 1);
            let w = scheme_weights(&s, &[0.4, 0.1], 1, 3, 0.001).unwrap();
            assert_eq!(w.to_dense(), vec![1.0], "{kind:?}");
        }
    }

    #[test]
    fn zero_logits_give_uniform_slots() {
        let params = StickParams::new(Matrix::zeros(4, 2), Matrix::zeros(2, 3)).unwrap();
        let s = WeightScheme::new(SchemeKind::LearnedSbt, Some(params)).unwrap();
        let w = scheme_weights(&s, &[1.0, 2.0, 3.0], 5, 4, 1e-6).unwrap();
        for a in w.to_dense() {
            assert!(close(a, 0.2, 1e-14));
        }
    }

    #[test]
    fn unit_count_is_checked() {
        let s = learned(SchemeKind::LearnedSbt, 3, 2, 1);
        assert!(scheme_weights(&s, &[0.0, 0.0], 5, 4, 0.001).is_err());
        assert!(WeightScheme::new(SchemeKind::LearnedSbt, None).is_err());
    }

    #[test]
    fn jsd_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!(close(jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.311_278_124_459_132_8, 1e-12));
        assert!(close(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, 1e-15));
        assert!(close(jsd(&[1.0], &[0.0, 1.0]).unwrap(), 1.0, 1e-15));
        assert!(jsd(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    fn weights_loss(scheme: &WeightScheme, v: &[f64], g: usize, r_max: usize, probe: &[f64]) -> f64 {
        let w = scheme_weights(scheme, v, g, r_max, 1e-3).unwrap();
        w.to_dense().iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    fn dense_to_compact_grad(w: &SpatialWeights, probe: &[f64]) -> (Vec<f64>, f64) {
        let hat = w.hat_r();
        (probe[..hat].to_vec(), probe[hat..w.num_groups()].iter().sum())
    }

    #[test]
    fn weight_vjp_matches_finite_differences() {
        let h = 1e-6;
        for kind in [SchemeKind::LearnedSbt, SchemeKind::SoftmaxWeights, SchemeKind::Truncated] {
            for (g, r_max) in [(7, 4), (3, 4), (5, 4)] {
                let scheme = learned(kind, r_max, 3, 17);
                let v = SeededRng::new(5).normals(3, 0.0, 1.0);
                let probe = SeededRng::new(6).normals(g, 0.0, 1.0);
                let w = scheme_weights(&scheme, &v, g, r_max, 1e-3).unwrap();
                let (gh, gt) = dense_to_compact_grad(&w, &probe);
                let grads = scheme_weights_vjp(&scheme, &v, g, r_max, 1e-3, &gh, gt).unwrap();
                for k in 0..v.len() {
                    let mut vp = v.clone();
                    vp[k] += h;
                    let mut vm = v.clone();
                    vm[k] -= h;
                    let fd = (weights_loss(&scheme, &vp, g, r_max, &probe) - weights_loss(&scheme, &vm, g, r_max, &probe)) / (2.0 * h);
                    assert!(close(fd, grads.value[k], 1e-7), "{kind:?} g={g} dv[{k}]: fd {fd} vs {}", grads.value[k]);
                }
                let gp = grads.params.unwrap();
                let base = scheme.params.clone().unwrap();
                for k in 0..base.unit_embeddings.data.len() {
                    let mut sp = scheme.clone();
                    sp.params.as_mut().unwrap().unit_embeddings.data[k] += h;
                    let mut sm = scheme.clone();
                    sm.params.as_mut().unwrap().unit_embeddings.data[k] -= h;
                    let fd = (weights_loss(&sp, &v, g, r_max, &probe) - weights_loss(&sm, &v, g, r_max, &probe)) / (2.0 * h);
                    assert!(close(fd, gp.unit_embeddings.data[k], 1e-7), "{kind:?} dE[{k}]");
                }
                for k in 0..base.value_projection.data.len() {
                    let mut sp = scheme.clone();
                    sp.params.as_mut().unwrap().value_projection.data[k] += h;
                    let mut sm = scheme.clone();
                    sm.params.as_mut().unwrap().value_projection.data[k] -= h;
                    let fd = (weights_loss(&sp, &v, g, r_max, &probe) - weights_loss(&sm, &v, g, r_max, &probe)) / (2.0 * h);
                    assert!(close(fd, gp.value_projection.data[k], 1e-7), "{kind:?} dP[{k}]");
                }
            }
        }
    }

    #[test]
    fn break_sticks_vjp_matches_finite_differences() {
        let s = [0.3, 0.7, 0.2, 0.55];
        let probe = [0.4, -1.2, 0.3, 2.0, -0.7];
        let f = |s: &[f64]| break_sticks(s).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let g = break_sticks_vjp(&s, &probe);
        for k in 0..s.len() {
            let mut sp = s;
            sp[k] += 1e-6;
            let mut sm = s;
            sm[k] -= 1e-6;
            let fd = (f(&sp) - f(&sm)) / 2e-6;
            assert!(close(fd, g[k], 1e-8));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(256))]

        #[test]
        fn remaining_stick_is_non_increasing(raw in proptest::collection::vec(-8.0f64..8.0, 1..12)) {
            let s: Vec<f64> = raw.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
            let a = break_sticks(&s);
            let mut remaining = 1.0;
            let mut prev = 1.0;
            for x in &a[..s.len()] {
                remaining -= x;
                proptest::prop_assert!(remaining <= prev + 1e-15);
                prev = remaining;
            }
            proptest::prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn truncation_preserves_head(raw in proptest::collection::vec(0.01f64..1.0, 2..10), tau in 0.001f64..0.9) {
            let z: f64 = raw.iter().sum();
            let a: Vec<f64> = raw.iter().map(|x| x / z).collect();
            let (hat, w) = adaptive_truncate(&a, tau, MergeRule::Normalized).unwrap();
            proptest::prop_assert_eq!(&a[..hat], w.head());
            proptest::prop_assert!((w.sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn jsd_is_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 1..8), b in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let za: f64 = a.iter().sum::<f64>().max(1e-9);
            let zb: f64 = b.iter().sum::<f64>().max(1e-9);
            let p: Vec<f64> = a.iter().map(|x| x / za).collect();
            let q: Vec<f64> = b.iter().map(|x| x / zb).collect();
            let d = jsd(&p, &q).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert!((d - jsd(&q, &p).unwrap()).abs() < 1e-12);
        }
    }
}
