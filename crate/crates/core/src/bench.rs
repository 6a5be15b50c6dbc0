//! Wall-time and allocation scaling of the attention variants.
//!
//! Times are machine dependent; only log-log slopes and ratios between
//! variants carry meaning.

use std::hint::black_box;
use std::time::Instant;

use serde_json::json;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, Distribution, Median};

use crate::alloc::peak_transient;
use crate::attention::{
    groups_at, linearized_attention, ripple_dp, ripple_dp_dyadic, ripple_dp_mode, ripple_naive,
    ripple_naive_with_weights, softmax_attention, RippleHead, RippleOptions, TapeMode,
};
use crate::error::{arg_err, Result, RippleError};
use crate::featmap::FeatureMapParams;
use crate::grad::{ripple_vjp, AttentionCase, FdMode};
use crate::grid::{rel_error, GridShape, TokenField};
use crate::tensor::{DType, Matrix, SeededRng};
use crate::vicinal::{PartitionKind, PartitionScheme};
use crate::weights::{SchemeKind, SpatialWeights, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchVariant {
    Softmax,
    Linearized,
    /// Enumerating ripple attention.
    Naive,
    Dp,
    Dyadic,
    /// Reverse pass of DP ripple attention from a recorded tape.
    DpBackward,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 6] = [
        BenchVariant::Softmax,
        BenchVariant::Linearized,
        BenchVariant::Naive,
        BenchVariant::Dp,
        BenchVariant::Dyadic,
        BenchVariant::DpBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Softmax => "softmax",
            BenchVariant::Linearized => "linearized",
            BenchVariant::Naive => "naive",
            BenchVariant::Dp => "dp",
            BenchVariant::Dyadic => "dyadic",
            BenchVariant::DpBackward => "dp-backward",
        }
    }

    pub fn default_policy(self) -> RMaxPolicy {
        match self {
            BenchVariant::Naive => RMaxPolicy::LinearInSide,
            BenchVariant::Dyadic => RMaxPolicy::Dyadic,
            _ => RMaxPolicy::Fixed(4),
        }
    }

    fn partition_kind(self) -> PartitionKind {
        if self == BenchVariant::Dyadic {
            PartitionKind::Dyadic
        } else {
            PartitionKind::UnitRing
        }
    }
}

impl std::str::FromStr for BenchVariant {
    type Err = RippleError;

    fn from_str(s: &str) -> Result<Self> {
        BenchVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .map_or_else(|| arg_err(format!("unknown bench variant `{s}`")), Ok)
    }
}

/// How `R_max` is chosen for a grid of side `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RMaxPolicy {
    Fixed(usize),
    /// `s - 1`: every distance gets its own group.
    LinearInSide,
    /// Enough dyadic bands to reach the farthest corner.
    Dyadic,
}

impl RMaxPolicy {
    pub fn r_max(self, side: usize) -> usize {
        match self {
            RMaxPolicy::Fixed(r) => r,
            RMaxPolicy::LinearInSide => side.saturating_sub(1).max(1),
            RMaxPolicy::Dyadic => ((usize::BITS - side.saturating_sub(1).leading_zeros()) as usize).max(1),
        }
    }

    pub fn name(self) -> String {
        match self {
            RMaxPolicy::Fixed(r) => format!("fixed:{r}"),
            RMaxPolicy::LinearInSide => "linear".into(),
            RMaxPolicy::Dyadic => "dyadic".into(),
        }
    }
}

impl std::str::FromStr for RMaxPolicy {
    type Err = RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RMaxPolicy::LinearInSide),
            "dyadic" => Ok(RMaxPolicy::Dyadic),
            _ => match s.strip_prefix("fixed:").map(str::parse::<usize>) {
                Some(Ok(r)) if r >= 1 => Ok(RMaxPolicy::Fixed(r)),
                _ => arg_err(format!("bad r_max policy `{s}` (expected fixed:N, linear or dyadic)")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub variant: BenchVariant,
    pub r_max: RMaxPolicy,
}

impl From<BenchVariant> for VariantSpec {
    fn from(variant: BenchVariant) -> Self {
        Self {
            variant,
            r_max: variant.default_policy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub variants: Vec<VariantSpec>,
    /// Grid side lengths; tokens are `side²`.
    pub sides: Vec<usize>,
    /// Forward calls per timed repetition.
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub dtype: DType,
    pub channels: usize,
    pub scheme: SchemeKind,
    pub tau: f64,
    pub seed: u64,
    pub parallel: bool,
    /// Sizes whose estimated working set exceeds this are skipped.
    pub memory_limit: usize,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            variants: BenchVariant::ALL.into_iter().map(VariantSpec::from).collect(),
            sides: vec![8, 12, 16, 24],
            batch: 1,
            repetitions: 5,
            warmup: 1,
            dtype: DType::F64,
            channels: 8,
            scheme: SchemeKind::LearnedSbt,
            tau: 1e-3,
            seed: 0,
            parallel: false,
            memory_limit: 2 << 30,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return arg_err("at least 3 repetitions are needed");
        }
        if self.warmup < 1 {
            return arg_err("at least one warmup run is needed");
        }
        if self.variants.is_empty() || self.sides.is_empty() {
            return arg_err("plan has no variants or no sizes");
        }
        if self.sides.contains(&0) || self.batch == 0 || self.channels == 0 {
            return arg_err("sides, batch and channels must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: BenchVariant,
    pub side: usize,
    pub tokens: usize,
    pub dtype: DType,
    pub r_max: usize,
    pub median_ns: f64,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub peak_bytes: Option<usize>,
    /// Why the size was not run.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// 95% confidence interval of the slope.
    pub ci95: (f64, f64),
    pub points: usize,
}

/// Least-squares fit of `ln y` against `ln x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return arg_err(format!("a slope fit needs at least 3 sizes, got {}", points.len()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return arg_err("slope fits need positive finite values");
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return arg_err("slope fits need at least two distinct sizes");
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let sst: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if sst == 0.0 { 1.0 } else { (1.0 - sse / sst).clamp(0.0, 1.0) };
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| RippleError::Numeric(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        ci95: (slope - t * se, slope + t * se),
        points: points.len(),
    })
}

/// Fixed-seed inputs and parameters for one variant at one size.
struct Instance {
    q: TokenField,
    k: TokenField,
    v: TokenField,
    head: RippleHead,
    opts: RippleOptions,
}

impl Instance {
    fn new(variant: BenchVariant, side: usize, r_max: usize, plan: &BenchPlan) -> Result<Self> {
        let shape = GridShape::square(side)?;
        let mut rng = SeededRng::new(plan.seed ^ (side as u64) << 32);
        let d = plan.channels;
        let field = |rng: &mut SeededRng| {
            let mut f = TokenField::gaussian(shape, d, rng, 1.0);
            f.data_mut().iter_mut().for_each(|x| *x = plan.dtype.quantize(*x));
            f
        };
        let (q, k, v) = (field(&mut rng), field(&mut rng), field(&mut rng));
        let head = RippleHead {
            scheme: WeightScheme::init(plan.scheme, r_max, 4, d, &mut rng, 0.5),
            featmap: FeatureMapParams::adaptive(d, d, d, &mut rng)?,
        };
        let opts = RippleOptions::new(PartitionScheme::new(variant.partition_kind(), r_max, plan.tau)?)
            .with_parallel(plan.parallel);
        Ok(Self { q, k, v, head, opts })
    }

    fn ones(&self) -> Vec<SpatialWeights> {
        let shape = self.q.shape();
        (0..shape.tokens())
            .map(|t| SpatialWeights::ones(groups_at(&self.opts.partition, shape, t)))
            .collect()
    }
}

/// A prepared call whose cost is what gets timed.
enum Runner {
    Softmax(Matrix, Matrix, Matrix),
    Linearized(Matrix, Matrix, Matrix),
    Naive,
    Dp,
    Dyadic,
    Backward(Box<crate::attention::AttentionTape>, TokenField),
}

impl Runner {
    fn prepare(variant: BenchVariant, inst: &Instance) -> Result<Self> {
        let mats = || (inst.q.to_matrix(), inst.k.to_matrix(), inst.v.to_matrix());
        Ok(match variant {
            BenchVariant::Softmax => {
                let (q, k, v) = mats();
                Runner::Softmax(q, k, v)
            }
            BenchVariant::Linearized => {
                let (q, k, v) = mats();
                Runner::Linearized(q, k, v)
            }
            BenchVariant::Naive => Runner::Naive,
            BenchVariant::Dp => Runner::Dp,
            BenchVariant::Dyadic => Runner::Dyadic,
            BenchVariant::DpBackward => {
                let fwd = ripple_dp(&inst.q, &inst.k, &inst.v, &inst.head, &inst.opts)?;
                let tape = fwd.tape.ok_or_else(|| RippleError::Numeric("forward kept no tape".into()))?;
                let mut rng = SeededRng::new(7);
                let up = TokenField::gaussian(inst.q.shape(), inst.v.channels(), &mut rng, 1.0);
                Runner::Backward(Box::new(tape), up)
            }
        })
    }

    /// One call; returns the output values.
    fn run(&self, inst: &Instance) -> Result<Vec<f64>> {
        Ok(match self {
            Runner::Softmax(q, k, v) => softmax_attention(q, k, v)?.data,
            Runner::Linearized(q, k, v) => linearized_attention(q, k, v, &inst.head.featmap, inst.opts.epsilon)?.data,
            Runner::Naive => ripple_naive(&inst.q, &inst.k, &inst.v, &inst.head, &inst.opts)?.out.into_data(),
            Runner::Dp => ripple_dp_mode(&inst.q, &inst.k, &inst.v, &inst.head, &inst.opts, TapeMode::Discard)?
                .out
                .into_data(),
            Runner::Dyadic => ripple_dp_dyadic(&inst.q, &inst.k, &inst.v, &inst.head, &inst.opts)?.out.into_data(),
            Runner::Backward(tape, up) => ripple_vjp(tape, up, &inst.head)?.grad_v.into_data(),
        })
    }
}

/// Row-by-row softmax attention with a streaming log-sum-exp, independent
/// of the full-matrix implementation it checks.
fn softmax_oracle(q: &TokenField, k: &TokenField, v: &TokenField) -> Vec<f64> {
    let (n, c) = (q.shape().tokens(), v.channels());
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        let mut z = 0.0;
        let acc = &mut out[i * c..(i + 1) * c];
        for j in 0..n {
            let s: f64 = q.token(i).iter().zip(k.token(j)).map(|(a, b)| a * b).sum();
            if s > mx {
                let scale = (mx - s).exp();
                z *= scale;
                acc.iter_mut().for_each(|a| *a *= scale);
                mx = s;
            }
            let e = (s - mx).exp();
            z += e;
            for (a, x) in acc.iter_mut().zip(v.token(j)) {
                *a += e * x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= z);
    }
    out
}

const GATE_TOLERANCE: f64 = 1e-8;

/// Checks a variant against an independent oracle. Returns the error seen.
fn correctness_gate(variant: BenchVariant, inst: &Instance) -> Result<f64> {
    let got = Runner::prepare(variant, inst)?.run(inst)?;
    let (q, k, v) = (&inst.q, &inst.k, &inst.v);
    let want = match variant {
        BenchVariant::Softmax => softmax_oracle(q, k, v),
        BenchVariant::Linearized => {
            ripple_naive_with_weights(q, k, v, &inst.head.featmap, &inst.ones(), &inst.opts)?.out.into_data()
        }
        BenchVariant::Naive => ripple_dp(q, k, v, &inst.head, &inst.opts)?.out.into_data(),
        BenchVariant::Dp | BenchVariant::Dyadic => ripple_naive(q, k, v, &inst.head, &inst.opts)?.out.into_data(),
        BenchVariant::DpBackward => {
            let case = AttentionCase::random(inst.q.shape().height.min(5), 3, SchemeKind::LearnedSbt, PartitionKind::UnitRing, 11)?;
            let worst = case
                .check(1e-5, 1e-4, FdMode::Directional { probes: 3, seed: 11 })?
                .into_iter()
                .map(|(_, r)| r.max_rel_error)
                .fold(0.0, f64::max);
            return if worst < 1e-4 {
                Ok(worst)
            } else {
                Err(RippleError::Numeric(format!("backward gate failed: finite-difference error {worst:e}")))
            };
        }
    };
    let err = rel_error(&got, &want);
    if err < GATE_TOLERANCE {
        Ok(err)
    } else {
        Err(RippleError::Numeric(format!("{} disagrees with its oracle: error {err:e}", variant.name())))
    }
}

/// Rough working-set size in bytes, used to skip sizes that would not fit.
pub fn estimated_bytes(variant: BenchVariant, tokens: usize, channels: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    let fields = 8 * tokens * channels * f;
    match variant {
        BenchVariant::Softmax => fields + tokens * tokens * f,
        BenchVariant::Linearized => fields,
        _ => fields + 2 * tokens * (channels * channels + channels) * f,
    }
}

pub struct BenchReport {
    pub plan: BenchPlan,
    pub records: Vec<BenchRecord>,
    /// Oracle error of each variant at the smallest size.
    pub gates: Vec<(BenchVariant, f64)>,
}

impl BenchReport {
    pub fn slopes(&self) -> Vec<(BenchVariant, Result<SlopeFit>)> {
        self.plan
            .variants
            .iter()
            .map(|spec| {
                let pts: Vec<(f64, f64)> = self
                    .records
                    .iter()
                    .filter(|r| r.variant == spec.variant && r.skipped.is_none())
                    .map(|r| (r.tokens as f64, r.median_ns))
                    .collect();
                (spec.variant, fit_slope(&pts))
            })
            .collect()
    }

    pub fn record(&self, variant: BenchVariant, side: usize) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.variant == variant && r.side == side)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,tokens,dtype,r_max,median_ns,mean_ns,stddev_ns,peak_bytes\n");
        for r in self.records.iter().filter(|r| r.skipped.is_none()) {
            s.push_str(&format!(
                "{},{},{},{},{:.0},{:.0},{:.0},{}\n",
                r.variant.name(),
                r.tokens,
                r.dtype.name(),
                r.r_max,
                r.median_ns,
                r.mean_ns,
                r.stddev_ns,
                r.peak_bytes.map(|b| b.to_string()).unwrap_or_default()
            ));
        }
        s
    }

    /// Slopes, skipped sizes and the plan, for replay.
    pub fn summary_json(&self) -> serde_json::Value {
        let slopes: serde_json::Map<String, serde_json::Value> = self
            .slopes()
            .into_iter()
            .map(|(v, fit)| {
                let val = match fit {
                    Ok(f) => json!({
                        "slope": f.slope,
                        "intercept": f.intercept,
                        "r2": f.r2,
                        "ci95": [f.ci95.0, f.ci95.1],
                        "points": f.points,
                    }),
                    Err(e) => json!({ "error": e.to_string() }),
                };
                (v.name().to_string(), val)
            })
            .collect();
        let p = &self.plan;
        json!({
            "plan": {
                "variants": p.variants.iter().map(|s| json!({"variant": s.variant.name(), "r_max": s.r_max.name()})).collect::<Vec<_>>(),
                "sides": p.sides,
                "batch": p.batch,
                "repetitions": p.repetitions,
                "warmup": p.warmup,
                "dtype": p.dtype.name(),
                "channels": p.channels,
                "scheme": p.scheme.name(),
                "tau": p.tau,
                "seed": p.seed,
                "parallel": p.parallel,
            },
            "gates": self.gates.iter().map(|(v, e)| json!({"variant": v.name(), "error": e})).collect::<Vec<_>>(),
            "skipped": self.records.iter().filter_map(|r| r.skipped.as_ref().map(|why| json!({"variant": r.variant.name(), "tokens": r.tokens, "reason": why}))).collect::<Vec<_>>(),
            "slopes": slopes,
        })
    }
}

/// Peak transient bytes of one call of `variant` on a `side × side` grid;
/// `None` without the counting allocator. DP ripple runs without a tape.
pub fn memory_probe(variant: BenchVariant, side: usize, r_max: usize, plan: &BenchPlan) -> Result<Option<usize>> {
    let mut plan = plan.clone();
    plan.parallel = false;
    let inst = Instance::new(variant, side, r_max, &plan)?;
    let runner = Runner::prepare(variant, &inst)?;
    let (out, peak) = peak_transient(|| runner.run(&inst));
    out?;
    Ok(peak)
}

/// Gates every variant at the smallest size, then times each size.
pub fn run_bench(plan: &BenchPlan) -> Result<BenchReport> {
    plan.validate()?;
    let smallest = *plan.sides.iter().min().expect("validated non-empty");
    let mut gates = Vec::new();
    for spec in &plan.variants {
        let inst = Instance::new(spec.variant, smallest, spec.r_max.r_max(smallest), plan)?;
        gates.push((spec.variant, correctness_gate(spec.variant, &inst)?));
    }
    let mut records = Vec::new();
    for spec in &plan.variants {
        for &side in &plan.sides {
            let tokens = side * side;
            let r_max = spec.r_max.r_max(side);
            let mut rec = BenchRecord {
                variant: spec.variant,
                side,
                tokens,
                dtype: plan.dtype,
                r_max,
                median_ns: f64::NAN,
                mean_ns: f64::NAN,
                stddev_ns: f64::NAN,
                peak_bytes: None,
                skipped: None,
            };
            let need = estimated_bytes(spec.variant, tokens, plan.channels);
            if need > plan.memory_limit {
                rec.skipped = Some(format!("needs about {need} bytes, limit {}", plan.memory_limit));
                records.push(rec);
                continue;
            }
            let inst = Instance::new(spec.variant, side, r_max, plan)?;
            let runner = Runner::prepare(spec.variant, &inst)?;
            for _ in 0..plan.warmup * plan.batch {
                black_box(runner.run(&inst)?);
            }
            let mut times = Vec::with_capacity(plan.repetitions);
            for _ in 0..plan.repetitions {
                let start = Instant::now();
                for _ in 0..plan.batch {
                    black_box(runner.run(&inst)?);
                }
                times.push(start.elapsed().as_nanos().max(1) as f64);
            }
            let data = Data::new(times);
            rec.median_ns = data.median();
            rec.mean_ns = data.mean().unwrap_or(f64::NAN);
            rec.stddev_ns = data.std_dev().unwrap_or(0.0);
            if !plan.parallel {
                rec.peak_bytes = peak_transient(|| runner.run(&inst)).1;
            }
            records.push(rec);
        }
    }
    Ok(BenchReport {
        plan: plan.clone(),
        records,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws_are_recovered() {
        let lin: Vec<(f64, f64)> = [64.0, 144.0, 256.0, 576.0].iter().map(|&t| (t, 3.5 * t)).collect();
        let f = fit_slope(&lin).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-9);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let quad: Vec<(f64, f64)> = [64.0, 144.0, 256.0].iter().map(|&t| (t, 0.1 * t * t)).collect();
        assert!((fit_slope(&quad).unwrap().slope - 2.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_fits_report_r2_at_most_one() {
        let pts = [(10.0, 12.0), (20.0, 19.0), (40.0, 50.0), (80.0, 70.0)];
        let f = fit_slope(&pts).unwrap();
        assert!(f.r2 <= 1.0 && f.r2 > 0.5);
        assert!(f.ci95.0 < f.slope && f.slope < f.ci95.1);
    }

    #[test]
    fn too_few_points_are_rejected() {
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_slope(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
    }

    #[test]
    fn plans_are_validated() {
        let mut p = BenchPlan::default();
        p.repetitions = 2;
        assert!(p.validate().is_err());
        p.repetitions = 3;
        p.warmup = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn policies() {
        assert_eq!(RMaxPolicy::LinearInSide.r_max(16), 15);
        assert_eq!(RMaxPolicy::Dyadic.r_max(16), 4);
        assert_eq!(RMaxPolicy::Dyadic.r_max(17), 5);
        assert_eq!("fixed:3".parse::<RMaxPolicy>().unwrap(), RMaxPolicy::Fixed(3));
        assert!("fixed:0".parse::<RMaxPolicy>().is_err());
        assert_eq!("dp-backward".parse::<BenchVariant>().unwrap(), BenchVariant::DpBackward);
    }

    #[test]
    fn small_run_produces_every_record() {
        let plan = BenchPlan {
            sides: vec![4, 5, 6],
            repetitions: 3,
            channels: 3,
            ..BenchPlan::default()
        };
        let rep = run_bench(&plan).unwrap();
        assert_eq!(rep.records.len(), 6 * 3);
        assert!(rep.records.iter().all(|r| r.median_ns > 0.0));
        assert!(rep.slopes().iter().all(|(_, f)| f.as_ref().unwrap().slope.is_finite()));
        assert_eq!(rep.to_csv().lines().count(), 19);
        assert!(rep.summary_json()["slopes"]["dp"]["slope"].is_number());
    }

    #[test]
    fn oversized_runs_are_skipped() {
        let plan = BenchPlan {
            variants: vec![BenchVariant::Softmax.into()],
            sides: vec![4, 5, 6],
            channels: 2,
            memory_limit: estimated_bytes(BenchVariant::Softmax, 25, 2),
            ..BenchPlan::default()
        };
        let rep = run_bench(&plan).unwrap();
        assert!(rep.record(BenchVariant::Softmax, 6).unwrap().skipped.is_some());
        assert!(rep.slopes()[0].1.is_err());
    }
}
