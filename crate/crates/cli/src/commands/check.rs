//! DP ripple attention against the enumerating oracle on random instances.

use ripple_core::attention::{
    multi_head_ripple, project, query_weights, ripple_dp_with_weights, slice_channels, AttentionBackend,
    MultiHeadParams, RippleHead, RippleOptions,
};
use ripple_core::featmap::{FeatureMapKind, FeatureMapParams};
use ripple_core::grid::{rel_error, GridShape, TokenField};
use ripple_core::tensor::SeededRng;
use ripple_core::vicinal::{PartitionKind, PartitionScheme};
use ripple_core::weights::{SchemeKind, SpatialWeights, WeightScheme};
use serde_json::json;

use super::{finish, Context};
use crate::config::Dims;
use crate::CliError;

/// Largest side the quadratic oracle runs on without `--force`.
pub const GUARDRAIL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sabotage {
    None,
    /// Every query's weights shifted one ring outward on the DP side.
    RingOffByOne,
}

struct Plan {
    sizes: Vec<Dims>,
    schemes: Vec<SchemeKind>,
    heads: Vec<usize>,
    head_dim: usize,
    trials: usize,
    tolerance: f64,
    partition: PartitionScheme,
    featmap: FeatureMapKind,
    sabotage: Sabotage,
}

fn plan(ctx: &Context) -> Result<Plan, CliError> {
    let s = &ctx.settings;
    let sizes: Vec<Dims> = s.list("sizes")?;
    let force: bool = s.get("force")?;
    if let Some(d) = sizes.iter().find(|d| d.height > GUARDRAIL || d.width > GUARDRAIL) {
        if !force {
            return Err(CliError::Usage(format!(
                "{}x{} exceeds the {GUARDRAIL}x{GUARDRAIL} guardrail for the quadratic oracle (use --force)",
                d.height, d.width
            )));
        }
    }
    let sabotage = match s.raw("check", "sabotage") {
        "none" => Sabotage::None,
        "ring-off-by-one" => Sabotage::RingOffByOne,
        other => return Err(CliError::Usage(format!("unknown sabotage mode `{other}`"))),
    };
    let kind: PartitionKind = s.get("partition")?;
    let heads: Vec<usize> = s.list("heads")?;
    if heads.contains(&0) {
        return Err(CliError::Usage("head counts must be positive".into()));
    }
    let tolerance: f64 = s.get("tolerance")?;
    if !(tolerance > 0.0) {
        return Err(CliError::Usage("tolerance must be positive".into()));
    }
    Ok(Plan {
        sizes,
        schemes: s.list("schemes")?,
        heads,
        head_dim: s.get("head_dim")?,
        trials: s.get("trials")?,
        tolerance,
        partition: PartitionScheme::new(kind, s.get("r_max")?, s.get("tau")?)?,
        featmap: s.get("featmap")?,
        sabotage,
    })
}

struct Instance {
    x: TokenField,
    params: MultiHeadParams,
}

fn instance(shape: GridShape, scheme: SchemeKind, heads: usize, plan: &Plan, ctx: &Context, seed: u64) -> Result<Instance, CliError> {
    let mut rng = SeededRng::new(seed);
    let hd = plan.head_dim;
    let mut x = TokenField::gaussian(shape, heads * hd, &mut rng, 1.0);
    x.data_mut().iter_mut().for_each(|v| *v = ctx.dtype.quantize(*v));
    let hs = (0..heads)
        .map(|_| {
            Ok(RippleHead {
                scheme: WeightScheme::init(scheme, plan.partition.r_max, 4, hd, &mut rng, 1.0),
                featmap: FeatureMapParams::new(plan.featmap, hd, hd, hd, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let params = MultiHeadParams::init(heads * hd, hs, &mut rng)?;
    Ok(Instance { x, params })
}

/// The multi-head DP layer with every weight vector moved one ring outward.
fn sabotaged_dp(x: &TokenField, params: &MultiHeadParams, opts: &RippleOptions) -> Result<TokenField, CliError> {
    let (q, k, v) = (project(x, &params.wq), project(x, &params.wk), project(x, &params.wv));
    let hd = params.head_dim();
    let mut concat = TokenField::zeros(x.shape(), params.model_dim());
    for (h, head) in params.heads.iter().enumerate() {
        let (qh, kh, vh) = (slice_channels(&q, h * hd, hd), slice_channels(&k, h * hd, hd), slice_channels(&v, h * hd, hd));
        let shifted = query_weights(&head.scheme, &opts.partition, &vh)?
            .into_iter()
            .map(|w| {
                let mut d = w.to_dense();
                d.rotate_right(1);
                SpatialWeights::from_dense(&d)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let out = ripple_dp_with_weights(&qh, &kh, &vh, &head.featmap, shifted, opts)?.out;
        for t in 0..x.shape().tokens() {
            concat.token_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(out.token(t));
        }
    }
    Ok(project(&concat, &params.wo))
}

struct Worst {
    error: f64,
    label: String,
    seed: u64,
    x: TokenField,
    dp: TokenField,
    naive: TokenField,
}

pub fn run(ctx: &Context) -> Result<bool, CliError> {
    let plan = plan(ctx)?;
    let mut dir = ctx.start("check")?;
    let opts = RippleOptions::new(plan.partition).with_parallel(ctx.parallel());
    let mut master = SeededRng::new(ctx.seed);
    let mut groups = Vec::new();
    let mut worst: Option<Worst> = None;
    let mut total = 0usize;
    println!("{:>7}  {:>10}  {:>5}  {:>6}  {:>12}  status", "grid", "scheme", "heads", "trials", "max_rel_err");
    for dims in &plan.sizes {
        let shape = GridShape::new(dims.height, dims.width)?;
        for &scheme in &plan.schemes {
            for &heads in &plan.heads {
                let mut max_err = 0.0f64;
                for trial in 0..plan.trials {
                    let seed = master.fork().seed();
                    let inst = instance(shape, scheme, heads, &plan, ctx, seed)?;
                    let naive = multi_head_ripple(&inst.x, &inst.params, &opts, AttentionBackend::Naive)?.out;
                    let dp = match plan.sabotage {
                        Sabotage::None => multi_head_ripple(&inst.x, &inst.params, &opts, AttentionBackend::Dp)?.out,
                        Sabotage::RingOffByOne => sabotaged_dp(&inst.x, &inst.params, &opts)?,
                    };
                    let err = rel_error(dp.data(), naive.data());
                    let err = if err.is_finite() { err } else { f64::INFINITY };
                    max_err = max_err.max(err);
                    total += 1;
                    if worst.as_ref().is_none_or(|w| err > w.error) {
                        worst = Some(Worst {
                            error: err,
                            label: format!("{}x{} {} heads={heads} trial={trial}", dims.height, dims.width, scheme.name()),
                            seed,
                            x: inst.x,
                            dp,
                            naive,
                        });
                    }
                }
                let ok = max_err < plan.tolerance;
                println!(
                    "{:>7}  {:>10}  {:>5}  {:>6}  {:>12.3e}  {}",
                    format!("{}x{}", dims.height, dims.width),
                    scheme.name(),
                    heads,
                    plan.trials,
                    max_err,
                    if ok { "PASS" } else { "FAIL" }
                );
                groups.push(json!({
                    "grid": [dims.height, dims.width],
                    "scheme": scheme.name(),
                    "heads": heads,
                    "trials": plan.trials,
                    "max_rel_error": max_err,
                    "passed": ok,
                }));
            }
        }
    }
    let passed = worst.as_ref().is_none_or(|w| w.error < plan.tolerance);
    let worst_json = worst.as_ref().map(|w| json!({"instance": w.label, "seed": w.seed, "error": w.error}));
    if let (false, Some(w)) = (passed, &worst) {
        for (name, f) in [("worst_x.rplt", &w.x), ("worst_dp.rplt", &w.dp), ("worst_naive.rplt", &w.naive)] {
            dir.write(name, f.to_field()?.to_bytes()?)?;
        }
        eprintln!("worst instance {} (seed {}) dumped, error {:.3e}", w.label, w.seed, w.error);
    }
    let summary = json!({
        "instances": total,
        "tolerance": plan.tolerance,
        "passed": passed,
        "worst": worst_json,
        "groups": groups,
    });
    dir.write("check_summary.json", serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("{total} instances, {}", if passed { "all within tolerance" } else { "FAILED" });
    finish(dir)?;
    Ok(passed)
}
