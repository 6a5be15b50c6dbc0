//! Runtime scaling of the attention variants.

use ripple_core::bench::{run_bench, BenchPlan, BenchVariant, RMaxPolicy, VariantSpec};
use ripple_core::RippleError;

use super::{finish, Context};
use crate::CliError;

fn plan(ctx: &Context) -> Result<BenchPlan, CliError> {
    let s = &ctx.settings;
    let tokens: Vec<usize> = s.list("sizes")?;
    let sides = tokens
        .iter()
        .map(|&t| {
            let side = (t as f64).sqrt().round() as usize;
            if side * side == t && t > 0 {
                Ok(side)
            } else {
                Err(CliError::Usage(format!("bench size {t} is not a square token count")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let r_max: RMaxPolicy = s.get("r_max")?;
    let naive_r_max: RMaxPolicy = s.get("naive_r_max")?;
    let variants = s
        .list::<BenchVariant>("variants")?
        .into_iter()
        .map(|variant| VariantSpec {
            variant,
            r_max: match variant {
                BenchVariant::Naive => naive_r_max,
                BenchVariant::Dyadic => RMaxPolicy::Dyadic,
                _ => r_max,
            },
        })
        .collect();
    let plan = BenchPlan {
        variants,
        sides,
        batch: s.get("batch")?,
        repetitions: s.get("repetitions")?,
        warmup: s.get("warmup")?,
        dtype: ctx.dtype,
        channels: s.get("channels")?,
        scheme: s.get("scheme")?,
        tau: s.get("tau")?,
        seed: ctx.seed,
        parallel: s.get("parallel")?,
        memory_limit: s.get("memory_limit")?,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn run(ctx: &Context) -> Result<bool, CliError> {
    let plan = plan(ctx)?;
    let mut dir = ctx.start("bench")?;
    let report = match run_bench(&plan) {
        Ok(r) => r,
        Err(RippleError::Numeric(m)) => {
            eprintln!("correctness gate failed: {m}");
            dir.write("gate_failure.txt", &m)?;
            finish(dir)?;
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    println!("{:<12} {:>7} {:>6} {:>14} {:>12} {:>12}", "variant", "tokens", "r_max", "median_ns", "stddev_ns", "peak_bytes");
    for r in &report.records {
        match &r.skipped {
            Some(why) => println!("{:<12} {:>7}  skipped: {why}", r.variant.name(), r.tokens),
            None => println!(
                "{:<12} {:>7} {:>6} {:>14.0} {:>12.0} {:>12}",
                r.variant.name(),
                r.tokens,
                r.r_max,
                r.median_ns,
                r.stddev_ns,
                r.peak_bytes.map(|b| b.to_string()).unwrap_or_else(|| "-".into())
            ),
        }
    }
    for (v, fit) in report.slopes() {
        match fit {
            Ok(f) => println!(
                "slope {:<12} {:.3}  (95% CI {:.3}..{:.3}, r² {:.4})",
                v.name(),
                f.slope,
                f.ci95.0,
                f.ci95.1,
                f.r2
            ),
            Err(e) => println!("slope {:<12} unavailable: {e}", v.name()),
        }
    }
    dir.write("bench.csv", report.to_csv())?;
    dir.write(
        "slopes.json",
        serde_json::to_string_pretty(&report.summary_json()).expect("json"),
    )?;
    finish(dir)?;
    Ok(true)
}
