//! Analytic gradients against central finite differences.

use ripple_core::featmap::FeatureMapKind;
use ripple_core::grad::{featmap_gradcheck, weights_gradcheck, AttentionCase, FdMode, FdReport};
use ripple_core::tasks::Task;
use ripple_core::toymodel::{gradcheck_config, model_gradcheck};
use ripple_core::vicinal::PartitionKind;
use ripple_core::weights::SchemeKind;

use super::{finish, Context};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scope {
    Featmap,
    Weights,
    Attention,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "featmap" => Ok(Scope::Featmap),
            "weights" => Ok(Scope::Weights),
            "attention" => Ok(Scope::Attention),
            "model" => Ok(Scope::Model),
            _ => Err(format!("unknown scope `{s}` (expected featmap, weights, attention or model)")),
        }
    }
}

impl Scope {
    fn default_tolerance(self) -> f64 {
        match self {
            Scope::Model => 1e-3,
            _ => 1e-4,
        }
    }
}

pub fn run(ctx: &Context) -> Result<bool, CliError> {
    let s = &ctx.settings;
    let scope: Scope = s.get("scope")?;
    let tolerance = match s.raw("gradcheck", "tolerance") {
        "" => scope.default_tolerance(),
        _ => s.get("tolerance")?,
    };
    let step: f64 = s.get("step")?;
    let sides: Vec<usize> = s.list("sides")?;
    let channels: usize = s.get("channels")?;
    if !(tolerance > 0.0 && step > 0.0) {
        return Err(CliError::Usage("tolerance and step must be positive".into()));
    }
    let mut dir = ctx.start("gradcheck")?;
    let seed = ctx.seed;
    let mode = FdMode::Auto {
        cutoff: 256,
        probes: 16,
        seed,
    };

    let mut rows: Vec<(String, FdReport)> = Vec::new();
    let mut tag = |prefix: String, reps: Vec<(String, FdReport)>| {
        rows.extend(reps.into_iter().map(|(n, r)| (format!("{prefix}/{n}"), r)));
    };
    match scope {
        Scope::Featmap => {
            for kind in [FeatureMapKind::DeterministicAdaptive, FeatureMapKind::RandomTrig] {
                tag(format!("{kind:?}"), featmap_gradcheck(kind, seed, step, tolerance)?);
            }
        }
        Scope::Weights => {
            for kind in SchemeKind::ALL {
                tag(kind.name().into(), weights_gradcheck(kind, seed, step, tolerance)?);
            }
        }
        Scope::Attention => {
            for &side in &sides {
                for kind in SchemeKind::ALL {
                    let case = AttentionCase::random(side, channels, kind, PartitionKind::UnitRing, seed)?;
                    tag(format!("{side}x{side}/{}", kind.name()), case.check(step, tolerance, mode)?);
                }
                let case = AttentionCase::random(side, channels, SchemeKind::LearnedSbt, PartitionKind::Dyadic, seed)?;
                tag(format!("{side}x{side}/sbt-dyadic"), case.check(step, tolerance, mode)?);
            }
        }
        Scope::Model => {
            let task = Task::LocalMajority { colors: 3 };
            let cfg = gradcheck_config(&task, seed);
            tag("model".into(), model_gradcheck(&task, &cfg, 2, step, tolerance)?);
        }
    }

    let mut csv = String::from("leaf,max_rel_error,worst_index,analytic,numeric,checked,directional,passed\n");
    let mut worst: Option<&(String, FdReport)> = None;
    let mut nan = false;
    println!("{:<40} {:>12} {:>6} {:>14} {:>14}  status", "leaf", "max_rel_err", "index", "analytic", "numeric");
    for row in &rows {
        let (name, r) = row;
        nan |= !(r.worst_analytic.is_finite() && r.worst_numeric.is_finite());
        println!(
            "{:<40} {:>12.3e} {:>6} {:>14.6e} {:>14.6e}  {}",
            name,
            r.max_rel_error,
            r.worst_index,
            r.worst_analytic,
            r.worst_numeric,
            if r.passed { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{name},{:e},{},{:e},{:e},{},{},{}\n",
            r.max_rel_error, r.worst_index, r.worst_analytic, r.worst_numeric, r.checked, r.directional, r.passed
        ));
        if worst.is_none_or(|w| !(w.1.max_rel_error >= r.max_rel_error)) {
            worst = Some(row);
        }
    }
    dir.write("gradcheck.csv", &csv)?;
    let passed = !nan && rows.iter().all(|(_, r)| r.passed);
    if let Some((name, r)) = worst {
        println!(
            "worst: {name} coordinate {} (analytic {:e}, numeric {:e}), rel. error {:.3e} vs tolerance {tolerance:e}",
            r.worst_index, r.worst_analytic, r.worst_numeric, r.max_rel_error
        );
    }
    if nan {
        let bad: String = rows
            .iter()
            .filter(|(_, r)| !(r.worst_analytic.is_finite() && r.worst_numeric.is_finite()))
            .map(|(n, r)| format!("{n}: {r:?}\n"))
            .collect();
        dir.write("nan_diagnostic.txt", &bad)?;
        eprintln!("non-finite gradients encountered; see nan_diagnostic.txt");
    }
    finish(dir)?;
    Ok(passed)
}
