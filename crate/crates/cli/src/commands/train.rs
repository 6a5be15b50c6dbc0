//! Toy classifier training demo.

use ripple_core::grid::GridShape;
use ripple_core::tasks::Task;
use ripple_core::tensor::DenseField;
use ripple_core::toymodel::{train_demo, OptimizerKind, ToyModelConfig, TrainConfig};
use ripple_core::vicinal::{PartitionKind, PartitionScheme};
use ripple_core::RippleError;

use super::{finish, Context};
use crate::config::Dims;
use crate::CliError;

pub fn run(ctx: &Context) -> Result<bool, CliError> {
    let s = &ctx.settings;
    let task: Task = s.get("task")?;
    let dims: Dims = s.get("grid")?;
    let grid = GridShape::new(dims.height, dims.width)?;
    task.validate(grid)?;
    let mut cfg = ToyModelConfig::for_task(&task, grid, ctx.seed);
    cfg.layers = s.get("layers")?;
    cfg.ripple_layers = s.get("ripple_layers")?;
    cfg.heads = s.get("heads")?;
    cfg.model_dim = s.get("model_dim")?;
    cfg.scheme = s.get("scheme")?;
    cfg.featmap = s.get("featmap")?;
    let pkind: PartitionKind = s.get("partition")?;
    cfg.partition = PartitionScheme::new(pkind, s.get("r_max")?, s.get("tau")?)?;
    cfg.validate()?;
    let clip: f64 = s.get("clip_norm")?;
    let optimizer: OptimizerKind = s.get("optimizer")?;
    let train = TrainConfig {
        steps: s.get("steps")?,
        batch: s.get("batch")?,
        lr: s.get("lr")?,
        momentum: s.get("momentum")?,
        optimizer,
        train_size: s.get("train_size")?,
        log_every: s.get("log_every")?,
        clip_norm: (clip > 0.0).then_some(clip),
        seed: ctx.seed,
    };
    if train.batch == 0 || train.train_size == 0 || train.log_every == 0 {
        return Err(CliError::Usage("batch, train_size and log_every must be positive".into()));
    }
    let mut dir = ctx.start("train")?;
    let report = match train_demo(&task, &cfg, &train) {
        Ok(r) => r,
        Err(RippleError::Numeric(m)) => {
            eprintln!("training diverged: {m}");
            dir.write("divergence.txt", &m)?;
            finish(dir)?;
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    println!("{:>6} {:>12} {:>9} {:>9}", "step", "loss", "accuracy", "mean_jsd");
    for m in &report.metrics {
        let j = m.mean_jsd.map(|j| format!("{j:.4}")).unwrap_or_else(|| "-".into());
        println!("{:>6} {:>12.6} {:>9.4} {:>9}", m.step, m.loss, m.accuracy, j);
    }
    let (first, last) = (report.initial_loss(), report.final_loss());
    println!("loss {first:.6} -> {last:.6} ({:.1}% of initial)", 100.0 * last / first);
    dir.write("metrics.csv", report.metrics_csv())?;
    let flat = report.state.params.to_field()?;
    let ckpt = DenseField::with_dtype(flat.dims().to_vec(), flat.into_data(), ctx.dtype)?;
    dir.write("checkpoint.rplt", ckpt.to_bytes()?)?;
    finish(dir)?;
    Ok(true)
}
