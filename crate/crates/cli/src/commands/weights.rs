//! Spatial weights of one query, plus the JSD diagnostic over the grid.

use ripple_core::attention::query_weights;
use ripple_core::grid::{GridShape, Pos, TokenField};
use ripple_core::tensor::SeededRng;
use ripple_core::vicinal::{group_index, PartitionKind, PartitionScheme};
use ripple_core::weights::{jsd, scheme_weights, MergeRule, SchemeKind, SigmoidOffset, WeightScheme};

use super::{finish, Context};
use crate::config::Dims;
use crate::CliError;

fn parse_merge(s: &str) -> Result<MergeRule, CliError> {
    match s {
        "normalized" => Ok(MergeRule::Normalized),
        "unnormalized" => Ok(MergeRule::Unnormalized),
        _ => Err(CliError::Usage(format!("unknown merge rule `{s}` (expected normalized or unnormalized)"))),
    }
}

fn parse_offset(s: &str) -> Result<SigmoidOffset, CliError> {
    match s {
        "shifted" => Ok(SigmoidOffset::Shifted),
        "unshifted" => Ok(SigmoidOffset::Unshifted),
        _ => Err(CliError::Usage(format!("unknown sigmoid offset `{s}` (expected shifted or unshifted)"))),
    }
}

fn parse_query(s: &str) -> Result<Pos, CliError> {
    let bad = || CliError::Usage(format!("query `{s}` is not `row,col`"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok(Pos::new(r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

pub fn run(ctx: &Context) -> Result<bool, CliError> {
    let s = &ctx.settings;
    let kind: SchemeKind = s.get("scheme")?;
    let dims: Dims = s.get("grid")?;
    let shape = GridShape::new(dims.height, dims.width)?;
    let query = parse_query(s.raw("weights", "query"))?;
    shape.check(query)?;
    let pkind: PartitionKind = s.get("partition")?;
    let partition = PartitionScheme::new(pkind, s.get("r_max")?, s.get("tau")?)?;
    let merge = parse_merge(s.raw("weights", "merge"))?;
    let offset = parse_offset(s.raw("weights", "offset"))?;
    let value_dim: usize = s.get("value_dim")?;
    let embed_dim: usize = s.get("embed_dim")?;
    if value_dim == 0 || embed_dim == 0 {
        return Err(CliError::Usage("value_dim and embed_dim must be positive".into()));
    }
    let mut dir = ctx.start("weights")?;

    let mut rng = SeededRng::new(ctx.seed);
    let scheme = WeightScheme::init(kind, partition.r_max, embed_dim, value_dim, &mut rng, 1.0)
        .with_merge(merge)
        .with_offset(offset);
    let values = TokenField::gaussian(shape, value_dim, &mut rng, 1.0);
    let all = query_weights(&scheme, &partition, &values)?;
    let fixed = WeightScheme::fixed_exponential();
    let mut jsds = Vec::with_capacity(all.len());
    for w in &all {
        let reference = scheme_weights(&fixed, &[], w.num_groups(), partition.r_max, partition.tau)?;
        jsds.push(jsd(&w.to_dense(), &reference.to_dense())?);
    }
    let qi = shape.flat(query);
    let w = &all[qi];
    let dense = w.to_dense();
    let mean_jsd = jsds.iter().sum::<f64>() / jsds.len() as f64;

    let shown: Vec<String> = dense.iter().map(|a| format!("{a:.6}")).collect();
    println!("scheme {} at query ({}, {}) with {} groups", kind.name(), query.row, query.col, dense.len());
    println!("alpha: [{}]", shown.join(", "));
    println!("hat: {}", w.hat_r());
    println!("sum: {:.12}", w.sum());
    println!("jsd vs fixed-exp (this query): {:.6}", jsds[qi]);
    println!("mean jsd vs fixed-exp ({} queries): {:.6}", jsds.len(), mean_jsd);

    let mut alphas = String::from("group,alpha\n");
    for (r, a) in dense.iter().enumerate() {
        alphas.push_str(&format!("{r},{a:.12}\n"));
    }
    dir.write("alphas.csv", alphas)?;
    let mut grid = String::new();
    for row in 1..=shape.height {
        let line: Vec<String> = (1..=shape.width)
            .map(|col| group_index(&partition, shape, query, Pos::new(row, col)).map(|g| format!("{:.12}", dense[g])))
            .collect::<Result<_, _>>()?;
        grid.push_str(&line.join(","));
        grid.push('\n');
    }
    dir.write("alpha_grid.csv", grid)?;
    dir.write(
        "weights_summary.json",
        serde_json::to_string_pretty(&serde_json::json!({
            "scheme": kind.name(),
            "query": [query.row, query.col],
            "alpha": dense,
            "hat": w.hat_r(),
            "jsd": jsds[qi],
            "mean_jsd": mean_jsd,
        }))
        .expect("json"),
    )?;
    finish(dir)?;
    Ok(true)
}
