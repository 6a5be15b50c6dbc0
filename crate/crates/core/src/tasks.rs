//! Synthetic grid classification tasks where locality matters.

use crate::error::{arg_err, Result};
use crate::grid::{GridShape, Pos, TokenField};
use crate::tensor::SeededRng;
use crate::vicinal::cheb;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// One-hot colored cells with sparse noise; a 3×3 blob (flagged in an
    /// extra mask channel) holds a strict majority of one color, which is
    /// the label.
    LocalMajority { colors: usize },
    /// Active cells that either form one Chebyshev-connected cluster
    /// (label 1) or do not (label 0).
    ScatteredVsClustered { active: usize },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::LocalMajority { .. } => "local-majority",
            Task::ScatteredVsClustered { .. } => "scattered-vs-clustered",
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Task::LocalMajority { colors } => colors + 1,
            Task::ScatteredVsClustered { .. } => 1,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Task::LocalMajority { colors } => *colors,
            Task::ScatteredVsClustered { .. } => 2,
        }
    }

    pub fn validate(&self, shape: GridShape) -> Result<()> {
        match *self {
            Task::LocalMajority { colors } if colors < 2 => arg_err("local-majority needs at least two colors"),
            Task::ScatteredVsClustered { active } if active < 2 || active > shape.tokens() / 2 => {
                arg_err(format!("scattered-vs-clustered needs 2..={} active cells", shape.tokens() / 2))
            }
            _ => Ok(()),
        }
    }

    /// Draws one labelled sample.
    pub fn sample(&self, shape: GridShape, rng: &mut SeededRng) -> (TokenField, usize) {
        match *self {
            Task::LocalMajority { colors } => local_majority(shape, colors, rng),
            Task::ScatteredVsClustered { active } => scattered_vs_clustered(shape, active, rng),
        }
    }

    pub fn dataset(&self, shape: GridShape, n: usize, rng: &mut SeededRng) -> Result<(Vec<TokenField>, Vec<usize>)> {
        self.validate(shape)?;
        Ok((0..n).map(|_| self.sample(shape, rng)).unzip())
    }
}

impl std::str::FromStr for Task {
    type Err = crate::RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local-majority" => Ok(Task::LocalMajority { colors: 3 }),
            "scattered-vs-clustered" => Ok(Task::ScatteredVsClustered { active: 5 }),
            _ => arg_err(format!("unknown task `{s}` (expected local-majority or scattered-vs-clustered)")),
        }
    }
}

const NOISE: f64 = 0.1;

fn local_majority(shape: GridShape, colors: usize, rng: &mut SeededRng) -> (TokenField, usize) {
    let ch = colors + 1;
    let mut f = TokenField::zeros(shape, ch);
    for t in 0..shape.tokens() {
        if rng.uniform() < NOISE {
            f.token_mut(t)[rng.below(colors)] = 1.0;
        }
    }
    let bh = shape.height.min(3);
    let bw = shape.width.min(3);
    let top = rng.below(shape.height - bh + 1);
    let left = rng.below(shape.width - bw + 1);
    let label = rng.below(colors);
    let cells = bh * bw;
    let majority = cells / 2 + 1 + rng.below(cells - cells / 2);
    let mut palette: Vec<usize> = (0..cells)
        .map(|i| if i < majority { label } else { (label + 1 + rng.below(colors - 1)) % colors })
        .collect();
    rng.shuffle(&mut palette);
    for (i, color) in palette.into_iter().enumerate() {
        let p = Pos::new(top + i / bw + 1, left + i % bw + 1);
        let tok = f.token_mut(shape.flat(p));
        tok.fill(0.0);
        tok[color] = 1.0;
        tok[colors] = 1.0;
    }
    (f, label)
}

/// Whether the cells form a single component under 8-connectivity.
pub fn is_chebyshev_connected(cells: &[Pos]) -> bool {
    if cells.is_empty() {
        return true;
    }
    let mut seen = vec![false; cells.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..cells.len() {
            if !seen[j] && cheb(cells[i], cells[j]) == 1 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn scattered_vs_clustered(shape: GridShape, active: usize, rng: &mut SeededRng) -> (TokenField, usize) {
    let clustered = rng.below(2) == 1;
    let cells = if clustered {
        let mut cells = vec![shape.pos(rng.below(shape.tokens()))];
        while cells.len() < active {
            let base = cells[rng.below(cells.len())];
            let dr = rng.below(3) as isize - 1;
            let dc = rng.below(3) as isize - 1;
            let row = base.row as isize + dr;
            let col = base.col as isize + dc;
            if row < 1 || col < 1 {
                continue;
            }
            let p = Pos::new(row as usize, col as usize);
            if shape.contains(p) && !cells.contains(&p) {
                cells.push(p);
            }
        }
        cells
    } else {
        loop {
            let mut idx: Vec<usize> = (0..shape.tokens()).collect();
            rng.shuffle(&mut idx);
            let cells: Vec<Pos> = idx[..active].iter().map(|&t| shape.pos(t)).collect();
            if !is_chebyshev_connected(&cells) {
                break cells;
            }
        }
    };
    let mut f = TokenField::zeros(shape, 1);
    for p in cells {
        f.token_mut(shape.flat(p))[0] = 1.0;
    }
    (f, clustered as usize)
}
