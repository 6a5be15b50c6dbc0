//! Vicinal groups: the partition of a grid by Chebyshev distance from a query.
//!
//! Two schemes are supported. `UnitRing` puts every distance in its own
//! group. `Dyadic` keeps the query alone in group 0 and then uses bands
//! `2^(r-1) <= d < 2^r`, so the number of groups grows logarithmically with
//! the distance to the farthest corner.

use crate::error::{arg_err, Result};
use crate::grid::{GridShape, Pos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionKind {
    UnitRing,
    Dyadic,
}

impl std::str::FromStr for PartitionKind {
    type Err = crate::RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" | "unit-ring" | "ring" => Ok(Self::UnitRing),
            "dyadic" | "log" | "logarithmic" => Ok(Self::Dyadic),
            _ => arg_err(format!("unknown partition `{s}` (expected unit-ring or dyadic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionScheme {
    pub kind: PartitionKind,
    /// Number of groups that receive individually learned weights.
    pub r_max: usize,
    /// Halting threshold on the remaining stick length.
    pub tau: f64,
}

impl PartitionScheme {
    pub fn new(kind: PartitionKind, r_max: usize, tau: f64) -> Result<Self> {
        if r_max == 0 {
            return arg_err("r_max must be at least 1");
        }
        if !(tau > 0.0 && tau < 1.0) {
            return arg_err(format!("tau must lie in (0, 1), got {tau}"));
        }
        Ok(Self { kind, r_max, tau })
    }

    pub fn unit_ring(r_max: usize, tau: f64) -> Result<Self> {
        Self::new(PartitionKind::UnitRing, r_max, tau)
    }

    pub fn dyadic(r_max: usize, tau: f64) -> Result<Self> {
        Self::new(PartitionKind::Dyadic, r_max, tau)
    }

    /// `r_max` clamped so that it never exceeds `max(H, W) - 1`.
    pub fn clamped_r_max(&self, shape: GridShape) -> usize {
        self.r_max.min(shape.height.max(shape.width) - 1)
    }

    /// Group index for a Chebyshev distance.
    #[inline]
    pub fn group_of_distance(&self, d: usize) -> usize {
        match self.kind {
            PartitionKind::UnitRing => d,
            PartitionKind::Dyadic => {
                if d == 0 {
                    0
                } else {
                    (usize::BITS - d.leading_zeros()) as usize
                }
            }
        }
    }

    /// Inclusive Chebyshev-distance range `(lo, hi)` covered by group `r`.
    #[inline]
    pub fn band(&self, r: usize) -> (usize, usize) {
        match self.kind {
            PartitionKind::UnitRing => (r, r),
            PartitionKind::Dyadic => {
                if r == 0 {
                    (0, 0)
                } else {
                    (1 << (r - 1), (1 << r) - 1)
                }
            }
        }
    }

    /// Number of groups for a query whose farthest grid cell lies at
    /// Chebyshev distance `max_dist`.
    #[inline]
    pub fn groups_for_distance(&self, max_dist: usize) -> usize {
        self.group_of_distance(max_dist) + 1
    }
}

/// Chebyshev (chessboard) distance between two grid positions.
pub fn chebyshev(shape: GridShape, a: Pos, b: Pos) -> Result<usize> {
    shape.check(a)?;
    shape.check(b)?;
    Ok(cheb(a, b))
}

#[inline]
pub(crate) fn cheb(a: Pos, b: Pos) -> usize {
    a.row.abs_diff(b.row).max(a.col.abs_diff(b.col))
}

/// Largest Chebyshev distance from `query` to any cell of the grid.
#[inline]
pub fn max_distance(shape: GridShape, query: Pos) -> usize {
    let dr = (query.row - 1).max(shape.height - query.row);
    let dc = (query.col - 1).max(shape.width - query.col);
    dr.max(dc)
}

pub fn group_index(scheme: &PartitionScheme, shape: GridShape, query: Pos, token: Pos) -> Result<usize> {
    Ok(scheme.group_of_distance(chebyshev(shape, query, token)?))
}

pub fn num_groups(scheme: &PartitionScheme, shape: GridShape, query: Pos) -> Result<usize> {
    shape.check(query)?;
    Ok(scheme.groups_for_distance(max_distance(shape, query)))
}

/// Members of group `r` around `query`, clipped to the grid, in row-major order.
pub fn group_members(scheme: &PartitionScheme, shape: GridShape, query: Pos, r: usize) -> Result<Vec<Pos>> {
    let groups = num_groups(scheme, shape, query)?;
    if r >= groups {
        return arg_err(format!("group {r} does not exist for this query ({groups} groups)"));
    }
    let (lo, hi) = scheme.band(r);
    let row_lo = query.row.saturating_sub(hi).max(1);
    let row_hi = (query.row + hi).min(shape.height);
    let col_lo = query.col.saturating_sub(hi).max(1);
    let col_hi = (query.col + hi).min(shape.width);
    let mut out = Vec::new();
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let p = Pos { row, col };
            let d = cheb(p, query);
            if d >= lo && d <= hi {
                out.push(p);
            }
        }
    }
    Ok(out)
}
