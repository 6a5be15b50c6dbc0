//! Summed-area tables over token fields.
//!
//! The table has a zero row and column at index 0, so `S(i, j)` for
//! `0 <= i <= H`, `0 <= j <= W` is the sum of all tokens with row `<= i` and
//! column `<= j`. Window corners falling outside the grid are clamped into
//! that range, which turns every window sum into the sum over the window
//! clipped to the grid.

use std::cell::Cell;

use crate::error::{arg_err, Result};
use crate::grid::{GridShape, Pos, TokenField};

thread_local! {
    static FETCHES: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread counter of window lookups (each lookup reads four corners).
pub struct FetchCounter;

impl FetchCounter {
    pub fn reset() {
        FETCHES.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        FETCHES.with(|c| c.get())
    }

    #[inline]
    fn bump() {
        FETCHES.with(|c| c.set(c.get() + 1));
    }
}

#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    shape: GridShape,
    channels: usize,
    table: Vec<f64>,
}

impl SummedAreaTable {
    pub fn build(field: &TokenField) -> Self {
        Self::from_raw(field.shape(), field.channels(), field.data())
    }

    /// Builds from a row-major `H × W × channels` buffer.
    pub fn from_raw(shape: GridShape, channels: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), shape.tokens() * channels, "buffer does not match grid");
        Self::from_fn(shape, channels, |t, out| out.copy_from_slice(&data[t * channels..(t + 1) * channels]))
    }

    /// Builds from a generator that writes token `t`'s vector into a scratch
    /// slice, so the per-token field never has to be materialized.
    pub fn from_fn(shape: GridShape, channels: usize, mut token: impl FnMut(usize, &mut [f64])) -> Self {
        let (h, w) = (shape.height, shape.width);
        let stride = (w + 1) * channels;
        let mut table = vec![0.0; (h + 1) * stride];
        let mut src = vec![0.0; channels];
        // Cumulative sum along each row, then down each column.
        for i in 0..h {
            let dst_row = (i + 1) * stride;
            for j in 0..w {
                token(i * w + j, &mut src);
                let left = dst_row + j * channels;
                let here = dst_row + (j + 1) * channels;
                for c in 0..channels {
                    table[here + c] = table[left + c] + src[c];
                }
            }
        }
        for i in 1..h {
            let (above, below) = table.split_at_mut((i + 1) * stride);
            let prev = &above[i * stride..(i + 1) * stride];
            for (b, p) in below[..stride].iter_mut().zip(prev) {
                *b += p;
            }
        }
        Self { shape, channels, table }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Prefix sum `S(i, j)` with `0 <= i <= H`, `0 <= j <= W`.
    #[inline]
    pub fn prefix(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * (self.shape.width + 1) + j) * self.channels;
        &self.table[at..at + self.channels]
    }

    /// `S(H, W)`: the sum over the whole grid.
    pub fn total(&self) -> &[f64] {
        self.prefix(self.shape.height, self.shape.width)
    }

    /// `out += scale · W(center, radius)` for a 0-based flat center index.
    /// A radius of `None` denotes the empty window.
    #[inline]
    pub fn window_acc(&self, center: usize, radius: Option<usize>, scale: f64, out: &mut [f64]) {
        let Some(r) = radius else { return };
        FetchCounter::bump();
        let w = self.shape.width;
        let (i, j) = (center / w + 1, center % w + 1);
        let hi_i = (i + r).min(self.shape.height);
        let hi_j = (j + r).min(w);
        let lo_i = i.saturating_sub(r + 1);
        let lo_j = j.saturating_sub(r + 1);
        let a = self.prefix(hi_i, hi_j);
        let b = self.prefix(lo_i, hi_j);
        let c = self.prefix(hi_i, lo_j);
        let d = self.prefix(lo_i, lo_j);
        for k in 0..self.channels {
            out[k] += scale * ((a[k] - b[k]) - (c[k] - d[k]));
        }
    }

    /// Window sum around a 1-based center with the given radius.
    pub fn window_sum(&self, center: Pos, radius: usize) -> Result<Vec<f64>> {
        self.shape.check(center)?;
        let mut out = vec![0.0; self.channels];
        self.window_acc(self.shape.flat(center), Some(radius), 1.0, &mut out);
        Ok(out)
    }

    /// Sum over the tokens at Chebyshev distance exactly `r` from `center`.
    pub fn ring_sum(&self, center: Pos, r: usize) -> Result<Vec<f64>> {
        self.band_sum(center, r, r)
    }

    /// Sum over the tokens whose Chebyshev distance from `center` lies in
    /// `[r_lo, r_hi]`.
    pub fn band_sum(&self, center: Pos, r_lo: usize, r_hi: usize) -> Result<Vec<f64>> {
        self.shape.check(center)?;
        if r_lo > r_hi {
            return arg_err(format!("band [{r_lo}, {r_hi}] is empty"));
        }
        let mut out = vec![0.0; self.channels];
        self.band_acc(self.shape.flat(center), r_lo, r_hi, 1.0, &mut out);
        Ok(out)
    }

    /// `out += scale · (W(r_hi) − W(r_lo − 1))`.
    #[inline]
    pub fn band_acc(&self, center: usize, r_lo: usize, r_hi: usize, scale: f64, out: &mut [f64]) {
        self.window_acc(center, Some(r_hi), scale, out);
        self.window_acc(center, r_lo.checked_sub(1), -scale, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use crate::vicinal::{group_members, num_groups, PartitionScheme};

    fn small() -> TokenField {
        TokenField::from_vec(GridShape::new(2, 3).unwrap(), 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()
    }

    fn random(h: usize, w: usize, c: usize, seed: u64) -> TokenField {
        TokenField::gaussian(GridShape::new(h, w).unwrap(), c, &mut SeededRng::new(seed), 1.0)
    }

    #[test]
    fn prefix_examples() {
        let sat = SummedAreaTable::build(&small());
        assert_eq!(sat.prefix(2, 3), &[21.0]);
        assert_eq!(sat.prefix(1, 2), &[3.0]);
        assert_eq!(sat.prefix(0, 3), &[0.0]);
        assert_eq!(sat.prefix(2, 0), &[0.0]);
    }

    #[test]
    fn table_matches_brute_force_prefix_sums() {
        let f = random(7, 5, 4, 11);
        let sat = SummedAreaTable::build(&f);
        for i in 0..=7 {
            for j in 0..=5 {
                let mut want = vec![0.0; 4];
                for a in 1..=i {
                    for b in 1..=j {
                        for (w, x) in want.iter_mut().zip(f.at(Pos::new(a, b))) {
                            *w += x;
                        }
                    }
                }
                for (got, w) in sat.prefix(i, j).iter().zip(&want) {
                    assert!((got - w).abs() < 1e-12, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn window_examples() {
        let sat = SummedAreaTable::build(&small());
        assert_eq!(sat.window_sum(Pos::new(2, 2), 0).unwrap(), vec![5.0]);
        assert_eq!(sat.window_sum(Pos::new(1, 1), 1).unwrap(), vec![12.0]);
        for p in [Pos::new(1, 1), Pos::new(2, 3)] {
            assert_eq!(sat.window_sum(p, 3).unwrap(), vec![21.0]);
            assert_eq!(sat.window_sum(p, 100).unwrap(), vec![21.0]);
        }
    }

    #[test]
    fn ring_examples() {
        let sat = SummedAreaTable::build(&small());
        assert_eq!(sat.ring_sum(Pos::new(2, 2), 0).unwrap(), vec![5.0]);
        // Corner (1,1) of a 2x3 grid: nothing lies at distance 5.
        assert_eq!(sat.ring_sum(Pos::new(1, 1), 5).unwrap(), vec![0.0]);
    }

    #[test]
    fn ring_sums_match_group_enumeration() {
        for (h, w) in [(9, 9), (4, 12), (12, 12), (1, 6)] {
            let f = random(h, w, 3, 5);
            let shape = f.shape();
            let sat = SummedAreaTable::build(&f);
            let scheme = PartitionScheme::unit_ring(3, 0.01).unwrap();
            for q in shape.positions() {
                let groups = num_groups(&scheme, shape, q).unwrap();
                let mut total = vec![0.0; 3];
                for r in 0..groups {
                    let mut want = vec![0.0; 3];
                    for p in group_members(&scheme, shape, q, r).unwrap() {
                        for (a, b) in want.iter_mut().zip(f.at(p)) {
                            *a += b;
                        }
                    }
                    let got = sat.ring_sum(q, r).unwrap();
                    for k in 0..3 {
                        assert!((got[k] - want[k]).abs() < 1e-10);
                        total[k] += got[k];
                    }
                }
                for (t, s) in total.iter().zip(sat.total()) {
                    assert!((t - s).abs() <= 1e-9 * s.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn band_sums() {
        let f = random(9, 9, 2, 8);
        let sat = SummedAreaTable::build(&f);
        let q = Pos::new(3, 6);
        assert_eq!(sat.band_sum(q, 0, 20).unwrap(), sat.total().to_vec());
        assert_eq!(sat.band_sum(q, 2, 2).unwrap(), sat.ring_sum(q, 2).unwrap());
        let mut want = vec![0.0; 2];
        for p in f.shape().positions() {
            let d = crate::vicinal::cheb(p, q);
            if (2..=3).contains(&d) {
                want[0] += f.at(p)[0];
                want[1] += f.at(p)[1];
            }
        }
        let got = sat.band_sum(q, 2, 3).unwrap();
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        assert!(sat.band_sum(q, 3, 2).is_err());
    }

    #[test]
    fn fetch_counter_counts_windows() {
        let sat = SummedAreaTable::build(&small());
        FetchCounter::reset();
        sat.ring_sum(Pos::new(1, 1), 1).unwrap();
        sat.ring_sum(Pos::new(1, 1), 0).unwrap();
        // ring 1 reads W(1) and W(0); ring 0 reads only W(0).
        assert_eq!(FetchCounter::get(), 3);
    }

    proptest::proptest! {
        #[test]
        fn full_window_is_position_invariant(h in 1usize..9, w in 1usize..9, seed in 0u64..500) {
            let f = random(h, w, 2, seed);
            let sat = SummedAreaTable::build(&f);
            let total = sat.total().to_vec();
            for q in f.shape().positions() {
                let got = sat.window_sum(q, h.max(w)).unwrap();
                for k in 0..2 {
                    proptest::prop_assert!((got[k] - total[k]).abs() <= 1e-12 * total[k].abs().max(1.0));
                }
            }
        }
    }
}
