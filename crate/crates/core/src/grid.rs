//! Grid geometry and token fields laid out over it.

use crate::error::{arg_err, Result};
use crate::tensor::{DenseField, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return arg_err(format!("grid must be at least 1x1, got {height}x{width}"));
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, p: Pos) -> bool {
        (1..=self.height).contains(&p.row) && (1..=self.width).contains(&p.col)
    }

    pub fn check(&self, p: Pos) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            arg_err(format!(
                "position ({}, {}) lies outside the {}x{} grid (positions are 1-based)",
                p.row, p.col, self.height, self.width
            ))
        }
    }

    /// Iterates positions in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (1..=self.height).flat_map(move |row| (1..=self.width).map(move |col| Pos { row, col }))
    }

    /// Row-major flat index of a (valid) position.
    #[inline]
    pub fn flat(&self, p: Pos) -> usize {
        (p.row - 1) * self.width + (p.col - 1)
    }

    #[inline]
    pub fn pos(&self, flat: usize) -> Pos {
        Pos {
            row: flat / self.width + 1,
            col: flat % self.width + 1,
        }
    }
}

/// A 1-based grid position `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// An `H × W` grid of `channels`-dimensional vectors, row-major with the
/// channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    shape: GridShape,
    channels: usize,
    data: Vec<f64>,
}

impl TokenField {
    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        Self {
            shape,
            channels,
            data: vec![0.0; shape.tokens() * channels],
        }
    }

    pub fn from_vec(shape: GridShape, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return arg_err("token fields need at least one channel");
        }
        if data.len() != shape.tokens() * channels {
            return arg_err(format!(
                "{}x{}x{channels} field needs {} values, got {}",
                shape.height,
                shape.width,
                shape.tokens() * channels,
                data.len()
            ));
        }
        Ok(Self { shape, channels, data })
    }

    pub fn gaussian(shape: GridShape, channels: usize, rng: &mut SeededRng, stddev: f64) -> Self {
        Self {
            shape,
            channels,
            data: rng.normals(shape.tokens() * channels, 0.0, stddev),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Vector at 0-based flat token index.
    #[inline]
    pub fn token(&self, flat: usize) -> &[f64] {
        &self.data[flat * self.channels..(flat + 1) * self.channels]
    }

    #[inline]
    pub fn token_mut(&mut self, flat: usize) -> &mut [f64] {
        &mut self.data[flat * self.channels..(flat + 1) * self.channels]
    }

    pub fn at(&self, p: Pos) -> &[f64] {
        self.token(self.shape.flat(p))
    }

    pub fn to_field(&self) -> Result<DenseField> {
        DenseField::new(
            vec![self.shape.height, self.shape.width, self.channels],
            self.data.clone(),
        )
    }

    pub fn from_field(field: &DenseField) -> Result<Self> {
        match field.dims() {
            [h, w, c] => Self::from_vec(GridShape::new(*h, *w)?, *c, field.data().to_vec()),
            d => arg_err(format!("expected an HxWxC field, got dims {d:?}")),
        }
    }

    /// Tokens as matrix rows, row-major over the grid.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.shape.tokens(),
            cols: self.channels,
            data: self.data.clone(),
        }
    }

    pub fn from_matrix(shape: GridShape, m: Matrix) -> Result<Self> {
        if m.rows != shape.tokens() {
            return arg_err(format!("{} rows for a grid of {} tokens", m.rows, shape.tokens()));
        }
        Self::from_vec(shape, m.cols, m.data)
    }

    /// Largest absolute entry; used as the scale for normwise comparisons.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Normwise relative difference `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error needs equal lengths");
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-300)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_index_round_trips() {
        let g = GridShape::new(3, 5).unwrap();
        for (k, p) in g.positions().enumerate() {
            assert_eq!(g.flat(p), k);
            assert_eq!(g.pos(k), p);
        }
    }

    #[test]
    fn zero_sized_grids_are_rejected() {
        assert!(GridShape::new(0, 3).is_err());
        assert!(GridShape::new(2, 0).is_err());
    }

    #[test]
    fn positions_are_one_based() {
        let g = GridShape::new(2, 2).unwrap();
        assert!(g.check(Pos::new(0, 1)).is_err());
        assert!(g.check(Pos::new(2, 3)).is_err());
        assert!(g.check(Pos::new(2, 2)).is_ok());
    }
}
