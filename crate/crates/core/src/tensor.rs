//! Dense row-major storage, seeded Gaussian initialization and the `RPLT`
//! binary tensor format.
//!
//! Layout of an `RPLT` file (all integers little-endian, no padding):
//!
//! | bytes            | content                         |
//! |------------------|---------------------------------|
//! | 4                | magic `RPLT`                    |
//! | 4                | format version (`u32`)          |
//! | 1                | dtype code (1 = f32, 2 = f64)   |
//! | 1                | number of dimensions            |
//! | 8 × ndim         | dimensions (`u64`)              |
//! | elem × product   | raw little-endian payload       |

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Result, RippleError};

pub const MAGIC: &[u8; 4] = b"RPLT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    /// Rounds `x` to the precision of this dtype.
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => arg_err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// An n-dimensional array of finite floats.
///
/// Values are always held as `f64`; a field tagged [`DType::F32`] only ever
/// contains values exactly representable in `f32`, so serialization at the
/// tagged precision is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    dims: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl DenseField {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(dims, data, DType::F64)
    }

    pub fn with_dtype(dims: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if dims.is_empty() {
            return arg_err("a field needs at least one dimension");
        }
        if dims.contains(&0) {
            return arg_err(format!("dimensions must be positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return arg_err(format!(
                "dims {dims:?} hold {n} values but {} were supplied",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return arg_err(format!("non-finite value at flat index {pos}"));
        }
        if dtype == DType::F32 {
            for x in &mut data {
                *x = dtype.quantize(*x);
            }
        }
        Ok(Self { dims, data, dtype })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Serializes to the `RPLT` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.is_empty() {
            return arg_err("refusing to serialize a 0-dimensional field");
        }
        if self.dims.len() > u8::MAX as usize {
            return arg_err(format!("too many dimensions ({})", self.dims.len()));
        }
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + self.dtype.size_of() * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => {
                for &x in &self.data {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &x in &self.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Decodes the `RPLT` byte layout. Errors carry the offset of the first
    /// offending byte.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| RippleError::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic (expected \"RPLT\")".into()));
        }
        if bytes.len() < 10 {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(4, format!("unsupported format version {version}")));
        }
        let dtype = DType::from_code(bytes[8]).ok_or_else(|| fail(8, format!("unknown dtype code {}", bytes[8])))?;
        let ndim = bytes[9] as usize;
        if ndim == 0 {
            return Err(fail(9, "zero dimensions".into()));
        }
        let mut offset = 10;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let Some(chunk) = bytes.get(offset..offset + 8) else {
                return Err(fail(bytes.len(), "truncated dimension list".into()));
            };
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            if d == 0 || d > usize::MAX as u64 {
                return Err(fail(offset, format!("invalid dimension {d}")));
            }
            dims.push(d as usize);
            offset += 8;
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(10, "dimension product overflows".into()))?;
        let payload_len = count
            .checked_mul(dtype.size_of())
            .ok_or_else(|| fail(10, "payload size overflows".into()))?;
        let available = bytes.len() - offset;
        if available < payload_len {
            return Err(fail(bytes.len(), format!("truncated payload: expected {payload_len} bytes, found {available}")));
        }
        if available > payload_len {
            return Err(fail(offset + payload_len, "trailing bytes after payload".into()));
        }
        let mut data = Vec::with_capacity(count);
        let width = dtype.size_of();
        for (k, chunk) in bytes[offset..].chunks_exact(width).enumerate() {
            let x = match dtype {
                DType::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                DType::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
            };
            if !x.is_finite() {
                return Err(fail(offset + k * width, "non-finite value in payload".into()));
            }
            data.push(x);
        }
        Ok(Self { dims, data, dtype })
    }
}

pub fn write_field(path: impl AsRef<Path>, field: &DenseField) -> Result<()> {
    let bytes = field.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DenseField> {
    let bytes = fs::read(path)?;
    DenseField::from_bytes(&bytes)
}

/// Deterministic random source used for every initialization in the crate.
///
/// The stream is a pure function of the seed: ChaCha20 keyed through
/// `seed_from_u64`, Gaussian draws via `rand_distr::Normal`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha20Rng,
}

impl SeededRng {
    /// Identifier recorded in experiment configs so runs can be replayed.
    pub const ALGORITHM: &'static str = "chacha20-rand_chacha0.9+normal-rand_distr0.5/v1";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream for a named sub-component.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.rng.random())
    }

    pub fn normal(&mut self, mean: f64, stddev: f64) -> f64 {
        // Callers validate stddev; Normal::new only fails on non-finite input.
        Normal::new(mean, stddev).expect("finite normal parameters").sample(&mut self.rng)
    }

    pub fn normals(&mut self, n: usize, mean: f64, stddev: f64) -> Vec<f64> {
        let dist = Normal::new(mean, stddev).expect("finite normal parameters");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// Draws a field with i.i.d. `Normal(mean, stddev²)` entries.
pub fn gaussian_init(dims: &[usize], seed: u64, mean: f64, stddev: f64) -> Result<DenseField> {
    if !(stddev > 0.0) || !stddev.is_finite() {
        return arg_err(format!("stddev must be positive, got {stddev}"));
    }
    if !mean.is_finite() {
        return arg_err("mean must be finite");
    }
    if dims.is_empty() {
        return arg_err("dims must be nonempty");
    }
    let n: usize = dims.iter().product();
    let mut rng = SeededRng::new(seed);
    DenseField::new(dims.to_vec(), rng.normals(n, mean, stddev))
}

/// Row-major dense matrix used for weights and projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return arg_err(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng, stddev: f64) -> Self {
        Self {
            rows,
            cols,
            data: rng.normals(rows * cols, 0.0, stddev),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x`
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(y, &mut out);
        out
    }

    /// `self += scale · a ⊗ b`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                axpy(s, b, &mut self.data[r * self.cols..(r + 1) * self.cols]);
            }
        }
    }

    pub fn to_field(&self) -> Result<DenseField> {
        DenseField::new(vec![self.rows, self.cols], self.data.clone())
    }

    pub fn from_field(field: &DenseField) -> Result<Self> {
        match field.dims() {
            [r, c] => Self::from_vec(*r, *c, field.data().to_vec()),
            d => arg_err(format!("expected a 2-D field, got dims {d:?}")),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_init_is_deterministic() {
        let a = gaussian_init(&[2, 2], 7, 0.0, 1.0).unwrap();
        let b = gaussian_init(&[2, 2], 7, 0.0, 1.0).unwrap();
        assert_eq!(a.len(), 4);
        let bits = |f: &DenseField| f.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = gaussian_init(&[2, 2], 8, 0.0, 1.0).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn gaussian_init_rejects_zero_stddev() {
        assert!(matches!(gaussian_init(&[3], 1, 0.0, 0.0), Err(RippleError::Argument(_))));
        assert!(matches!(gaussian_init(&[3], 1, 0.0, -1.0), Err(RippleError::Argument(_))));
        assert!(gaussian_init(&[], 1, 0.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_init_sample_moments() {
        let f = gaussian_init(&[10_000], 1, 0.0, 1.0).unwrap();
        let n = f.len() as f64;
        let mean = f.data().iter().sum::<f64>() / n;
        let var = f.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn round_trip_f64_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("rplt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.rplt");
        let f = DenseField::new(vec![2, 3], vec![1.0, -2.5, 1e-300, 3.25, f64::MAX, -0.0]).unwrap();
        write_field(&path, &f).unwrap();
        let g = read_field(&path).unwrap();
        assert_eq!(g.dims(), f.dims());
        assert_eq!(g.dtype(), DType::F64);
        for (a, b) in f.data().iter().zip(g.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_layout_is_exact() {
        let f = DenseField::with_dtype(vec![1, 2], vec![1.0, 2.0], DType::F32).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 1 + 1 + 16 + 8);
        assert_eq!(&bytes[..4], b"RPLT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let f = DenseField::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = f.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        match DenseField::from_bytes(&bytes) {
            Err(RippleError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_dtype_and_truncation_report_offsets() {
        let f = DenseField::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = f.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(DenseField::from_bytes(&bad), Err(RippleError::Format { offset: 8, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            DenseField::from_bytes(cut),
            Err(RippleError::Format { offset, .. }) if offset == cut.len() as u64
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(DenseField::from_bytes(&long), Err(RippleError::Format { .. })));
    }

    #[test]
    fn zero_dimensional_fields_are_rejected() {
        assert!(DenseField::new(vec![], vec![]).is_err());
        assert!(DenseField::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(DenseField::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(DenseField::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn f32_fields_are_quantized() {
        let f = DenseField::with_dtype(vec![1], vec![0.1], DType::F32).unwrap();
        assert_eq!(f.data()[0], 0.1f32 as f64);
        let g = DenseField::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(g.data()[0].to_bits(), f.data()[0].to_bits());
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let mut z = Matrix::zeros(2, 2);
        z.add_outer(2.0, &[1.0, 3.0], &[1.0, -1.0]);
        assert_eq!(z.data, vec![2.0, -2.0, 6.0, -6.0]);
    }

    proptest::proptest! {
        #[test]
        fn serialization_round_trip(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
            f32_tag in proptest::bool::ANY,
        ) {
            let n: usize = dims.iter().product();
            let mut rng = SeededRng::new(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 10.0)).collect();
            let dtype = if f32_tag { DType::F32 } else { DType::F64 };
            let f = DenseField::with_dtype(dims, data, dtype).unwrap();
            let g = DenseField::from_bytes(&f.to_bytes().unwrap()).unwrap();
            proptest::prop_assert_eq!(f.dims(), g.dims());
            proptest::prop_assert_eq!(f.dtype(), g.dtype());
            for (a, b) in f.data().iter().zip(g.data()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
