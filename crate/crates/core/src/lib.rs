//! Ripple attention over 2D token grids.
//!
//! Queries attend to keys through linearized attention, but every key's
//! contribution is scaled by a weight that depends on its Chebyshev distance
//! to the query. Summed-area tables over the key statistics make the whole
//! layer cost `O(H·W·R_max)` instead of the quadratic cost of enumerating
//! every query/key pair.

pub mod alloc;
pub mod attention;
pub mod bench;
pub mod error;
pub mod featmap;
pub mod grad;
pub mod grid;
pub mod sat;
pub mod tasks;
pub mod tensor;
pub mod toymodel;
pub mod vicinal;
pub mod weights;

pub use error::{Result, RippleError};
