//! Row-major `f32` matrices and the matrix-vector product used throughout
//! the model.
//!
//! Each output element is a left-to-right dot product, so values are
//! independent of how rows are scheduled across threads.

use crate::error::{Error, Result};

/// Row count below which the parallel product is not worth the fan-out
/// overhead (in output elements times row length).
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "matrix {rows}x{cols} needs {} elements, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`, dispatching to the parallel kernel for large shapes.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "matvec: matrix is {}x{}, vector has length {}",
                    self.rows,
                    self.cols,
                    x.len()
                ),
            });
        }
        let mut out = vec![0.0f32; self.rows];
        #[cfg(feature = "parallel")]
        {
            if self.data.len() >= PAR_MIN_ELEMS {
                matvec_par_into(&mut out, self, x);
                return Ok(out);
            }
        }
        matvec_seq_into(&mut out, self, x);
        Ok(out)
    }
}

/// Left-to-right dot product in `f32`.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Sequential matvec kernel. `out.len()` must equal `m.rows()` and
/// `x.len()` must equal `m.cols()`.
pub fn matvec_seq_into(out: &mut [f32], m: &Matrix, x: &[f32]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), x);
    }
}

/// Row-parallel matvec kernel; bit-identical to the sequential one because
/// every output element keeps its own sequential reduction.
#[cfg(feature = "parallel")]
pub fn matvec_par_into(out: &mut [f32], m: &Matrix, x: &[f32]) {
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().for_each(|(r, o)| {
        *o = dot(m.row(r), x);
    });
}
