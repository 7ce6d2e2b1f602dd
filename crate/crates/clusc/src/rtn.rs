//! Symmetric uniform round-to-nearest quantization, the comparison
//! baseline.
//!
//! The scale is `max(|w_min|, |w_max|) / (2^b - 1)` and integer values are
//! clamped to `[-2^(b-1), 2^(b-1) - 1]`, applied per tensor or per
//! contiguous input-dim group. Note the denominator/clamp pairing is kept
//! exactly as specified: with 2^b - 1 in the denominator the positive
//! clamp engages at roughly half the data range, so large positive values
//! saturate hard. Rounding at halves goes away from zero.

use crate::error::{invalid, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RtnLayer {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    /// Group length along the input dimension; `None` = per-tensor.
    pub group_size: Option<usize>,
    /// Integer grid values, row-major like the source matrix.
    pub q: Vec<i8>,
    /// One scale per group, indexed `col * groups_per_col + group`.
    pub scales: Vec<f32>,
}

impl RtnLayer {
    pub fn groups_per_col(&self) -> usize {
        match self.group_size {
            Some(gs) => self.rows.div_ceil(gs),
            None => 1,
        }
    }

    #[inline]
    fn scale_at(&self, r: usize, c: usize) -> f32 {
        match self.group_size {
            Some(gs) => self.scales[c * self.groups_per_col() + r / gs],
            None => self.scales[0],
        }
    }
}

/// Quantize a matrix at `b` bits, per tensor or per input-dim group.
pub fn rtn_quantize(w: &Matrix, bits: u32, group_size: Option<usize>) -> Result<RtnLayer> {
    if !(2..=8).contains(&bits) {
        return Err(invalid(format!("rtn bits must be in [2, 8], got {bits}")));
    }
    if group_size == Some(0) {
        return Err(invalid("group size must be nonzero"));
    }
    let lo = -(1i32 << (bits - 1));
    let hi = (1i32 << (bits - 1)) - 1;
    let denom = ((1u32 << bits) - 1) as f32;

    let scale_of = |values: &mut dyn Iterator<Item = f32>| -> f32 {
        let max_abs = values.fold(0.0f32, |m, v| m.max(v.abs()));
        if max_abs == 0.0 {
            1.0 // degenerate all-zero region; output stays zero
        } else {
            max_abs / denom
        }
    };

    let (rows, cols) = (w.rows(), w.cols());
    let mut q = vec![0i8; rows * cols];
    let mut scales = Vec::new();
    match group_size {
        None => {
            let s = scale_of(&mut w.data().iter().copied());
            scales.push(s);
            for (dst, v) in q.iter_mut().zip(w.data()) {
                *dst = ((v / s).round().clamp(lo as f32, hi as f32)) as i8;
            }
        }
        Some(gs) => {
            let groups_per_col = rows.div_ceil(gs);
            scales.resize(cols * groups_per_col, 1.0);
            for c in 0..cols {
                for gi in 0..groups_per_col {
                    let r0 = gi * gs;
                    let r1 = (r0 + gs).min(rows);
                    let s = scale_of(&mut (r0..r1).map(|r| w.get(r, c)));
                    scales[c * groups_per_col + gi] = s;
                    for r in r0..r1 {
                        let v = w.get(r, c);
                        q[r * cols + c] =
                            ((v / s).round().clamp(lo as f32, hi as f32)) as i8;
                    }
                }
            }
        }
    }
    Ok(RtnLayer {
        rows,
        cols,
        bits,
        group_size,
        q,
        scales,
    })
}

/// Rebuild the dequantized matrix `q * s`.
pub fn rtn_dequantize(layer: &RtnLayer) -> Matrix {
    let mut out = Matrix::zeros(layer.rows, layer.cols);
    for r in 0..layer.rows {
        for c in 0..layer.cols {
            let s = layer.scale_at(r, c);
            out.set(r, c, layer.q[r * layer.cols + c] as f32 * s);
        }
    }
    out
}
