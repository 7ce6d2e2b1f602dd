//! Dense row-major matrices and the grouped view used for clustering.
//!
//! Weights are stored input-major: a layer mapping `d_in` features to
//! `d_out` features is a `d_in x d_out` matrix, the orientation a forward
//! pass multiplies activations against (`x @ W`). The grouped view pads
//! each row out to a multiple of `g` with zeros and carves the padded
//! row-major buffer into contiguous `g`-vectors, which is exactly the
//! layout a compressed linear layer gathers back at inference time.

use crate::error::{invalid, Error, Result};

/// Dense 2-D array of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("matrix dimensions must be nonzero"));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Frobenius distance to `other`, accumulated in f64.
    pub fn sq_distance(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(invalid("shape mismatch in sq_distance"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = *v as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A weight matrix reshaped into `k` contiguous `g`-dimensional vectors.
///
/// Rows are padded with `deficiency` trailing zeros so that the padded
/// row length divides `g`; `k = rows * (cols + deficiency) / g`. The
/// flattened vector buffer is byte-identical to the padded matrix's
/// row-major layout, so ungrouping is a slice-and-copy.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedView {
    g: usize,
    deficiency: usize,
    source_rows: usize,
    source_cols: usize,
    data: Vec<f32>,
}

impl GroupedView {
    pub fn g(&self) -> usize {
        self.g
    }

    pub fn deficiency(&self) -> usize {
        self.deficiency
    }

    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn source_cols(&self) -> usize {
        self.source_cols
    }

    /// Number of `g`-vectors.
    pub fn len(&self) -> usize {
        self.data.len() / self.g
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.g..(i + 1) * self.g]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.g)
    }

    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    /// Assemble a view directly from parts; validates the count identity
    /// and that every pad slot is zero.
    pub fn from_parts(
        g: usize,
        deficiency: usize,
        source_rows: usize,
        source_cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if g == 0 {
            return Err(invalid("group dimension g must be >= 1"));
        }
        if deficiency >= g {
            return Err(invalid(format!("deficiency {deficiency} must be < g {g}")));
        }
        let padded_cols = source_cols + deficiency;
        if padded_cols % g != 0 {
            return Err(invalid(format!(
                "padded row length {padded_cols} not divisible by g {g}"
            )));
        }
        if data.len() != source_rows * padded_cols {
            return Err(invalid(format!(
                "flat length {} != {source_rows}x{padded_cols}",
                data.len()
            )));
        }
        let view = Self {
            g,
            deficiency,
            source_rows,
            source_cols,
            data,
        };
        view.check_pad_slots()?;
        Ok(view)
    }

    fn check_pad_slots(&self) -> Result<()> {
        let padded_cols = self.source_cols + self.deficiency;
        for r in 0..self.source_rows {
            let tail = &self.data[r * padded_cols + self.source_cols..(r + 1) * padded_cols];
            if tail.iter().any(|v| *v != 0.0) {
                return Err(invalid(format!("pad slots of row {r} are not all zero")));
            }
        }
        Ok(())
    }
}

/// Pad count that makes `cols` divisible by `g`.
pub fn pad_deficiency(cols: usize, g: usize) -> usize {
    (g - cols % g) % g
}

/// Reshape a weight matrix into `g`-dimensional groups, zero-padding the
/// output dimension of each row where `cols % g != 0`.
pub fn reshape_to_groups(w: &Matrix, g: usize) -> Result<GroupedView> {
    if g == 0 {
        return Err(invalid("group dimension g must be >= 1"));
    }
    let deficiency = pad_deficiency(w.cols(), g);
    let padded_cols = w.cols() + deficiency;
    let mut data = Vec::with_capacity(w.rows() * padded_cols);
    for r in 0..w.rows() {
        data.extend_from_slice(w.row(r));
        data.extend(std::iter::repeat(0.0).take(deficiency));
    }
    Ok(GroupedView {
        g,
        deficiency,
        source_rows: w.rows(),
        source_cols: w.cols(),
        data,
    })
}

/// Inverse of [`reshape_to_groups`]: strip the pad slots and rebuild the
/// original matrix. Rejects views whose pad slots are nonzero.
pub fn ungroup(view: &GroupedView) -> Result<Matrix> {
    view.check_pad_slots()?;
    let padded_cols = view.source_cols + view.deficiency;
    if view.data.len() != view.source_rows * padded_cols {
        return Err(invalid("grouped view has inconsistent counts"));
    }
    let mut data = Vec::with_capacity(view.source_rows * view.source_cols);
    for r in 0..view.source_rows {
        data.extend_from_slice(&view.data[r * padded_cols..r * padded_cols + view.source_cols]);
    }
    Matrix::from_vec(view.source_rows, view.source_cols, data)
}

impl TryFrom<&GroupedView> for Matrix {
    type Error = Error;

    fn try_from(view: &GroupedView) -> Result<Self> {
        ungroup(view)
    }
}
