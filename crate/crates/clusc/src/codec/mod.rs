//! Compressed-layer representation: codebook + fixed 16-bit codes.
//!
//! A layer compressed at group dimension `g` with `n` clusters stores an
//! `n_effective x g` codebook and one unsigned 16-bit code per group.
//! Reconstruction gathers codebook rows by code, views the result as the
//! padded `d_in x (d_out + deficiency)` matrix, and slices off the pad
//! columns — the same semantics the compressed linear layer applies at
//! forward time.

mod bits;
mod format;

pub use bits::{bits_per_param, codebook_param_fraction_2dp, BitReport, Ratio};
pub use format::{deserialize, serialize, read_file, write_file, MAGIC, VERSION};

use crate::error::{invalid, Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::matrix::{pad_deficiency, reshape_to_groups, Matrix};
use serde::{Deserialize, Serialize};

/// Default cluster count: just below the unsigned 16-bit code ceiling.
pub const DEFAULT_N: usize = 65_500;

/// Storage width of codebook values in the CLSC container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookPrecision {
    Half,
    Single,
}

impl CodebookPrecision {
    pub fn bits(self) -> u32 {
        match self {
            CodebookPrecision::Half => 16,
            CodebookPrecision::Single => 32,
        }
    }
}

/// Round-to-nearest metadata left behind by [`quantize_codebook`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookQuant {
    pub bits: u32,
    pub scale: f32,
}

/// One weight matrix as codebook + codes.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub g: usize,
    pub n_effective: usize,
    pub deficiency: usize,
    /// `n_effective x g`; kept in f32 for arithmetic, narrowed on store.
    pub codebook: Matrix,
    pub codes: Vec<u16>,
    pub codebook_precision: CodebookPrecision,
    pub codebook_quant: Option<CodebookQuant>,
}

impl CompressedLayer {
    /// Expected code count for these dimensions.
    pub fn expected_codes(&self) -> usize {
        self.d_in * (self.d_out + self.deficiency) / self.g
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::CorruptLayer("zero dimension".into()));
        }
        if self.deficiency != pad_deficiency(self.d_out, self.g) {
            return Err(Error::CorruptLayer(format!(
                "deficiency {} inconsistent with d_out {} and g {}",
                self.deficiency, self.d_out, self.g
            )));
        }
        if self.codes.len() != self.expected_codes() {
            return Err(Error::CorruptLayer(format!(
                "{} codes, expected {}",
                self.codes.len(),
                self.expected_codes()
            )));
        }
        if self.n_effective == 0 || self.n_effective > u16::MAX as usize + 1 {
            return Err(Error::CorruptLayer(format!(
                "n_effective {} out of range",
                self.n_effective
            )));
        }
        if self.codebook.rows() != self.n_effective || self.codebook.cols() != self.g {
            return Err(Error::CorruptLayer("codebook shape mismatch".into()));
        }
        if let Some(bad) = self.codes.iter().find(|&&c| c as usize >= self.n_effective) {
            return Err(Error::CorruptLayer(format!(
                "code {bad} >= n_effective {}",
                self.n_effective
            )));
        }
        Ok(())
    }

    /// Dense parameter count of the layer this stands in for.
    pub fn dense_params(&self) -> usize {
        self.d_in * self.d_out
    }

    /// Bit accounting for this layer's (g, n) setting.
    pub fn bit_report(&self) -> BitReport {
        let codebook_bits = self
            .codebook_quant
            .map(|q| q.bits)
            .unwrap_or_else(|| self.codebook_precision.bits());
        bits_per_param(
            self.d_in as u64,
            self.d_out as u64,
            self.g as u64,
            self.n_effective as u64,
            16,
            codebook_bits as u64,
        )
        .expect("validated layer has nonzero dims")
    }
}

/// Cluster a weight matrix into a compressed layer. Deterministic for a
/// fixed config; the codebook keeps the raw f32 centroids.
pub fn compress_layer(
    name: &str,
    w: &Matrix,
    g: usize,
    cfg: &KMeansConfig,
) -> Result<CompressedLayer> {
    let view = reshape_to_groups(w, g)?;
    let result = kmeans(&view, cfg)?;
    let layer = CompressedLayer {
        name: name.to_string(),
        d_in: w.rows(),
        d_out: w.cols(),
        g,
        n_effective: result.n_effective,
        deficiency: view.deficiency(),
        codebook: result.centroids,
        codes: result.assignments,
        codebook_precision: CodebookPrecision::Half,
        codebook_quant: None,
    };
    layer.validate()?;
    Ok(layer)
}

/// Gather codebook rows by code and strip the pad columns.
pub fn reconstruct(layer: &CompressedLayer) -> Result<Matrix> {
    layer.validate()?;
    let g = layer.g;
    let padded_cols = layer.d_out + layer.deficiency;
    let mut out = Vec::with_capacity(layer.d_in * layer.d_out);
    let groups_per_row = padded_cols / g;
    for r in 0..layer.d_in {
        let mut written = 0usize;
        for gi in 0..groups_per_row {
            let code = layer.codes[r * groups_per_row + gi] as usize;
            let centroid = layer.codebook.row(code);
            let take = g.min(layer.d_out - written);
            out.extend_from_slice(&centroid[..take]);
            written += take;
        }
    }
    Matrix::from_vec(layer.d_in, layer.d_out, out)
}

/// Apply symmetric round-to-nearest to the codebook values, one scale per
/// codebook. `bits = 16` is the identity up to the half-precision cast.
///
/// The scale maps the largest-magnitude centroid component onto the top
/// positive level (`max|c| / (2^(bits-1) - 1)`), so 8-bit narrowing stays
/// near-lossless and only very low widths destroy the codebook.
pub fn quantize_codebook(layer: &CompressedLayer, bits: u32) -> Result<CompressedLayer> {
    layer.validate()?;
    if !matches!(bits, 2 | 4 | 8 | 16) {
        return Err(invalid(format!(
            "unsupported codebook width {bits}; supported: 2, 4, 8, 16"
        )));
    }
    let mut out = layer.clone();
    if bits == 16 {
        for v in out.codebook.data_mut() {
            *v = half::f16::from_f32(*v).to_f32();
        }
        out.codebook_precision = CodebookPrecision::Half;
        out.codebook_quant = None;
        return Ok(out);
    }
    let max_abs = layer
        .codebook
        .data()
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 {
        1.0
    } else {
        max_abs / ((1u32 << (bits - 1)) - 1) as f32
    };
    let lo = -(1i64 << (bits - 1)) as f32;
    let hi = ((1i64 << (bits - 1)) - 1) as f32;
    for v in out.codebook.data_mut() {
        *v = (*v / scale).round().clamp(lo, hi) * scale;
    }
    out.codebook_quant = Some(CodebookQuant { bits, scale });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_weights, WeightDist, WeightGenSpec};
    use crate::kmeans::KMeansConfig;
    use crate::matrix::reshape_to_groups;

    fn student_t_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        gen_weights(&WeightGenSpec {
            dist: WeightDist::StudentT { df: 3.0 },
            rows,
            cols,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn lossless_when_clusters_cover_distinct_vectors() {
        let w = Matrix::from_vec(2, 4, vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
        let layer = compress_layer("w", &w, 2, &KMeansConfig::new(8).with_seed(3)).unwrap();
        assert_eq!(layer.n_effective, 2);
        assert_eq!(reconstruct(&layer).unwrap(), w);
    }

    #[test]
    fn code_count_matches_dims() {
        let w = Matrix::from_fn(64, 64, |r, c| ((r * 64 + c) % 97) as f32 / 97.0);
        let layer = compress_layer("w", &w, 4, &KMeansConfig::new(16).with_seed(1)).unwrap();
        assert_eq!(layer.codes.len(), 64 * 64 / 4);
        assert!(layer.codes.iter().all(|&c| c < 16));
    }

    #[test]
    fn pad_columns_are_stripped() {
        let w = Matrix::from_fn(6, 10, |r, c| (r as f32) - 0.3 * c as f32);
        let layer = compress_layer("w", &w, 4, &KMeansConfig::new(12).with_seed(4)).unwrap();
        assert_eq!(layer.deficiency, 2);
        let rec = reconstruct(&layer).unwrap();
        assert_eq!(rec.rows(), 6);
        assert_eq!(rec.cols(), 10);
    }

    #[test]
    fn frobenius_error_squared_equals_objective() {
        // Exactly divisible dims: no pad slots, the identity is exact.
        let w = student_t_matrix(64, 64, 8);
        let g = 8;
        let cfg = KMeansConfig::new(32).with_seed(21);
        let layer = compress_layer("w", &w, g, &cfg).unwrap();
        let rec = reconstruct(&layer).unwrap();
        let err2 = w.sq_distance(&rec).unwrap();

        let view = reshape_to_groups(&w, g).unwrap();
        let objective = kmeans(&view, &cfg).unwrap().objective;
        assert!(
            (err2 - objective).abs() <= 1e-4 * objective.max(1e-12),
            "err2 {err2} vs objective {objective}"
        );
    }

    #[test]
    fn padded_objective_splits_into_real_and_pad_residual() {
        let w = student_t_matrix(16, 21, 5);
        let g = 6; // deficiency 3
        let cfg = KMeansConfig::new(24).with_seed(2);
        let layer = compress_layer("w", &w, g, &cfg).unwrap();
        assert_eq!(layer.deficiency, 3);
        let rec = reconstruct(&layer).unwrap();
        let err2 = w.sq_distance(&rec).unwrap();

        // Pad slots reconstruct from centroid tails against zero targets.
        let groups_per_row = (w.cols() + layer.deficiency) / g;
        let mut pad_residual = 0.0f64;
        for r in 0..w.rows() {
            let code = layer.codes[r * groups_per_row + groups_per_row - 1] as usize;
            let tail = &layer.codebook.row(code)[g - layer.deficiency..];
            pad_residual += tail.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
        }
        let view = reshape_to_groups(&w, g).unwrap();
        let objective = kmeans(&view, &cfg).unwrap().objective;
        assert!(
            (err2 + pad_residual - objective).abs() <= 1e-4 * objective.max(1e-12),
            "err2 {err2} + pad {pad_residual} vs objective {objective}"
        );
    }

    #[test]
    fn error_shrinks_as_n_doubles() {
        let w = student_t_matrix(256, 256, 33);
        let mut last = f64::INFINITY;
        for n in [256usize, 512, 1024, 2048, 4096] {
            let cfg = KMeansConfig::new(n).with_seed(7).with_restarts(2);
            let layer = compress_layer("w", &w, 8, &cfg).unwrap();
            let rec = reconstruct(&layer).unwrap();
            let err = w.sq_distance(&rec).unwrap();
            assert!(err < last, "n={n}: {err} !< {last}");
            last = err;
        }
    }

    #[test]
    fn quantize_16_is_half_cast() {
        let w = student_t_matrix(32, 32, 9);
        let layer = compress_layer("w", &w, 4, &KMeansConfig::new(64).with_seed(1)).unwrap();
        let q = quantize_codebook(&layer, 16).unwrap();
        for (a, b) in layer.codebook.data().iter().zip(q.codebook.data()) {
            assert_eq!(half::f16::from_f32(*a).to_f32(), *b);
        }
    }

    #[test]
    fn quantize_unsupported_width() {
        let w = student_t_matrix(8, 8, 9);
        let layer = compress_layer("w", &w, 4, &KMeansConfig::new(4).with_seed(1)).unwrap();
        assert!(quantize_codebook(&layer, 3).is_err());
    }

    #[test]
    fn eight_bit_codebook_is_near_lossless_on_random_layer() {
        let w = gen_weights(&WeightGenSpec {
            dist: WeightDist::Gaussian,
            rows: 128,
            cols: 128,
            seed: 77,
        })
        .unwrap();
        let layer = compress_layer("w", &w, 8, &KMeansConfig::new(256).with_seed(6)).unwrap();
        let base = w.sq_distance(&reconstruct(&layer).unwrap()).unwrap();
        let q8 = quantize_codebook(&layer, 8).unwrap();
        let e8 = w.sq_distance(&reconstruct(&q8).unwrap()).unwrap();
        assert!(
            (e8 - base).abs() / base < 0.01,
            "8-bit moved MSE by {}",
            (e8 - base).abs() / base
        );
    }

    #[test]
    fn two_bit_codebook_destroys_heavy_tailed_layer() {
        // Fine base compression, then a 2-bit codebook: the blowup is
        // measured against the 16-bit (half-cast) reference.
        let w = student_t_matrix(128, 128, 77);
        let layer = compress_layer("w", &w, 4, &KMeansConfig::new(2048).with_seed(6)).unwrap();
        let q16 = quantize_codebook(&layer, 16).unwrap();
        let base = w.sq_distance(&reconstruct(&q16).unwrap()).unwrap();
        let q2 = quantize_codebook(&layer, 2).unwrap();
        let e2 = w.sq_distance(&reconstruct(&q2).unwrap()).unwrap();
        assert!(e2 > 10.0 * base, "2-bit only reached {}x", e2 / base);
    }

    #[test]
    fn out_of_range_code_is_corrupt() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut layer = compress_layer("w", &w, 2, &KMeansConfig::new(2).with_seed(1)).unwrap();
        layer.codes[0] = 9;
        assert!(matches!(reconstruct(&layer), Err(Error::CorruptLayer(_))));
    }
}
