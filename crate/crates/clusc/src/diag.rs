//! Quantization-difficulty diagnostics: weight kurtosis, activation-aware
//! importance dispersion, and code-histogram uniformity.

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

/// Pearson (non-excess) kurtosis: `E[(x - mu)^4] / sigma^4`, so a normal
/// sample sits near 3. Two-pass f64 computation.
pub fn kurtosis(values: &[f32]) -> Result<f64> {
    if values.len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "kurtosis needs at least 4 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0f64, 0.0f64);
    for &v in values {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok(m4 / (m2 * m2))
}

/// Activation-aware importance scores for a weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WandaScore {
    /// `|W_ij| * ||X_j||_2`, same shape as the weight matrix.
    pub scores: Matrix,
    /// Population standard deviation per output row of the score matrix.
    pub row_std: Vec<f64>,
}

impl WandaScore {
    /// Layer-level dispersion summary: mean of the per-row standard
    /// deviations.
    pub fn std_summary(&self) -> f64 {
        if self.row_std.is_empty() {
            return 0.0;
        }
        self.row_std.iter().sum::<f64>() / self.row_std.len() as f64
    }
}

/// Score a weight matrix in output-major orientation (`d_out x d_in`)
/// against activations `X` (`samples x d_in`): each column of the weight
/// is scaled by the L2 norm of the matching activation column.
pub fn wanda_score(w: &Matrix, x: &Matrix) -> Result<WandaScore> {
    if x.cols() != w.cols() {
        return Err(invalid(format!(
            "activation columns {} must match weight input dim {}",
            x.cols(),
            w.cols()
        )));
    }
    let mut col_norms = vec![0.0f64; x.cols()];
    for r in 0..x.rows() {
        for (c, norm) in col_norms.iter_mut().enumerate() {
            let v = x.get(r, c) as f64;
            *norm += v * v;
        }
    }
    for n in col_norms.iter_mut() {
        *n = n.sqrt();
    }

    let scores = Matrix::from_fn(w.rows(), w.cols(), |r, c| {
        (w.get(r, c).abs() as f64 * col_norms[c]) as f32
    });
    let row_std = (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            var.sqrt()
        })
        .collect();
    Ok(WandaScore { scores, row_std })
}

/// Normalized Shannon entropy of the empirical code histogram, in [0, 1].
/// A single-cluster codebook is defined as perfectly uniform.
pub fn code_entropy(codes: &[u16], n_effective: usize) -> Result<f64> {
    if n_effective == 0 {
        return Err(invalid("n_effective must be >= 1"));
    }
    if codes.is_empty() {
        return Err(invalid("entropy of an empty code stream is undefined"));
    }
    if let Some(&bad) = codes.iter().find(|&&c| c as usize >= n_effective) {
        return Err(invalid(format!("code {bad} >= n_effective {n_effective}")));
    }
    if n_effective == 1 {
        return Ok(1.0);
    }
    let mut histogram = vec![0u64; n_effective];
    for &c in codes {
        histogram[c as usize] += 1;
    }
    let total = codes.len() as f64;
    let mut entropy = 0.0f64;
    for &count in &histogram {
        if count > 0 {
            let p = count as f64 / total;
            entropy -= p * p.ln();
        }
    }
    Ok((entropy / (n_effective as f64).ln()).clamp(0.0, 1.0))
}

/// One row of the per-layer diagnostics table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub name: String,
    pub kurtosis: f64,
    pub wanda_std: Option<f64>,
    pub code_entropy: Option<f64>,
}
