//! Seeded generators for synthetic weight matrices and token corpora.
//!
//! Heavy tails are modeled with the Student-t family: the degrees of
//! freedom are the single knob controlling outlier frequency, which is
//! what makes a matrix hard for uniform quantization.

use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::rng::det_rng;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightDist {
    Gaussian,
    StudentT { df: f64 },
    GaussianWithOutliers { rate: f64, magnitude: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightGenSpec {
    pub dist: WeightDist,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

/// Draw a weight matrix per the spec; deterministic per seed.
pub fn gen_weights(spec: &WeightGenSpec) -> Result<Matrix> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(invalid("weight matrix dimensions must be nonzero"));
    }
    let mut rng = det_rng(spec.seed);
    let count = spec.rows * spec.cols;
    let data: Vec<f32> = match spec.dist {
        WeightDist::Gaussian => (0..count)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect(),
        WeightDist::StudentT { df } => {
            if df <= 2.0 {
                return Err(invalid("student-t df must exceed 2 for finite variance"));
            }
            let t = StudentT::new(df).map_err(|e| invalid(format!("student-t: {e}")))?;
            (0..count).map(|_| t.sample(&mut rng) as f32).collect()
        }
        WeightDist::GaussianWithOutliers { rate, magnitude } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(invalid("outlier rate must be in [0, 1]"));
            }
            (0..count)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    let v = v as f32;
                    if rng.gen::<f64>() < rate {
                        v * magnitude
                    } else {
                        v
                    }
                })
                .collect()
        }
    };
    Matrix::from_vec(spec.rows, spec.cols, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusOrder {
    /// Independent uniform tokens; the loss floor is ln(vocab).
    Uniform,
    /// Order-1 Markov chain with Dirichlet(alpha) transition rows;
    /// small alpha gives peaked, learnable structure.
    Markov { alpha: f64 },
    /// Deterministic cycle token -> (token + 1) mod vocab.
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub length: usize,
    pub order: CorpusOrder,
    pub seed: u64,
}

/// Generate a token stream; deterministic per seed.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<u16>> {
    if spec.vocab < 2 {
        return Err(invalid("vocab must be >= 2"));
    }
    if spec.vocab > u16::MAX as usize + 1 {
        return Err(invalid("vocab exceeds 16-bit token ids"));
    }
    if spec.length == 0 {
        return Err(invalid("corpus length must be nonzero"));
    }
    let mut rng = det_rng(spec.seed);
    let v = spec.vocab;
    let tokens = match spec.order {
        CorpusOrder::Uniform => (0..spec.length)
            .map(|_| rng.gen_range(0..v) as u16)
            .collect(),
        CorpusOrder::Cycle => {
            let start = rng.gen_range(0..v);
            (0..spec.length)
                .map(|i| ((start + i) % v) as u16)
                .collect()
        }
        CorpusOrder::Markov { alpha } => {
            if alpha <= 0.0 {
                return Err(invalid("markov alpha must be positive"));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(format!("gamma: {e}")))?;
            // Cumulative transition rows for O(log v) sampling.
            let mut cum = vec![0.0f64; v * v];
            for row in 0..v {
                let weights: Vec<f64> = (0..v).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    acc += w / total;
                    cum[row * v + j] = acc;
                }
                cum[row * v + v - 1] = 1.0;
            }
            let mut state = rng.gen_range(0..v);
            let mut out = Vec::with_capacity(spec.length);
            out.push(state as u16);
            for _ in 1..spec.length {
                let r: f64 = rng.gen();
                let row = &cum[state * v..(state + 1) * v];
                state = row.partition_point(|&c| c <= r).min(v - 1);
                out.push(state as u16);
            }
            out
        }
    };
    Ok(tokens)
}
