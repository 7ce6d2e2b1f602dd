//! Exact bit accounting for compressed layers.
//!
//! Storage cost per parameter splits into a code term (`code_bits / g`)
//! and a codebook term (`codebook_bits * g * n / (d_in * d_out)`). Both
//! are kept as exact rationals; rounding happens only in display helpers.

use crate::error::{invalid, Result};

/// Non-negative exact rational, always reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    num: u128,
    den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn num(&self) -> u128 {
        self.num
    }

    pub fn den(&self) -> u128 {
        self.den
    }

    pub fn add(self, other: Ratio) -> Ratio {
        Ratio::new(
            self.num * other.den + other.num * self.den,
            self.den * other.den,
        )
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Round to two decimals, halves away from zero, via integer math.
    pub fn round2(self) -> f64 {
        let hundredths = (200 * self.num + self.den) / (2 * self.den);
        hundredths as f64 / 100.0
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Bit accounting for one layer. For clustered layers `code_bits` is the
/// per-parameter index cost and `codebook_bits` the centroid cost; for
/// round-to-nearest layers the same fields carry integer-weight and
/// scale-overhead costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitReport {
    pub params: u64,
    /// Per-parameter code term.
    pub code_bits: Ratio,
    /// Per-parameter codebook term.
    pub codebook_bits: Ratio,
    /// Sum of the two terms.
    pub bits_per_param: Ratio,
    /// Total bits spent on codes.
    pub code_bits_total: Ratio,
    /// Total bits spent on the codebook.
    pub codebook_bits_total: Ratio,
}

/// Storage cost of clustering a `d_in x d_out` matrix at group dimension
/// `g` with `n` centroids, with the given storage widths.
pub fn bits_per_param(
    d_in: u64,
    d_out: u64,
    g: u64,
    n: u64,
    code_bits: u64,
    codebook_bits: u64,
) -> Result<BitReport> {
    if d_in == 0 || d_out == 0 || g == 0 || n == 0 {
        return Err(invalid("bit accounting needs nonzero counts"));
    }
    let params = d_in * d_out;
    let code = Ratio::new(code_bits as u128, g as u128);
    let codebook = Ratio::new(
        codebook_bits as u128 * g as u128 * n as u128,
        params as u128,
    );
    Ok(BitReport {
        params,
        code_bits: code,
        codebook_bits: codebook,
        bits_per_param: code.add(codebook),
        code_bits_total: Ratio::new(code_bits as u128 * params as u128, g as u128),
        codebook_bits_total: Ratio::new(codebook_bits as u128 * g as u128 * n as u128, 1),
    })
}

/// Storage cost of round-to-nearest quantization at `b` bits with 16-bit
/// scales, one per `group_size` weights (or one per tensor).
pub fn rtn_bits_per_param(
    d_in: u64,
    d_out: u64,
    b: u64,
    group_size: Option<u64>,
) -> Result<BitReport> {
    if d_in == 0 || d_out == 0 || b == 0 {
        return Err(invalid("bit accounting needs nonzero counts"));
    }
    if group_size == Some(0) {
        return Err(invalid("group size must be nonzero"));
    }
    let params = d_in * d_out;
    let weight = Ratio::new(b as u128, 1);
    let scale = match group_size {
        Some(gs) => Ratio::new(16, gs as u128),
        None => Ratio::new(16, params as u128),
    };
    let scale_total = match group_size {
        Some(gs) => Ratio::new(16 * params as u128, gs as u128),
        None => Ratio::new(16, 1),
    };
    Ok(BitReport {
        params,
        code_bits: weight,
        codebook_bits: scale,
        bits_per_param: weight.add(scale),
        code_bits_total: Ratio::new(b as u128 * params as u128, 1),
        codebook_bits_total: scale_total,
    })
}

/// Codebook share of the dense parameter count, reported the way the
/// summary table does: both counts are first rounded to hundredths of a
/// million, then the percentage of the rounded counts is rounded to two
/// decimals.
pub fn codebook_param_fraction_2dp(d_in: u64, d_out: u64, g: u64, n: u64) -> Result<f64> {
    if d_in == 0 || d_out == 0 || g == 0 || n == 0 {
        return Err(invalid("fraction needs nonzero counts"));
    }
    let round_to_m_hundredths = |x: u64| -> u128 { ((x as u128) + 5_000) / 10_000 };
    let codebook = round_to_m_hundredths(g * n);
    let params = round_to_m_hundredths(d_in * d_out);
    if params == 0 {
        return Err(invalid("parameter count rounds to zero million"));
    }
    Ok(Ratio::new(100 * codebook, params).round2())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_4_25() {
        let r = bits_per_param(4096, 4096, 4, 65_535, 16, 16).unwrap();
        assert_eq!(r.bits_per_param.round2(), 4.25);
        assert_eq!(r.code_bits, Ratio::new(4, 1));
    }

    #[test]
    fn table_settings_two_decimals() {
        for (g, n, want) in [(4u64, 65_500u64, 4.25), (6, 65_500, 3.04), (9, 65_500, 2.34)] {
            let r = bits_per_param(4096, 4096, g, n, 16, 16).unwrap();
            assert_eq!(r.bits_per_param.round2(), want, "g={g} n={n}");
        }
    }

    #[test]
    fn analytic_tiny_case() {
        let r = bits_per_param(16, 16, 16, 1, 16, 16).unwrap();
        assert_eq!(r.code_bits, Ratio::new(1, 1));
        assert_eq!(r.codebook_bits, Ratio::new(1, 1));
        assert_eq!(r.bits_per_param, Ratio::new(2, 1));
    }

    #[test]
    fn totals_match_per_param_terms() {
        let r = bits_per_param(4096, 4096, 6, 65_500, 16, 16).unwrap();
        let total = r.code_bits_total.add(r.codebook_bits_total);
        let per_param = Ratio::new(total.num(), total.den() * r.params as u128);
        assert_eq!(per_param, r.bits_per_param);
    }

    #[test]
    fn codebook_fractions_match_table_convention() {
        for (g, n, want) in [(4u64, 65_500u64, 1.55), (6, 65_500, 2.32), (9, 65_500, 3.52)] {
            let pct = codebook_param_fraction_2dp(4096, 4096, g, n).unwrap();
            assert_eq!(pct, want, "g={g} n={n}");
        }
    }

    #[test]
    fn rtn_labels() {
        let r = rtn_bits_per_param(4096, 4096, 4, Some(128)).unwrap();
        assert_eq!(r.bits_per_param.round2(), 4.13);
        let r = rtn_bits_per_param(4096, 4096, 2, Some(64)).unwrap();
        assert_eq!(r.bits_per_param.round2(), 2.25);
        let r = rtn_bits_per_param(4096, 4096, 3, None).unwrap();
        assert!(r.bits_per_param.to_f64() - 3.0 < 1e-6);
        assert_eq!(r.bits_per_param.round2(), 3.0);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(bits_per_param(0, 4096, 4, 65_500, 16, 16).is_err());
        assert!(rtn_bits_per_param(4096, 0, 4, Some(128)).is_err());
    }

    #[test]
    fn round2_half_away() {
        assert_eq!(Ratio::new(4125, 1000).round2(), 4.13);
        assert_eq!(Ratio::new(1, 3).round2(), 0.33);
        assert_eq!(Ratio::new(2, 3).round2(), 0.67);
    }
}
