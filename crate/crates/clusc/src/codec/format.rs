//! CLSC v1: the on-disk container for compressed layers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CLSC" | u8 version=1 | u8 codebook_precision (16|32) | u32 layer_count
//! per layer:
//!   u16 name_len | name bytes (UTF-8)
//!   u32 d_in | u32 d_out | u16 g | u32 n_effective | u16 deficiency
//!   n_effective * g codebook values (IEEE-754 half or single)
//!   k u16 codes, k = d_in * (d_out + deficiency) / g
//! u32 crc32 over all preceding bytes
//! ```
//!
//! The decoder accepts untrusted bytes: every length is validated against
//! the remaining buffer before any allocation, and the CRC is checked
//! before layer payloads are parsed.

use super::{CodebookPrecision, CompressedLayer};
use crate::error::{invalid, Error, FormatError, Result};
use crate::matrix::{pad_deficiency, Matrix};

pub const MAGIC: [u8; 4] = *b"CLSC";
pub const VERSION: u8 = 1;

/// Fixed-size part: magic + version + precision + layer_count + crc.
const MIN_LEN: usize = 4 + 1 + 1 + 4 + 4;

pub fn serialize(layers: &[CompressedLayer]) -> Result<Vec<u8>> {
    let precision = match layers {
        [] => CodebookPrecision::Half,
        [first, rest @ ..] => {
            if rest.iter().any(|l| l.codebook_precision != first.codebook_precision) {
                return Err(invalid("all layers in one file must share codebook precision"));
            }
            first.codebook_precision
        }
    };
    if layers.len() > u32::MAX as usize {
        return Err(invalid("too many layers"));
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(precision.bits() as u8);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());

    for layer in layers {
        layer.validate()?;
        let name = layer.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(invalid(format!("layer name too long: {} bytes", name.len())));
        }
        if layer.d_in > u32::MAX as usize
            || layer.d_out > u32::MAX as usize
            || layer.g > u16::MAX as usize
            || layer.n_effective > u32::MAX as usize
        {
            return Err(invalid("layer dimensions exceed format limits"));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(layer.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(layer.d_out as u32).to_le_bytes());
        out.extend_from_slice(&(layer.g as u16).to_le_bytes());
        out.extend_from_slice(&(layer.n_effective as u32).to_le_bytes());
        out.extend_from_slice(&(layer.deficiency as u16).to_le_bytes());
        match precision {
            CodebookPrecision::Half => {
                for v in layer.codebook.data() {
                    out.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
                }
            }
            CodebookPrecision::Single => {
                for v in layer.codebook.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for c in &layer.codes {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            needed: u64::MAX,
            have: self.buf.len() as u64,
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                needed: end as u64,
                have: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<Vec<CompressedLayer>> {
    Ok(parse(bytes)?)
}

fn parse(bytes: &[u8]) -> Result<Vec<CompressedLayer>, FormatError> {
    if bytes.len() < MIN_LEN {
        return Err(FormatError::Truncated {
            needed: MIN_LEN as u64,
            have: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(FormatError::BadVersion(bytes[4]));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    let precision = match bytes[5] {
        16 => CodebookPrecision::Half,
        32 => CodebookPrecision::Single,
        other => return Err(FormatError::BadPrecision(other)),
    };

    let mut r = Reader { buf: body, pos: 6 };
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::new();
    for li in 0..layer_count {
        let bad = |reason: String| FormatError::BadLayer { layer: li, reason };
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("name is not UTF-8".into()))?
            .to_string();
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let g = r.u16()? as usize;
        let n_effective = r.u32()? as usize;
        let deficiency = r.u16()? as usize;

        if d_in == 0 || d_out == 0 || g == 0 || n_effective == 0 {
            return Err(bad("zero dimension".into()));
        }
        if n_effective > u16::MAX as usize + 1 {
            return Err(bad(format!("n_effective {n_effective} exceeds 16-bit codes")));
        }
        if deficiency != pad_deficiency(d_out, g) {
            return Err(bad(format!(
                "deficiency {deficiency} inconsistent with d_out {d_out}, g {g}"
            )));
        }
        let padded = d_in as u64 * (d_out as u64 + deficiency as u64);
        let k = (padded / g as u64) as usize;
        let value_width = match precision {
            CodebookPrecision::Half => 2u64,
            CodebookPrecision::Single => 4u64,
        };
        let codebook_bytes = n_effective as u64 * g as u64 * value_width;
        let codes_bytes = k as u64 * 2;
        let needed = codebook_bytes.saturating_add(codes_bytes);
        if needed > r.remaining() as u64 {
            return Err(FormatError::Truncated {
                needed: r.pos as u64 + needed + 4,
                have: bytes.len() as u64,
            });
        }

        let mut codebook = Vec::with_capacity(n_effective * g);
        match precision {
            CodebookPrecision::Half => {
                for chunk in r.take((n_effective * g) * 2)?.chunks_exact(2) {
                    codebook.push(half::f16::from_le_bytes(chunk.try_into().unwrap()).to_f32());
                }
            }
            CodebookPrecision::Single => {
                for chunk in r.take((n_effective * g) * 4)?.chunks_exact(4) {
                    codebook.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
        }
        if codebook.iter().any(|v| !v.is_finite()) {
            return Err(bad("codebook contains non-finite values".into()));
        }
        let mut codes = Vec::with_capacity(k);
        for chunk in r.take(k * 2)?.chunks_exact(2) {
            codes.push(u16::from_le_bytes(chunk.try_into().unwrap()));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= n_effective) {
            return Err(bad(format!("code {c} >= n_effective {n_effective}")));
        }

        let codebook = Matrix::from_vec(n_effective, g, codebook)
            .map_err(|e| bad(format!("codebook shape: {e}")))?;
        layers.push(CompressedLayer {
            name,
            d_in,
            d_out,
            g,
            n_effective,
            deficiency,
            codebook,
            codes,
            codebook_precision: precision,
            codebook_quant: None,
        });
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining() as u64));
    }
    Ok(layers)
}

pub fn write_file(path: &std::path::Path, layers: &[CompressedLayer]) -> Result<()> {
    std::fs::write(path, serialize(layers)?)?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<CompressedLayer>> {
    let bytes = std::fs::read(path)?;
    deserialize(&bytes)
}

#[allow(dead_code)]
fn error_is_corrupt_file(e: &Error) -> bool {
    matches!(e, Error::CorruptFile(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::det_rng;
    use rand::Rng;

    /// Random structurally valid layer; Half-precision codebooks are
    /// snapped to the f16 grid so round trips are bit-exact.
    pub(crate) fn fuzz_layer(rng: &mut impl Rng, precision: CodebookPrecision) -> CompressedLayer {
        let g = rng.gen_range(1..=9usize);
        let d_in = rng.gen_range(1..=12usize);
        let d_out = rng.gen_range(1..=24usize);
        let deficiency = pad_deficiency(d_out, g);
        let k = d_in * (d_out + deficiency) / g;
        let n_effective = rng.gen_range(1..=32usize);
        let mut codebook = Vec::with_capacity(n_effective * g);
        for _ in 0..n_effective * g {
            let v: f32 = rng.gen_range(-8.0..8.0);
            codebook.push(match precision {
                CodebookPrecision::Half => half::f16::from_f32(v).to_f32(),
                CodebookPrecision::Single => v,
            });
        }
        let codes = (0..k)
            .map(|_| rng.gen_range(0..n_effective) as u16)
            .collect();
        let name_len = rng.gen_range(0..12);
        let name: String = (0..name_len)
            .map(|_| char::from(rng.gen_range(b'a'..=b'z')))
            .collect();
        CompressedLayer {
            name,
            d_in,
            d_out,
            g,
            n_effective,
            deficiency,
            codebook: Matrix::from_vec(n_effective, g, codebook).unwrap(),
            codes,
            codebook_precision: precision,
            codebook_quant: None,
        }
    }

    #[test]
    fn roundtrip_both_precisions() {
        let mut rng = det_rng(100);
        for trial in 0..200 {
            let precision = if trial % 2 == 0 {
                CodebookPrecision::Half
            } else {
                CodebookPrecision::Single
            };
            let layers: Vec<_> = (0..rng.gen_range(0..4))
                .map(|_| fuzz_layer(&mut rng, precision))
                .collect();
            let bytes = serialize(&layers).unwrap();
            let back = deserialize(&bytes).unwrap();
            assert_eq!(back, layers, "trial {trial}");
        }
    }

    #[test]
    fn empty_list_is_a_valid_file() {
        let bytes = serialize(&[]).unwrap();
        assert_eq!(bytes.len(), MIN_LEN);
        assert!(deserialize(&bytes).unwrap().is_empty());
    }

    #[test]
    fn flipped_code_byte_is_crc_error() {
        let mut rng = det_rng(5);
        let layer = fuzz_layer(&mut rng, CodebookPrecision::Half);
        let mut bytes = serialize(&[layer]).unwrap();
        let idx = bytes.len() - 6; // inside the codes region
        bytes[idx] ^= 0x40;
        match deserialize(&bytes) {
            Err(Error::CorruptFile(FormatError::CrcMismatch { .. })) => {}
            other => panic!("expected CRC mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corruption_classes_are_distinct() {
        let mut rng = det_rng(6);
        let bytes = serialize(&[fuzz_layer(&mut rng, CodebookPrecision::Single)]).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            deserialize(&bad_magic),
            Err(Error::CorruptFile(FormatError::BadMagic))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            deserialize(&bad_version),
            Err(Error::CorruptFile(FormatError::BadVersion(9)))
        ));

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            deserialize(truncated),
            Err(Error::CorruptFile(
                FormatError::CrcMismatch { .. } | FormatError::Truncated { .. }
            ))
        ));

        assert!(matches!(
            deserialize(&bytes[..3]),
            Err(Error::CorruptFile(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn hostile_counts_do_not_allocate() {
        // A file claiming a huge layer count but no payload must fail
        // cleanly on the CRC or truncation path.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.push(VERSION);
        bytes.push(16);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(deserialize(&bytes).is_err());
    }

    #[test]
    fn mixed_precision_rejected() {
        let mut rng = det_rng(7);
        let a = fuzz_layer(&mut rng, CodebookPrecision::Half);
        let b = fuzz_layer(&mut rng, CodebookPrecision::Single);
        assert!(serialize(&[a, b]).is_err());
    }

    proptest::proptest! {
        /// Arbitrary bytes never panic the decoder.
        #[test]
        fn decoder_total_on_arbitrary_bytes(data: Vec<u8>) {
            let _ = deserialize(&data);
        }
    }
}
