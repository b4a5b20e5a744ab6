//! `.lf4` container.
//!
//! ```text
//! "LF4\0" | version u16 = 1 | U V H W C (u16 each) | dtype u8 = 0 (f32) | reserved u8 = 0
//! payload: little-endian f32, planar [u][v][c][h][w]
//! ```

use std::io::Write;
use std::path::Path;

use super::{LightField, CHANNELS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LF4\0";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 18;
/// Largest payload accepted by the decoder, in samples.
const MAX_SAMPLES: u64 = 1 << 32;

pub fn encode_lf4(lf: &LightField) -> Result<Vec<u8>> {
    let (u, v, h, w) = lf.dims();
    let dims = [u, v, h, w, CHANNELS];
    let mut out = Vec::with_capacity(HEADER_LEN + lf.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u16::try_from(d)
            .map_err(|_| Error::InvalidLightField(format!("dimension {d} exceeds u16")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(0);
    out.push(0);
    for &x in lf.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a container; samples are clamped to `[0, 1]`.
pub fn decode_lf4(bytes: &[u8]) -> Result<LightField> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let rd = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = rd(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = [rd(6), rd(8), rd(10), rd(12), rd(14)];
    if bytes[16] != 0 {
        return Err(Error::UnsupportedDtype(bytes[16]));
    }
    let n = dims
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or(Error::DimensionOverflow(dims))?;
    if dims[4] as usize != CHANNELS {
        return Err(Error::InvalidLightField(format!("{} channels, expected 3", dims[4])));
    }
    let expected = HEADER_LEN + n as usize * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]).clamp(0.0, 1.0))
        .collect();
    let [u, v, h, w, _] = dims.map(|d| d as usize);
    LightField::new(u, v, h, w, data)
}

pub fn write_lf4(lf: &LightField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_lf4(lf)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_lf4(path: impl AsRef<Path>) -> Result<LightField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_lf4(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_are_distinct() {
        let lf = LightField::zeros(1, 2, 3, 4);
        let good = encode_lf4(&lf).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_lf4(&bad), Err(Error::BadMagic)));
        assert_eq!(Error::BadMagic.to_string(), "bad magic");

        assert!(matches!(
            decode_lf4(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));

        let mut huge = good[..HEADER_LEN].to_vec();
        for i in 0..4 {
            huge[6 + 2 * i..8 + 2 * i].copy_from_slice(&u16::MAX.to_le_bytes());
        }
        assert!(matches!(decode_lf4(&huge), Err(Error::DimensionOverflow(_))));

        let mut ver = good.clone();
        ver[4] = 9;
        assert!(matches!(decode_lf4(&ver), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn header_layout() {
        let lf = LightField::zeros(2, 3, 4, 5);
        let b = encode_lf4(&lf).unwrap();
        assert_eq!(&b[..4], b"LF4\0");
        assert_eq!(&b[4..18], &[1, 0, 2, 0, 3, 0, 4, 0, 5, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 18 + 2 * 3 * 4 * 5 * 3 * 4);
    }
}
