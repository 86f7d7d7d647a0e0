//! `.sgft` feature files: a 16-byte header (`SGFT`, version, C, T as u32 LE)
//! followed by `C·T` little-endian f32 values, channel-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SGFT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Encodes a `C × T` tensor. Values are narrowed to f32.
pub fn encode_features(x: &Tensor) -> Result<Vec<u8>> {
    let (c, t) = x.dims2()?;
    let (c32, t32) = match (u32::try_from(c), u32::try_from(t)) {
        (Ok(c), Ok(t)) => (c, t),
        _ => return Err(Error::FeatureFile(format!("dimensions {c}×{t} exceed u32"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * c * t);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    for &v in x.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a feature file into raw f32 values and `(C, T)`.
pub fn decode_features_f32(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::FeatureFile(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::FeatureFile("bad magic, expected SGFT".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::FeatureFile(format!("unsupported version {version}")));
    }
    let (c, t) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[HEADER_LEN..];
    let expected = c
        .checked_mul(t)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::FeatureFile(format!("dimensions {c}×{t} overflow")))?;
    if payload.len() != expected {
        return Err(Error::FeatureFile(format!(
            "payload holds {} bytes, header {c}×{t} needs {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((c, t, values))
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let (c, t, values) = decode_features_f32(bytes)?;
    Tensor::new(vec![c, t], values.into_iter().map(f64::from).collect())
}

pub fn write_features(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, encode_features(x)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::FeatureFile(m) => Error::FeatureFile(format!("{}: {m}", path.display())),
        other => other,
    })
}
