//! Binary model files: `ICBM`, u16 version, u16 class count, u32 feature
//! dim, then little-endian f64 weights (row-major) and biases.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::linear::SoftmaxLinear;

pub const MAGIC: &[u8; 4] = b"ICBM";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 12;

pub fn encode(m: &SoftmaxLinear) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (m.weights.len() + m.bias.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n_classes as u16).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in m.weights.iter().chain(&m.bias) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<SoftmaxLinear> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::CorruptPayload("missing ICBM header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_classes = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let n_values = n_classes * dim + n_classes;
    if n_classes == 0 || bytes.len() != HEADER_LEN + 8 * n_values {
        return Err(Error::CorruptPayload(format!(
            "{} bytes for {n_classes} classes x {dim} features",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptPayload("non-finite parameter".into()));
    }
    let bias = values[n_classes * dim..].to_vec();
    let mut weights = values;
    weights.truncate(n_classes * dim);
    Ok(SoftmaxLinear {
        n_classes,
        dim,
        weights,
        bias,
    })
}

pub fn save_model(m: &SoftmaxLinear, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(m)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SoftmaxLinear> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SoftmaxLinear {
        let mut m = SoftmaxLinear::zeros(6, 3);
        for (i, w) in m.weights.iter_mut().enumerate() {
            *w = i as f64 * 0.25 - 2.0;
        }
        m.bias[4] = -1.5;
        m
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.icbm");
        save_model(&sample(), &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), sample());
    }

    #[test]
    fn corruption_detected() {
        let mut b = encode(&sample());
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::CorruptPayload(_))));
        let mut b = encode(&sample());
        b.pop();
        assert!(matches!(decode(&b), Err(Error::CorruptPayload(_))));
        let mut b = encode(&sample());
        b[4] = 9;
        assert!(matches!(
            decode(&b),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut b = encode(&sample());
        let n = b.len();
        b[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::CorruptPayload(_))));
    }
}
