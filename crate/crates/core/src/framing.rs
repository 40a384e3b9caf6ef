//! Binary container shared by checkpoints and embedding files:
//! `u64` little-endian header length, UTF-8 JSON header, `f32` LE payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, SealError};

pub fn encode<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in payload {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its parsed header and payload values. The caller
/// checks the payload length against the header.
pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(SealError::MalformedHeader("missing header length".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| SealError::MalformedHeader("header length exceeds file size".into()))?;
    let header: H = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| SealError::MalformedHeader(e.to_string()))?;
    let body = &bytes[end..];
    if !body.len().is_multiple_of(4) {
        return Err(SealError::TruncatedPayload);
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, payload))
}

/// Reads the `format_version` field alone, so version errors take priority
/// over schema errors.
pub fn peek_version(bytes: &[u8]) -> Result<u32> {
    #[derive(serde::Deserialize)]
    struct V {
        format_version: u32,
    }
    let (v, _): (V, _) = decode(bytes)?;
    Ok(v.format_version)
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    fs::write(path, encode(header, payload)?)?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct H {
        format_version: u32,
        n: usize,
    }

    #[test]
    fn round_trip_and_corruption() {
        let h = H {
            format_version: 1,
            n: 3,
        };
        let bytes = encode(&h, &[1.0, -0.5, 0.25]).unwrap();
        let (back, p): (H, _) = decode(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(p, vec![1.0, -0.5, 0.25]);
        assert_eq!(peek_version(&bytes).unwrap(), 1);

        assert!(matches!(
            decode::<H>(&bytes[..bytes.len() - 2]),
            Err(SealError::TruncatedPayload)
        ));
        assert!(matches!(
            decode::<H>(&bytes[..4]),
            Err(SealError::MalformedHeader(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = b'!';
        assert!(matches!(
            decode::<H>(&bad),
            Err(SealError::MalformedHeader(_))
        ));
    }
}
