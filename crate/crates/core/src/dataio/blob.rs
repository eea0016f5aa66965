//! `.f32` array blobs: magic `L3BL`, little-endian `u32` rank, one `u32`
//! per dimension, then row-major little-endian IEEE-754 `f32` values.

use std::fs;
use std::path::Path;

use super::DataError;

pub const MAGIC: &[u8; 4] = b"L3BL";

/// Serializes an array into blob bytes.
pub fn encode(dims: &[usize], values: &[f32]) -> Result<Vec<u8>, DataError> {
    let expected: usize = dims.iter().product();
    if expected != values.len() {
        return Err(DataError::InvariantViolation(format!(
            "blob dims {:?} hold {} values but {} were supplied",
            dims,
            expected,
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| {
            DataError::InvariantViolation(format!("dimension {d} does not fit in u32"))
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses blob bytes into `(dims, values)`.
pub fn decode(bytes: &[u8], origin: &str) -> Result<(Vec<usize>, Vec<f32>), DataError> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(DataError::BadMagic(origin.to_string()));
    }
    let word = |offset: usize| -> Option<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let rank = word(4).unwrap_or(0) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(DataError::TruncatedBlob(origin.to_string()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| word(8 + 4 * i).unwrap_or(0) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DataError::TruncatedBlob(origin.to_string()))?;
    if bytes.len() - header != count * 4 {
        return Err(DataError::TruncatedBlob(origin.to_string()));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, values))
}

pub fn write(path: &Path, dims: &[usize], values: &[f32]) -> Result<(), DataError> {
    let bytes = encode(dims, values)?;
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>), DataError> {
    if !path.is_file() {
        return Err(DataError::MissingBlob(path.display().to_string()));
    }
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Reads a blob and checks its shape.
pub fn read_shaped(path: &Path, expected: &[usize]) -> Result<Vec<f32>, DataError> {
    let (dims, values) = read(path)?;
    if dims != expected {
        return Err(DataError::ShapeMismatch {
            path: path.display().to_string(),
            expected: expected.to_vec(),
            found: dims,
        });
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_for_point_map() {
        let values = vec![0.5f32; 72];
        let bytes = encode(&[4, 6, 3], &values).unwrap();
        assert_eq!(&bytes[0..4], b"L3BL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 72 * 4);
        assert_eq!(
            f32::from_le_bytes(bytes[20..24].try_into().unwrap()),
            0.5f32
        );
        let (dims, back) = decode(&bytes, "mem").unwrap();
        assert_eq!(dims, vec![4, 6, 3]);
        assert_eq!(back, values);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode(&[2], &[1.0, 2.0]).unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode(truncated, "mem"),
            Err(DataError::TruncatedBlob(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, "mem"), Err(DataError::BadMagic(_))));
        assert!(matches!(decode(b"L3", "mem"), Err(DataError::BadMagic(_))));
    }

    #[test]
    fn count_mismatch_is_rejected_on_encode() {
        assert!(encode(&[2, 2], &[1.0; 3]).is_err());
    }
}
