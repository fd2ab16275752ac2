//! Binary feature matrices: `UMFB`, rows (u32 LE), cols (u32 LE), then
//! rows×cols f32 LE values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const MAGIC: [u8; 4] = *b"UMFB";
const HEADER_LEN: u64 = 12;

/// Encodes a matrix. Values are narrowed to f32.
pub fn encode(matrix: &Tensor) -> Result<Vec<u8>> {
    if !matrix.is_finite() {
        return Err(Error::Contract(
            "feature matrix has non-finite entries".into(),
        ));
    }
    let (rows, cols) = matrix.shape();
    let (r32, c32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => {
            return Err(Error::Contract(format!(
                "{rows}x{cols} exceeds u32 dimensions"
            )))
        }
    };
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * matrix.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for &v in matrix.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes bytes read from `path` (used only in error messages).
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let actual = bytes.len() as u64;
    if actual < HEADER_LEN {
        if actual >= 4 && bytes[..4] != MAGIC {
            return Err(bad_magic(bytes, path));
        }
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(bad_magic(bytes, path));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let overflow = || Error::DimensionOverflow {
        path: path.to_path_buf(),
        rows,
        cols,
    };
    let count = (rows as u64)
        .checked_mul(cols as u64)
        .ok_or_else(overflow)?;
    let expected = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .filter(|&b| usize::try_from(b).is_ok())
        .ok_or_else(overflow)?;
    if actual != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    let data = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(rows as usize, cols as usize, data)
}

fn bad_magic(bytes: &[u8], path: &Path) -> Error {
    Error::BadMagic {
        path: path.to_path_buf(),
        found: bytes[..4].try_into().unwrap(),
    }
}

pub fn write_feature_file(path: &Path, matrix: &Tensor) -> Result<()> {
    let bytes = encode(matrix)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.umfb")
    }

    #[test]
    fn layout_is_little_endian_row_major() {
        let m = Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"UMFB");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let m = Tensor::full(3, 4, 0.5);
        let bytes = encode(&m).unwrap();
        match decode(&bytes[..bytes.len() - 3], p()) {
            Err(Error::Truncated {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 12 + 48);
                assert_eq!(actual, 12 + 45);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(
            decode(&bytes[..6], p()),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(&Tensor::full(1, 1, 1.0)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, p()),
            Err(Error::BadMagic { found, .. }) if &found == b"XMFB"
        ));
    }

    #[test]
    fn huge_dimensions_overflow() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode(&bytes, p()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::DimensionOverflow { .. } | Error::Truncated { .. }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn non_finite_matrices_are_not_written() {
        let m = Tensor::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(encode(&m).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.umfb");
        let m = Tensor::from_vec(2, 3, vec![0.1, 2.5, -3.0, 1e-3, 7.0, 0.0])
            .unwrap()
            .map(|v| v as f32 as f64);
        write_feature_file(&path, &m).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 1usize..8,
            cols in 1usize..8,
            seed in prop::collection::vec(-1e6f32..1e6, 64),
        ) {
            let data: Vec<f64> = (0..rows * cols).map(|i| seed[i % 64] as f64).collect();
            let m = Tensor::from_vec(rows, cols, data).unwrap();
            let back = decode(&encode(&m).unwrap(), p()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.data().iter().zip(m.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
