//! Binary PGM (`P5`, maxval 255) codec used for frames and label masks.

use thiserror::Error;

/// Largest accepted edge length; bounds allocations on untrusted headers.
pub const MAX_EDGE: usize = 1 << 14;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a binary PGM (expected magic P5)")]
    BadMagic,
    #[error("truncated PGM header")]
    TruncatedHeader,
    #[error("invalid header field `{0}`")]
    BadField(&'static str),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    Maxval(u32),
    #[error("image {width}x{height} exceeds the {MAX_EDGE} pixel edge limit")]
    TooLarge { width: usize, height: usize },
    #[error("pixel data has {actual} bytes, header promises {expected}")]
    DataLength { expected: usize, actual: usize },
}

/// Decoded raster: `(width, height, samples)`.
pub type Raster = (usize, usize, Vec<u8>);

pub fn encode(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height);
    let header = format!("P5\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + samples.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(samples);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Raster, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let width = read_header_int(bytes, &mut pos, "width")?;
    let height = read_header_int(bytes, &mut pos, "height")?;
    let maxval = read_header_int(bytes, &mut pos, "maxval")?;
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::TruncatedHeader),
    }
    if width == 0 {
        return Err(PgmError::BadField("width"));
    }
    if height == 0 {
        return Err(PgmError::BadField("height"));
    }
    if maxval != 255 {
        return Err(PgmError::Maxval(maxval as u32));
    }
    if width > MAX_EDGE || height > MAX_EDGE {
        return Err(PgmError::TooLarge { width, height });
    }
    let expected = width * height;
    let data = &bytes[pos..];
    if data.len() != expected {
        return Err(PgmError::DataLength {
            expected,
            actual: data.len(),
        });
    }
    Ok((width, height, data.to_vec()))
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn read_header_int(bytes: &[u8], pos: &mut usize, field: &'static str) -> Result<usize, PgmError> {
    let start = *pos;
    skip_whitespace_and_comments(bytes, pos);
    if *pos >= bytes.len() {
        return Err(PgmError::TruncatedHeader);
    }
    if *pos == start {
        return Err(PgmError::BadField(field));
    }
    let digits_start = *pos;
    let mut value: usize = 0;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((bytes[*pos] - b'0') as usize))
            .filter(|&v| v <= u32::MAX as usize)
            .ok_or(PgmError::BadField(field))?;
        *pos += 1;
    }
    if *pos == digits_start {
        return if *pos >= bytes.len() {
            Err(PgmError::TruncatedHeader)
        } else {
            Err(PgmError::BadField(field))
        };
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        assert_eq!(decode(&bytes).unwrap(), (2, 2, vec![1, 2, 3, 4]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(decode(b"P6\n1 1\n255\n\0"), Err(PgmError::BadMagic));
        assert_eq!(
            decode(b"P5\n1 1\n65535\n\0\0"),
            Err(PgmError::Maxval(65535))
        );
        assert_eq!(
            decode(b"P5\n2 2\n255\n\0"),
            Err(PgmError::DataLength {
                expected: 4,
                actual: 1
            })
        );
        assert_eq!(decode(b"P5\n2"), Err(PgmError::TruncatedHeader));
        assert!(matches!(
            decode(b"P5\n99999999999999999999 1\n255\n"),
            Err(PgmError::BadField("width"))
        ));
        assert!(matches!(
            decode(b"P5\n20000 20000\n255\n"),
            Err(PgmError::TooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
            let samples: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let bytes = encode(w, h, &samples);
            prop_assert_eq!(decode(&bytes).unwrap(), (w, h, samples));
        }

        #[test]
        fn never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
