//! MNIST IDX files: big-endian header (magic, then one `u32` per dimension)
//! followed by unsigned bytes. Gzipped files are detected by their magic and
//! decompressed transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use ctxnorm::{Rng, Tensor};
use ctxnorm_train::{Dataset, InputShape};

use crate::error::{CliError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(CliError::Format {
            offset: bytes.len(),
            message: format!("truncated header: missing {} byte(s)", offset + 4 - bytes.len()),
        }),
    }
}

/// Decodes an uncompressed IDX stream whose magic must equal `magic`.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(CliError::Format { offset: 0, message: format!("magic {found:#010x}, expected {magic:#010x}") });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(read_u32(bytes, 4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * rank;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CliError::Format { offset: 4, message: format!("dimensions {dims:?} overflow") })?;
    let available = bytes.len() - start;
    if available < len {
        return Err(CliError::Format {
            offset: bytes.len(),
            message: format!("truncated data: missing {} byte(s) of {len}", len - available),
        });
    }
    if available > len {
        return Err(CliError::Format {
            offset: start + len,
            message: format!("{} trailing byte(s) after data", available - len),
        });
    }
    Ok(IdxArray { dims, data: bytes[start..].to_vec() })
}

/// Reads a file, gunzipping it if it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| CliError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Encodes an IDX stream (used for fixtures and round-trip checks).
pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

fn with_path(path: &Path, err: CliError) -> CliError {
    match err {
        CliError::Format { offset, message } => {
            CliError::Parse { path: path.to_path_buf(), message: format!("format error at byte {offset}: {message}") }
        }
        other => other,
    }
}

/// Images scaled to `[0, 1]` as `[N, 1, rows·cols]` plus labels. The
/// samples are shuffled with `seed` and the first `subset_n` kept (all of
/// them when `None`). Also returns each kept sample's row in the files.
pub fn load_mnist_idx(
    images: &Path,
    labels: &Path,
    subset_n: Option<usize>,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    let img = parse_idx(&read_maybe_gz(images)?, IMAGE_MAGIC).map_err(|e| with_path(images, e))?;
    let lab = parse_idx(&read_maybe_gz(labels)?, LABEL_MAGIC).map_err(|e| with_path(labels, e))?;
    let (n, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(CliError::Config(format!("{n} images but {} labels", lab.dims[0])));
    }
    let take = subset_n.unwrap_or(n);
    if take == 0 || take > n {
        return Err(CliError::Config(format!("subset_n {take} must lie in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    order.truncate(take);

    let per = rows * cols;
    let mut pixels = Vec::with_capacity(take * per);
    for &i in &order {
        pixels.extend(img.data[i * per..(i + 1) * per].iter().map(|&p| f64::from(p) / 255.0));
    }
    let ys: Vec<usize> = order.iter().map(|&i| usize::from(lab.data[i])).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1).max(10);
    let shape = InputShape { channels: 1, height: rows, width: cols };
    let data = Dataset::new(Tensor::from_vec(&[take, 1, per], pixels)?, ys, classes, shape)?;
    Ok((data, order))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips() {
        let bytes = encode_idx(IMAGE_MAGIC, &[2, 3, 4], &[7; 24]);
        let arr = parse_idx(&bytes, IMAGE_MAGIC).unwrap();
        assert_eq!(arr.dims, vec![2, 3, 4]);
        assert_eq!(arr.data, vec![7; 24]);
    }

    #[test]
    fn wrong_magic_is_reported_at_offset_zero() {
        let bytes = encode_idx(LABEL_MAGIC, &[3], &[0, 1, 2]);
        match parse_idx(&bytes, IMAGE_MAGIC) {
            Err(CliError::Format { offset: 0, message }) => assert!(message.contains("0x00000801")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_names_missing_bytes() {
        let mut bytes = encode_idx(LABEL_MAGIC, &[5], &[1; 5]);
        bytes.truncate(bytes.len() - 3);
        match parse_idx(&bytes, LABEL_MAGIC) {
            Err(CliError::Format { offset, message }) => {
                assert_eq!(offset, 10);
                assert!(message.contains("missing 3 byte(s)"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        match parse_idx(&bytes[..6], LABEL_MAGIC) {
            Err(CliError::Format { offset: 6, message }) => assert!(message.contains("missing 2 byte(s)")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_idx(LABEL_MAGIC, &[2], &[1, 2]);
        bytes.push(9);
        assert!(matches!(parse_idx(&bytes, LABEL_MAGIC), Err(CliError::Format { offset: 10, .. })));
    }
}
