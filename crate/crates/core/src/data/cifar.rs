//! CIFAR-10 binary batches: each record is one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
const PIXELS: usize = 3072;
const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

/// Parses one batch file's bytes, appending to `images` and `labels`.
pub fn parse_cifar_batch(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::Format {
            offset: whole as u64,
            detail: format!(
                "file size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        });
    }
    images.reserve(bytes.len() / CIFAR_RECORD_BYTES * PIXELS);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD_BYTES) as u64,
                detail: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    Ok(())
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        let path = dir.join(&name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_cifar_batch(&bytes, &mut images, &mut labels).map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset,
                detail: format!("{name}: {detail}"),
            },
            other => other,
        })?;
    }
    if labels.is_empty() {
        return Err(Error::Argument(format!("no CIFAR-10 records under {}", dir.display())));
    }
    let n = labels.len();
    // 255 / 127.5 - 1 is exactly 1 in f32, so values already sit in range.
    let images = Tensor::new(vec![n, 3, 32, 32], images)?;
    Dataset::new(images, labels, CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn pixel_endpoints_map_to_unit_range() {
        let mut bytes = record(3, 255);
        bytes.extend(record(0, 0));
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        parse_cifar_batch(&bytes, &mut im, &mut lb).unwrap();
        assert_eq!(lb, vec![3, 0]);
        assert_eq!(im[0], 1.0);
        assert_eq!(im[PIXELS], -1.0);
    }

    #[test]
    fn channel_major_layout_is_kept() {
        let mut r = vec![1u8];
        r.extend(std::iter::repeat_n(255u8, 1024));
        r.extend(std::iter::repeat_n(0u8, 2048));
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        parse_cifar_batch(&r, &mut im, &mut lb).unwrap();
        assert!(im[..1024].iter().all(|&v| v == 1.0));
        assert!(im[1024..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn bad_size_and_label_report_offsets() {
        let mut bytes = record(1, 7);
        bytes.extend([0u8; 10]);
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        match parse_cifar_batch(&bytes, &mut im, &mut lb) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        let mut bytes = record(1, 7);
        bytes.extend(record(10, 7));
        match parse_cifar_batch(&bytes, &mut im, &mut lb) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }
}
