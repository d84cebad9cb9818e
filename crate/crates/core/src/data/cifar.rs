use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::idx::read_maybe_gz;
use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const RECORD: usize = 1 + CHANNELS * SIDE * SIDE;
pub const CLASSES: usize = 10;

/// Load and concatenate CIFAR-10 binary batch files: records of one label
/// byte followed by the red, green and blue 32×32 planes.
pub fn load_cifar_binary(paths: &[&Path]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for &p in paths {
        let bytes = read_maybe_gz(p)?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of the {RECORD}-byte record",
                p.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::LabelOutOfRange { label, classes: CLASSES });
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("no CIFAR batch files given".into()));
    }
    let n = labels.len();
    let name = paths[0]
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(Tensor::new(&[n, CHANNELS, SIDE, SIDE], pixels)?, labels, CLASSES, name)
}

/// Write records in the CIFAR-10 binary layout.
pub fn write_cifar_binary(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * (RECORD - 1) {
        return Err(Error::Format(format!(
            "{} pixel bytes for {} records",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(labels.len() * RECORD);
    for (&l, px) in labels.iter().zip(pixels.chunks_exact(RECORD - 1)) {
        out.push(l);
        out.extend_from_slice(px);
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_pixels(k: usize) -> Vec<u8> {
        // red plane k, green plane k+1, blue plane k+2
        let mut v = Vec::with_capacity(RECORD - 1);
        for c in 0..CHANNELS {
            v.extend(std::iter::repeat_n((k + c) as u8, SIDE * SIDE));
        }
        v
    }

    #[test]
    fn three_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let px: Vec<u8> = (0..3).flat_map(|k| record_pixels(10 * k)).collect();
        write_cifar_binary(&p, &[9, 0, 4], &px).unwrap();
        let ds = load_cifar_binary(&[&p]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images.shape(), &[3, 3, 32, 32]);
        assert_eq!(ds.labels, vec![9, 0, 4]);
        let plane = SIDE * SIDE;
        for k in 0..3 {
            for c in 0..CHANNELS {
                let off = (k * CHANNELS + c) * plane;
                let want = (10 * k + c) as f32 / 255.0;
                assert!(ds.images.data()[off..off + plane].iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn concatenates_batches() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        write_cifar_binary(&a, &[1], &record_pixels(0)).unwrap();
        write_cifar_binary(&b, &[2, 3], &[record_pixels(1), record_pixels(2)].concat()).unwrap();
        let ds = load_cifar_binary(&[&a, &b]).unwrap();
        assert_eq!(ds.labels, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_partial_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, vec![0u8; RECORD + 5]).unwrap();
        assert!(matches!(load_cifar_binary(&[&p]), Err(Error::Format(_))));
    }
}
