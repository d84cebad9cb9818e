use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Read a whole file, gunzipping when the name ends in `.gz`. A missing
/// plain file falls back to its `.gz` sibling.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let path = resolve(path);
    let mut bytes = Vec::new();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let read = if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        let mut f = file;
        f.read_to_end(&mut bytes)
    };
    read.map_err(|e| Error::io(&path, e))?;
    Ok(bytes)
}

fn resolve(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    if gz.exists() {
        gz
    } else {
        path.to_path_buf()
    }
}

struct Header<'a> {
    dims: Vec<usize>,
    body: &'a [u8],
}

fn parse<'a>(bytes: &'a [u8], magic: u32, what: &Path) -> Result<Header<'a>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("{}: truncated header", what.display())))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::BadMagic {
            what: what.display().to_string(),
            expected: magic,
            found,
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 * (rank + 1);
    let need: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated, header promises {need} bytes, found {}",
            what.display(),
            body.len()
        )));
    }
    Ok(Header {
        dims,
        body: &body[..need],
    })
}

/// Load an IDX image file (`[N, H, W]` unsigned bytes) and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let im = parse(&ib, IMAGES_MAGIC, images)?;
    let lab = parse(&lb, LABELS_MAGIC, labels)?;
    let (n, h, w) = (im.dims[0], im.dims[1], im.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            n, lab.dims[0]
        )));
    }
    if n == 0 {
        return Err(Error::Format(format!("{}: no images", images.display())));
    }
    let pixels: Vec<f32> = im.body.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab.body.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(Tensor::new(&[n, 1, h, w], pixels)?, labels, classes.max(2), name)
}

/// Write `[N, H, W]` bytes as an uncompressed IDX image file.
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::Format(format!("{} pixels for {n}x{h}x{w}", pixels.len())));
    }
    write_raw(path, IMAGES_MAGIC, &[n, h, w], pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_raw(path, LABELS_MAGIC, &[labels.len()], labels)
}

fn write_raw(path: &Path, magic: u32, dims: &[usize], body: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let mut go = || -> std::io::Result<()> {
        out.write_all(&magic.to_be_bytes())?;
        for &d in dims {
            out.write_all(&(d as u32).to_be_bytes())?;
        }
        out.write_all(body)?;
        out.flush()
    };
    go().map_err(|e| Error::io(path, e))
}
