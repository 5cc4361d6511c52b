//! IDX image/label files (big-endian), the MNIST/EMNIST distribution format.

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            message: format!("truncated payload: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_be(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Parses paired IDX image and label files into a dataset with pixel values
/// scaled to [0, 1]. Labels define the class count as max label + 1, with a
/// floor of 10 for the standard digit sets.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::File::open(images_path)
        .map_err(|e| Error::Input(format!("open {}: {e}", images_path.display())))?;
    let mut r = Cursor { inner: std::io::BufReader::new(images), offset: 0 };
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let mut raw = vec![0u8; count * rows * cols];
    r.read(&mut raw)?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Parse {
            offset: r.offset,
            message: "trailing bytes after image payload".into(),
        });
    }

    let labels_file = std::fs::File::open(labels_path)
        .map_err(|e| Error::Input(format!("open {}: {e}", labels_path.display())))?;
    let mut lr = Cursor { inner: std::io::BufReader::new(labels_file), offset: 0 };
    let lmagic = lr.u32_be()?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("label magic {lmagic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let label_count = lr.u32_be()? as usize;
    if label_count != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let mut label_raw = vec![0u8; label_count];
    lr.read(&mut label_raw)?;

    let features: Vec<f32> = raw.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = label_raw.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(9) + 1;
    Dataset::new(
        Tensor::from_vec(&[count, 1, rows, cols], features)?,
        labels,
        num_classes,
    )
}
