//! IDX (MNIST-style) binary files: big-endian header, unsigned byte payload.

use std::path::Path;

use super::{DataError, LabeledDataset, SampleShape};
use crate::model::{ImageShape, Matrix};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> DataError {
        DataError::Format {
            path: self.path.display().to_string(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.fail("truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let chunk = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            self.fail(format!(
                "truncated payload: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))
        })?;
        self.pos += n;
        Ok(chunk)
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::io(path, e))
}

/// Images scaled to `[0, 1]`, one row per image, plus the image layout.
pub fn read_idx_images(path: &Path) -> Result<(Matrix, ImageShape), DataError> {
    let bytes = read(path)?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != IMAGE_MAGIC {
        cur.pos = 0;
        return Err(cur.fail(format!("bad image magic {magic:#010x}")));
    }
    let n = cur.u32()? as usize;
    let height = cur.u32()? as usize;
    let width = cur.u32()? as usize;
    let payload = cur.take(n * height * width)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let shape = ImageShape {
        height,
        width,
        channels: 1,
    };
    Ok((Matrix::from_vec(n, height * width, data).unwrap(), shape))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = read(path)?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != LABEL_MAGIC {
        cur.pos = 0;
        return Err(cur.fail(format!("bad label magic {magic:#010x}")));
    }
    let n = cur.u32()? as usize;
    Ok(cur.take(n)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. `num_classes` defaults to one past the
/// largest label (at least 2).
pub fn load_idx(
    images: &Path,
    labels: &Path,
    num_classes: Option<usize>,
) -> Result<LabeledDataset, DataError> {
    let (x, shape) = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    let k = num_classes.unwrap_or_else(|| y.iter().max().map(|m| m + 1).unwrap_or(0).max(2));
    LabeledDataset::new(x, y, k, SampleShape::Image(shape))
}

/// Writes a single-channel image dataset as an IDX pair. Pixels are quantized
/// to `round(255 * v)` after clamping to `[0, 1]`.
pub fn write_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let shape = match ds.shape() {
        SampleShape::Image(s) if s.channels == 1 => s,
        other => {
            return Err(DataError::Config(format!(
                "IDX export needs single-channel images, got {other:?}"
            )))
        }
    };
    if ds.num_classes() > 256 {
        return Err(DataError::Config("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.x().as_slice().len());
    for v in [IMAGE_MAGIC, ds.len() as u32, shape.height as u32, shape.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.x()
            .as_slice()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels().iter().map(|&y| y as u8));
    std::fs::write(images, img).map_err(|e| DataError::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| DataError::io(labels, e))?;
    Ok(())
}
