//! Binary PPM (P6, 8-bit) frame dumps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes `[3 × h × w]` in `[0, 1]` as P6.
pub fn encode(img: &Tensor<f64>) -> Result<Vec<u8>> {
    encode_commented(img, None)
}

/// Like [`encode`], with an optional `#` comment line in the header.
pub fn encode_commented(img: &Tensor<f64>, comment: Option<&str>) -> Result<Vec<u8>> {
    if img.ndim() != 3 || img.shape()[0] != 3 {
        return Err(Error::dim(format!("PPM expects 3×h×w, got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let note = match comment {
        Some(c) if c.contains(['\n', '\r']) => return Err(Error::usage("PPM comment must be one line")),
        Some(c) => format!("# {c}\n"),
        None => String::new(),
    };
    let mut out = format!("P6\n{note}{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, img: &Tensor<f64>) -> Result<()> {
    write_commented(path, img, None)
}

pub fn write_commented(path: impl AsRef<Path>, img: &Tensor<f64>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_commented(img, comment)?).map_err(|e| Error::io(path, e))
}
