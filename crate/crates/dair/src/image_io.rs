//! 8-bit RGB PNG reading and writing.

use std::path::Path;

use dair_core::degradations::{ImageTensor, ValueRange};
use dair_core::Tensor;

use crate::error::{CliError, Result};

/// Reads an RGB image into a `(1, 3, H, W)` tensor on `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let data = Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0
    });
    ImageTensor::new(data, ValueRange::Unit).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes the first image of the batch, quantised to 8 bits.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let unit = img.to_unit();
    let (_, c, h, w) = unit.dims();
    if c != 3 {
        return Err(CliError::Shape(format!("cannot write {c}-channel image as RGB")));
    }
    let d = unit.tensor().data();
    let mut buf = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            buf[p * 3 + ch] = (d[ch * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
