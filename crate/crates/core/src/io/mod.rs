//! Files on disk: datasets, PNG buffers, the synthetic scene generator and
//! metric reports.

pub mod dataset;
pub mod report;
pub mod synth;

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::Vector3;

pub use dataset::{load_dataset, Dataset, DatasetManifest, FrameEntry};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::{Grid, Mask, RgbImage, ScalarImage};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::EmptyPath);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn encode_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    write_atomic(path, &buf.into_inner())
}

fn decode_png(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// 8-bit quantization used for color files: `round(clamp(x, 0, 1) · 255)`.
pub fn quantize_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb8<T: Real>(path: &Path, img: &RgbImage<T>) -> Result<()> {
    let buf = ImageBuffer::from_fn(img.width as u32, img.height as u32, |u, v| {
        let c = img.get(u as usize, v as usize);
        Rgb([quantize_u8(c.x.to_f64()), quantize_u8(c.y.to_f64()), quantize_u8(c.z.to_f64())])
    });
    encode_png(path, DynamicImage::ImageRgb8(buf))
}

/// Depth stored as `round(depth / scale)` in a 16-bit grayscale PNG.
pub fn write_depth16<T: Real>(path: &Path, depth: &ScalarImage<T>, scale: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::Config("depth scale must be positive".into()));
    }
    let buf = ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |u, v| {
        let d = depth.get(u as usize, v as usize).to_f64() / scale;
        Luma([d.round().clamp(0.0, 65535.0) as u16])
    });
    encode_png(path, DynamicImage::ImageLuma16(buf))
}

/// Tool pixels white (255), tissue black.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |u, v| {
        Luma([if *mask.get(u as usize, v as usize) { 255u8 } else { 0 }])
    });
    encode_png(path, DynamicImage::ImageLuma8(buf))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage<f32>> {
    let img = decode_png(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |u, v| {
        let p = img.get_pixel(u as u32, v as u32).0;
        Vector3::new(p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0)
    }))
}

/// Reads a 16-bit grayscale depth map and multiplies by `scale`.
pub fn read_depth16(path: &Path, scale: f64) -> Result<ScalarImage<f32>> {
    let img = match decode_png(path)? {
        DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Config(format!(
                "{}: depth must be 16-bit grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |u, v| (img.get_pixel(u as u32, v as u32).0[0] as f64 * scale) as f32))
}

/// Any grayscale or color image; values above 127 mark the tool.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode_png(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |u, v| img.get_pixel(u as u32, v as u32).0[0] > 127))
}
