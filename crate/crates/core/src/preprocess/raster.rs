//! 8-bit raster I/O (PGM/PPM/PNG).

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[0,1]` grayscale plane; the format follows the extension.
pub fn write_gray(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, values.iter().map(|&v| to_u8(v)).collect())
        .ok_or_else(|| Error::shape("write_gray", format!("{} values for {height}×{width}", values.len())))?;
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let v: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_gray(path, height, width, &v)
}

/// Write planar `3×H×W` values in `[0,1]`.
pub fn write_rgb_planar(path: &Path, height: usize, width: usize, planar: &[f32]) -> Result<()> {
    let area = height * width;
    if planar.len() != 3 * area {
        return Err(Error::shape(
            "write_rgb",
            format!("{} values for 3×{height}×{width}", planar.len()),
        ));
    }
    let mut raw = Vec::with_capacity(3 * area);
    for i in 0..area {
        for c in 0..3 {
            raw.push(to_u8(planar[c * area + i]));
        }
    }
    let img = RgbImage::from_raw(width as u32, height as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(Error::Image)
}

/// Read an 8-bit image as grayscale values in `[0,1]`; returns (h, w, values).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
    ))
}

/// Read a mask; any nonzero pixel is lesion.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    ))
}

/// Read an 8-bit RGB image as planar `3×H×W` values in `[0,1]`.
pub fn read_rgb_planar(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let area = (w * h) as usize;
    let mut out = vec![0.0; 3 * area];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * area + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok((h as usize, w as usize, out))
}
