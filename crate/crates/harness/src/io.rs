//! 8-bit PNG and JSON file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use evseg::autograd::Tensor;
use evseg::metrics::SegMask;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// `[0,1]` intensity to an 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `[H,W,3]` (or `[H,W,1]`) values in `[0,1]` as an 8-bit PNG.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::Data(format!(
            "{}: expected [H,W,1] or [H,W,3], got {s:?}",
            path.display()
        )));
    }
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    write_bytes(path, s[0], s[1], s[2], bytes)
}

/// Writes interleaved 8-bit samples with 1 or 3 channels.
pub fn write_bytes(path: &Path, h: usize, w: usize, c: usize, bytes: Vec<u8>) -> Result<()> {
    let (w32, h32) = (w as u32, h as u32);
    let res = if c == 3 {
        let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, bytes)
            .ok_or_else(|| Error::Data(format!("{}: buffer size mismatch", path.display())))?;
        img.save(path)
    } else {
        let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, bytes)
            .ok_or_else(|| Error::Data(format!("{}: buffer size mismatch", path.display())))?;
        img.save(path)
    };
    res.map_err(image_err(path))
}

/// Reads a PNG as `(height, width, bytes)` with `channels` interleaved samples.
pub fn read_bytes(path: &Path, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = match channels {
        3 => img.into_rgb8().into_raw(),
        1 => img.into_luma8().into_raw(),
        _ => return Err(Error::Data(format!("unsupported channel count {channels}"))),
    };
    Ok((h, w, bytes))
}

/// Reads a PNG as `[H,W,channels]` values in `[0,1]`.
pub fn read_image(path: &Path, channels: usize) -> Result<Tensor> {
    let (h, w, bytes) = read_bytes(path, channels)?;
    Ok(Tensor::new(
        &[h, w, channels],
        bytes.into_iter().map(dequantize).collect(),
    )?)
}

pub fn write_mask(path: &Path, mask: &SegMask) -> Result<()> {
    write_bytes(path, mask.height, mask.width, 1, mask.labels.clone())
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    let (h, w, bytes) = read_bytes(path, 1)?;
    Ok(SegMask::new(h, w, bytes)?)
}

/// PNG files in `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Subdirectories of `dir`, sorted by name.
pub fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
