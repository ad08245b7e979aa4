//! Image files: 32-bit float raw with a sidecar shape header (the exact
//! format the generator emits) and 8/16-bit PNG for ingested data.
//!
//! Tensors are `[C, H, W]`, values nominally in [0, 1] for captured images;
//! raw files may hold any finite value (differential images are signed).

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

use super::DataError;

fn img_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Image {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes little-endian f32 values plus a `<file>.shape` sidecar holding
/// "C H W" in text.
pub fn write_raw(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(img_err(path, format!("raw images are [C, H, W], got {shape:?}")));
    }
    let mut bytes = Vec::with_capacity(image.numel() * 4);
    for &v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(
        sidecar_path(path),
        format!("{} {} {}\n", shape[0], shape[1], shape[2]),
    )?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".shape");
    s.into()
}

pub fn read_raw(path: &Path) -> Result<Tensor<f32>, DataError> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar)
        .map_err(|e| img_err(path, format!("missing shape sidecar {}: {e}", sidecar.display())))?;
    let dims: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| img_err(path, format!("bad shape sidecar '{}'", text.trim())))?;
    if dims.len() != 3 {
        return Err(img_err(path, format!("shape sidecar must hold C H W, got {dims:?}")));
    }
    let bytes = fs::read(path)?;
    let numel: usize = dims.iter().product();
    if bytes.len() != numel * 4 {
        return Err(img_err(
            path,
            format!("expected {} bytes for {dims:?}, found {}", numel * 4, bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(dims, data)?)
}

/// Grayscale 16-bit PNG of values clamped to [0, 1].
pub fn write_png_gray(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(img_err(path, format!("png writer expects [1, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1] as u32, shape[2] as u32);
    let pixels: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w, h, pixels)
            .ok_or_else(|| img_err(path, "buffer size mismatch"))?;
    buf.save(path).map_err(|e| img_err(path, e.to_string()))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| img_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let tensor = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor::from_vec(vec![1, h, w], data)?
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let data = buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
            Tensor::from_vec(vec![1, h, w], data)?
        }
        other => {
            // channel-interleaved to channel-major planes
            let rgb = other.to_rgb8();
            let raw = rgb.into_raw();
            let mut data = vec![0.0f32; 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    data[c * h * w + p] = raw[p * 3 + c] as f32 / 255.0;
                }
            }
            Tensor::from_vec(vec![3, h, w], data)?
        }
    };
    Ok(tensor)
}

/// Loads `.raw` (with sidecar) or `.png` by extension.
pub fn load_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") => read_raw(path),
        Some("png") => read_png(path),
        other => Err(img_err(path, format!("unsupported image extension {other:?}"))),
    }
}

/// Path of the differential partner image: `_base_` becomes `_delta_`.
pub fn delta_path(base: &str) -> Result<String, DataError> {
    if !base.contains("_base_") {
        return Err(DataError::Manifest(format!(
            "record path '{base}' does not follow the ..._base_... naming grammar"
        )));
    }
    Ok(base.replacen("_base_", "_delta_", 1))
}
