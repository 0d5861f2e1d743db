use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use mmgs_diffgrad::Real;

pub const FLOAT_IMAGE_MAGIC: &[u8; 8] = b"MMGSIMG1";

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(ErrorKind::InvalidData, msg.into())
}

/// 8-bit RGB PNG with values `round(255 * clamp(v, 0, 1))`.
pub fn write_png_rgb<T: Real>(path: &Path, width: u32, height: u32, pixels: &[T]) -> io::Result<()> {
    if pixels.len() != (width * height * 3) as usize {
        return Err(invalid("pixel buffer does not match the image size"));
    }
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (255.0 * v.as_f64().clamp(0.0, 1.0)).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, width, height, image::ExtendedColorType::Rgb8).map_err(io::Error::other)
}

/// Reads an 8-bit PNG as RGB values in `[0, 1]`.
pub fn read_png_rgb(path: &Path) -> io::Result<(u32, u32, Vec<f32>)> {
    let img = image::open(path).map_err(io::Error::other)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()))
}

/// Lossless dump: magic, u32 height, u32 width, then `H * W * 3` f32, all
/// little-endian and row-major.
pub fn write_float_image<T: Real>(path: &Path, width: u32, height: u32, pixels: &[T]) -> io::Result<()> {
    if pixels.len() != (width * height * 3) as usize {
        return Err(invalid("pixel buffer does not match the image size"));
    }
    let mut buf = Vec::with_capacity(16 + pixels.len() * 4);
    buf.extend_from_slice(FLOAT_IMAGE_MAGIC);
    buf.extend_from_slice(&height.to_le_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    for v in pixels {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, buf)
}

pub fn read_float_image(path: &Path) -> io::Result<(u32, u32, Vec<f32>)> {
    let buf = fs::read(path)?;
    if buf.len() < 16 || &buf[..8] != FLOAT_IMAGE_MAGIC {
        return Err(invalid("missing MMGSIMG1 header"));
    }
    let height = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let width = u32::from_le_bytes(buf[12..16].try_into().unwrap());
    let n = width as usize * height as usize * 3;
    if buf.len() != 16 + n * 4 {
        return Err(invalid(format!(
            "expected {} payload bytes, found {}",
            n * 4,
            buf.len() - 16
        )));
    }
    let pixels = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, pixels))
}
