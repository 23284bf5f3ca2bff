//! 8-bit PNG for LDR rasters, stored as `round(255·v)` without a transfer
//! curve.

use std::io::Cursor;

use super::Image;
use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::codec("png", e.to_string(), 0))?;
        let bytes: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
        w.write_image_data(&bytes)
            .map_err(|e| Error::codec("png", e.to_string(), 0))?;
        w.finish().map_err(|e| Error::codec("png", e.to_string(), 0))?;
    }
    Ok(out)
}

/// Decodes any 8-bit-expandable PNG; grey and alpha channels are folded to
/// RGB.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::codec("png", e.to_string(), 0))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::codec("png", "image too large", 0))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::codec("png", e.to_string(), 0))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let ch = info.color_type.samples();
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf[..info.buffer_size()].chunks_exact(ch) {
        let rgb = match ch {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        data.extend(rgb.iter().map(|b| *b as f64 / 255.0));
    }
    Image::new(h, w, data)
}

pub fn read(path: &std::path::Path) -> Result<Image> {
    decode(&std::fs::read(path)?)
}

pub fn write(img: &Image, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}
