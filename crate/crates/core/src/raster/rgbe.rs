//! Radiance `.hdr` (RGBE) codec.
//!
//! Reads flat and adaptive run-length scanlines; writes flat scanlines with
//! the header
//!
//! ```text
//! #?RADIANCE
//! FORMAT=32-bit_rle_rgbe
//!
//! -Y <H> +X <W>
//! ```
//!
//! Encoding rounds the shared mantissa to nearest, so every component
//! decodes within `max(r, g, b)/256` of its input.

use super::Image;
use crate::error::{Error, Result};

const FORMAT: &str = "rgbe";

/// Encodes one pixel. Values below ~1e-32 become the zero pixel.
pub fn encode_pixel(px: [f64; 3]) -> [u8; 4] {
    let v = px[0].max(px[1]).max(px[2]);
    if !(v >= 1e-32) || !v.is_finite() {
        return [0, 0, 0, 0];
    }
    let mut e = v.log2().floor() as i32 + 1;
    // v / 2^e lies in [0.5, 1); guard against log2 rounding at powers of two.
    if v / 2f64.powi(e) >= 1.0 {
        e += 1;
    } else if v / 2f64.powi(e) < 0.5 {
        e -= 1;
    }
    let mut scale = 256.0 / 2f64.powi(e);
    if (v * scale).round() >= 256.0 {
        e += 1;
        scale = 256.0 / 2f64.powi(e);
    }
    if e + 128 > 255 {
        return [255, 255, 255, 255];
    }
    if e + 128 < 1 {
        return [0, 0, 0, 0];
    }
    let q = |c: f64| (c.max(0.0) * scale).round().min(255.0) as u8;
    [q(px[0]), q(px[1]), q(px[2]), (e + 128) as u8]
}

/// `mantissa/256 · 2^(e−128)`; exponent byte 0 is the zero pixel.
pub fn decode_pixel(b: [u8; 4]) -> [f64; 3] {
    if b[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(b[3] as i32 - 128 - 8);
    [b[0] as f64 * f, b[1] as f64 * f, b[2] as f64 * f]
}

pub fn encode(img: &Image) -> Vec<u8> {
    let header = format!(
        "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {} +X {}\n",
        img.height, img.width
    );
    let mut out = header.into_bytes();
    out.reserve(img.height * img.width * 4);
    for px in img.pixels() {
        out.extend_from_slice(&encode_pixel(px));
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn line(&mut self) -> Result<&str> {
        let start = self.pos;
        let end = self.b[start..]
            .iter()
            .position(|c| *c == b'\n')
            .ok_or_else(|| Error::codec(FORMAT, "unterminated header line", start))?;
        self.pos = start + end + 1;
        std::str::from_utf8(&self.b[start..start + end])
            .map_err(|_| Error::codec(FORMAT, "header is not text", start))
    }

    fn byte(&mut self, what: &str) -> Result<u8> {
        let v = *self
            .b
            .get(self.pos)
            .ok_or_else(|| Error::codec(FORMAT, format!("truncated {what}"), self.pos))?;
        self.pos += 1;
        Ok(v)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::codec(FORMAT, format!("truncated {what}"), self.pos));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse_resolution(line: &str, offset: usize) -> Result<(usize, usize)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["-Y", h, "+X", w] => {
            let h = h.parse().map_err(|_| Error::codec(FORMAT, "bad height", offset))?;
            let w = w.parse().map_err(|_| Error::codec(FORMAT, "bad width", offset))?;
            Ok((h, w))
        }
        [a, _, b, _] if matches!(*a, "+Y" | "-Y" | "+X" | "-X") && matches!(*b, "+Y" | "-Y" | "+X" | "-X") => {
            Err(Error::codec(
                FORMAT,
                format!("unsupported pixel order {a} {b}"),
                offset,
            ))
        }
        _ => Err(Error::codec(FORMAT, format!("bad resolution line {line:?}"), offset)),
    }
}

fn read_rle_scanline(r: &mut Reader, w: usize, row: &mut [[u8; 4]]) -> Result<()> {
    for ch in 0..4 {
        let mut x = 0;
        while x < w {
            let at = r.pos;
            let count = r.byte("run count")? as usize;
            if count > 128 {
                let n = count - 128;
                if x + n > w {
                    return Err(Error::codec(FORMAT, "run overflows scanline", at));
                }
                let v = r.byte("run value")?;
                for px in &mut row[x..x + n] {
                    px[ch] = v;
                }
                x += n;
            } else {
                if count == 0 || x + count > w {
                    return Err(Error::codec(FORMAT, "bad literal count", at));
                }
                let vals = r.take(count, "literal run")?;
                for (px, v) in row[x..x + count].iter_mut().zip(vals) {
                    px[ch] = *v;
                }
                x += count;
            }
        }
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader { b: bytes, pos: 0 };
    let magic = r.line()?;
    if magic != "#?RADIANCE" && magic != "#?RGBE" {
        return Err(Error::codec(FORMAT, "missing #?RADIANCE signature", 0));
    }
    loop {
        let at = r.pos;
        let line = r.line()?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(Error::codec(FORMAT, format!("unsupported format {fmt}"), at));
            }
        }
    }
    let at = r.pos;
    let (h, w) = parse_resolution(r.line()?, at)?;
    let mut data = Vec::with_capacity(h * w * 3);
    let mut row = vec![[0u8; 4]; w];
    for _ in 0..h {
        let start = r.pos;
        let rle = (8..=0x7fff).contains(&w)
            && bytes.len() >= start + 4
            && bytes[start] == 2
            && bytes[start + 1] == 2
            && bytes[start + 2] & 0x80 == 0;
        if rle {
            let declared = ((bytes[start + 2] as usize) << 8) | bytes[start + 3] as usize;
            if declared != w {
                return Err(Error::codec(
                    FORMAT,
                    format!("scanline width {declared} != {w}"),
                    start,
                ));
            }
            r.pos += 4;
            read_rle_scanline(&mut r, w, &mut row)?;
        } else {
            let raw = r.take(4 * w, "scanline")?;
            for (px, b) in row.iter_mut().zip(raw.chunks_exact(4)) {
                px.copy_from_slice(b);
            }
        }
        for px in &row {
            data.extend_from_slice(&decode_pixel(*px));
        }
    }
    Image::new(h, w, data)
}

pub fn read(path: &std::path::Path) -> Result<Image> {
    decode(&std::fs::read(path)?)
}

pub fn write(img: &Image, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}
