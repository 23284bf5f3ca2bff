//! RGB rasters and the pixel operations around them: tone mapping,
//! exposure previews, luminance calibration, rotation and resampling.
//!
//! File codecs live in [`rgbe`] (Radiance `.hdr`) and [`png8`].

pub mod png8;
pub mod rgbe;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width × 3` raster of linear values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Values in `[0, 1]`.
pub type LdrImage = Image;
/// Values in `[0, ∞)`.
pub type HdrImage = Image;

const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luminance(px: [f64; 3]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::domain(
                "image",
                format!("{} values for a {height}x{width}x3 raster", data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height {
            for j in 0..width {
                data.extend_from_slice(&f(i, j));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, px: [f64; 3]) {
        let o = (i * self.width + j) * 3;
        self.data[o..o + 3].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_ldr(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_hdr(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Channel-planar copy `[3, H, W]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, planar: &[f64]) -> Result<Image> {
        let n = height * width;
        if planar.len() != 3 * n {
            return Err(Error::domain("image", "planar buffer size mismatch"));
        }
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = planar[c * n + p];
            }
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Window of `h × w` pixels at `(top, left)`; columns wrap around.
    pub fn crop_wrapped(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || w > self.width {
            return Err(Error::domain(
                "crop",
                format!(
                    "{h}x{w} window at ({top}, {left}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(Image::from_fn(h, w, |i, j| {
            self.pixel(top + i, (left + j) % self.width)
        }))
    }
}

/// How Reinhard's curve is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tonemap {
    /// Compress luminance, then rescale the three channels by `Y'/Y`.
    #[default]
    Luminance,
    /// `c / (1 + c)` on each channel independently.
    PerChannel,
}

/// Global Reinhard operator `Y/(1+Y)`, clamped to `[0, 1]`.
pub fn reinhard_tonemap(hdr: &HdrImage, mode: Tonemap) -> LdrImage {
    let mut out = hdr.clone();
    for px in out.data.chunks_exact_mut(3) {
        match mode {
            Tonemap::Luminance => {
                let y = luminance([px[0], px[1], px[2]]);
                let s = if y > 0.0 { 1.0 / (1.0 + y) } else { 0.0 };
                px.iter_mut().for_each(|v| *v = (*v * s).clamp(0.0, 1.0));
            }
            Tonemap::PerChannel => {
                px.iter_mut().for_each(|v| *v = (*v / (1.0 + *v)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Display preview: `clamp(hdr·2^ev, 0, 1)^(1/2.2)`.
pub fn expose(hdr: &HdrImage, ev: f64) -> LdrImage {
    let k = ev.exp2();
    hdr.map(|v| (v * k).clamp(0.0, 1.0).powf(1.0 / 2.2))
}

/// Pixels whose channel sum is strictly below `3σ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl CalibMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// `Σ M⊙img` over all three channels.
    pub fn masked_sum(&self, img: &Image) -> f64 {
        img.data
            .chunks_exact(3)
            .zip(&self.bits)
            .filter(|(_, m)| **m)
            .map(|(p, _)| p[0] + p[1] + p[2])
            .sum()
    }
}

pub const DEFAULT_SIGMA: f64 = 0.83;

pub fn calib_mask(ldr: &LdrImage, sigma: f64) -> CalibMask {
    CalibMask {
        height: ldr.height,
        width: ldr.width,
        bits: ldr.pixels().map(|p| p[0] + p[1] + p[2] < 3.0 * sigma).collect(),
    }
}

/// Scales `hdr` by `κ = Σ(M⊙ldr)/Σ(M⊙hdr)` so the two agree on the
/// unsaturated region. Returns the scaled image and κ.
pub fn calibrate(hdr: &HdrImage, ldr: &LdrImage, sigma: f64) -> Result<(HdrImage, f64)> {
    calibrate_with_mask(hdr, ldr, &calib_mask(ldr, sigma))
}

pub fn calibrate_with_mask(hdr: &HdrImage, ldr: &LdrImage, mask: &CalibMask) -> Result<(HdrImage, f64)> {
    if (hdr.height, hdr.width) != (ldr.height, ldr.width)
        || (mask.height, mask.width) != (ldr.height, ldr.width)
    {
        return Err(Error::domain(
            "calibrate",
            format!(
                "hdr {}x{}, ldr {}x{}, mask {}x{}",
                hdr.height, hdr.width, ldr.height, ldr.width, mask.height, mask.width
            ),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::Calibration("mask is empty".into()));
    }
    let den = mask.masked_sum(hdr);
    if den <= 0.0 {
        return Err(Error::Calibration("masked HDR sum is zero".into()));
    }
    let kappa = mask.masked_sum(ldr) / den;
    Ok((hdr.map(|v| v * kappa), kappa))
}

/// Circular column shift: output column `j` is input column `j − shift`.
pub fn rotate_horizontal(img: &Image, shift: isize) -> Image {
    let w = img.width as isize;
    if w == 0 {
        return img.clone();
    }
    let s = shift.rem_euclid(w) as usize;
    let mut out = img.clone();
    for i in 0..img.height {
        let row = &img.data[i * img.width * 3..(i + 1) * img.width * 3];
        let dst = &mut out.data[i * img.width * 3..(i + 1) * img.width * 3];
        dst[s * 3..].copy_from_slice(&row[..(img.width - s) * 3]);
        dst[..s * 3].copy_from_slice(&row[(img.width - s) * 3..]);
    }
    out
}

/// Per-output `(source index, weight)` taps along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if dst <= src {
                // Box filter: overlap of [o·r, (o+1)·r) with each source cell.
                let (a, b) = (o as f64 * ratio, (o + 1) as f64 * ratio);
                let mut taps = Vec::new();
                let mut k = a.floor() as usize;
                while (k as f64) < b && k < src {
                    let lo = a.max(k as f64);
                    let hi = b.min(k as f64 + 1.0);
                    if hi > lo {
                        taps.push((k, (hi - lo) / ratio));
                    }
                    k += 1;
                }
                taps
            } else {
                let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let k = (x.floor() as usize).min(src.saturating_sub(2));
                let t = x - k as f64;
                if src == 1 {
                    vec![(0, 1.0)]
                } else {
                    vec![(k, 1.0 - t), (k + 1, t)]
                }
            }
        })
        .collect()
}

/// Area average when shrinking an axis, bilinear when growing it.
pub fn resample_area(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::domain("resample", "dimensions must be at least 1"));
    }
    if (new_h, new_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let ty = axis_taps(img.height, new_h);
    let tx = axis_taps(img.width, new_w);
    let mut tmp = vec![0.0; img.height * new_w * 3];
    for i in 0..img.height {
        for (o, taps) in tx.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(k, wt) in taps {
                let p = img.pixel(i, k);
                for c in 0..3 {
                    acc[c] += wt * p[c];
                }
            }
            tmp[(i * new_w + o) * 3..(i * new_w + o) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0; new_h * new_w * 3];
    for (o, taps) in ty.iter().enumerate() {
        for j in 0..new_w {
            let mut acc = [0.0; 3];
            for &(k, wt) in taps {
                for c in 0..3 {
                    acc[c] += wt * tmp[(k * new_w + j) * 3 + c];
                }
            }
            out[(o * new_w + j) * 3..(o * new_w + j) * 3 + 3].copy_from_slice(&acc);
        }
    }
    Image::new(new_h, new_w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f64) -> Image {
        Image::filled(h, w, [v, v, v])
    }

    #[test]
    fn tonemap_zero_and_known_luminances() {
        assert!(reinhard_tonemap(&gray(2, 2, 0.0), Tonemap::Luminance)
            .data
            .iter()
            .all(|v| *v == 0.0));
        let img = Image::new(1, 2, vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0]).unwrap();
        let out = reinhard_tonemap(&img, Tonemap::Luminance);
        assert!((luminance(out.pixel(0, 0)) - 0.5).abs() < 1e-12);
        assert!((luminance(out.pixel(0, 1)) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn tonemap_per_channel() {
        let img = Image::new(1, 1, vec![1.0, 0.0, 3.0]).unwrap();
        let out = reinhard_tonemap(&img, Tonemap::PerChannel);
        assert_eq!(out.data, vec![0.5, 0.0, 0.75]);
    }

    #[test]
    fn expose_examples() {
        assert_eq!(expose(&gray(1, 1, 1.0), 0.0).data[0], 1.0);
        assert_eq!(expose(&gray(1, 1, 16.0), -4.0).data[0], 1.0);
        assert_eq!(expose(&gray(1, 1, 32.0), -4.0).data[0], 1.0);
        let v = expose(&gray(1, 1, 4.0), -4.0).data[0];
        assert!((v - 0.25f64.powf(1.0 / 2.2)).abs() < 1e-12);
    }

    #[test]
    fn mask_threshold_is_strict() {
        let img = Image::new(1, 3, vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 0.83, 0.83, 0.83]).unwrap();
        let m = calib_mask(&img, 0.83);
        assert_eq!(m.bits, vec![true, false, false]);
    }

    #[test]
    fn calibrate_identity_and_half() {
        let ldr = Image::new(2, 2, vec![0.2, 0.3, 0.1, 0.4, 0.4, 0.4, 0.1, 0.1, 0.1, 1.0, 1.0, 1.0]).unwrap();
        let (out, k) = calibrate(&ldr, &ldr, DEFAULT_SIGMA).unwrap();
        assert!((k - 1.0).abs() < 1e-15);
        assert_eq!(out, ldr);
        let hdr = ldr.map(|v| 2.0 * v);
        let (_, k) = calibrate(&hdr, &ldr, DEFAULT_SIGMA).unwrap();
        assert!((k - 0.5).abs() < 1e-15);
    }

    #[test]
    fn calibrate_empty_mask_errors() {
        let ldr = gray(2, 2, 1.0);
        assert!(matches!(
            calibrate(&ldr, &ldr, DEFAULT_SIGMA),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn rotation_group_properties() {
        let img = Image::from_fn(3, 8, |i, j| [i as f64, j as f64, (i * j) as f64]);
        assert_eq!(rotate_horizontal(&img, 0), img);
        assert_eq!(rotate_horizontal(&img, 8), img);
        let twice = rotate_horizontal(&rotate_horizontal(&img, 2), 2);
        assert_eq!(twice, rotate_horizontal(&img, 4));
        assert_eq!(rotate_horizontal(&rotate_horizontal(&img, 3), 5), img);
        assert_eq!(rotate_horizontal(&img, 1).pixel(0, 1), img.pixel(0, 0));
    }

    #[test]
    fn resample_examples() {
        let c = gray(5, 7, 0.5);
        for (h, w) in [(1, 1), (3, 2), (10, 14), (4, 9)] {
            let r = resample_area(&c, h, w).unwrap();
            assert!(r.data.iter().all(|v| (v - 0.5).abs() < 1e-12));
        }
        let img = Image::from_fn(2, 2, |_, j| [j as f64; 3]);
        assert!((resample_area(&img, 1, 1).unwrap().data[0] - 0.5).abs() < 1e-15);
        let chk = Image::from_fn(4, 4, |i, j| [((i + j) % 2) as f64; 3]);
        let r = resample_area(&chk, 2, 2).unwrap();
        assert!(r.data.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn fractional_box_weights_sum_to_one() {
        for (s, d) in [(7, 3), (10, 4), (5, 5), (3, 8)] {
            for taps in axis_taps(s, d) {
                let sum: f64 = taps.iter().map(|t| t.1).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planar_roundtrip() {
        let img = Image::from_fn(2, 3, |i, j| [i as f64, j as f64, 0.5]);
        let back = Image::from_planar(2, 3, &img.to_planar()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn crop_wraps_columns() {
        let img = Image::from_fn(2, 4, |i, j| [i as f64, j as f64, 0.0]);
        let c = img.crop_wrapped(0, 3, 2, 2).unwrap();
        assert_eq!(c.pixel(1, 0), [1.0, 3.0, 0.0]);
        assert_eq!(c.pixel(1, 1), [1.0, 0.0, 0.0]);
    }
}
