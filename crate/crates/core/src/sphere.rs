//! Equirectangular geometry and Fourier positional features.
//!
//! Longitude runs along the width of the raster and latitude along the
//! height. Pixel `(i, j)` is sampled at its center:
//!
//! ```text
//! θ = (2(j + ½)/W − 1)·π        φ = (2(i + ½)/H − 1)·π/2
//! ```
//!
//! [`Axes::Transposed`] swaps the roles of the two indices for callers that
//! want the other reading (θ from rows, φ from columns).

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereCoord {
    /// Longitude in (−π, π].
    pub theta: f64,
    /// Latitude in (−π/2, π/2].
    pub phi: f64,
}

impl SphereCoord {
    /// Builds a coordinate, wrapping θ and clamping φ into range.
    pub fn new(theta: f64, phi: f64) -> Self {
        SphereCoord {
            theta: wrap_theta(theta),
            phi: phi.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    /// Unit vector, y up.
    pub fn to_unit(self) -> [f64; 3] {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        [cp * st, sp, cp * ct]
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_theta(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t + 2.0 * PI
    } else {
        t
    }
}

/// Which raster axis carries longitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axes {
    /// Longitude along the width (standard panorama layout).
    #[default]
    Standard,
    /// Longitude along the height, latitude along the width.
    Transposed,
}

impl Axes {
    pub fn pixel_to_sphere(self, i: usize, j: usize, h: usize, w: usize) -> Result<SphereCoord> {
        match self {
            Axes::Standard => pixel_to_sphere(i, j, h, w),
            Axes::Transposed => {
                check_pixel(i, j, h, w)?;
                let theta = (2.0 * (i as f64 + 0.5) / h as f64 - 1.0) * PI;
                let phi = (2.0 * (j as f64 + 0.5) / w as f64 - 1.0) * FRAC_PI_2;
                Ok(SphereCoord::new(theta, phi))
            }
        }
    }

    pub fn sphere_to_pixel(self, c: SphereCoord, h: usize, w: usize) -> (f64, f64) {
        match self {
            Axes::Standard => sphere_to_pixel(c, h, w),
            Axes::Transposed => {
                let (j, i) = sphere_to_pixel(c, w, h);
                (i, j)
            }
        }
    }
}

fn check_pixel(i: usize, j: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || i >= h || j >= w {
        return Err(Error::domain(
            "pixel_to_sphere",
            format!("pixel ({i}, {j}) outside {h}x{w} raster"),
        ));
    }
    Ok(())
}

pub fn pixel_to_sphere(i: usize, j: usize, h: usize, w: usize) -> Result<SphereCoord> {
    check_pixel(i, j, h, w)?;
    Ok(frac_pixel_to_sphere(i as f64, j as f64, h, w))
}

/// Same mapping at a fractional pixel position; `j` may lie outside
/// `[0, W)` and wraps.
pub fn frac_pixel_to_sphere(i: f64, j: f64, h: usize, w: usize) -> SphereCoord {
    let theta = (2.0 * (j + 0.5) / w as f64 - 1.0) * PI;
    let phi = (2.0 * (i + 0.5) / h as f64 - 1.0) * FRAC_PI_2;
    SphereCoord::new(theta, phi)
}

/// Inverse of [`pixel_to_sphere`]. Returns fractional `(row, col)` with the
/// column reduced into `[-0.5, W - 0.5)`, so pixel centers come back as
/// integers.
pub fn sphere_to_pixel(c: SphereCoord, h: usize, w: usize) -> (f64, f64) {
    let c = SphereCoord::new(c.theta, c.phi);
    let j = (c.theta / PI + 1.0) * w as f64 / 2.0 - 0.5;
    let i = (c.phi / FRAC_PI_2 + 1.0) * h as f64 / 2.0 - 0.5;
    (i, (j + 0.5).rem_euclid(w as f64) - 0.5)
}

/// `[sin(2⁰πa), cos(2⁰πa), …, sin(2^{L−1}πa), cos(2^{L−1}πa)]`
pub fn fourier_encode(angle: f64, octaves: usize) -> Result<Vec<f64>> {
    if octaves == 0 {
        return Err(Error::domain("fourier_encode", "octave count must be at least 1"));
    }
    let mut out = Vec::with_capacity(2 * octaves);
    push_fourier(angle, octaves, &mut out);
    Ok(out)
}

fn push_fourier(angle: f64, octaves: usize, out: &mut Vec<f64>) {
    let mut f = PI;
    for _ in 0..octaves {
        let (s, c) = (f * angle).sin_cos();
        out.push(s);
        out.push(c);
        f *= 2.0;
    }
}

/// Channels per position: raw θ, raw φ, γ(θ), γ(φ).
pub const fn spe_channels(octaves: usize) -> usize {
    2 + 4 * octaves
}

/// `[θ, φ, γ(θ), γ(φ)]` for one coordinate.
pub fn spe_vector(c: SphereCoord, octaves: usize) -> Result<Vec<f64>> {
    if octaves == 0 {
        return Err(Error::domain("spe_vector", "octave count must be at least 1"));
    }
    let mut out = Vec::with_capacity(spe_channels(octaves));
    out.push(c.theta);
    out.push(c.phi);
    push_fourier(c.theta, octaves, &mut out);
    push_fourier(c.phi, octaves, &mut out);
    Ok(out)
}

/// Positional encodings laid out over a grid, row-major, `channels` values
/// per position.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SpeGrid {
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.cols + c) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Coordinates of every position, without the Fourier part.
    pub fn coords(&self) -> Vec<SphereCoord> {
        self.data
            .chunks(self.channels)
            .map(|v| SphereCoord {
                theta: v[0],
                phi: v[1],
            })
            .collect()
    }
}

/// A rectangular window of a panorama, in pixels. Columns may run past the
/// right edge and wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeom {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub pano_h: usize,
    pub pano_w: usize,
}

impl PatchGeom {
    /// Sphere coordinate at fractional patch-local position `(y, x)`, where
    /// integer values are pixel centers.
    pub fn local_to_sphere(&self, y: f64, x: f64) -> SphereCoord {
        frac_pixel_to_sphere(self.top as f64 + y, self.left as f64 + x, self.pano_h, self.pano_w)
    }

    /// Maps a sphere coordinate to fractional patch-local `(y, x)`, choosing
    /// the horizontal wrap that lands closest to the patch.
    pub fn sphere_to_local(&self, c: SphereCoord) -> (f64, f64) {
        let (i, j) = sphere_to_pixel(c, self.pano_h, self.pano_w);
        let w = self.pano_w as f64;
        let mut x = j - self.left as f64;
        let mid = (self.width as f64 - 1.0) / 2.0;
        while x - mid > w / 2.0 {
            x -= w;
        }
        while mid - x > w / 2.0 {
            x += w;
        }
        (i - self.top as f64, x)
    }
}

/// One encoding per token of a `tokens.0 × tokens.1` grid laid over the
/// patch, each taken at the center of the pixels the token covers.
pub fn patch_spe(patch: &PatchGeom, tokens: (usize, usize), octaves: usize) -> Result<SpeGrid> {
    let (th, tw) = tokens;
    if th == 0 || tw == 0 || patch.height % th != 0 || patch.width % tw != 0 {
        return Err(Error::domain(
            "patch_spe",
            format!(
                "token grid {th}x{tw} does not divide patch {}x{}",
                patch.height, patch.width
            ),
        ));
    }
    if patch.top + patch.height > patch.pano_h || patch.width > patch.pano_w {
        return Err(Error::domain("patch_spe", "patch does not fit the panorama"));
    }
    let (sy, sx) = ((patch.height / th) as f64, (patch.width / tw) as f64);
    let mut data = Vec::with_capacity(th * tw * spe_channels(octaves));
    for r in 0..th {
        for c in 0..tw {
            let y = (r as f64 + 0.5) * sy - 0.5;
            let x = (c as f64 + 0.5) * sx - 0.5;
            data.extend(spe_vector(patch.local_to_sphere(y, x), octaves)?);
        }
    }
    Ok(SpeGrid {
        rows: th,
        cols: tw,
        channels: spe_channels(octaves),
        data,
    })
}

/// Encodings of every pixel of an `h × w` panorama.
pub fn pano_spe(h: usize, w: usize, octaves: usize) -> Result<SpeGrid> {
    let full = PatchGeom {
        top: 0,
        left: 0,
        height: h,
        width: w,
        pano_h: h,
        pano_w: w,
    };
    patch_spe(&full, (h, w), octaves)
}
