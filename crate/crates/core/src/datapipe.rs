//! Training corpora: procedural HDR panoramas, rotation augmentation,
//! scene-level splits, and LDR/HDR training pairs for the upscaler.
//!
//! Scenes are authored in terms of elevation `el = −φ`. Row 0 of a raster
//! has φ near −π/2, so the zenith lands on the top row.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, rgbe, png8, CalibMask, HdrImage, Image, LdrImage, Tonemap};
use crate::sphere::{frac_pixel_to_sphere, PatchGeom, SphereCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SceneClass {
    SkyGradient,
    SunDisk,
    InteriorLamp,
    CheckerGround,
}

impl SceneClass {
    pub const ALL: [SceneClass; 4] = [
        SceneClass::SkyGradient,
        SceneClass::SunDisk,
        SceneClass::InteriorLamp,
        SceneClass::CheckerGround,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SceneClass::SkyGradient => "sky-gradient",
            SceneClass::SunDisk => "sun-disk",
            SceneClass::InteriorLamp => "interior-lamp",
            SceneClass::CheckerGround => "checker-ground",
        }
    }

    pub fn from_tag(tag: &str) -> Option<SceneClass> {
        SceneClass::ALL.into_iter().find(|c| c.tag() == tag)
    }

    /// Words that describe the class in captions.
    pub fn lexicon(self) -> &'static [&'static str] {
        match self {
            SceneClass::SkyGradient => &["sky", "blue", "clear", "gradient", "overcast", "daylight", "horizon"],
            SceneClass::SunDisk => &["sun", "sunny", "sunset", "sunlight", "bright", "solar", "noon"],
            SceneClass::InteriorLamp => &["lamp", "interior", "room", "indoor", "ceiling", "hall", "warm"],
            SceneClass::CheckerGround => &["checker", "checkered", "ground", "floor", "tiles", "tiled", "plaza"],
        }
    }

    fn captions(self) -> &'static [&'static str] {
        match self {
            SceneClass::SkyGradient => &[
                "a clear blue sky over a plain horizon",
                "an overcast daylight sky gradient",
                "a wide clear sky fading to the horizon",
            ],
            SceneClass::SunDisk => &[
                "a bright sun in a sunny sky",
                "sunset with a solar disk near the horizon",
                "noon sunlight from a bright sun",
            ],
            SceneClass::InteriorLamp => &[
                "an interior room lit by a ceiling lamp",
                "a warm indoor hall with a lamp",
                "a room interior under a bright lamp",
            ],
            SceneClass::CheckerGround => &[
                "a checkered tiled floor under the sky",
                "a plaza with checker tiles on the ground",
                "a checkered ground pattern",
            ],
        }
    }
}

impl fmt::Display for SceneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A small bright emitter: the sun outdoors or a lamp indoors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emitter {
    pub theta: f64,
    /// Elevation above the horizon, radians.
    pub elevation: f64,
    /// Angular radius, radians.
    pub radius: f64,
    pub radiance: f64,
}

/// Parameters of one procedural panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub class: SceneClass,
    pub zenith: [f64; 3],
    pub horizon: [f64; 3],
    pub ground: [f64; 3],
    /// Second ground color for the checker pattern.
    pub ground_alt: [f64; 3],
    /// Checker cells per half turn of longitude.
    pub checker_cells: usize,
    pub emitter: Option<Emitter>,
    pub text: String,
}

fn jitter(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..amount)).clamp(0.02, 0.95))
}

impl SceneSpec {
    /// Draws a spec of `class` with parameters in their documented ranges.
    pub fn random(class: SceneClass, rng: &mut impl Rng) -> SceneSpec {
        let caption = class.captions()[rng.random_range(0..class.captions().len())];
        let theta = rng.random_range(-PI..PI);
        let (zenith, horizon, ground, ground_alt, emitter) = match class {
            SceneClass::SkyGradient => (
                jitter(rng, [0.15, 0.3, 0.7], 0.08),
                jitter(rng, [0.6, 0.7, 0.85], 0.08),
                jitter(rng, [0.3, 0.28, 0.25], 0.05),
                [0.0; 3],
                None,
            ),
            SceneClass::SunDisk => (
                jitter(rng, [0.2, 0.35, 0.75], 0.08),
                jitter(rng, [0.75, 0.65, 0.55], 0.08),
                jitter(rng, [0.25, 0.22, 0.18], 0.05),
                [0.0; 3],
                Some(Emitter {
                    theta,
                    elevation: rng.random_range(0.25..1.2),
                    radius: rng.random_range(0.12..0.2),
                    radiance: rng.random_range(20.0..80.0),
                }),
            ),
            SceneClass::InteriorLamp => (
                jitter(rng, [0.55, 0.45, 0.3], 0.08),
                jitter(rng, [0.7, 0.55, 0.4], 0.08),
                jitter(rng, [0.35, 0.22, 0.12], 0.05),
                [0.0; 3],
                Some(Emitter {
                    theta,
                    elevation: rng.random_range(0.9..1.4),
                    radius: rng.random_range(0.1..0.16),
                    radiance: rng.random_range(5.0..20.0),
                }),
            ),
            SceneClass::CheckerGround => (
                jitter(rng, [0.25, 0.4, 0.8], 0.08),
                jitter(rng, [0.7, 0.75, 0.85], 0.08),
                jitter(rng, [0.85, 0.85, 0.8], 0.05),
                jitter(rng, [0.1, 0.1, 0.12], 0.05),
                None,
            ),
        };
        SceneSpec {
            class,
            zenith,
            horizon,
            ground,
            ground_alt,
            checker_cells: rng.random_range(3..7),
            emitter,
            text: caption.to_string(),
        }
    }

    /// Linear radiance in direction `c`; `pixel_angle` is the angular size
    /// of one pixel, used to antialias emitter edges.
    pub fn radiance(&self, c: SphereCoord, pixel_angle: f64) -> [f64; 3] {
        let el = -c.phi;
        let mut rgb = if el >= 0.0 {
            let t = (el / FRAC_PI_2).sqrt();
            lerp3(self.horizon, self.zenith, t)
        } else if self.class == SceneClass::CheckerGround {
            let u = ((c.theta + PI) / PI * self.checker_cells as f64).floor() as i64;
            let v = ((-el).tan().recip().ln() * 2.0).floor() as i64;
            if (u + v).rem_euclid(2) == 0 {
                self.ground
            } else {
                self.ground_alt
            }
        } else {
            let t = (-el / FRAC_PI_2).min(1.0);
            lerp3(self.ground, scale3(self.ground, 0.6), t)
        };
        if self.class == SceneClass::InteriorLamp {
            // Walls: darken toward the floor, a faint band at eye level.
            let band = 1.0 - 0.15 * (-(el * 4.0).powi(2)).exp();
            rgb = scale3(rgb, band);
        }
        if let Some(e) = self.emitter {
            let d = angular_distance(c, SphereCoord::new(e.theta, -e.elevation));
            let w = ((e.radius - d) / pixel_angle + 0.5).clamp(0.0, 1.0);
            if w > 0.0 {
                rgb = rgb.map(|v| v + (e.radiance - v) * w);
            }
        }
        rgb
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

pub fn angular_distance(a: SphereCoord, b: SphereCoord) -> f64 {
    let (ua, ub) = (a.to_unit(), b.to_unit());
    let dot = ua[0] * ub[0] + ua[1] * ub[1] + ua[2] * ub[2];
    dot.clamp(-1.0, 1.0).acos()
}

/// Samples `spec` at the pixel centers of an `h × 2h` panorama.
pub fn synth_pano(spec: &SceneSpec, h: usize, w: usize) -> Result<HdrImage> {
    if h == 0 || w != 2 * h {
        return Err(Error::domain("synth_pano", format!("panorama must be h x 2h, got {h}x{w}")));
    }
    let pixel_angle = PI / h as f64;
    Ok(Image::from_fn(h, w, |i, j| {
        spec.radiance(frac_pixel_to_sphere(i as f64, j as f64, h, w), pixel_angle)
    }))
}

/// Column shifts of the `copies` evenly spaced rotations, with the identity
/// (a full turn) dropped.
pub fn rotation_shifts(width: usize, copies: usize) -> Vec<usize> {
    (1..=copies)
        .map(|k| ((k * width) as f64 / copies as f64).round() as usize % width.max(1))
        .filter(|s| *s != 0)
        .collect()
}

/// Rotated copies of `pano`; the original is not included.
pub fn augment_rotations(pano: &Image, copies: usize) -> Vec<(usize, Image)> {
    rotation_shifts(pano.width, copies)
        .into_iter()
        .map(|s| (s, raster::rotate_horizontal(pano, s as isize)))
        .collect()
}

/// Splits scene ids into `(train, test)` deterministically.
pub fn make_split(scenes: &[String], train_frac: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if scenes.is_empty() {
        return Err(Error::Data("cannot split an empty corpus".into()));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Config(format!("train fraction {train_frac} outside [0, 1]")));
    }
    if scenes.len() == 1 && train_frac < 1.0 {
        return Err(Error::Data("a single scene cannot be split".into()));
    }
    let mut order: Vec<String> = scenes.to_vec();
    order.sort();
    order.dedup();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let mut n_train = (train_frac * n as f64).round() as usize;
    if train_frac < 1.0 {
        n_train = n_train.min(n - 1);
    }
    if train_frac > 0.0 {
        n_train = n_train.max(1);
    }
    let test = order.split_off(n_train);
    Ok((order, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One line of `manifest.txt`: `id source shift split class`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub source: String,
    pub shift: usize,
    pub split: Split,
    pub class: SceneClass,
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{} {} {} {} {}", r.id, r.source, r.shift, r.split.as_str(), r.class.tag())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("{}:{}: malformed manifest line", path.display(), n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(ManifestRecord {
            id: f[0].to_string(),
            source: f[1].to_string(),
            shift: f[2].parse().map_err(|_| bad())?,
            split: match f[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            },
            class: SceneClass::from_tag(f[4]).ok_or_else(bad)?,
        });
    }
    Ok(out)
}

/// Paths of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusLayout { root: root.into() }
    }
    pub fn hdr(&self, id: &str) -> PathBuf {
        self.root.join("scenes").join(format!("{id}.hdr"))
    }
    pub fn ldr(&self, id: &str) -> PathBuf {
        self.root.join("ldr").join(format!("{id}.png"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }
    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs.bin")
    }
    pub fn create_dirs(&self) -> Result<()> {
        std::fs::create_dir_all(self.root.join("scenes"))?;
        std::fs::create_dir_all(self.root.join("ldr"))?;
        Ok(())
    }
}

/// Options for [`build_pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    /// Side of the low-resolution LDR input.
    pub base: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma: f64,
    pub tonemap: Tonemap,
    pub on_calibration_failure: CalibrationPolicy,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            base: 32,
            beta_min: 1.0,
            beta_max: 4.0,
            sigma: raster::DEFAULT_SIGMA,
            tonemap: Tonemap::Luminance,
            on_calibration_failure: CalibrationPolicy::Skip,
        }
    }
}

/// What to do when a frame has no calibratable pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationPolicy {
    #[default]
    Skip,
    /// Keep the HDR as is (κ = 1).
    Unity,
}

/// One high-resolution pixel drawn from a crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    /// Crop-local pixel position.
    pub y: f64,
    pub x: f64,
    pub coord: SphereCoord,
    pub hdr: [f64; 3],
    pub ldr: [f64; 3],
}

/// Low-resolution LDR input plus high-resolution targets from the same
/// angular window.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub source: String,
    /// The crop in panorama pixels.
    pub crop: PatchGeom,
    pub beta: f64,
    pub ldr_lr: LdrImage,
    pub samples: Vec<PixelSample>,
}

/// Tone maps and calibrates `hdr` once, returning `(ldr, calibrated hdr)`.
pub fn prepare_pano(hdr: &HdrImage, cfg: &PairConfig) -> Result<Option<(LdrImage, HdrImage)>> {
    let ldr = raster::reinhard_tonemap(hdr, cfg.tonemap);
    match raster::calibrate(hdr, &ldr, cfg.sigma) {
        Ok((cal, _)) => Ok(Some((ldr, cal))),
        Err(Error::Calibration(msg)) => match cfg.on_calibration_failure {
            CalibrationPolicy::Skip => {
                log::warn!("skipping panorama: {msg}");
                Ok(None)
            }
            CalibrationPolicy::Unity => Ok(Some((ldr, hdr.clone()))),
        },
        Err(e) => Err(e),
    }
}

/// Draws `count` training pairs from one panorama: tone map, calibrate,
/// then per pair crop `round(base·β)` pixels square, shrink the LDR crop to
/// `base²` and draw `base²` HDR samples without replacement.
pub fn build_pairs(source: &str, hdr: &HdrImage, count: usize, cfg: &PairConfig, rng: &mut impl Rng) -> Result<Vec<ScenePair>> {
    let Some((ldr, cal)) = prepare_pano(hdr, cfg)? else {
        return Ok(Vec::new());
    };
    (0..count)
        .map(|_| {
            let beta = if cfg.beta_max > cfg.beta_min {
                rng.random_range(cfg.beta_min..=cfg.beta_max)
            } else {
                cfg.beta_min
            };
            pair_at(source, &ldr, &cal, beta, cfg.base, rng)
        })
        .collect()
}

/// One pair with scale `beta` at a random position.
pub fn pair_at(source: &str, ldr: &LdrImage, cal: &HdrImage, beta: f64, base: usize, rng: &mut impl Rng) -> Result<ScenePair> {
    let size = (base as f64 * beta).round() as usize;
    if size > ldr.height || size < base {
        return Err(Error::Data(format!(
            "crop of {size} pixels does not fit a {}-row panorama",
            ldr.height
        )));
    }
    let top = rng.random_range(0..=ldr.height - size);
    let left = rng.random_range(0..ldr.width);
    let crop = PatchGeom {
        top,
        left,
        height: size,
        width: size,
        pano_h: ldr.height,
        pano_w: ldr.width,
    };
    let hdr_c = cal.crop_wrapped(top, left, size, size)?;
    let ldr_c = ldr.crop_wrapped(top, left, size, size)?;
    let ldr_lr = raster::resample_area(&ldr_c, base, base)?;
    let picks = sample(rng, size * size, base * base);
    let samples = picks
        .iter()
        .map(|p| {
            let (y, x) = (p / size, p % size);
            PixelSample {
                y: y as f64,
                x: x as f64,
                coord: crop.local_to_sphere(y as f64, x as f64),
                hdr: hdr_c.pixel(y, x),
                ldr: ldr_c.pixel(y, x),
            }
        })
        .collect();
    Ok(ScenePair {
        source: source.to_string(),
        crop,
        beta,
        ldr_lr,
        samples,
    })
}

/// Mask of the calibration region, exposed for inspection tools.
pub fn calibration_mask(ldr: &LdrImage, sigma: f64) -> CalibMask {
    raster::calib_mask(ldr, sigma)
}

pub const PAIR_MAGIC: &[u8; 8] = b"T2LPAIR1";

/// Pair archive layout (little-endian):
///
/// ```text
/// b"T2LPAIR1", u32 count, u32 base
/// per record:
///   u16 id_len, id bytes
///   u32 pano_h, pano_w, top, left, crop_size
///   f32 beta
///   base·base·3 f32 LDR input, row-major RGB
///   u32 n, then n × (y, x, θ, φ, hdr rgb, ldr rgb) as f32
/// ```
pub fn encode_pairs(pairs: &[ScenePair], base: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PAIR_MAGIC);
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(base as u32).to_le_bytes());
    let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for p in pairs {
        if p.ldr_lr.height != base || p.ldr_lr.width != base {
            return Err(Error::Data("pair input size differs from archive base".into()));
        }
        out.extend_from_slice(&(p.source.len() as u16).to_le_bytes());
        out.extend_from_slice(p.source.as_bytes());
        for v in [p.crop.pano_h, p.crop.pano_w, p.crop.top, p.crop.left, p.crop.height] {
            u(&mut out, v);
        }
        f(&mut out, p.beta);
        for v in &p.ldr_lr.data {
            f(&mut out, *v);
        }
        u(&mut out, p.samples.len());
        for s in &p.samples {
            for v in [s.y, s.x, s.coord.theta, s.coord.phi] {
                f(&mut out, v);
            }
            for v in s.hdr.iter().chain(&s.ldr) {
                f(&mut out, *v);
            }
        }
    }
    Ok(out)
}

struct Bytes<'a> {
    b: &'a [u8],
    pos: usize,
    record: usize,
}

impl Bytes<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::codec(
                "pair archive",
                format!("truncated record {}", self.record),
                self.pos,
            ));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")) as usize)
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4")) as f64)
    }
}

pub fn decode_pairs(bytes: &[u8]) -> Result<(usize, Vec<ScenePair>)> {
    let mut r = Bytes { b: bytes, pos: 0, record: 0 };
    if r.take(8)? != PAIR_MAGIC {
        return Err(Error::codec("pair archive", "bad magic", 0));
    }
    let count = r.u32()?;
    let base = r.u32()?;
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        r.record = k;
        let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2")) as usize;
        let at = r.pos;
        let source = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::codec("pair archive", "id is not UTF-8", at))?;
        let (pano_h, pano_w, top, left, size) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let beta = r.f32()?;
        let ldr = (0..base * base * 3).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let ns = r.u32()?;
        let mut samples = Vec::with_capacity(ns);
        for _ in 0..ns {
            let v = (0..10).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            samples.push(PixelSample {
                y: v[0],
                x: v[1],
                coord: SphereCoord { theta: v[2], phi: v[3] },
                hdr: [v[4], v[5], v[6]],
                ldr: [v[7], v[8], v[9]],
            });
        }
        pairs.push(ScenePair {
            source,
            crop: PatchGeom {
                top,
                left,
                height: size,
                width: size,
                pano_h,
                pano_w,
            },
            beta,
            ldr_lr: Image::new(base, base, ldr)?,
            samples,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::codec("pair archive", "trailing bytes", r.pos));
    }
    Ok((base, pairs))
}

/// Everything `prepare-data` produces.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    pub specs: Vec<(String, SceneSpec)>,
}

/// Options for [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub height: usize,
    pub rotations: usize,
    pub train_frac: f64,
    pub seed: u64,
}

/// Generates `scenes` panoramas cycling through the classes, writes them
/// with their rotations, tone-mapped previews and the manifest.
pub fn write_corpus(layout: &CorpusLayout, cfg: &CorpusConfig, tonemap: Tonemap) -> Result<Corpus> {
    layout.create_dirs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs: Vec<(String, SceneSpec)> = (0..cfg.scenes)
        .map(|k| {
            let class = SceneClass::ALL[k % SceneClass::ALL.len()];
            (format!("s{k:04}"), SceneSpec::random(class, &mut rng))
        })
        .collect();
    let ids: Vec<String> = specs.iter().map(|(id, _)| id.clone()).collect();
    let (train, _) = make_split(&ids, cfg.train_frac, cfg.seed)?;
    let rendered = panogen_autodiff::parallel::map_indexed(specs.len(), |k| {
        synth_pano(&specs[k].1, cfg.height, 2 * cfg.height)
    });
    let mut records = Vec::new();
    for ((id, spec), pano) in specs.iter().zip(rendered) {
        let pano = pano?;
        let split = if train.contains(id) { Split::Train } else { Split::Test };
        let mut items = vec![(0usize, pano.clone())];
        items.extend(augment_rotations(&pano, cfg.rotations));
        for (shift, img) in items {
            let rid = if shift == 0 { id.clone() } else { format!("{id}_r{shift}") };
            rgbe::write(&img, &layout.hdr(&rid))?;
            png8::write(&raster::reinhard_tonemap(&img, tonemap), &layout.ldr(&rid))?;
            records.push(ManifestRecord {
                id: rid,
                source: id.clone(),
                shift,
                split,
                class: spec.class,
            });
        }
    }
    write_manifest(&records, &layout.manifest())?;
    Ok(Corpus { records, specs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(class: SceneClass, seed: u64) -> SceneSpec {
        SceneSpec::random(class, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sun_peak_matches_radiance() {
        let mut s = spec(SceneClass::SunDisk, 1);
        s.emitter.as_mut().unwrap().radiance = 50.0;
        let img = synth_pano(&s, 64, 128).unwrap();
        assert!((img.max_value() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn sunless_scenes_stay_below_one() {
        for c in [SceneClass::SkyGradient, SceneClass::CheckerGround] {
            let img = synth_pano(&spec(c, 3), 32, 64).unwrap();
            assert!(img.max_value() <= 1.0);
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_checks_aspect() {
        let s = spec(SceneClass::InteriorLamp, 2);
        assert_eq!(synth_pano(&s, 16, 32).unwrap(), synth_pano(&s, 16, 32).unwrap());
        assert!(synth_pano(&s, 16, 16).is_err());
    }

    #[test]
    fn rotation_shifts_of_width_100() {
        assert_eq!(rotation_shifts(100, 10), vec![10, 20, 30, 40, 50, 60, 70, 80, 90]);
    }

    #[test]
    fn split_by_scene() {
        let ids: Vec<String> = (0..10).map(|k| format!("s{k}")).collect();
        let (a, b) = make_split(&ids, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(make_split(&ids, 0.8, 7).unwrap(), (a.clone(), b.clone()));
        assert!(a.iter().all(|x| !b.contains(x)));
        assert!(make_split(&ids[..1], 0.5, 0).is_err());
    }

    #[test]
    fn pairs_satisfy_construction_identity() {
        let hdr = synth_pano(&spec(SceneClass::SunDisk, 4), 64, 128).unwrap();
        let cfg = PairConfig {
            base: 8,
            ..PairConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs = build_pairs("x", &hdr, 5, &cfg, &mut rng).unwrap();
        let (ldr, _) = prepare_pano(&hdr, &cfg).unwrap().unwrap();
        for p in &pairs {
            assert!((1.0..=4.0).contains(&p.beta));
            let c = ldr.crop_wrapped(p.crop.top, p.crop.left, p.crop.height, p.crop.width).unwrap();
            assert_eq!(raster::resample_area(&c, 8, 8).unwrap(), p.ldr_lr);
            assert_eq!(p.samples.len(), 64);
            for s in &p.samples {
                let (y, x) = p.crop.sphere_to_local(s.coord);
                assert!((y - s.y).abs() < 1e-9 && (x - s.x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unit_beta_keeps_sizes() {
        let hdr = synth_pano(&spec(SceneClass::SkyGradient, 5), 32, 64).unwrap();
        let cfg = PairConfig { base: 8, ..PairConfig::default() };
        let (ldr, cal) = prepare_pano(&hdr, &cfg).unwrap().unwrap();
        let p = pair_at("x", &ldr, &cal, 1.0, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.crop.height, 8);
        let c = ldr.crop_wrapped(p.crop.top, p.crop.left, 8, 8).unwrap();
        assert_eq!(c, p.ldr_lr);
    }

    #[test]
    fn archive_roundtrip() {
        let hdr = synth_pano(&spec(SceneClass::CheckerGround, 6), 32, 64).unwrap();
        let cfg = PairConfig { base: 4, ..PairConfig::default() };
        let pairs = build_pairs("scene-a", &hdr, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = encode_pairs(&pairs, 4).unwrap();
        let (base, back) = decode_pairs(&bytes).unwrap();
        assert_eq!(base, 4);
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].crop, pairs[1].crop);
        assert_eq!(back[2].samples[3].hdr[0], pairs[2].samples[3].hdr[0] as f32 as f64);
        assert_eq!(encode_pairs(&back, 4).unwrap(), bytes);
        assert!(decode_pairs(&bytes[..bytes.len() - 2]).is_err());
    }
}
