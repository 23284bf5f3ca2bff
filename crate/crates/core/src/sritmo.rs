//! Joint super-resolution and inverse tone mapping from structured latent
//! codes.
//!
//! An LDR patch is encoded into one latent per pixel, anchored at that
//! pixel's center on the sphere. A query direction blends the four
//! surrounding latents by area weights; `f_sr` maps the blend to LDR color
//! and exposes its second hidden layer `c_hr`, which `f_itmo` maps, along
//! with the raw `(θ, φ)` of the query, to log radiance.

use std::path::Path;

use panogen_autodiff::{checkpoint, Adam, AdamConfig, Conv2dSpec, ParamStore, Precision, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::ScenePair;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{batch_gradients, cosine_lr, Conv, Linear};
use crate::raster::{self, HdrImage, Image, LdrImage};
use crate::sphere::{PatchGeom, SphereCoord};

/// Radiance floor applied to ground truth before taking logs.
pub const HDR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrItmoConfig {
    /// Residual blocks between the input and output convolutions; the
    /// encoder has `2 + 2·blocks` conv layers.
    pub enc_blocks: usize,
    pub enc_width: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub itmo_hidden: usize,
    #[serde(skip)]
    pub single_mlp: bool,
    /// HDR/LDR targets drawn per pair per step; 0 uses all of them.
    pub samples: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SrItmoConfig {
    fn default() -> Self {
        SrItmoConfig {
            enc_blocks: 3,
            enc_width: 64,
            latent_dim: 64,
            hidden: 256,
            itmo_hidden: 256,
            single_mlp: false,
            samples: 1024,
            lr: 1e-3,
            steps: 20_000,
            batch: 4,
            seed: 0,
        }
    }
}

impl SrItmoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_width == 0 || self.latent_dim == 0 || self.hidden == 0 || self.itmo_hidden == 0 {
            return Err(Error::Config("sritmo: widths must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("sritmo: lr must be positive".into()));
        }
        Ok(())
    }
}

/// Four anchor rows and their interpolation weights.
pub type Taps = ([usize; 4], [f64; 4]);

/// Per-pixel latent codes of one patch, anchored at the patch's pixel
/// centers.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Row-major `[rows·cols, dim]`.
    pub data: Vec<f64>,
    /// Angular window of the patch, in panorama pixels.
    pub extent: PatchGeom,
}

impl LatentGrid {
    pub fn code(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.cols + c) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Sphere coordinate of latent `(r, c)`.
    pub fn anchor(&self, r: usize, c: usize) -> SphereCoord {
        let (y, x) = grid_to_extent(&self.extent, self.rows, self.cols, r as f64, c as f64);
        self.extent.local_to_sphere(y, x)
    }

    /// Continuous grid position of a query, clamped to the anchor hull.
    pub fn grid_position(&self, q: SphereCoord) -> (f64, f64) {
        let (y, x) = self.extent.sphere_to_local(q);
        let u = (y + 0.5) * self.rows as f64 / self.extent.height as f64 - 0.5;
        let v = (x + 0.5) * self.cols as f64 / self.extent.width as f64 - 0.5;
        (snap(u).clamp(0.0, (self.rows - 1) as f64), snap(v).clamp(0.0, (self.cols - 1) as f64))
    }

    pub fn taps(&self, q: SphereCoord) -> Taps {
        let (u, v) = self.grid_position(q);
        area_taps(u, v, self.rows, self.cols)
    }

    /// `z_c = Σᵢ (Aᵢ/A)·zᵢ` over the four anchors around `q`.
    pub fn interpolate(&self, q: SphereCoord) -> Vec<f64> {
        let (idx, w) = self.taps(q);
        let mut out = vec![0.0; self.dim];
        for k in 0..4 {
            let row = &self.data[idx[k] * self.dim..(idx[k] + 1) * self.dim];
            for (o, z) in out.iter_mut().zip(row) {
                *o += w[k] * z;
            }
        }
        out
    }
}

fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

/// Extent-local pixel position of grid position `(u, v)`.
fn grid_to_extent(extent: &PatchGeom, rows: usize, cols: usize, u: f64, v: f64) -> (f64, f64) {
    (
        (u + 0.5) * extent.height as f64 / rows as f64 - 0.5,
        (v + 0.5) * extent.width as f64 / cols as f64 - 0.5,
    )
}

/// Area weights at grid position `(u, v)`: each anchor of the enclosing
/// cell is weighted by the area of the sub-rectangle between the query and
/// the diagonally opposite anchor, normalized by the total.
pub fn area_taps(u: f64, v: f64, rows: usize, cols: usize) -> Taps {
    let r0 = (u.floor() as usize).min(rows.saturating_sub(2));
    let c0 = (v.floor() as usize).min(cols.saturating_sub(2));
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let corners = [(r0, c0), (r0, c1), (r1, c0), (r1, c1)];
    let opposite = [(r1, c1), (r1, c0), (r0, c1), (r0, c0)];
    let mut w = [0.0; 4];
    for k in 0..4 {
        let (orow, ocol) = opposite[k];
        let dy = if r1 == r0 { 1.0 } else { (u - orow as f64).abs() };
        let dx = if c1 == c0 { 1.0 } else { (v - ocol as f64).abs() };
        w[k] = dy * dx;
    }
    let total: f64 = w.iter().sum();
    let mut idx = [0; 4];
    for k in 0..4 {
        w[k] /= total;
        idx[k] = corners[k].0 * cols + corners[k].1;
    }
    (idx, w)
}

/// `(1/n)·Σ‖pred − gt‖₁` over `[n, 3]` rows.
pub fn loss_sr(t: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let n = t.shape(pred)[0];
    if n == 0 {
        return Err(Error::domain("loss_sr", "no samples"));
    }
    let d = t.sub(pred, gt)?;
    let d = t.abs(d);
    let s = t.sum(d);
    Ok(t.scale(s, 1.0 / n as f64))
}

/// Variance of `log_pred − log_gt` over all entries.
pub fn loss_itmo_log(t: &mut Tape, log_pred: Var, log_gt: Var) -> Result<Var> {
    if t.value(log_pred).numel() < 2 {
        return Err(Error::domain("loss_itmo", "needs at least two values"));
    }
    let d = t.sub(log_pred, log_gt)?;
    Ok(t.variance(d))
}

/// `log(max(v, 1e-6))`; negative radiance is rejected.
pub fn log_radiance(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if v < 0.0 || !v.is_finite() {
                Err(Error::domain("loss_itmo", format!("ground truth radiance {v}")))
            } else {
                Ok(v.max(HDR_FLOOR).ln())
            }
        })
        .collect()
}

/// Scale-invariant log loss on linear radiance.
pub fn loss_itmo(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::domain("loss_itmo", "needs two or more matched values"));
    }
    if let Some(p) = pred.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::domain("loss_itmo", format!("prediction {p} is not positive")));
    }
    let lg = log_radiance(gt)?;
    let d: Vec<f64> = pred.iter().zip(&lg).map(|(p, g)| p.ln() - g).collect();
    Ok(variance(&d))
}

fn variance(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    (d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).max(0.0)
}

/// Predictions for a set of query directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[n, 3]` LDR, unclamped.
    pub ldr: Vec<f64>,
    /// `[n, 3]` log radiance.
    pub log_hdr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SrItmo {
    pub config: SrItmoConfig,
    pub store: ParamStore,
    enc_in: Conv,
    enc_blocks: Vec<(Conv, Conv)>,
    enc_out: Conv,
    f_sr: Vec<Linear>,
    f_itmo: Vec<Linear>,
    trained: bool,
}

/// Loss values of one evaluation or training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SrItmoLoss {
    pub sr: f64,
    pub itmo: f64,
}

impl SrItmoLoss {
    pub fn total(&self) -> f64 {
        self.sr + self.itmo
    }
}

/// Held-out quality of an upscaler or a baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SrItmoReport {
    pub psnr_ldr: f64,
    pub log_rmse: f64,
    pub loss: SrItmoLoss,
}

impl SrItmo {
    pub fn new(config: SrItmoConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5171);
        let mut store = ParamStore::new(Precision::F32);
        let same = Conv2dSpec {
            stride: 1,
            pad: 1,
            circular_w: false,
        };
        let w = config.enc_width;
        let enc_in = Conv::new(&mut store, "sr.enc.in", 3, w, 3, same, 1.0, &mut rng);
        let enc_blocks = (0..config.enc_blocks)
            .map(|b| {
                (
                    Conv::new(&mut store, &format!("sr.enc.r{b}a"), w, w, 3, same, 1.0, &mut rng),
                    Conv::new(&mut store, &format!("sr.enc.r{b}b"), w, w, 3, same, 0.3, &mut rng),
                )
            })
            .collect();
        let enc_out = Conv::new(&mut store, "sr.enc.out", w, config.latent_dim, 3, same, 1.0, &mut rng);
        let h = config.hidden;
        let (f_sr, f_itmo) = if config.single_mlp {
            let dims = [config.latent_dim + 2, h, h, h, 6];
            let f = (0..4)
                .map(|k| Linear::new(&mut store, &format!("sr.mlp{k}"), dims[k], dims[k + 1], &mut rng))
                .collect();
            (f, Vec::new())
        } else {
            let dims = [config.latent_dim, h, h, h, 3];
            let f = (0..4)
                .map(|k| Linear::new(&mut store, &format!("sr.fsr{k}"), dims[k], dims[k + 1], &mut rng))
                .collect();
            let g = vec![
                Linear::new(&mut store, "sr.fitmo0", h + 2, config.itmo_hidden, &mut rng),
                Linear::new(&mut store, "sr.fitmo1", config.itmo_hidden, 3, &mut rng),
            ];
            (f, g)
        };
        Ok(SrItmo {
            config,
            store,
            enc_in,
            enc_blocks,
            enc_out,
            f_sr,
            f_itmo,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Latent rows `[h·w, c_z′]` of a patch.
    pub fn encode_var(&self, t: &mut Tape, patch: &LdrImage) -> Result<Var> {
        if patch.height < 2 || patch.width < 2 {
            return Err(Error::domain("encode_latents", "patch must be at least 2x2"));
        }
        let planar: Vec<f64> = patch.to_planar().iter().map(|v| v - 0.5).collect();
        let x = t.constant(Tensor::new(&[3, patch.height, patch.width], planar)?);
        let mut h = self.enc_in.forward(t, &self.store, x)?;
        h = t.relu(h);
        for (a, b) in &self.enc_blocks {
            let r = a.forward(t, &self.store, h)?;
            let r = t.relu(r);
            let r = b.forward(t, &self.store, r)?;
            h = t.add(h, r)?;
        }
        let z = self.enc_out.forward(t, &self.store, h)?;
        let flat = t.reshape(z, &[self.config.latent_dim, patch.height * patch.width])?;
        Ok(t.transpose(flat)?)
    }

    pub fn encode_latents(&self, patch: &LdrImage, extent: PatchGeom) -> Result<LatentGrid> {
        let mut t = Tape::new(self.store.precision());
        let z = self.encode_var(&mut t, patch)?;
        Ok(LatentGrid {
            rows: patch.height,
            cols: patch.width,
            dim: self.config.latent_dim,
            data: t.value(z).data().to_vec(),
            extent,
        })
    }

    /// `(rgb, c_hr)` from `[n, c_z′]` codes. In the single-MLP variant the
    /// query angles join the input and `c_hr` carries the log radiance.
    pub fn query_sr(&self, t: &mut Tape, z_c: Var, coords: Var) -> Result<(Var, Var)> {
        if self.config.single_mlp {
            let mut h = t.concat_cols(&[z_c, coords])?;
            for (k, l) in self.f_sr.iter().enumerate() {
                h = l.forward(t, &self.store, h)?;
                if k < 3 {
                    h = t.relu(h);
                }
            }
            let rgb = t.slice_cols(h, 0, 3)?;
            let log_hdr = t.slice_cols(h, 3, 3)?;
            return Ok((rgb, log_hdr));
        }
        let h1 = self.f_sr[0].forward(t, &self.store, z_c)?;
        let h1 = t.relu(h1);
        let h2 = self.f_sr[1].forward(t, &self.store, h1)?;
        let c_hr = t.relu(h2);
        let h3 = self.f_sr[2].forward(t, &self.store, c_hr)?;
        let h3 = t.relu(h3);
        let rgb = self.f_sr[3].forward(t, &self.store, h3)?;
        Ok((rgb, c_hr))
    }

    /// Log radiance `[n, 3]` from `c_hr` and `[n, 2]` angles `(θ, φ)`.
    pub fn query_hdr(&self, t: &mut Tape, c_hr: Var, coords: Var) -> Result<Var> {
        if self.config.single_mlp {
            return Ok(c_hr);
        }
        let x = t.concat_cols(&[c_hr, coords])?;
        let g = self.f_itmo[0].forward(t, &self.store, x)?;
        let g = t.relu(g);
        self.f_itmo[1].forward(t, &self.store, g)
    }

    /// `(ldr, log_hdr)` vars for queries given latent rows and taps.
    pub fn predict_var(&self, t: &mut Tape, latents: Var, taps: &[Taps], coords: &[SphereCoord]) -> Result<(Var, Var)> {
        let idx: Vec<[usize; 4]> = taps.iter().map(|t| t.0).collect();
        let w: Vec<[f64; 4]> = taps.iter().map(|t| t.1).collect();
        let z_c = t.gather_weighted(latents, &idx, &w)?;
        let ang: Vec<f64> = coords.iter().flat_map(|c| [c.theta, c.phi]).collect();
        let ang = t.constant(Tensor::new(&[coords.len(), 2], ang)?);
        let (rgb, c_hr) = self.query_sr(t, z_c, ang)?;
        let log_hdr = self.query_hdr(t, c_hr, ang)?;
        Ok((rgb, log_hdr))
    }

    /// Plain predictions for `queries` over an encoded grid, in chunks
    /// spread across the pool.
    pub fn predict(&self, grid: &LatentGrid, queries: &[SphereCoord]) -> Result<Prediction> {
        const CHUNK: usize = 2048;
        let chunks = queries.len().div_ceil(CHUNK);
        let parts = panogen_autodiff::parallel::map_indexed(chunks, |k| -> Result<(Vec<f64>, Vec<f64>)> {
            let qs = &queries[k * CHUNK..((k + 1) * CHUNK).min(queries.len())];
            let mut t = Tape::new(self.store.precision());
            let taps: Vec<Taps> = qs.iter().map(|q| grid.taps(*q)).collect();
            let used = used_rows(&taps);
            let rows: Vec<f64> = used.iter().flat_map(|&r| grid.code(r / grid.cols, r % grid.cols).iter().copied()).collect();
            let local = remap_taps(&taps, &used);
            let lat = t.constant(Tensor::new(&[used.len(), grid.dim], rows)?);
            let (rgb, lh) = self.predict_var(&mut t, lat, &local, qs)?;
            Ok((t.value(rgb).data().to_vec(), t.value(lh).data().to_vec()))
        });
        let mut out = Prediction {
            ldr: Vec::with_capacity(queries.len() * 3),
            log_hdr: Vec::with_capacity(queries.len() * 3),
        };
        for p in parts {
            let (a, b) = p?;
            out.ldr.extend(a);
            out.log_hdr.extend(b);
        }
        Ok(out)
    }

    /// Training graph for one pair on the given sample subset.
    pub fn pair_loss(&self, t: &mut Tape, pair: &ScenePair, picks: &[usize]) -> Result<(Var, SrItmoLoss)> {
        let lat = self.encode_var(t, &pair.ldr_lr)?;
        let base = pair.ldr_lr.height;
        let taps: Vec<Taps> = picks
            .iter()
            .map(|&i| {
                let s = &pair.samples[i];
                let u = (s.y + 0.5) * base as f64 / pair.crop.height as f64 - 0.5;
                let v = (s.x + 0.5) * pair.ldr_lr.width as f64 / pair.crop.width as f64 - 0.5;
                area_taps(u.clamp(0.0, (base - 1) as f64), v.clamp(0.0, (pair.ldr_lr.width - 1) as f64), base, pair.ldr_lr.width)
            })
            .collect();
        let coords: Vec<SphereCoord> = picks.iter().map(|&i| pair.samples[i].coord).collect();
        let (rgb, lh) = self.predict_var(t, lat, &taps, &coords)?;
        let n = picks.len();
        let gt_ldr: Vec<f64> = picks.iter().flat_map(|&i| pair.samples[i].ldr).collect();
        let gt_hdr: Vec<f64> = picks.iter().flat_map(|&i| pair.samples[i].hdr).collect();
        let gl = t.constant(Tensor::new(&[n, 3], gt_ldr)?);
        let gh = t.constant(Tensor::new(&[n, 3], log_radiance(&gt_hdr)?)?);
        let sr = loss_sr(t, rgb, gl)?;
        let itmo = loss_itmo_log(t, lh, gh)?;
        let total = t.add(sr, itmo)?;
        let parts = SrItmoLoss {
            sr: t.value(sr).item(),
            itmo: t.value(itmo).item(),
        };
        Ok((total, parts))
    }

    /// Joint training of encoder, `f_sr` and `f_itmo` on `L_sr + L_itmo`.
    pub fn train(&mut self, pairs: &[ScenePair]) -> Result<Vec<SrItmoLoss>> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(
            &self.store,
            AdamConfig {
                clip_norm: Some(5.0),
                ..AdamConfig::with_lr(cfg.lr)
            },
        );
        let batch = cfg.batch.clamp(1, pairs.len());
        let mut log = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            adam.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
            let picks = sample(&mut rng, pairs.len(), batch).into_vec();
            let subsets: Vec<Vec<usize>> = picks
                .iter()
                .map(|&p| {
                    let n = pairs[p].samples.len();
                    if cfg.samples == 0 || cfg.samples >= n {
                        (0..n).collect()
                    } else {
                        sample(&mut rng, n, cfg.samples).into_vec()
                    }
                })
                .collect();
            let this = &*self;
            let (mut grads, parts) = batch_gradients(&self.store, batch, |b, t| this.pair_loss(t, &pairs[picks[b]], &subsets[b]))?;
            grads.scale(1.0 / batch as f64);
            adam.step(&mut self.store, &grads);
            let mut mean = SrItmoLoss::default();
            for p in &parts {
                mean.sr += p.sr / batch as f64;
                mean.itmo += p.itmo / batch as f64;
            }
            if step % 200 == 0 || step + 1 == cfg.steps {
                log::debug!("sritmo step {step}: sr {:.4} itmo {:.4}", mean.sr, mean.itmo);
            }
            log.push(mean);
        }
        self.trained = true;
        Ok(log)
    }

    /// Per-pair predictions at the pair's own samples.
    pub fn predict_pair(&self, pair: &ScenePair) -> Result<Prediction> {
        let grid = self.encode_latents(&pair.ldr_lr, pair.crop)?;
        let qs: Vec<SphereCoord> = pair.samples.iter().map(|s| s.coord).collect();
        self.predict(&grid, &qs)
    }

    /// PSNR of clamped LDR, scale-aligned log-RMSE and mean losses over
    /// `pairs`.
    pub fn evaluate(&self, pairs: &[ScenePair]) -> Result<SrItmoReport> {
        evaluate_with(pairs, |p| self.predict_pair(p))
    }

    /// Upscales `ldr` by `factor`. `extent` locates it on the panorama.
    /// The HDR output is calibrated against the LDR output so that
    /// unsaturated regions keep LDR brightness.
    pub fn upscale(&self, ldr: &LdrImage, factor: f64, extent: PatchGeom) -> Result<(LdrImage, HdrImage)> {
        if !(factor >= 1.0) || !factor.is_finite() {
            return Err(Error::domain("upscale", format!("factor {factor} must be at least 1")));
        }
        if !self.trained {
            return Err(Error::Missing {
                stage: "train-sritmo".into(),
                msg: "SR-iTMO model has not been trained".into(),
            });
        }
        let oh = (ldr.height as f64 * factor).round() as usize;
        let ow = (ldr.width as f64 * factor).round() as usize;
        let grid = self.encode_latents(ldr, extent)?;
        let queries: Vec<SphereCoord> = (0..oh)
            .flat_map(|i| (0..ow).map(move |j| (i, j)))
            .map(|(i, j)| {
                let u = (i as f64 + 0.5) * ldr.height as f64 / oh as f64 - 0.5;
                let v = (j as f64 + 0.5) * ldr.width as f64 / ow as f64 - 0.5;
                let (y, x) = grid_to_extent(&extent, ldr.height, ldr.width, u, v);
                extent.local_to_sphere(y, x)
            })
            .collect();
        let p = self.predict(&grid, &queries)?;
        let out_ldr = Image::new(oh, ow, p.ldr.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        let hdr = Image::new(oh, ow, p.log_hdr.iter().map(|v| v.exp()).collect())?;
        let hdr = match raster::calibrate(&hdr, &out_ldr, raster::DEFAULT_SIGMA) {
            Ok((cal, _)) => cal,
            Err(Error::Calibration(_)) => hdr,
            Err(e) => return Err(e),
        };
        Ok((out_ldr, hdr))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        Ok(())
    }

    pub fn load(config: SrItmoConfig, path: &Path) -> Result<Self> {
        let mut m = SrItmo::new(config)?;
        checkpoint::load_into(&mut m.store, path)?;
        m.trained = true;
        Ok(m)
    }
}

fn used_rows(taps: &[Taps]) -> Vec<usize> {
    let mut rows: Vec<usize> = taps.iter().flat_map(|t| t.0).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

fn remap_taps(taps: &[Taps], used: &[usize]) -> Vec<Taps> {
    taps.iter()
        .map(|(idx, w)| {
            let mut out = [0; 4];
            for k in 0..4 {
                out[k] = used.binary_search(&idx[k]).expect("row collected");
            }
            (out, *w)
        })
        .collect()
}

/// Bilinear LDR upsampling with the LDR reused as radiance.
pub fn baseline_predict(pair: &ScenePair) -> Prediction {
    let img = &pair.ldr_lr;
    let mut ldr = Vec::with_capacity(pair.samples.len() * 3);
    for s in &pair.samples {
        let u = (s.y + 0.5) * img.height as f64 / pair.crop.height as f64 - 0.5;
        let v = (s.x + 0.5) * img.width as f64 / pair.crop.width as f64 - 0.5;
        let (idx, w) = area_taps(
            u.clamp(0.0, (img.height - 1) as f64),
            v.clamp(0.0, (img.width - 1) as f64),
            img.height,
            img.width,
        );
        for c in 0..3 {
            ldr.push((0..4).map(|k| w[k] * img.data[idx[k] * 3 + c]).sum());
        }
    }
    let log_hdr = ldr.iter().map(|v: &f64| v.max(HDR_FLOOR).ln()).collect();
    Prediction { ldr, log_hdr }
}

/// Scores any predictor over `pairs`.
pub fn evaluate_with(pairs: &[ScenePair], predict: impl Fn(&ScenePair) -> Result<Prediction>) -> Result<SrItmoReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no evaluation pairs".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut rep = SrItmoReport::default();
    for pair in pairs {
        let p = predict(pair)?;
        let gt_ldr: Vec<f64> = pair.samples.iter().flat_map(|s| s.ldr).collect();
        let gt_hdr: Vec<f64> = pair.samples.iter().flat_map(|s| s.hdr).collect();
        let lg = log_radiance(&gt_hdr)?;
        let n = pair.samples.len() as f64;
        let mut l1 = 0.0;
        for (a, b) in p.ldr.iter().zip(&gt_ldr) {
            let d = a.clamp(0.0, 1.0) - b;
            sq += d * d;
            l1 += (a - b).abs();
        }
        count += gt_ldr.len();
        let d: Vec<f64> = p.log_hdr.iter().zip(&lg).map(|(a, b)| a - b).collect();
        let var = variance(&d);
        rep.loss.sr += l1 / n;
        rep.loss.itmo += var;
        rep.log_rmse += var.sqrt();
    }
    let k = pairs.len() as f64;
    rep.loss.sr /= k;
    rep.loss.itmo /= k;
    rep.log_rmse /= k;
    rep.psnr_ldr = metrics::psnr_from_mse(sq / count as f64, 1.0);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_bilinear() {
        let (idx, w) = area_taps(1.25, 2.5, 4, 5);
        assert_eq!(idx, [7, 8, 12, 13]);
        let want = [0.75 * 0.5, 0.75 * 0.5, 0.25 * 0.5, 0.25 * 0.5];
        for k in 0..4 {
            assert!((w[k] - want[k]).abs() < 1e-15);
        }
        let (idx, w) = area_taps(3.0, 4.0, 4, 5);
        assert_eq!(w[3], 1.0);
        assert_eq!(idx[3], 19);
    }

    #[test]
    fn itmo_loss_examples() {
        assert!(loss_itmo(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        let e2 = std::f64::consts::E.powi(2);
        assert!((loss_itmo(&[1.0, e2], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(loss_itmo(&[0.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(loss_itmo(&[1.0, 1.0], &[-1.0, 1.0]).is_err());
    }

    #[test]
    fn sr_loss_sums_channels() {
        let mut t = Tape::new(Precision::F64);
        let p = t.input(Tensor::new(&[1, 3], vec![0.6, 0.6, 0.6]).unwrap());
        let g = t.input(Tensor::new(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap());
        let l = loss_sr(&mut t, p, g).unwrap();
        assert!((t.value(l).item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_patch_gives_equal_interior_latents() {
        let cfg = SrItmoConfig {
            enc_blocks: 1,
            enc_width: 8,
            latent_dim: 4,
            hidden: 8,
            itmo_hidden: 8,
            ..Default::default()
        };
        let m = SrItmo::new(cfg).unwrap();
        let patch = Image::filled(12, 12, [0.3, 0.6, 0.2]);
        let geom = PatchGeom {
            top: 0,
            left: 0,
            height: 12,
            width: 12,
            pano_h: 24,
            pano_w: 48,
        };
        let g = m.encode_latents(&patch, geom).unwrap();
        assert_eq!((g.rows, g.cols), (12, 12));
        for r in 4..8 {
            for c in 4..8 {
                assert_eq!(g.code(r, c), g.code(4, 4));
            }
        }
        let a = g.anchor(2, 5);
        assert_eq!(g.interpolate(a), g.code(2, 5));
    }
}
