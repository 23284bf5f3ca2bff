//! Vector-quantized image tokenizers.
//!
//! A [`Tokenizer`] maps an RGB image to a grid of codebook indices and back.
//! The encoder is a stack of stride-2 convolutions, one per halving of the
//! resolution, followed by a 1×1 projection to the code dimension. The
//! decoder mirrors it with nearest-neighbour upsampling. The global
//! tokenizer wraps its convolutions horizontally so that rotating a
//! panorama by one token stride rotates its token grid by one column.
//!
//! Training minimises
//!
//! ```text
//! mean|Î − I| + ‖sg(z_q) − ẑ‖² + β·‖sg(ẑ) − z_q‖²
//! ```
//!
//! with squared norms summed over the code dimension and averaged over
//! positions. Decoder gradients reach the encoder through a straight-through
//! path around the quantizer.

use std::path::Path;

use panogen_autodiff::{checkpoint, Adam, AdamConfig, Conv2dSpec, ParamId, ParamStore, Precision, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_gradients, cosine_lr, Conv};
use crate::raster::Image;

/// Shape and training hyperparameters of one tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Number of stride-2 stages; the compression factor is `2^stages`.
    pub stages: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub circular: bool,
    pub beta_commit: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Steps an entry may go unused before it is re-seeded.
    pub dead_after: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::global_desk()
    }
}

impl TokenizerConfig {
    /// 32×64 downsampled panorama to 4×8 tokens, horizontally circular.
    pub fn global_desk() -> Self {
        TokenizerConfig {
            input_h: 32,
            input_w: 64,
            stages: 3,
            base_channels: 32,
            max_channels: 128,
            code_dim: 64,
            codebook_size: 256,
            circular: true,
            beta_commit: 0.25,
            lr: 2e-3,
            steps: 2000,
            batch: 4,
            dead_after: 200,
            seed: 0,
        }
    }

    /// 64×64 patch to 4×4 tokens, zero padded.
    pub fn local_desk() -> Self {
        TokenizerConfig {
            input_h: 64,
            input_w: 64,
            stages: 4,
            circular: false,
            ..Self::global_desk()
        }
    }

    pub fn factor(&self) -> usize {
        1 << self.stages
    }

    pub fn token_dims(&self) -> (usize, usize) {
        (self.input_h / self.factor(), self.input_w / self.factor())
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        if self.input_h % f != 0 || self.input_w % f != 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config(format!(
                "tokenizer input {}x{} is not divisible by 2^{}",
                self.input_h, self.input_w, self.stages
            )));
        }
        if self.codebook_size == 0 || self.code_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("tokenizer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A learned table of `size` vectors of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    pub table: Vec<f64>,
}

impl Codebook {
    pub fn entry(&self, k: usize) -> &[f64] {
        &self.table[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest entry by squared distance, lowest index on ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d: f64 = self
                .entry(k)
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Quantizes row-major `[n, dim]` vectors. Returns `(z_q, indices)`.
    pub fn quantize(&self, z_hat: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let n = z_hat.len() / self.dim;
        let idx = panogen_autodiff::parallel::map_indexed(n, |p| {
            self.nearest(&z_hat[p * self.dim..(p + 1) * self.dim])
        });
        let mut zq = Vec::with_capacity(z_hat.len());
        for &k in &idx {
            zq.extend_from_slice(self.entry(k));
        }
        (zq, idx)
    }
}

/// A grid of codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub idx: Vec<usize>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, idx: Vec<usize>) -> Result<Self> {
        if idx.len() != rows * cols {
            return Err(Error::domain(
                "token_grid",
                format!("{} indices for a {rows}x{cols} grid", idx.len()),
            ));
        }
        Ok(TokenGrid { rows, cols, idx })
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.idx[r * self.cols + c]
    }

    /// Circular column shift by `k` (column `c` moves to `c + k`).
    pub fn roll_cols(&self, k: isize) -> TokenGrid {
        let mut idx = vec![0; self.idx.len()];
        let w = self.cols as isize;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let dst = (c as isize + k).rem_euclid(w) as usize;
                idx[r * self.cols + dst] = self.get(r, c);
            }
        }
        TokenGrid {
            rows: self.rows,
            cols: self.cols,
            idx,
        }
    }

    /// Plain text: `rows cols` then one row of indices per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = || Error::Data("malformed token grid".into());
        let mut nums = text.split_whitespace().map(|t| t.parse::<usize>().map_err(|_| bad()));
        let rows = nums.next().ok_or_else(bad)??;
        let cols = nums.next().ok_or_else(bad)??;
        let idx = nums.collect::<Result<Vec<_>>>()?;
        TokenGrid::new(rows, cols, idx).map_err(|_| bad())
    }
}

/// Loss terms of one tokenizer forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VqParts {
    pub rec: f64,
    /// `‖sg(z_q) − ẑ‖²`, pulls the encoder toward its codes.
    pub commit: f64,
    /// `‖sg(ẑ) − z_q‖²`, pulls codes toward the encoder (before β).
    pub codebook: f64,
    pub total: f64,
}

/// Vars produced by [`Tokenizer::forward`].
pub struct VqForward {
    pub loss: Var,
    pub rec: Var,
    pub commit: Var,
    pub codebook: Var,
    pub recon: Var,
    pub z_hat: Var,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub store: ParamStore,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    codebook: ParamId,
    prefix: String,
}

/// Outcome of [`Tokenizer::train`].
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<VqParts>,
    pub resets: usize,
}

impl Tokenizer {
    /// Fresh weights. `prefix` namespaces parameter names in checkpoints.
    pub fn new(config: TokenizerConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
        let mut store = ParamStore::new(Precision::F32);
        let pad = Conv2dSpec {
            stride: 1,
            pad: 1,
            circular_w: config.circular,
        };
        let down = Conv2dSpec { stride: 2, ..pad };
        let point = Conv2dSpec {
            stride: 1,
            pad: 0,
            circular_w: false,
        };
        let ch = |s: usize| (config.base_channels << s).min(config.max_channels);
        let mut enc = vec![Conv::new(&mut store, &format!("{prefix}.enc.in"), 3, ch(0), 3, pad, 1.0, &mut rng)];
        for s in 0..config.stages {
            enc.push(Conv::new(
                &mut store,
                &format!("{prefix}.enc.down{s}"),
                ch(s),
                ch(s + 1),
                3,
                down,
                1.0,
                &mut rng,
            ));
        }
        enc.push(Conv::new(
            &mut store,
            &format!("{prefix}.enc.out"),
            ch(config.stages),
            config.code_dim,
            1,
            point,
            0.5,
            &mut rng,
        ));
        let mut dec = vec![Conv::new(
            &mut store,
            &format!("{prefix}.dec.in"),
            config.code_dim,
            ch(config.stages),
            1,
            point,
            1.0,
            &mut rng,
        )];
        for s in (0..config.stages).rev() {
            dec.push(Conv::new(
                &mut store,
                &format!("{prefix}.dec.up{s}"),
                ch(s + 1),
                ch(s),
                3,
                pad,
                1.0,
                &mut rng,
            ));
        }
        dec.push(Conv::new(&mut store, &format!("{prefix}.dec.out"), ch(0), 3, 3, pad, 0.5, &mut rng));
        let cb_init = crate::nn::normal(&mut rng, &[config.codebook_size, config.code_dim], 1.0);
        let codebook = store.add(format!("{prefix}.codebook"), cb_init);
        Ok(Tokenizer {
            config,
            store,
            enc,
            dec,
            codebook,
            prefix: prefix.to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            size: self.config.codebook_size,
            dim: self.config.code_dim,
            table: self.store.get(self.codebook).data().to_vec(),
        }
    }

    pub fn set_precision(&mut self, p: Precision) {
        self.store.set_precision(p);
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if (img.height, img.width) != (self.config.input_h, self.config.input_w) {
            return Err(Error::domain(
                "tokenizer",
                format!(
                    "expected {}x{} input, got {}x{}",
                    self.config.input_h, self.config.input_w, img.height, img.width
                ),
            ));
        }
        Ok(())
    }

    /// Encoder output `[c_z, h, w]` for a planar `[3, H, W]` input var.
    pub fn encode_var(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.enc.len() - 1;
        for (k, conv) in self.enc.iter().enumerate() {
            h = conv.forward(t, &self.store, h)?;
            if k != last {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    /// Decoder output `[3, H, W]` from a `[c_z, h, w]` var.
    pub fn decode_var(&self, t: &mut Tape, z: Var) -> Result<Var> {
        let mut h = self.dec[0].forward(t, &self.store, z)?;
        h = t.relu(h);
        for conv in &self.dec[1..self.dec.len() - 1] {
            h = t.upsample2x(h)?;
            h = conv.forward(t, &self.store, h)?;
            h = t.relu(h);
        }
        self.dec[self.dec.len() - 1].forward(t, &self.store, h)
    }

    /// Full training graph for one image.
    pub fn forward(&self, t: &mut Tape, img: &Image) -> Result<VqForward> {
        self.check_input(img)?;
        let (th, tw) = self.config.token_dims();
        let (cz, n) = (self.config.code_dim, th * tw);
        let x = t.constant(Tensor::new(&[3, img.height, img.width], img.to_planar())?);
        let z_hat = self.encode_var(t, x)?;
        let flat = t.reshape(z_hat, &[cz, n])?;
        let rows = t.transpose(flat)?;
        let (_, indices) = self.codebook().quantize(t.value(rows).data());
        let table = t.param(&self.store, self.codebook);
        let zq = t.embedding(table, &indices)?;
        let zq_sg = t.detach(zq);
        let rows_sg = t.detach(rows);
        let st = t.straight_through(zq_sg, rows)?;
        let st = t.transpose(st)?;
        let st = t.reshape(st, &[cz, th, tw])?;
        let recon = self.decode_var(t, st)?;

        let d = t.sub(recon, x)?;
        let d = t.abs(d);
        let rec = t.mean(d);
        let commit = sq_norm_mean(t, rows, zq_sg, n)?;
        let cb = sq_norm_mean(t, zq, rows_sg, n)?;
        let cb_w = t.scale(cb, self.config.beta_commit);
        let loss = t.add(rec, commit)?;
        let loss = t.add(loss, cb_w)?;
        Ok(VqForward {
            loss,
            rec,
            commit,
            codebook: cb,
            recon,
            z_hat: rows,
            indices,
        })
    }

    pub fn loss_parts(&self, t: &Tape, f: &VqForward) -> VqParts {
        VqParts {
            rec: t.value(f.rec).item(),
            commit: t.value(f.commit).item(),
            codebook: t.value(f.codebook).item(),
            total: t.value(f.loss).item(),
        }
    }

    pub fn encode(&self, img: &Image) -> Result<TokenGrid> {
        self.check_input(img)?;
        self.encode_any(img)
    }

    /// Encodes an image of any size divisible by the compression factor.
    pub fn encode_any(&self, img: &Image) -> Result<TokenGrid> {
        let f = self.config.factor();
        if img.height == 0 || img.width == 0 || img.height % f != 0 || img.width % f != 0 {
            return Err(Error::domain(
                "tokenizer",
                format!("{}x{} input is not a multiple of {f}", img.height, img.width),
            ));
        }
        let mut t = Tape::new(self.store.precision());
        let x = t.constant(Tensor::new(&[3, img.height, img.width], img.to_planar())?);
        let z = self.encode_var(&mut t, x)?;
        let (th, tw) = (img.height / f, img.width / f);
        let flat = t.reshape(z, &[self.config.code_dim, th * tw])?;
        let rows = t.transpose(flat)?;
        let (_, idx) = self.codebook().quantize(t.value(rows).data());
        TokenGrid::new(th, tw, idx)
    }

    /// Decoder output clamped to `[0, 1]`.
    pub fn decode(&self, tokens: &TokenGrid) -> Result<Image> {
        let (th, tw) = self.config.token_dims();
        if (tokens.rows, tokens.cols) != (th, tw) {
            return Err(Error::domain(
                "tokenizer",
                format!("expected {th}x{tw} tokens, got {}x{}", tokens.rows, tokens.cols),
            ));
        }
        self.decode_any(tokens)
    }

    /// Decodes a token grid of any size; the decoder is fully convolutional.
    pub fn decode_any(&self, tokens: &TokenGrid) -> Result<Image> {
        let cb = self.codebook();
        if let Some(k) = tokens.idx.iter().find(|k| **k >= cb.size) {
            return Err(Error::domain("tokenizer", format!("token {k} >= codebook size {}", cb.size)));
        }
        let n = tokens.rows * tokens.cols;
        let mut z = vec![0.0; cb.dim * n];
        for (p, &k) in tokens.idx.iter().enumerate() {
            for (c, v) in cb.entry(k).iter().enumerate() {
                z[c * n + p] = *v;
            }
        }
        let mut t = Tape::new(self.store.precision());
        let zv = t.constant(Tensor::new(&[cb.dim, tokens.rows, tokens.cols], z)?);
        let out = self.decode_var(&mut t, zv)?;
        let f = self.config.factor();
        let img = Image::from_planar(tokens.rows * f, tokens.cols * f, t.value(out).data())?;
        Ok(img.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        self.decode(&self.encode(img)?)
    }

    /// Encoder outputs as `[n, c_z]` rows, without gradients.
    fn latent_rows(&self, img: &Image) -> Result<Vec<f64>> {
        let mut t = Tape::new(self.store.precision());
        let x = t.constant(Tensor::new(&[3, img.height, img.width], img.to_planar())?);
        let z = self.encode_var(&mut t, x)?;
        let (th, tw) = self.config.token_dims();
        let flat = t.reshape(z, &[self.config.code_dim, th * tw])?;
        let rows = t.transpose(flat)?;
        Ok(t.value(rows).data().to_vec())
    }

    /// Trains on `images`. The codebook is seeded from encoder outputs of
    /// the first batch; entries unused for `dead_after` steps are re-seeded
    /// from the current batch.
    pub fn train(&mut self, images: &[Image]) -> Result<TrainLog> {
        if images.is_empty() {
            return Err(Error::Data("tokenizer training set is empty".into()));
        }
        for img in images {
            self.check_input(img)?;
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(&self.store, AdamConfig { clip_norm: Some(10.0), ..AdamConfig::with_lr(cfg.lr) });
        let batch = cfg.batch.max(1).min(images.len());
        let mut last_used = vec![0usize; cfg.codebook_size];
        let mut log = TrainLog::default();

        for step in 0..cfg.steps {
            adam.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
            let pick: Vec<usize> = if batch == images.len() {
                (0..batch).collect()
            } else {
                sample(&mut rng, images.len(), batch).into_vec()
            };
            if step == 0 {
                self.seed_codebook(&pick.iter().map(|&i| &images[i]).collect::<Vec<_>>(), &mut rng)?;
            }
            let (mut grads, parts) = batch_gradients(&self.store, pick.len(), |b, t| {
                let f = self.forward(t, &images[pick[b]])?;
                let parts = self.loss_parts(t, &f);
                let rows = t.value(f.z_hat).data().to_vec();
                Ok((f.loss, (parts, f.indices, rows)))
            })?;
            grads.scale(1.0 / pick.len() as f64);
            let before = self.codebook();
            adam.step(&mut self.store, &grads);

            let mut mean = VqParts::default();
            for (p, idx, _) in &parts {
                for &k in idx {
                    last_used[k] = step;
                }
                mean.rec += p.rec;
                mean.commit += p.commit;
                mean.codebook += p.codebook;
                mean.total += p.total;
            }
            let inv = 1.0 / parts.len() as f64;
            log.losses.push(VqParts {
                rec: mean.rec * inv,
                commit: mean.commit * inv,
                codebook: mean.codebook * inv,
                total: mean.total * inv,
            });

            let dead: Vec<usize> = (0..cfg.codebook_size)
                .filter(|&k| step - last_used[k] >= cfg.dead_after)
                .collect();
            if !dead.is_empty() {
                // Re-seed from the worst-quantized latents of this batch.
                let dim = cfg.code_dim;
                let mut scored: Vec<(f64, &[f64])> = Vec::new();
                for (_, idx, rows) in &parts {
                    for (row, &k) in rows.chunks(dim).zip(idx) {
                        let e: f64 = row.iter().zip(before.entry(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                        scored.push((e, row));
                    }
                }
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
                let prec = self.store.precision();
                let table = self.store.get_mut(self.codebook).data_mut();
                for (n, &k) in dead.iter().enumerate() {
                    let row = scored[n % scored.len()].1;
                    for c in 0..dim {
                        let jitter = 1e-3 * (rng.random::<f64>() - 0.5);
                        table[k * dim + c] = prec.round(row[c] + jitter);
                    }
                    last_used[k] = step;
                }
                log.resets += dead.len();
            }
            if step % 100 == 0 || step + 1 == cfg.steps {
                log::debug!("{} step {step}: {:?}", self.prefix, log.losses[step]);
            }
        }
        Ok(log)
    }

    /// k-means++ seeding from the encoder outputs of `batch`.
    fn seed_codebook(&mut self, batch: &[&Image], rng: &mut ChaCha8Rng) -> Result<()> {
        let mut pool = Vec::new();
        for img in batch {
            pool.extend(self.latent_rows(img)?);
        }
        let dim = self.config.code_dim;
        let n = pool.len() / dim;
        let row = |p: usize| &pool[p * dim..(p + 1) * dim];
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut chosen = vec![rng.random_range(0..n)];
        let mut d2: Vec<f64> = (0..n).map(|p| dist(row(p), row(chosen[0]))).collect();
        while chosen.len() < self.config.codebook_size {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (p, d) in d2.iter().enumerate() {
                    if u < *d {
                        pick = p;
                        break;
                    }
                    u -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            chosen.push(next);
            for p in 0..n {
                d2[p] = d2[p].min(dist(row(p), row(next)));
            }
        }
        let prec = self.store.precision();
        let table = self.store.get_mut(self.codebook).data_mut();
        for (k, &p) in chosen.iter().enumerate() {
            for c in 0..dim {
                table[k * dim + c] = prec.round(pool[p * dim + c] + 1e-4 * (rng.random::<f64>() - 0.5));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        Ok(())
    }

    pub fn load(config: TokenizerConfig, prefix: &str, path: &Path) -> Result<Self> {
        let mut tok = Tokenizer::new(config, prefix)?;
        checkpoint::load_into(&mut tok.store, path)?;
        Ok(tok)
    }
}

/// `mean over positions of Σ_c (a − b)²` for `[n, c]` vars.
fn sq_norm_mean(t: &mut Tape, a: Var, b: Var, n: usize) -> Result<Var> {
    let d = t.sub(a, b)?;
    let sq = t.mul(d, d)?;
    let s = t.sum(sq);
    Ok(t.scale(s, 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(circular: bool) -> TokenizerConfig {
        TokenizerConfig {
            input_h: 8,
            input_w: 16,
            stages: 2,
            base_channels: 4,
            max_channels: 8,
            code_dim: 4,
            codebook_size: 8,
            circular,
            steps: 5,
            batch: 2,
            ..TokenizerConfig::global_desk()
        }
    }

    #[test]
    fn nearest_examples() {
        let cb = Codebook {
            size: 2,
            dim: 2,
            table: vec![0.0, 0.0, 1.0, 1.0],
        };
        assert_eq!(cb.nearest(&[0.2, 0.1]), 0);
        assert_eq!(cb.nearest(&[1.0, 1.0]), 1);
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn shapes_roundtrip() {
        let tok = Tokenizer::new(tiny(true), "g").unwrap();
        let img = Image::filled(8, 16, [0.2, 0.5, 0.7]);
        let grid = tok.encode(&img).unwrap();
        assert_eq!((grid.rows, grid.cols), (2, 4));
        let out = tok.decode(&grid).unwrap();
        assert_eq!((out.height, out.width), (8, 16));
        assert!(tok.encode(&Image::filled(8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn token_grid_text_roundtrip() {
        let g = TokenGrid::new(2, 3, vec![0, 5, 2, 7, 1, 1]).unwrap();
        assert_eq!(TokenGrid::from_text(&g.to_text()).unwrap(), g);
        assert_eq!(g.roll_cols(1).get(0, 0), 2);
        assert_eq!(g.roll_cols(3), g);
    }

    #[test]
    fn training_is_deterministic() {
        let imgs: Vec<Image> = (0..3)
            .map(|k| Image::filled(8, 16, [k as f64 / 3.0, 0.5, 1.0 - k as f64 / 3.0]))
            .collect();
        let run = || {
            let mut tok = Tokenizer::new(tiny(false), "l").unwrap();
            tok.train(&imgs).unwrap().losses.last().unwrap().total
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_entry_codebook_is_legal() {
        let mut cfg = tiny(false);
        cfg.codebook_size = 1;
        let mut tok = Tokenizer::new(cfg, "l").unwrap();
        let imgs = vec![Image::filled(8, 16, [0.1; 3]), Image::filled(8, 16, [0.9; 3])];
        tok.train(&imgs).unwrap();
        assert!(tok.encode(&imgs[0]).unwrap().idx.iter().all(|k| *k == 0));
        assert_eq!(tok.reconstruct(&imgs[0]).unwrap(), tok.reconstruct(&imgs[1]).unwrap());
    }
}
