//! Autoregressive token samplers.
//!
//! Both samplers share one decoder-only transformer. A sequence is a block
//! of condition rows followed by the embedded tokens; the row before token
//! `i` predicts token `i`. Grids are scanned row-major.
//!
//! The global sampler is conditioned on `[C_knn…, text slot]` through a
//! learned adapter and a projection head. The local sampler is conditioned
//! on the embedded global grid followed by one SPE row per token of the
//! window.

use std::path::Path;

use panogen_autodiff::{checkpoint, Adam, AdamConfig, GradBuffer, ParamId, ParamStore, Precision, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{contrastive_loss, knn_condition, pseudo_text_feature, ConditionBundle, EmbeddingStore};
use crate::error::{Error, Result};
use crate::nn::{batch_gradients, cosine_lr, normal, LayerNorm, Linear};
use crate::sphere::{patch_spe, spe_channels, PatchGeom, SpeGrid};
use crate::vq::{TokenGrid, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub context: usize,
    pub ff_mult: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            width: 128,
            context: 256,
            ff_mult: 4,
            lr: 1e-3,
            steps: 600,
            batch: 4,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("transformer: {m}")));
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.ff_mult == 0 {
            return bad("layers, heads, width and ff_mult must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm causal transformer over `[prefix | token]` sequences.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub vocab: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, config: TransformerConfig, vocab: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if vocab == 0 {
            return Err(Error::Config("transformer: empty vocabulary".into()));
        }
        let w = config.width;
        let std = 1.0 / (w as f64).sqrt();
        let out_std = std / (2.0 * config.layers as f64).sqrt();
        let tok_emb = store.add(format!("{name}.tok"), normal(rng, &[vocab, w], 0.1));
        let pos_emb = store.add(format!("{name}.pos"), normal(rng, &[config.context, w], 0.1));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.b{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), w),
                    qkv: Linear::with_std(store, &format!("{p}.qkv"), w, 3 * w, std, rng),
                    proj: Linear::with_std(store, &format!("{p}.proj"), w, w, out_std, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), w),
                    ff1: Linear::new(store, &format!("{p}.ff1"), w, config.ff_mult * w, rng),
                    ff2: Linear::with_std(store, &format!("{p}.ff2"), config.ff_mult * w, w, out_std, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.lnf"), w);
        let head = Linear::with_std(store, &format!("{name}.head"), w, vocab, std, rng);
        Ok(Transformer {
            config,
            vocab,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    /// Logits `[m + 1, vocab]` for tokens `0..=m` given a `[p, width]`
    /// prefix and the first `m` tokens. Requires `p ≥ 1`.
    pub fn logits(&self, t: &mut Tape, store: &ParamStore, prefix: Var, tokens: &[usize]) -> Result<Var> {
        let p = t.shape(prefix)[0];
        if p == 0 {
            return Err(Error::domain("transformer", "zero-length condition"));
        }
        let len = p + tokens.len();
        if len > self.config.context {
            return Err(Error::domain(
                "transformer",
                format!("sequence of {len} exceeds context {}", self.config.context),
            ));
        }
        let mut x = if tokens.is_empty() {
            prefix
        } else {
            let table = t.param(store, self.tok_emb);
            let emb = t.embedding(table, tokens)?;
            t.concat_rows(&[prefix, emb])?
        };
        let pos = t.param(store, self.pos_emb);
        let pos = t.slice_rows(pos, 0, len)?;
        x = t.add(x, pos)?;

        let w = self.config.width;
        let dh = w / self.config.heads;
        let mut mask = vec![0.0; len * len];
        for i in 0..len {
            for j in i + 1..len {
                mask[i * len + j] = -1e9;
            }
        }
        let mask = t.constant(Tensor::new(&[len, len], mask)?);
        let inv = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let h = b.ln1.forward(t, store, x)?;
            let qkv = b.qkv.forward(t, store, h)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for k in 0..self.config.heads {
                let q = t.slice_cols(qkv, k * dh, dh)?;
                let kk = t.slice_cols(qkv, w + k * dh, dh)?;
                let v = t.slice_cols(qkv, 2 * w + k * dh, dh)?;
                let kt = t.transpose(kk)?;
                let s = t.matmul(q, kt)?;
                let s = t.scale(s, inv);
                let s = t.add(s, mask)?;
                let a = t.softmax_rows(s)?;
                heads.push(t.matmul(a, v)?);
            }
            let cat = t.concat_cols(&heads)?;
            let att = b.proj.forward(t, store, cat)?;
            x = t.add(x, att)?;
            let h = b.ln2.forward(t, store, x)?;
            let h = b.ff1.forward(t, store, h)?;
            let h = t.relu(h);
            let h = b.ff2.forward(t, store, h)?;
            x = t.add(x, h)?;
        }
        let x = self.ln_f.forward(t, store, x)?;
        let rows = t.slice_rows(x, p - 1, tokens.len() + 1)?;
        self.head.forward(t, store, rows)
    }

    /// Mean next-token cross entropy of `tokens` after `prefix`.
    pub fn nll(&self, t: &mut Tape, store: &ParamStore, prefix: Var, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::domain("transformer", "empty token sequence"));
        }
        let logits = self.logits(t, store, prefix, &tokens[..tokens.len() - 1])?;
        Ok(t.cross_entropy(logits, tokens)?)
    }
}

/// Decoding controls. `temperature ≤ 1e-6` or `top_k = 1` is greedy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            temperature: 1.0,
            top_k: 100,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn greedy() -> Self {
        SampleConfig {
            temperature: 0.0,
            top_k: 1,
            seed: 0,
        }
    }
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws one index; returns it with its log-probability under the model.
pub fn pick_token(logits: &[f64], cfg: &SampleConfig, rng: &mut impl Rng) -> (usize, f64) {
    let k = if cfg.top_k == 0 { logits.len() } else { cfg.top_k.min(logits.len()) };
    let choice = if cfg.temperature <= 1e-6 || k == 1 {
        argmax(logits)
    } else {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order.truncate(k);
        let top = logits[order[0]];
        let p: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / cfg.temperature).exp()).collect();
        let total: f64 = p.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut choice = order[k - 1];
        for (i, pi) in order.iter().zip(&p) {
            if u < *pi {
                choice = *i;
                break;
            }
            u -= pi;
        }
        choice
    };
    (choice, log_softmax_at(logits, choice))
}

/// Generated grid plus the log-probability of each generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub grid: TokenGrid,
    pub log_probs: Vec<f64>,
}

/// Per-step training losses.
#[derive(Debug, Clone, Default)]
pub struct SamplerLog {
    pub nll: Vec<f64>,
    pub con: Vec<f64>,
}

fn batch_picks(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    let b = batch.clamp(1, n);
    if b == n {
        (0..n).collect()
    } else {
        sample(rng, n, b).into_vec()
    }
}

fn adam_for(store: &ParamStore, lr: f64) -> Adam {
    Adam::new(
        store,
        AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::with_lr(lr)
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalSamplerConfig {
    pub net: TransformerConfig,
    /// Number of nearest image embeddings in the condition.
    pub k: usize,
    /// Noise weight of the pseudo text feature.
    pub alpha: f64,
    pub tau: f64,
    #[serde(skip)]
    pub no_knn: bool,
    #[serde(skip)]
    pub no_lcon: bool,
}

impl Default for GlobalSamplerConfig {
    fn default() -> Self {
        GlobalSamplerConfig {
            net: TransformerConfig::default(),
            k: 5,
            alpha: 0.25,
            tau: 0.07,
            no_knn: false,
            no_lcon: false,
        }
    }
}

impl GlobalSamplerConfig {
    pub fn condition_len(&self) -> usize {
        if self.no_knn {
            1
        } else {
            self.k + 1
        }
    }
}

/// One training panorama for the global sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalExample {
    pub tokens: TokenGrid,
    pub image_embedding: Vec<f64>,
}

/// Text-conditioned sampler over global token grids.
#[derive(Debug, Clone)]
pub struct GlobalSampler {
    pub config: GlobalSamplerConfig,
    pub store: ParamStore,
    pub net: Transformer,
    adapter: ParamId,
    cond_proj: Linear,
    grid: (usize, usize),
    embed_dim: usize,
    trained: bool,
}

impl GlobalSampler {
    /// `grid` is the global token lattice; `vocab` the global codebook size.
    pub fn new(config: GlobalSamplerConfig, grid: (usize, usize), vocab: usize, embed_dim: usize) -> Result<Self> {
        let need = config.condition_len() + grid.0 * grid.1;
        if need > config.net.context {
            return Err(Error::Config(format!(
                "global sampler: context {} < condition + tokens = {need}",
                config.net.context
            )));
        }
        if !(config.tau > 0.0 && config.tau <= 1.0) || !(0.0..1.0).contains(&config.alpha) {
            return Err(Error::Config("global sampler: tau must be in (0, 1] and alpha in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.net.seed ^ 0x610ba1);
        let mut store = ParamStore::new(Precision::F32);
        let net = Transformer::new(&mut store, "global", config.net.clone(), vocab, &mut rng)?;
        let mut eye = Tensor::zeros(&[embed_dim, embed_dim]);
        for i in 0..embed_dim {
            eye.data_mut()[i * embed_dim + i] = 1.0;
        }
        let adapter = store.add("global.cond.adapter", eye);
        let cond_proj = Linear::with_std(&mut store, "global.cond.proj", embed_dim, config.net.width, 1.0, &mut rng);
        Ok(GlobalSampler {
            config,
            store,
            net,
            adapter,
            cond_proj,
            grid,
            embed_dim,
            trained: false,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Unit-norm adapted condition rows `normalize(C·A)`.
    pub fn adapt(&self, t: &mut Tape, c: Var) -> Result<Var> {
        let a = t.param(&self.store, self.adapter);
        let ca = t.matmul(c, a)?;
        Ok(t.normalize_rows(ca)?)
    }

    fn prefix(&self, t: &mut Tape, bundle: &ConditionBundle) -> Result<Var> {
        if bundle.len() != self.config.condition_len() {
            return Err(Error::domain(
                "global_sampler",
                format!("condition of length {}, expected {}", bundle.len(), self.config.condition_len()),
            ));
        }
        if bundle.vectors.iter().any(|v| v.len() != self.embed_dim) {
            return Err(Error::domain("global_sampler", "condition dimension mismatch"));
        }
        let rows: Vec<f64> = bundle.vectors.concat();
        let c = t.constant(Tensor::new(&[bundle.len(), self.embed_dim], rows)?);
        let c = self.adapt(t, c)?;
        self.cond_proj.forward(t, &self.store, c)
    }

    /// Condition for `query`: its `K` nearest image embeddings and itself.
    pub fn condition(&self, query: &[f64], store: &EmbeddingStore) -> Result<ConditionBundle> {
        if self.config.no_knn {
            return Ok(ConditionBundle {
                vectors: vec![query.to_vec()],
            });
        }
        if store.is_empty() {
            return Err(Error::Missing {
                stage: "embeddings".into(),
                msg: "image embedding store is empty".into(),
            });
        }
        knn_condition(query, store, self.config.k)
    }

    /// Training-time condition built from a pseudo text feature.
    pub fn pseudo_condition(&self, image_embedding: &[f64], store: &EmbeddingStore, rng: &mut impl Rng) -> Result<ConditionBundle> {
        let c = pseudo_text_feature(image_embedding, self.config.alpha, rng)?;
        self.condition(&c, store)
    }

    /// Mean token NLL of `tokens` under `bundle`.
    pub fn nll(&self, t: &mut Tape, bundle: &ConditionBundle, tokens: &TokenGrid) -> Result<Var> {
        self.check_grid(tokens)?;
        let p = self.prefix(t, bundle)?;
        self.net.nll(t, &self.store, p, &tokens.idx)
    }

    /// Contrastive term between image embeddings and adapted pseudo text
    /// features of one batch.
    pub fn contrastive(&self, t: &mut Tape, images: &[Vec<f64>], pseudo: &[Vec<f64>]) -> Result<Var> {
        let n = images.len();
        let v = t.constant(Tensor::new(&[n, self.embed_dim], images.concat())?);
        let c = t.constant(Tensor::new(&[n, self.embed_dim], pseudo.concat())?);
        let c = self.adapt(t, c)?;
        contrastive_loss(t, v, c, self.config.tau)
    }

    fn check_grid(&self, g: &TokenGrid) -> Result<()> {
        if (g.rows, g.cols) != self.grid {
            return Err(Error::domain(
                "global_sampler",
                format!("expected {}x{} tokens, got {}x{}", self.grid.0, self.grid.1, g.rows, g.cols),
            ));
        }
        Ok(())
    }

    pub fn train(&mut self, examples: &[GlobalExample], store: &EmbeddingStore) -> Result<SamplerLog> {
        if examples.is_empty() {
            return Err(Error::Data("global sampler training set is empty".into()));
        }
        if !self.config.no_knn && store.len() < self.config.k {
            return Err(Error::Missing {
                stage: "embeddings".into(),
                msg: format!("store holds {} embeddings, K = {}", store.len(), self.config.k),
            });
        }
        for e in examples {
            self.check_grid(&e.tokens)?;
        }
        let cfg = self.config.net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = adam_for(&self.store, cfg.lr);
        let mut log = SamplerLog::default();
        for step in 0..cfg.steps {
            adam.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
            let picks = batch_picks(&mut rng, examples.len(), cfg.batch);
            let mut pseudo = Vec::with_capacity(picks.len());
            let mut bundles = Vec::with_capacity(picks.len());
            for &i in &picks {
                let c = pseudo_text_feature(&examples[i].image_embedding, self.config.alpha, &mut rng)?;
                bundles.push(self.condition(&c, store)?);
                pseudo.push(c);
            }
            let this = &*self;
            let (mut grads, nlls) = batch_gradients(&self.store, picks.len(), |b, t| {
                let l = this.nll(t, &bundles[b], &examples[picks[b]].tokens)?;
                Ok((l, t.value(l).item()))
            })?;
            grads.scale(1.0 / picks.len() as f64);
            let mut con = 0.0;
            if !self.config.no_lcon && picks.len() >= 2 {
                let images: Vec<Vec<f64>> = picks.iter().map(|&i| examples[i].image_embedding.clone()).collect();
                let mut t = Tape::new(self.store.precision());
                let l = self.contrastive(&mut t, &images, &pseudo)?;
                con = t.value(l).item();
                let g = t.backward(l)?;
                let mut buf = GradBuffer::zeros_like(&self.store);
                buf.accumulate(&g);
                grads.merge(&buf);
            }
            adam.step(&mut self.store, &grads);
            let nll = nlls.iter().sum::<f64>() / nlls.len() as f64;
            if step % 50 == 0 || step + 1 == cfg.steps {
                log::debug!("global step {step}: nll {nll:.4} con {con:.4}");
            }
            log.nll.push(nll);
            log.con.push(con);
        }
        self.trained = true;
        Ok(log)
    }

    /// Fraction of tokens whose argmax prediction matches under teacher
    /// forcing, with pseudo conditions drawn from `seed`.
    pub fn teacher_forced_accuracy(&self, examples: &[GlobalExample], store: &EmbeddingStore, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hit, mut total) = (0usize, 0usize);
        for e in examples {
            let bundle = self.pseudo_condition(&e.image_embedding, store, &mut rng)?;
            let mut t = Tape::new(self.store.precision());
            let p = self.prefix(&mut t, &bundle)?;
            let n = e.tokens.idx.len();
            let logits = self.net.logits(&mut t, &self.store, p, &e.tokens.idx[..n - 1])?;
            let v = t.value(logits).data();
            for (i, want) in e.tokens.idx.iter().enumerate() {
                if argmax(&v[i * self.net.vocab..(i + 1) * self.net.vocab]) == *want {
                    hit += 1;
                }
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }

    /// Row-major generation of a full global grid.
    pub fn sample(&self, bundle: &ConditionBundle, cfg: &SampleConfig) -> Result<SamplerOutput> {
        self.sample_with(bundle, cfg, &vec![None; self.grid.0 * self.grid.1])
    }

    /// Like [`sample`](Self::sample), but positions holding `Some(k)` are
    /// fixed to `k` instead of drawn.
    pub fn sample_with(&self, bundle: &ConditionBundle, cfg: &SampleConfig, fixed: &[Option<usize>]) -> Result<SamplerOutput> {
        if !self.trained {
            return Err(Error::Missing {
                stage: "train-global".into(),
                msg: "global sampler has not been trained".into(),
            });
        }
        let n = self.grid.0 * self.grid.1;
        if fixed.len() != n {
            return Err(Error::domain("global_sampler", "fixed-token mask has the wrong length"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut t0 = Tape::new(self.store.precision());
        let pv = self.prefix(&mut t0, bundle)?;
        let prefix = t0.value(pv).clone();
        let mut toks = Vec::with_capacity(n);
        let mut log_probs = Vec::new();
        for f in fixed {
            if let Some(k) = f {
                toks.push(*k);
                continue;
            }
            let mut t = Tape::new(self.store.precision());
            let p = t.constant(prefix.clone());
            let l = self.net.logits(&mut t, &self.store, p, &toks)?;
            let v = t.value(l).data();
            let row = &v[v.len() - self.net.vocab..];
            let (k, lp) = pick_token(row, cfg, &mut rng);
            toks.push(k);
            log_probs.push(lp);
        }
        Ok(SamplerOutput {
            grid: TokenGrid::new(self.grid.0, self.grid.1, toks)?,
            log_probs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        Ok(())
    }

    pub fn load(config: GlobalSamplerConfig, grid: (usize, usize), vocab: usize, embed_dim: usize, path: &Path) -> Result<Self> {
        let mut s = GlobalSampler::new(config, grid, vocab, embed_dim)?;
        checkpoint::load_into(&mut s.store, path)?;
        s.trained = true;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSamplerConfig {
    pub net: TransformerConfig,
    pub octaves: usize,
    pub window_rows: usize,
    pub window_cols: usize,
    pub stride: usize,
    /// Drop the global grid from the condition.
    #[serde(skip)]
    pub no_global: bool,
    /// Drop the per-token coordinate rows from the condition.
    #[serde(skip)]
    pub no_sp: bool,
    /// Keep raw `(θ, φ)` in the coordinate rows but drop the Fourier terms.
    #[serde(skip)]
    pub no_spe: bool,
}

impl Default for LocalSamplerConfig {
    fn default() -> Self {
        LocalSamplerConfig {
            net: TransformerConfig::default(),
            octaves: 4,
            window_rows: 4,
            window_cols: 4,
            stride: 2,
            no_global: false,
            no_sp: false,
            no_spe: false,
        }
    }
}

impl LocalSamplerConfig {
    /// Channels of each coordinate row actually fed to the model.
    pub fn coord_channels(&self) -> usize {
        if self.no_spe {
            2
        } else {
            spe_channels(self.octaves)
        }
    }
}

/// One training window for the local sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalExample {
    pub global: TokenGrid,
    pub spe: SpeGrid,
    pub target: TokenGrid,
}

/// Structure-aware sampler over local token windows.
#[derive(Debug, Clone)]
pub struct LocalSampler {
    pub config: LocalSamplerConfig,
    pub store: ParamStore,
    pub net: Transformer,
    global_emb: ParamId,
    spe_proj: Linear,
    global_grid: (usize, usize),
    trained: bool,
}

impl LocalSampler {
    pub fn new(config: LocalSamplerConfig, global_grid: (usize, usize), global_vocab: usize, vocab: usize) -> Result<Self> {
        if config.no_global && config.no_sp {
            return Err(Error::Config("local sampler: condition would be empty".into()));
        }
        if config.stride == 0 || config.stride > config.window_rows.min(config.window_cols) {
            return Err(Error::Config("local sampler: stride must be in 1..=window".into()));
        }
        let window = config.window_rows * config.window_cols;
        let mut need = window;
        if !config.no_global {
            need += global_grid.0 * global_grid.1;
        }
        if !config.no_sp {
            need += window;
        }
        if need > config.net.context {
            return Err(Error::Config(format!(
                "local sampler: context {} < condition + tokens = {need}",
                config.net.context
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.net.seed ^ 0x10ca1);
        let mut store = ParamStore::new(Precision::F32);
        let net = Transformer::new(&mut store, "local", config.net.clone(), vocab, &mut rng)?;
        let w = config.net.width;
        let global_emb = store.add("local.zg", normal(&mut rng, &[global_vocab, w], 0.1));
        let spe_proj = Linear::with_std(&mut store, "local.spe", config.coord_channels(), w, 0.5, &mut rng);
        Ok(LocalSampler {
            config,
            store,
            net,
            global_emb,
            spe_proj,
            global_grid,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn window(&self) -> (usize, usize) {
        (self.config.window_rows, self.config.window_cols)
    }

    /// Condition rows `[embedded z_g | projected SPE]`.
    fn prefix(&self, t: &mut Tape, global: &TokenGrid, spe: &SpeGrid) -> Result<Var> {
        let (wh, ww) = self.window();
        let mut parts = Vec::new();
        if !self.config.no_global {
            if (global.rows, global.cols) != self.global_grid {
                return Err(Error::domain("local_sampler", "global grid has the wrong size"));
            }
            let table = t.param(&self.store, self.global_emb);
            parts.push(t.embedding(table, &global.idx)?);
        }
        if !self.config.no_sp {
            if (spe.rows, spe.cols) != (wh, ww) {
                return Err(Error::domain(
                    "local_sampler",
                    format!("SPE grid {}x{} does not match the {wh}x{ww} window", spe.rows, spe.cols),
                ));
            }
            let ch = self.config.coord_channels();
            let rows: Vec<f64> = spe.data.chunks(spe.channels).flat_map(|c| c[..ch].iter().copied()).collect();
            let s = t.constant(Tensor::new(&[wh * ww, ch], rows)?);
            parts.push(self.spe_proj.forward(t, &self.store, s)?);
        }
        if parts.is_empty() {
            return Err(Error::domain("local_sampler", "zero-length condition"));
        }
        Ok(t.concat_rows(&parts)?)
    }

    pub fn nll(&self, t: &mut Tape, ex: &LocalExample) -> Result<Var> {
        if (ex.target.rows, ex.target.cols) != self.window() {
            return Err(Error::domain("local_sampler", "target is not one window"));
        }
        let p = self.prefix(t, &ex.global, &ex.spe)?;
        self.net.nll(t, &self.store, p, &ex.target.idx)
    }

    pub fn train(&mut self, examples: &[LocalExample]) -> Result<SamplerLog> {
        if examples.is_empty() {
            return Err(Error::Data("local sampler training set is empty".into()));
        }
        let cfg = self.config.net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = adam_for(&self.store, cfg.lr);
        let mut log = SamplerLog::default();
        for step in 0..cfg.steps {
            adam.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
            let picks = batch_picks(&mut rng, examples.len(), cfg.batch);
            let this = &*self;
            let (mut grads, nlls) = batch_gradients(&self.store, picks.len(), |b, t| {
                let l = this.nll(t, &examples[picks[b]])?;
                Ok((l, t.value(l).item()))
            })?;
            grads.scale(1.0 / picks.len() as f64);
            adam.step(&mut self.store, &grads);
            let nll = nlls.iter().sum::<f64>() / nlls.len() as f64;
            if step % 50 == 0 || step + 1 == cfg.steps {
                log::debug!("local step {step}: nll {nll:.4}");
            }
            log.nll.push(nll);
            log.con.push(0.0);
        }
        self.trained = true;
        Ok(log)
    }

    /// Mean NLL per token over `examples`, without gradients.
    pub fn evaluate(&self, examples: &[LocalExample]) -> Result<f64> {
        let mut total = 0.0;
        for e in examples {
            let mut t = Tape::new(self.store.precision());
            let l = self.nll(&mut t, e)?;
            total += t.value(l).item();
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Fills the unknown positions of one window in raster order.
    fn fill_window(
        &self,
        global: &TokenGrid,
        spe: &SpeGrid,
        tokens: &mut [usize],
        known: &[bool],
        cfg: &SampleConfig,
        rng: &mut ChaCha8Rng,
        log_probs: &mut Vec<f64>,
    ) -> Result<()> {
        let mut t0 = Tape::new(self.store.precision());
        let pv = self.prefix(&mut t0, global, spe)?;
        let prefix = t0.value(pv).clone();
        for p in 0..tokens.len() {
            if known[p] {
                continue;
            }
            let mut t = Tape::new(self.store.precision());
            let pre = t.constant(prefix.clone());
            let l = self.net.logits(&mut t, &self.store, pre, &tokens[..p])?;
            let v = t.value(l).data();
            let (k, lp) = pick_token(&v[v.len() - self.net.vocab..], cfg, rng);
            tokens[p] = k;
            log_probs.push(lp);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        Ok(())
    }

    pub fn load(config: LocalSamplerConfig, global_grid: (usize, usize), global_vocab: usize, vocab: usize, path: &Path) -> Result<Self> {
        let mut s = LocalSampler::new(config, global_grid, global_vocab, vocab)?;
        checkpoint::load_into(&mut s.store, path)?;
        s.trained = true;
        Ok(s)
    }
}

/// Top-left token positions of the sliding windows over a `lattice`.
///
/// Rows advance by `stride` with a last window flush with the bottom.
/// Columns advance by `stride` until the remaining columns fit one stride;
/// the final window then starts `stride` columns before the right edge
/// and wraps, so its context holds the tokens of column 0 onward.
pub fn window_starts(lattice: (usize, usize), window: (usize, usize), stride: usize) -> Result<Vec<(usize, usize)>> {
    let (ht, wt) = lattice;
    let (wh, ww) = window;
    if wh > ht || ww > wt {
        return Err(Error::domain(
            "generate_panorama",
            format!("{wh}x{ww} window is larger than the {ht}x{wt} token lattice"),
        ));
    }
    if stride == 0 || stride > wh.min(ww) {
        return Err(Error::domain("generate_panorama", "stride must be in 1..=window"));
    }
    let mut rows: Vec<usize> = (0..).map(|k| k * stride).take_while(|r| r + wh <= ht).collect();
    if *rows.last().expect("first row fits") + wh < ht {
        rows.push(ht - wh);
    }
    let cols = if wt == ww {
        vec![0]
    } else {
        let mut cols: Vec<usize> = (0..)
            .map(|k| k * stride)
            .take_while(|c| *c == 0 || c + ww <= wt - stride)
            .collect();
        let last = *cols.last().expect("column 0");
        if last + ww < wt - stride {
            cols.push(wt - stride - ww);
        }
        cols.push(wt - stride);
        cols
    };
    Ok(rows.iter().flat_map(|r| cols.iter().map(move |c| (*r, *c))).collect())
}

/// Sphere geometry of the window at token `(r0, c0)`.
pub fn window_geom(start: (usize, usize), window: (usize, usize), lattice: (usize, usize), factor: usize) -> PatchGeom {
    PatchGeom {
        top: start.0 * factor,
        left: start.1 * factor,
        height: window.0 * factor,
        width: window.1 * factor,
        pano_h: lattice.0 * factor,
        pano_w: lattice.1 * factor,
    }
}

/// Training windows cut from a panorama's local token lattice, with
/// columns wrapping around.
pub fn local_examples(
    global: &TokenGrid,
    lattice: &TokenGrid,
    starts: &[(usize, usize)],
    window: (usize, usize),
    factor: usize,
    octaves: usize,
) -> Result<Vec<LocalExample>> {
    starts
        .iter()
        .map(|&(r0, c0)| {
            if r0 + window.0 > lattice.rows {
                return Err(Error::domain("local_examples", "window below the lattice"));
            }
            let geom = window_geom((r0, c0), window, (lattice.rows, lattice.cols), factor);
            let spe = patch_spe(&geom, window, octaves)?;
            let idx = (0..window.0)
                .flat_map(|r| (0..window.1).map(move |c| (r, c)))
                .map(|(r, c)| lattice.get(r0 + r, (c0 + c) % lattice.cols))
                .collect();
            Ok(LocalExample {
                global: global.clone(),
                spe,
                target: TokenGrid::new(window.0, window.1, idx)?,
            })
        })
        .collect()
}

/// A generated panorama: the assembled local lattice and its decoding.
#[derive(Debug, Clone)]
pub struct Panorama {
    pub tokens: TokenGrid,
    pub log_probs: Vec<f64>,
    pub image: crate::raster::LdrImage,
}

/// Slides the local sampler over a `lattice`-sized token grid conditioned
/// on `global`, then decodes the assembled grid. Tokens produced by one
/// window are frozen context for every later window that overlaps them.
pub fn generate_panorama(
    sampler: &LocalSampler,
    tokenizer: &Tokenizer,
    global: &TokenGrid,
    lattice: (usize, usize),
    cfg: &SampleConfig,
) -> Result<Panorama> {
    if !sampler.is_trained() {
        return Err(Error::Missing {
            stage: "train-local".into(),
            msg: "local sampler has not been trained".into(),
        });
    }
    let window = sampler.window();
    let factor = tokenizer.config.factor();
    let starts = window_starts(lattice, window, sampler.config.stride)?;
    let (ht, wt) = lattice;
    let mut grid = vec![0usize; ht * wt];
    let mut done = vec![false; ht * wt];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log_probs = Vec::new();
    for &(r0, c0) in &starts {
        let cells: Vec<usize> = (0..window.0)
            .flat_map(|r| (0..window.1).map(move |c| (r0 + r) * wt + (c0 + c) % wt))
            .collect();
        if cells.iter().all(|&i| done[i]) {
            continue;
        }
        let geom = window_geom((r0, c0), window, lattice, factor);
        let spe = patch_spe(&geom, window, sampler.config.octaves)?;
        let mut toks: Vec<usize> = cells.iter().map(|&i| grid[i]).collect();
        let known: Vec<bool> = cells.iter().map(|&i| done[i]).collect();
        sampler.fill_window(global, &spe, &mut toks, &known, cfg, &mut rng, &mut log_probs)?;
        for (&i, k) in cells.iter().zip(toks) {
            grid[i] = k;
            done[i] = true;
        }
    }
    let tokens = TokenGrid::new(ht, wt, grid)?;
    let image = tokenizer.decode_any(&tokens)?;
    Ok(Panorama {
        tokens,
        log_probs,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> TransformerConfig {
        TransformerConfig {
            layers: 1,
            heads: 2,
            width: 16,
            context: 64,
            ff_mult: 2,
            lr: 1e-2,
            steps: 0,
            batch: 2,
            seed: 3,
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Transformer::new(&mut store, "t", tiny_net(), 7, &mut rng).unwrap();
        let pre = normal(&mut rng, &[3, 16], 1.0);
        let run = |toks: &[usize]| {
            let mut t = Tape::new(Precision::F64);
            let p = t.input(pre.clone());
            let l = net.logits(&mut t, &store, p, toks).unwrap();
            t.value(l).data().to_vec()
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let b = run(&[1, 2, 3, 6, 0]);
        assert_eq!(&a[..4 * 7], &b[..4 * 7]);
        assert_ne!(&a[4 * 7..], &b[4 * 7..]);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let logits = [0.1, 2.0, -1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SampleConfig {
            temperature: 1.0,
            top_k: 1,
            seed: 0,
        };
        assert_eq!(pick_token(&logits, &cfg, &mut rng).0, 1);
        assert_eq!(pick_token(&logits, &SampleConfig::greedy(), &mut rng).0, 1);
        let (k, lp) = pick_token(&logits, &SampleConfig::default(), &mut rng);
        assert!(k < 4 && lp.is_finite() && lp < 0.0);
    }

    #[test]
    fn window_schedule_covers_and_wraps() {
        let s = window_starts((8, 16), (4, 4), 2).unwrap();
        let rows: Vec<usize> = s.iter().map(|p| p.0).collect();
        assert!(rows.contains(&4) && !rows.contains(&6));
        let cols: Vec<usize> = s.iter().filter(|p| p.0 == 0).map(|p| p.1).collect();
        assert_eq!(cols, vec![0, 2, 4, 6, 8, 10, 14]);
        for (ht, wt, st) in [(4, 4, 2), (5, 17, 2), (6, 9, 3), (4, 6, 2), (4, 5, 1)] {
            let s = window_starts((ht, wt), (4, 4), st).unwrap();
            let mut hit = vec![false; ht * wt];
            for (r, c) in s {
                for dr in 0..4 {
                    for dc in 0..4 {
                        hit[(r + dr) * wt + (c + dc) % wt] = true;
                    }
                }
            }
            assert!(hit.iter().all(|h| *h), "{ht}x{wt} stride {st}");
        }
        assert_eq!(window_starts((4, 4), (4, 4), 2).unwrap(), vec![(0, 0)]);
        assert!(window_starts((3, 8), (4, 4), 2).is_err());
    }

    #[test]
    fn local_rejects_empty_condition_and_bad_spe() {
        let cfg = LocalSamplerConfig {
            net: tiny_net(),
            no_global: true,
            no_sp: true,
            ..Default::default()
        };
        assert!(LocalSampler::new(cfg, (1, 2), 4, 4).is_err());
        let cfg = LocalSamplerConfig {
            net: tiny_net(),
            window_rows: 2,
            window_cols: 2,
            stride: 1,
            ..Default::default()
        };
        let s = LocalSampler::new(cfg, (1, 2), 4, 4).unwrap();
        let g = TokenGrid::new(1, 2, vec![0, 1]).unwrap();
        let lattice = TokenGrid::new(2, 4, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let mut ex = local_examples(&g, &lattice, &[(0, 3)], (2, 2), 4, 4).unwrap().remove(0);
        assert_eq!(ex.target.idx, vec![3, 0, 0, 3]);
        let mut t = Tape::new(Precision::F32);
        assert!(s.nll(&mut t, &ex).is_ok());
        ex.spe.rows = 1;
        assert!(s.nll(&mut t, &ex).is_err());
    }
}
