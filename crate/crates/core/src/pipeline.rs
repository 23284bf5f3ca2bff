//! Stage-wise orchestration over a work directory.
//!
//! Each stage reads the artifacts of earlier stages from
//! [`Paths`](crate::config::Paths) and writes its own, with a
//! `<artifact>.manifest.toml` sidecar recording the command, its arguments,
//! the config hash and the full resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::datapipe::{
    build_pairs, decode_pairs, encode_pairs, read_manifest, write_corpus, CorpusLayout, ManifestRecord, ScenePair,
    Split,
};
use crate::embedding::{content_key, EmbeddingProvider, EmbeddingStore, PrecomputedEmbedder, ToyEmbedder};
use crate::error::{Error, Result};
use crate::raster::{self, png8, rgbe, HdrImage, Image, LdrImage};
use crate::samplers::{
    generate_panorama, local_examples, window_starts, GlobalExample, GlobalSampler, LocalSampler, Panorama,
    SampleConfig,
};
use crate::sphere::PatchGeom;
use crate::sritmo::{SrItmo, SrItmoLoss};
use crate::vq::{TokenGrid, Tokenizer};

pub const GLOBAL_TOKENIZER: &str = "global_tokenizer";
pub const LOCAL_TOKENIZER: &str = "local_tokenizer";
pub const GLOBAL_SAMPLER: &str = "global_sampler";
pub const LOCAL_SAMPLER: &str = "local_sampler";
pub const SRITMO: &str = "sritmo";

/// Contents of a `.manifest.toml` sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub results: BTreeMap<String, f64>,
    pub config: PipelineConfig,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            args: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    pub fn arg(mut self, k: &str, v: impl ToString) -> Self {
        self.args.insert(k.to_string(), v.to_string());
        self
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn result(mut self, k: &str, v: f64) -> Self {
        self.results.insert(k.to_string(), v);
        self
    }

    /// Writes the sidecar next to `artifact` and returns its path.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let path = sidecar_path(artifact);
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.toml");
    artifact.with_file_name(name)
}

fn require(path: &Path, stage: &str, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing {
            stage: stage.to_string(),
            msg: format!("{what} not found at {}; run `panogen {stage}` first", path.display()),
        })
    }
}

/// The embedding provider selected by the config.
pub fn embedder(cfg: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>> {
    match &cfg.embedding.precomputed {
        Some(p) => {
            let store = EmbeddingStore::load(p)?;
            if store.dim() != cfg.embedding.dim {
                return Err(Error::Config(format!(
                    "embedding.dim is {} but {} holds {}-d vectors",
                    cfg.embedding.dim,
                    p.display(),
                    store.dim()
                )));
            }
            Ok(Box::new(PrecomputedEmbedder { store }))
        }
        None => Ok(Box::new(ToyEmbedder::new(cfg.embedding.dim, cfg.embedding.seed))),
    }
}

/// What `prepare-data` produced.
#[derive(Debug, Clone)]
pub struct PrepareReport {
    pub records: usize,
    pub pairs: usize,
    pub embeddings: usize,
}

/// Renders the procedural corpus, cuts SR-iTMO pairs from the training
/// panoramas and embeds every LDR panorama.
pub fn prepare_data(cfg: &PipelineConfig) -> Result<PrepareReport> {
    let layout = CorpusLayout::new(cfg.paths.corpus());
    let corpus = write_corpus(&layout, &cfg.corpus(), cfg.data.tonemap)?;
    let train: Vec<&ManifestRecord> = corpus.records.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Data("the split left no training panoramas".into()));
    }
    let pair_cfg = cfg.pairs();
    let per = cfg.data.pairs.div_ceil(train.len());
    let seed = cfg.pair_seed();
    let built = panogen_autodiff::parallel::map_indexed(train.len(), |k| {
        let hdr = rgbe::read(&layout.hdr(&train[k].id))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        build_pairs(&train[k].id, &hdr, per, &pair_cfg, &mut rng)
    });
    let mut pairs = Vec::with_capacity(cfg.data.pairs);
    for b in built {
        pairs.extend(b?);
    }
    pairs.truncate(cfg.data.pairs);
    std::fs::write(layout.pairs(), encode_pairs(&pairs, pair_cfg.base)?)?;

    let emb = embedder(cfg)?;
    let mut store = EmbeddingStore::new(emb.dim());
    for r in &corpus.records {
        let bytes = std::fs::read(layout.ldr(&r.id))?;
        let key = content_key(&bytes);
        if store.get(&key).is_none() {
            store.insert(&key, &emb.embed_image(&png8::decode(&bytes)?)?)?;
        }
    }
    store.save(&cfg.paths.embeddings())?;

    RunManifest::new("prepare-data", cfg)
        .output(&layout.manifest())
        .output(&layout.pairs())
        .output(&cfg.paths.embeddings())
        .result("records", corpus.records.len() as f64)
        .result("pairs", pairs.len() as f64)
        .write_beside(&layout.manifest())?;
    Ok(PrepareReport {
        records: corpus.records.len(),
        pairs: pairs.len(),
        embeddings: store.len(),
    })
}

/// A training panorama with its LDR file's content key.
pub struct TrainImage {
    pub record: ManifestRecord,
    pub key: String,
    pub ldr: LdrImage,
}

pub fn load_split(cfg: &PipelineConfig, split: Split) -> Result<Vec<TrainImage>> {
    let layout = CorpusLayout::new(cfg.paths.corpus());
    require(&layout.manifest(), "prepare-data", "corpus manifest")?;
    let mut out = Vec::new();
    for record in read_manifest(&layout.manifest())? {
        if record.split != split {
            continue;
        }
        let bytes = std::fs::read(layout.ldr(&record.id))?;
        let ldr = png8::decode(&bytes)?;
        if ldr.height != cfg.data.height || ldr.width != 2 * cfg.data.height {
            return Err(Error::Data(format!(
                "{} is {}x{}, config expects {}x{}",
                record.id,
                ldr.height,
                ldr.width,
                cfg.data.height,
                2 * cfg.data.height
            )));
        }
        out.push(TrainImage {
            key: content_key(&bytes),
            record,
            ldr,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("corpus has no {} panoramas", split.as_str())));
    }
    Ok(out)
}

/// The downsampled panorama the global tokenizer sees.
pub fn global_view(cfg: &PipelineConfig, ldr: &LdrImage) -> Result<LdrImage> {
    raster::resample_area(ldr, cfg.global_tokenizer.input_h, cfg.global_tokenizer.input_w)
}

/// Token-aligned random crops for the local tokenizer.
pub fn local_crops(cfg: &PipelineConfig, images: &[TrainImage]) -> Result<Vec<LdrImage>> {
    let tc = &cfg.local_tokenizer;
    let f = tc.factor();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.local_tokenizer().seed ^ 0xc20b);
    let mut out = Vec::new();
    for im in images {
        let rows = (im.ldr.height - tc.input_h) / f + 1;
        let cols = im.ldr.width / f;
        for _ in 0..cfg.data.local_crops {
            let top = rng.random_range(0..rows) * f;
            let left = rng.random_range(0..cols) * f;
            out.push(im.ldr.crop_wrapped(top, left, tc.input_h, tc.input_w)?);
        }
    }
    Ok(out)
}

pub fn train_codebooks(cfg: &PipelineConfig) -> Result<(Tokenizer, Tokenizer)> {
    let images = load_split(cfg, Split::Train)?;
    let globals: Vec<LdrImage> = images.iter().map(|im| global_view(cfg, &im.ldr)).collect::<Result<_>>()?;
    let mut g = Tokenizer::new(cfg.global_tokenizer(), "gtok")?;
    let glog = g.train(&globals)?;
    let mut l = Tokenizer::new(cfg.local_tokenizer(), "ltok")?;
    let llog = l.train(&local_crops(cfg, &images)?)?;
    std::fs::create_dir_all(cfg.paths.checkpoints())?;
    for (tok, name, log) in [(&g, GLOBAL_TOKENIZER, &glog), (&l, LOCAL_TOKENIZER, &llog)] {
        let path = cfg.paths.checkpoint(name);
        tok.save(&path)?;
        let last = log.losses.last().map(|p| p.rec).unwrap_or(f64::NAN);
        RunManifest::new("train-codebooks", cfg)
            .output(&path)
            .result("final_rec", last)
            .result("resets", log.resets as f64)
            .write_beside(&path)?;
    }
    Ok((g, l))
}

pub fn load_tokenizers(cfg: &PipelineConfig) -> Result<(Tokenizer, Tokenizer)> {
    let gp = cfg.paths.checkpoint(GLOBAL_TOKENIZER);
    let lp = cfg.paths.checkpoint(LOCAL_TOKENIZER);
    require(&gp, "train-codebooks", "global tokenizer checkpoint")?;
    require(&lp, "train-codebooks", "local tokenizer checkpoint")?;
    Ok((
        Tokenizer::load(cfg.global_tokenizer(), "gtok", &gp)?,
        Tokenizer::load(cfg.local_tokenizer(), "ltok", &lp)?,
    ))
}

pub fn load_store(cfg: &PipelineConfig) -> Result<EmbeddingStore> {
    let p = cfg.paths.embeddings();
    require(&p, "prepare-data", "embedding store")?;
    EmbeddingStore::load(&p)
}

pub fn global_examples(cfg: &PipelineConfig, tok: &Tokenizer, store: &EmbeddingStore) -> Result<Vec<GlobalExample>> {
    load_split(cfg, Split::Train)?
        .iter()
        .map(|im| {
            let v = store
                .get(&im.key)
                .ok_or_else(|| Error::Data(format!("no embedding for {} in the store", im.record.id)))?;
            Ok(GlobalExample {
                tokens: tok.encode(&global_view(cfg, &im.ldr)?)?,
                image_embedding: v.to_vec(),
            })
        })
        .collect()
}

pub fn new_global_sampler(cfg: &PipelineConfig) -> Result<GlobalSampler> {
    GlobalSampler::new(
        cfg.global_sampler(),
        cfg.global_tokenizer.token_dims(),
        cfg.global_tokenizer.codebook_size,
        cfg.embedding.dim,
    )
}

pub fn new_local_sampler(cfg: &PipelineConfig) -> Result<LocalSampler> {
    LocalSampler::new(
        cfg.local_sampler(),
        cfg.global_tokenizer.token_dims(),
        cfg.global_tokenizer.codebook_size,
        cfg.local_tokenizer.codebook_size,
    )
}

pub fn train_global(cfg: &PipelineConfig) -> Result<GlobalSampler> {
    let (g, _) = load_tokenizers(cfg)?;
    let store = load_store(cfg)?;
    let examples = global_examples(cfg, &g, &store)?;
    let mut s = new_global_sampler(cfg)?;
    let log = s.train(&examples, &store)?;
    let path = cfg.paths.checkpoint(GLOBAL_SAMPLER);
    s.save(&path)?;
    RunManifest::new("train-global", cfg)
        .input(&cfg.paths.checkpoint(GLOBAL_TOKENIZER))
        .input(&cfg.paths.embeddings())
        .output(&path)
        .result("final_nll", log.nll.last().copied().unwrap_or(f64::NAN))
        .write_beside(&path)?;
    Ok(s)
}

/// All sliding-window examples of every training panorama.
pub fn local_training_set(cfg: &PipelineConfig, g: &Tokenizer, l: &Tokenizer) -> Result<Vec<crate::samplers::LocalExample>> {
    let lattice = cfg.lattice();
    let ls = &cfg.local_sampler;
    let window = (ls.window_rows, ls.window_cols);
    let starts = window_starts(lattice, window, ls.stride)?;
    let mut out = Vec::new();
    for im in load_split(cfg, Split::Train)? {
        let global = g.encode(&global_view(cfg, &im.ldr)?)?;
        let full = l.encode_any(&im.ldr)?;
        out.extend(local_examples(&global, &full, &starts, window, l.config.factor(), ls.octaves)?);
    }
    Ok(out)
}

pub fn train_local(cfg: &PipelineConfig) -> Result<LocalSampler> {
    let (g, l) = load_tokenizers(cfg)?;
    let examples = local_training_set(cfg, &g, &l)?;
    let mut s = new_local_sampler(cfg)?;
    let log = s.train(&examples)?;
    let path = cfg.paths.checkpoint(LOCAL_SAMPLER);
    s.save(&path)?;
    RunManifest::new("train-local", cfg)
        .input(&cfg.paths.checkpoint(GLOBAL_TOKENIZER))
        .input(&cfg.paths.checkpoint(LOCAL_TOKENIZER))
        .output(&path)
        .result("final_nll", log.nll.last().copied().unwrap_or(f64::NAN))
        .write_beside(&path)?;
    Ok(s)
}

pub fn load_pairs(cfg: &PipelineConfig) -> Result<Vec<ScenePair>> {
    let p = CorpusLayout::new(cfg.paths.corpus()).pairs();
    require(&p, "prepare-data", "training pairs")?;
    Ok(decode_pairs(&std::fs::read(&p)?)?.1)
}

pub fn train_sritmo(cfg: &PipelineConfig) -> Result<(SrItmo, Vec<SrItmoLoss>)> {
    let pairs = load_pairs(cfg)?;
    let mut m = SrItmo::new(cfg.sritmo())?;
    let log = m.train(&pairs)?;
    let path = cfg.paths.checkpoint(SRITMO);
    std::fs::create_dir_all(cfg.paths.checkpoints())?;
    m.save(&path)?;
    let last = log.last().map(|l| l.total()).unwrap_or(f64::NAN);
    RunManifest::new("train-sritmo", cfg)
        .input(&CorpusLayout::new(cfg.paths.corpus()).pairs())
        .output(&path)
        .result("final_loss", last)
        .write_beside(&path)?;
    Ok((m, log))
}

/// Everything Stage I needs at inference time.
pub struct Generator {
    pub config: PipelineConfig,
    pub embedder: Box<dyn EmbeddingProvider>,
    pub store: EmbeddingStore,
    pub local_tokenizer: Tokenizer,
    pub global: GlobalSampler,
    pub local: LocalSampler,
}

/// A generated panorama and the global grid it was conditioned on.
pub struct Generated {
    pub global: TokenGrid,
    pub panorama: Panorama,
}

impl Generator {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let store = load_store(cfg)?;
        let (_, l) = load_tokenizers(cfg)?;
        let gp = cfg.paths.checkpoint(GLOBAL_SAMPLER);
        let lp = cfg.paths.checkpoint(LOCAL_SAMPLER);
        require(&gp, "train-global", "global sampler checkpoint")?;
        require(&lp, "train-local", "local sampler checkpoint")?;
        let gt = &cfg.global_tokenizer;
        let global = GlobalSampler::load(cfg.global_sampler(), gt.token_dims(), gt.codebook_size, cfg.embedding.dim, &gp)?;
        let local = LocalSampler::load(
            cfg.local_sampler(),
            gt.token_dims(),
            gt.codebook_size,
            cfg.local_tokenizer.codebook_size,
            &lp,
        )?;
        Ok(Generator {
            config: cfg.clone(),
            embedder: embedder(cfg)?,
            store,
            local_tokenizer: l,
            global,
            local,
        })
    }

    fn sample_config(&self, seed: u64) -> SampleConfig {
        SampleConfig {
            seed,
            ..self.config.sampling
        }
    }

    /// Text → embedding → global grid → local lattice → LDR panorama.
    /// `fixed` pins global tokens, row-major; pass an empty slice for none.
    pub fn generate(&self, text: &str, seed: u64, fixed: &[Option<usize>]) -> Result<Generated> {
        if text.trim().is_empty() {
            return Err(Error::domain("generate", "prompt is empty"));
        }
        let q = self.embedder.embed_text(text)?;
        let bundle = self.global.condition(&q, &self.store)?;
        let sc = self.sample_config(seed);
        let out = if fixed.is_empty() {
            self.global.sample(&bundle, &sc)?
        } else {
            self.global.sample_with(&bundle, &sc, fixed)?
        };
        let local_cfg = self.sample_config(seed ^ 0x10ca_1000);
        let panorama = generate_panorama(&self.local, &self.local_tokenizer, &out.grid, self.config.lattice(), &local_cfg)?;
        Ok(Generated {
            global: out.grid,
            panorama,
        })
    }

    /// Resamples the global tokens in columns `cols` under a new prompt,
    /// keeping the rest of `base`, then regenerates the local lattice.
    pub fn edit(&self, base: &TokenGrid, text: &str, cols: std::ops::Range<usize>, seed: u64) -> Result<Generated> {
        let (rows, width) = self.global.grid();
        if (base.rows, base.cols) != (rows, width) {
            return Err(Error::domain(
                "edit",
                format!("base grid is {}x{}, the global sampler uses {rows}x{width}", base.rows, base.cols),
            ));
        }
        if cols.start >= cols.end || cols.end > width {
            return Err(Error::domain(
                "edit",
                format!("region {}..{} is not a non-empty column range within 0..{width}", cols.start, cols.end),
            ));
        }
        let fixed: Vec<Option<usize>> = (0..rows * width)
            .map(|i| (!cols.contains(&(i % width))).then(|| base.idx[i]))
            .collect();
        self.generate(text, seed, &fixed)
    }
}

/// Parses `a..b` or `a:b` into a half-open column range.
pub fn parse_region(s: &str) -> Result<std::ops::Range<usize>> {
    let bad = || Error::Config(format!("region {s:?} must look like START..END"));
    let (a, b) = s.split_once("..").or_else(|| s.split_once(':')).ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    Ok(a..b)
}

pub fn load_sritmo(cfg: &PipelineConfig) -> Result<SrItmo> {
    let p = cfg.paths.checkpoint(SRITMO);
    require(&p, "train-sritmo", "SR-iTMO checkpoint")?;
    SrItmo::load(cfg.sritmo(), &p)
}

/// Upscales a full LDR panorama by `factor` and lifts it to HDR.
pub fn upscale(model: &SrItmo, ldr: &LdrImage, factor: f64) -> Result<(LdrImage, HdrImage)> {
    let extent = PatchGeom {
        top: 0,
        left: 0,
        height: ldr.height,
        width: ldr.width,
        pano_h: ldr.height,
        pano_w: ldr.width,
    };
    model.upscale(ldr, factor, extent)
}

/// Pooled MAE and RMSE over every value of every image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItmoScores {
    pub mae: f64,
    pub rmse: f64,
    pub images: usize,
}

/// Reads `pred gt` path pairs, one per line, relative to the manifest.
pub fn eval_itmo(manifest: &Path) -> Result<ItmoScores> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest.display())))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let (mut abs, mut sq, mut n, mut images) = (0.0, 0.0, 0usize, 0usize);
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::Data(format!("{}:{}: expected `pred gt`", manifest.display(), k + 1)));
        }
        let pred = read_hdr(&dir.join(f[0]))?;
        let gt = read_hdr(&dir.join(f[1]))?;
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!("{}:{}: image sizes differ", manifest.display(), k + 1)));
        }
        for (a, b) in pred.data.iter().zip(&gt.data) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
        }
        n += gt.data.len();
        images += 1;
    }
    if images == 0 {
        return Err(Error::Data(format!("{} lists no image pairs", manifest.display())));
    }
    Ok(ItmoScores {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        images,
    })
}

fn read_hdr(p: &Path) -> Result<Image> {
    rgbe::read(p).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", p.display())),
        other => other,
    })
}
