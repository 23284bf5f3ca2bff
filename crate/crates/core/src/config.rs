//! Pipeline configuration.
//!
//! A config file is TOML with one table per stage. Every key has a default
//! taken from the selected `preset`; a file only needs the keys it changes.
//! Unknown keys are rejected. Ablation switches live in `[ablation]` and are
//! copied into the stage configs by [`PipelineConfig::global_sampler`] and
//! friends.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{CalibrationPolicy, CorpusConfig, PairConfig};
use crate::error::{Error, Result};
use crate::raster::{Tonemap, DEFAULT_SIGMA};
use crate::samplers::{GlobalSamplerConfig, LocalSamplerConfig, SampleConfig, TransformerConfig};
use crate::sritmo::SrItmoConfig;
use crate::vq::TokenizerConfig;

/// Environment variable that overrides the top-level `seed`.
pub const SEED_ENV: &str = "T2L_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// CPU-sized: 128×256 panoramas, small networks, minutes per stage.
    #[default]
    Desk,
    /// Full scale: 512×1024 panoramas, 256×256 local patches.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of all artifacts: corpus, embeddings, checkpoints.
    pub work: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { work: PathBuf::from("work") }
    }
}

impl Paths {
    pub fn corpus(&self) -> PathBuf {
        self.work.join("corpus")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.work.join("embeddings.t2lemb")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.work.join("checkpoints")
    }
    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.checkpoints().join(format!("{stage}.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    /// Panorama height; width is twice this.
    pub height: usize,
    /// Extra horizontally rotated copies per scene.
    pub rotations: usize,
    pub train_frac: f64,
    /// SR-iTMO training pairs drawn over all training panoramas.
    pub pairs: usize,
    /// Low-resolution side of each training pair.
    pub pair_base: usize,
    /// Random token-aligned crops per panorama for the local tokenizer.
    pub local_crops: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma: f64,
    pub tonemap: Tonemap,
    pub on_calibration_failure: CalibrationPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 16,
            height: 128,
            rotations: 1,
            train_frac: 0.75,
            pairs: 200,
            pair_base: 16,
            local_crops: 8,
            beta_min: 1.0,
            beta_max: 4.0,
            sigma: DEFAULT_SIGMA,
            tonemap: Tonemap::Luminance,
            on_calibration_failure: CalibrationPolicy::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub seed: u64,
    /// A `T2LEMB1` store of exported embeddings. When set it replaces the
    /// toy embedder for both texts and images.
    pub precomputed: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 64,
            seed: 0,
            precomputed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_global: bool,
    pub no_sp: bool,
    pub no_spe: bool,
    pub no_knn: bool,
    pub no_lcon: bool,
    pub single_mlp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    /// Mixed into every stage seed.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub embedding: EmbeddingConfig,
    pub global_tokenizer: TokenizerConfig,
    pub local_tokenizer: TokenizerConfig,
    pub global_sampler: GlobalSamplerConfig,
    pub local_sampler: LocalSamplerConfig,
    pub sritmo: SrItmoConfig,
    pub sampling: SampleConfig,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    fn desk() -> Self {
        let tok = |base: TokenizerConfig, steps: usize| TokenizerConfig {
            base_channels: 16,
            max_channels: 64,
            code_dim: 32,
            codebook_size: 128,
            steps,
            dead_after: 50,
            ..base
        };
        let net = TransformerConfig {
            layers: 2,
            heads: 4,
            width: 128,
            context: 64,
            steps: 400,
            ..TransformerConfig::default()
        };
        PipelineConfig {
            preset: Preset::Desk,
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            embedding: EmbeddingConfig::default(),
            global_tokenizer: tok(TokenizerConfig::global_desk(), 600),
            local_tokenizer: tok(TokenizerConfig::local_desk(), 600),
            global_sampler: GlobalSamplerConfig {
                net: net.clone(),
                ..GlobalSamplerConfig::default()
            },
            local_sampler: LocalSamplerConfig {
                net,
                ..LocalSamplerConfig::default()
            },
            sritmo: SrItmoConfig {
                enc_blocks: 2,
                enc_width: 32,
                latent_dim: 32,
                hidden: 128,
                itmo_hidden: 64,
                samples: 256,
                steps: 1500,
                ..SrItmoConfig::default()
            },
            sampling: SampleConfig::default(),
            ablation: Ablation::default(),
        }
    }

    fn full() -> Self {
        let tok = |input_h, input_w, circular| TokenizerConfig {
            input_h,
            input_w,
            stages: 4,
            base_channels: 128,
            max_channels: 512,
            code_dim: 256,
            codebook_size: 1024,
            circular,
            steps: 60_000,
            batch: 12,
            dead_after: 200,
            ..TokenizerConfig::global_desk()
        };
        let net = |context, steps, batch| TransformerConfig {
            layers: 24,
            heads: 16,
            width: 1024,
            context,
            ff_mult: 4,
            lr: 4.5e-6 * batch as f64,
            steps,
            batch,
            seed: 0,
        };
        PipelineConfig {
            preset: Preset::Full,
            seed: 0,
            paths: Paths::default(),
            data: DataConfig {
                scenes: 4392,
                height: 512,
                rotations: 3,
                pairs: 200_000,
                pair_base: 48,
                ..DataConfig::default()
            },
            embedding: EmbeddingConfig {
                dim: 512,
                ..EmbeddingConfig::default()
            },
            global_tokenizer: tok(128, 256, true),
            local_tokenizer: tok(256, 256, false),
            global_sampler: GlobalSamplerConfig {
                net: net(256, 100_000, 16),
                ..GlobalSamplerConfig::default()
            },
            local_sampler: LocalSamplerConfig {
                net: net(1024, 100_000, 24),
                window_rows: 16,
                window_cols: 16,
                stride: 8,
                ..LocalSamplerConfig::default()
            },
            sritmo: SrItmoConfig {
                steps: 1_000_000,
                batch: 16,
                samples: 2304,
                ..SrItmoConfig::default()
            },
            sampling: SampleConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// Parses TOML over the defaults of the preset it names.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(format!("preset: {e}")))?,
        };
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, user);
        let cfg: PipelineConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the desk defaults when `path` is `None`, then
    /// applies the `T2L_SEED` override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML, ablation flags included.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.global_tokenizer.validate()?;
        self.local_tokenizer.validate()?;
        self.global_sampler.net.validate()?;
        self.local_sampler.net.validate()?;
        self.sritmo.validate()?;
        let d = &self.data;
        if d.scenes == 0 || d.height == 0 {
            return Err(Error::Config("data: scenes and height must be positive".into()));
        }
        if !(d.train_frac > 0.0 && d.train_frac <= 1.0) {
            return Err(Error::Config("data: train_frac must be in (0, 1]".into()));
        }
        if !(d.beta_min >= 1.0 && d.beta_max >= d.beta_min) {
            return Err(Error::Config("data: need 1 <= beta_min <= beta_max".into()));
        }
        if self.embedding.dim == 0 {
            return Err(Error::Config("embedding: dim must be positive".into()));
        }
        let f = self.local_tokenizer.factor();
        let (h, w) = (d.height, 2 * d.height);
        if h % f != 0 || h < self.local_tokenizer.input_h || w < self.local_tokenizer.input_w {
            return Err(Error::Config(format!(
                "data.height {h} must be a multiple of the local factor {f} and at least one local patch"
            )));
        }
        let (wr, wc) = (self.local_sampler.window_rows, self.local_sampler.window_cols);
        if (wr, wc) != self.local_tokenizer.token_dims() {
            return Err(Error::Config(format!(
                "local_sampler window {wr}x{wc} must equal the local tokenizer grid {:?}",
                self.local_tokenizer.token_dims()
            )));
        }
        Ok(())
    }

    fn mix(&self, stage_seed: u64) -> u64 {
        stage_seed ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            scenes: self.data.scenes,
            height: self.data.height,
            rotations: self.data.rotations,
            train_frac: self.data.train_frac,
            seed: self.mix(0xc0),
        }
    }

    pub fn pairs(&self) -> PairConfig {
        PairConfig {
            base: self.data.pair_base,
            beta_min: self.data.beta_min,
            beta_max: self.data.beta_max,
            sigma: self.data.sigma,
            tonemap: self.data.tonemap,
            on_calibration_failure: self.data.on_calibration_failure,
        }
    }

    pub fn pair_seed(&self) -> u64 {
        self.mix(0xa1)
    }

    pub fn global_tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            seed: self.mix(self.global_tokenizer.seed),
            ..self.global_tokenizer.clone()
        }
    }

    pub fn local_tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            seed: self.mix(self.local_tokenizer.seed ^ 1),
            ..self.local_tokenizer.clone()
        }
    }

    pub fn global_sampler(&self) -> GlobalSamplerConfig {
        let mut c = self.global_sampler.clone();
        c.net.seed = self.mix(c.net.seed ^ 2);
        c.no_knn = self.ablation.no_knn;
        c.no_lcon = self.ablation.no_lcon;
        c
    }

    pub fn local_sampler(&self) -> LocalSamplerConfig {
        let mut c = self.local_sampler.clone();
        c.net.seed = self.mix(c.net.seed ^ 3);
        c.no_global = self.ablation.no_global;
        c.no_sp = self.ablation.no_sp;
        c.no_spe = self.ablation.no_spe;
        c
    }

    pub fn sritmo(&self) -> SrItmoConfig {
        SrItmoConfig {
            seed: self.mix(self.sritmo.seed ^ 4),
            single_mlp: self.ablation.single_mlp,
            ..self.sritmo.clone()
        }
    }

    /// Local token lattice of a full panorama.
    pub fn lattice(&self) -> (usize, usize) {
        let f = self.local_tokenizer.factor();
        (self.data.height / f, 2 * self.data.height / f)
    }
}

fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (k, v) in user {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                base.insert(k, toml::Value::Table(merge(b, u)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        for p in [Preset::Desk, Preset::Full] {
            let c = PipelineConfig::preset(p);
            c.validate().unwrap();
            assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn partial_file_overlays_preset() {
        let c = PipelineConfig::from_toml("seed = 9\n[sritmo]\nsteps = 7\n[ablation]\nno_spe = true\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.sritmo.steps, 7);
        assert_eq!(c.sritmo.hidden, PipelineConfig::default().sritmo.hidden);
        assert!(c.local_sampler().no_spe);
        assert!(!c.global_sampler().no_knn);
    }

    #[test]
    fn full_preset_selects_full_sizes() {
        let c = PipelineConfig::from_toml("preset = \"full\"").unwrap();
        assert_eq!(c.global_tokenizer.token_dims(), (8, 16));
        assert_eq!(c.local_tokenizer.token_dims(), (16, 16));
        assert_eq!(c.lattice(), (32, 64));
        assert_eq!(c.local_tokenizer.code_dim, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["colour = 1", "[sritmo]\nwidth = 3", "[local_sampler]\nno_spe = true", "[nope]\n"] {
            assert!(matches!(PipelineConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ablation.no_knn = true;
        assert_ne!(a.hash(), b.hash());
    }
}
