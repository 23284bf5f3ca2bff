use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panogen_core::config::PipelineConfig;
use panogen_core::pipeline::{self, RunManifest};
use panogen_core::raster::{self, png8, rgbe};
use panogen_core::vq::TokenGrid;
use panogen_core::Error;

/// Text-conditioned HDR panorama generation.
#[derive(Parser)]
#[command(name = "panogen", version)]
struct Cli {
    /// TOML config; desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.work`.
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the procedural corpus, SR-iTMO pairs and image embeddings.
    PrepareData,
    /// Train the global and local tokenizers.
    TrainCodebooks,
    /// Train the text-conditioned global sampler.
    TrainGlobal,
    /// Train the structure-aware local sampler.
    TrainLocal,
    /// Train the super-resolution inverse tone mapper.
    TrainSritmo,
    /// Generate an LDR panorama from a prompt.
    Generate {
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "panorama.png")]
        out: PathBuf,
    },
    /// Upscale an LDR panorama and lift it to HDR.
    Upscale {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        factor: f64,
        /// Output `.hdr`; a PNG preview at EV 0 is written beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample a column range of a generated panorama's global tokens.
    Edit {
        /// PNG written by `generate` or `edit`; its `.tokens` sidecar is read.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        text: String,
        /// Global token columns `START..END`, end exclusive.
        #[arg(long)]
        region: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "edited.png")]
        out: PathBuf,
    },
    /// MAE and RMSE over a list of `pred gt` `.hdr` pairs.
    EvalItmo {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain { .. } => 2,
        Error::Missing { .. } => 3,
        Error::Data(_) | Error::Codec { .. } | Error::Store { .. } | Error::Io(_) | Error::Calibration(_) => 4,
        _ => 1,
    }
}

fn tokens_path(png: &Path) -> PathBuf {
    let mut name = png.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tokens");
    png.with_file_name(name)
}

fn ensure_parent(p: &Path) -> panogen_core::Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn write_generated(g: &pipeline::Generated, out: &Path) -> panogen_core::Result<()> {
    ensure_parent(out)?;
    png8::write(&g.panorama.image, out)?;
    std::fs::write(tokens_path(out), g.global.to_text())?;
    Ok(())
}

fn run(cli: Cli) -> panogen_core::Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.work {
        cfg.paths.work = w;
    }
    match cli.cmd {
        Cmd::PrepareData => {
            let r = pipeline::prepare_data(&cfg)?;
            println!("records {} pairs {} embeddings {}", r.records, r.pairs, r.embeddings);
        }
        Cmd::TrainCodebooks => {
            pipeline::train_codebooks(&cfg)?;
            println!("wrote {} and {}", cfg.paths.checkpoint(pipeline::GLOBAL_TOKENIZER).display(), cfg.paths.checkpoint(pipeline::LOCAL_TOKENIZER).display());
        }
        Cmd::TrainGlobal => {
            pipeline::train_global(&cfg)?;
            println!("wrote {}", cfg.paths.checkpoint(pipeline::GLOBAL_SAMPLER).display());
        }
        Cmd::TrainLocal => {
            pipeline::train_local(&cfg)?;
            println!("wrote {}", cfg.paths.checkpoint(pipeline::LOCAL_SAMPLER).display());
        }
        Cmd::TrainSritmo => {
            let (_, log) = pipeline::train_sritmo(&cfg)?;
            if let Some(l) = log.last() {
                println!("final loss sr {:.5} itmo {:.5}", l.sr, l.itmo);
            }
        }
        Cmd::Generate { text, seed, out } => {
            let gen = pipeline::Generator::load(&cfg)?;
            let g = gen.generate(&text, seed, &[])?;
            write_generated(&g, &out)?;
            RunManifest::new("generate", &cfg)
                .arg("text", &text)
                .arg("seed", seed)
                .output(&out)
                .output(&tokens_path(&out))
                .write_beside(&out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Upscale { input, factor, out } => {
            let model = pipeline::load_sritmo(&cfg)?;
            let ldr = png8::read(&input)?;
            let (_, hdr) = pipeline::upscale(&model, &ldr, factor)?;
            let out = out.unwrap_or_else(|| input.with_extension("hdr"));
            ensure_parent(&out)?;
            rgbe::write(&hdr, &out)?;
            let preview = out.with_extension("preview.png");
            png8::write(&raster::expose(&hdr, 0.0), &preview)?;
            RunManifest::new("upscale", &cfg)
                .arg("factor", factor)
                .input(&input)
                .output(&out)
                .output(&preview)
                .result("max_radiance", hdr.max_value())
                .write_beside(&out)?;
            println!("wrote {} ({}x{}, max {:.3})", out.display(), hdr.width, hdr.height, hdr.max_value());
        }
        Cmd::Edit { from, text, region, seed, out } => {
            let cols = pipeline::parse_region(&region)?;
            let tp = tokens_path(&from);
            let base = std::fs::read_to_string(&tp)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", tp.display())))?;
            let base = TokenGrid::from_text(&base)?;
            let gen = pipeline::Generator::load(&cfg)?;
            let g = gen.edit(&base, &text, cols, seed)?;
            write_generated(&g, &out)?;
            RunManifest::new("edit", &cfg)
                .arg("text", &text)
                .arg("region", &region)
                .arg("seed", seed)
                .input(&tp)
                .output(&out)
                .output(&tokens_path(&out))
                .write_beside(&out)?;
            println!("wrote {}", out.display());
        }
        Cmd::EvalItmo { manifest } => {
            let s = pipeline::eval_itmo(&manifest)?;
            let report = manifest.with_extension("scores");
            std::fs::write(&report, format!("mae {}\nrmse {}\nimages {}\n", s.mae, s.rmse, s.images))?;
            RunManifest::new("eval-itmo", &cfg)
                .input(&manifest)
                .output(&report)
                .result("mae", s.mae)
                .result("rmse", s.rmse)
                .write_beside(&report)?;
            println!("MAE {:.6} RMSE {:.6} over {} images", s.mae, s.rmse, s.images);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
