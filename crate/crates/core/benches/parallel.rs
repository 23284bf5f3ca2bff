//! Sequential vs pooled execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use panogen_autodiff::parallel;
use panogen_core::datapipe::{build_pairs, synth_pano, PairConfig, SceneClass, SceneSpec};
use panogen_core::nn::batch_gradients;
use panogen_core::raster::{self, Tonemap};
use panogen_core::sphere::PatchGeom;
use panogen_core::sritmo::{SrItmo, SrItmoConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn render(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let specs: Vec<SceneSpec> = (0..8).map(|k| SceneSpec::random(SceneClass::ALL[k % 4], &mut rng)).collect();
    let mut g = c.benchmark_group("render_scenes");
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            parallel::set_enabled(on);
            b.iter(|| parallel::map_indexed(specs.len(), |k| synth_pano(&specs[k], 64, 128).unwrap()))
        });
    }
    g.finish();
}

fn model() -> SrItmo {
    SrItmo::new(SrItmoConfig { enc_blocks: 2, enc_width: 32, latent_dim: 32, hidden: 128, itmo_hidden: 64, samples: 256, ..Default::default() }).unwrap()
}

fn gradients(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hdr = synth_pano(&SceneSpec::random(SceneClass::SunDisk, &mut rng), 64, 128).unwrap();
    let pairs = build_pairs("b", &hdr, 8, &PairConfig { base: 16, ..Default::default() }, &mut rng).unwrap();
    let m = model();
    let picks: Vec<usize> = (0..256).collect();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            parallel::set_enabled(on);
            b.iter(|| {
                batch_gradients(&m.store, pairs.len(), |i, t| {
                    let (loss, _) = m.pair_loss(t, &pairs[i], &picks)?;
                    Ok((loss, ()))
                })
                .unwrap()
            })
        });
    }
    g.finish();
}

fn upscale(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hdr = synth_pano(&SceneSpec::random(SceneClass::InteriorLamp, &mut rng), 32, 64).unwrap();
    let ldr = raster::reinhard_tonemap(&hdr, Tonemap::Luminance);
    let extent = PatchGeom { top: 0, left: 0, height: 32, width: 64, pano_h: 32, pano_w: 64 };
    let m = model();
    let mut g = c.benchmark_group("upscale_x4");
    g.sample_size(10);
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            parallel::set_enabled(on);
            b.iter(|| m.upscale(&ldr, 4.0, extent).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, render, gradients, upscale);
criterion_main!(benches);
