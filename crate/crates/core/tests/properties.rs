use std::f64::consts::PI;

use panogen_core::datapipe::{decode_pairs, encode_pairs, pair_at, prepare_pano, synth_pano, PairConfig, SceneClass, SceneSpec};
use panogen_core::embedding::{cosine, EmbeddingStore};
use panogen_core::raster::{self, rgbe, Image};
use panogen_core::sphere::{frac_pixel_to_sphere, pixel_to_sphere, sphere_to_pixel, PatchGeom};
use panogen_core::sritmo::{area_taps, loss_itmo};
use panogen_core::vq::TokenGrid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pixel_sphere_roundtrip(h in 1usize..600, w in 1usize..1200, fi in 0.0f64..1.0, fj in 0.0f64..1.0) {
        let i = ((h as f64 * fi) as usize).min(h - 1);
        let j = ((w as f64 * fj) as usize).min(w - 1);
        let c = pixel_to_sphere(i, j, h, w).unwrap();
        let want_t = (2.0 * (j as f64 + 0.5) / w as f64 - 1.0) * PI;
        let want_p = (2.0 * (i as f64 + 0.5) / h as f64 - 1.0) * PI / 2.0;
        prop_assert!((c.theta - want_t).abs() < 1e-12);
        prop_assert!((c.phi - want_p).abs() < 1e-12);
        let (pi, pj) = sphere_to_pixel(c, h, w);
        prop_assert!((pi - i as f64).abs() < 1e-9 && (pj - j as f64).abs() < 1e-9);
    }

    #[test]
    fn patch_local_roundtrip(top in 0usize..32, left in 0usize..128, y in 0.0f64..16.0, x in 0.0f64..16.0) {
        let g = PatchGeom { top, left, height: 16, width: 16, pano_h: 64, pano_w: 128 };
        let c = g.local_to_sphere(y, x);
        let (ly, lx) = g.sphere_to_local(c);
        prop_assert!((ly - y).abs() < 1e-9, "{ly} {y}");
        prop_assert!((lx - x).abs() < 1e-9, "{lx} {x}");
    }

    #[test]
    fn rgbe_error_bound(r in 0.0f64..1e4, g in 0.0f64..1e4, b in 0.0f64..1e4, s in -20i32..20) {
        let px = [r * 2f64.powi(s), g * 2f64.powi(s), b * 2f64.powi(s)];
        let m = px[0].max(px[1]).max(px[2]);
        let back = rgbe::decode_pixel(rgbe::encode_pixel(px));
        for k in 0..3 {
            prop_assert!((back[k] - px[k]).abs() <= m / 256.0 + 1e-300);
        }
    }

    #[test]
    fn taps_are_convex(u in 0.0f64..7.0, v in 0.0f64..11.0) {
        let (idx, w) = area_taps(u, v, 8, 12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let cu: f64 = (0..4).map(|k| w[k] * (idx[k] / 12) as f64).sum();
        let cv: f64 = (0..4).map(|k| w[k] * (idx[k] % 12) as f64).sum();
        prop_assert!((cu - u).abs() < 1e-9 && (cv - v).abs() < 1e-9);
    }

    #[test]
    fn itmo_loss_ignores_scale(vals in prop::collection::vec(1e-3f64..1e3, 3..60), k in -6.0f64..6.0) {
        let gt: Vec<f64> = vals.iter().rev().copied().collect();
        let scaled: Vec<f64> = vals.iter().map(|v| v * 10f64.powf(k)).collect();
        let a = loss_itmo(&vals, &gt).unwrap();
        let b = loss_itmo(&scaled, &gt).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn knn_matches_sorting(seed in 0u64..1000, n in 1usize..40, k in 1usize..8) {
        use rand::Rng;
        let k = k.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = EmbeddingStore::new(6);
        for i in 0..n {
            let v = unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
            store.insert(&format!("{i:03}"), &v).unwrap();
        }
        let q = unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let got = store.knn(&q, k).unwrap();
        let mut all: Vec<(usize, f64)> = (0..n).map(|i| (i, cosine(&q, store.vector(i)))).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(store.keys()[a.0].cmp(&store.keys()[b.0])));
        prop_assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), all[..k].iter().map(|p| p.0).collect::<Vec<_>>());
    }

    #[test]
    fn calibration_matches_masked_sums(seed in 0u64..500) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hdr = Image::new(6, 12, (0..6 * 12 * 3).map(|_| rng.random_range(0.0..8.0)).collect()).unwrap();
        let ldr = raster::reinhard_tonemap(&hdr, raster::Tonemap::Luminance);
        let mask = raster::calib_mask(&ldr, 0.83);
        prop_assume!(mask.count() > 0);
        let (cal, _) = raster::calibrate(&hdr, &ldr, 0.83).unwrap();
        let (a, b) = (mask.masked_sum(&cal), mask.masked_sum(&ldr));
        prop_assert!((a - b).abs() <= 1e-9 * b.abs());
    }

    #[test]
    fn token_grid_roll_composes(rows in 1usize..5, cols in 1usize..9, a in -20isize..20, b in -20isize..20) {
        let g = TokenGrid::new(rows, cols, (0..rows * cols).collect()).unwrap();
        prop_assert_eq!(g.roll_cols(a).roll_cols(b), g.roll_cols(a + b));
        prop_assert_eq!(g.roll_cols(cols as isize), g.clone());
        prop_assert_eq!(TokenGrid::from_text(&g.to_text()).unwrap(), g);
    }
}

#[test]
fn rotation_is_exact_on_rasters() {
    let img = Image::from_fn(4, 10, |i, j| [i as f64, j as f64, 0.5]);
    let r = raster::rotate_horizontal(&img, 3);
    assert_eq!(raster::rotate_horizontal(&r, -3), img);
    for i in 0..4 {
        for j in 0..10 {
            assert_eq!(r.pixel(i, (j + 3) % 10), img.pixel(i, j));
        }
    }
}

#[test]
fn hdr_file_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(9, 17, |i, j| [0.01 * i as f64, 3.0 * j as f64, 40.0]);
    let p = dir.path().join("x.hdr");
    rgbe::write(&img, &p).unwrap();
    let back = rgbe::read(&p).unwrap();
    for (a, b) in img.pixels().zip(back.pixels()) {
        let m = a[0].max(a[1]).max(a[2]);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= m / 256.0);
        }
    }
}

#[test]
fn pair_archive_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = SceneSpec::random(SceneClass::SunDisk, &mut rng);
    let hdr = synth_pano(&s, 32, 64).unwrap();
    let cfg = PairConfig { base: 8, ..Default::default() };
    let (ldr, cal) = prepare_pano(&hdr, &cfg).unwrap().unwrap();
    let pairs: Vec<_> = (0..3).map(|k| pair_at("s", &ldr, &cal, 1.0 + k as f64, 8, &mut rng).unwrap()).collect();
    let bytes = encode_pairs(&pairs, 8).unwrap();
    let (base, back) = decode_pairs(&bytes).unwrap();
    assert_eq!(base, 8);
    assert_eq!(back.len(), 3);
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.crop, b.crop);
        assert_eq!(a.samples.len(), b.samples.len());
        let c = frac_pixel_to_sphere(b.crop.top as f64, b.crop.left as f64, b.crop.pano_h, b.crop.pano_w);
        assert_eq!(c, a.crop.local_to_sphere(0.0, 0.0));
    }
    assert!(decode_pairs(&bytes[..bytes.len() - 5]).is_err());
}

#[test]
fn store_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = EmbeddingStore::new(3);
    s.insert("a", &unit(vec![1.0, 2.0, 2.0])).unwrap();
    s.insert("b", &unit(vec![0.0, 1.0, 0.0])).unwrap();
    let p = dir.path().join("s.t2lemb");
    s.save(&p).unwrap();
    let back = EmbeddingStore::load(&p).unwrap();
    assert_eq!(back.keys(), s.keys());
    assert_eq!(back.vector(0), s.vector(0));
}
