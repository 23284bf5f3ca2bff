//! Finite-difference checks for every differentiable op.

use panogen_autodiff::gradcheck::check;
use panogen_autodiff::{Conv2dSpec, Precision, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn pos_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Weighted sum so every output element carries a distinct gradient.
fn reduce(tape: &mut Tape, y: panogen_autodiff::Var) -> panogen_autodiff::Result<panogen_autodiff::Var> {
    let n = tape.value(y).numel();
    let w = Tensor::new(
        tape.shape(y),
        (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.1).collect(),
    )?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

macro_rules! fd {
    ($name:ident, $inputs:expr, |$tape:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            #[allow(clippy::redundant_closure_call)]
            let inputs: Vec<Tensor> = ($inputs)(&mut rng);
            let r = check(&inputs, H, |$tape: &mut Tape, $v| {
                let y = $body;
                reduce($tape, y)
            })
            .unwrap();
            assert!(r.rel_error < TOL, "rel error {}", r.rel_error);
        }
    };
}

fd!(add_sub_mul, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |t, v| {
    let a = t.add(v[0], v[1]).unwrap();
    let b = t.sub(a, v[1]).unwrap();
    let c = t.mul(b, v[1]).unwrap();
    t.scale(c, 1.7)
});

fd!(bias_relu_shift, |r: &mut ChaCha8Rng| vec![rand_t(r, &[3, 4]), rand_t(r, &[4])], |t, v| {
    let a = t.add_bias(v[0], v[1]).unwrap();
    let a = t.shift(a, 0.05);
    t.relu(a)
});

fd!(exp_log_sin_cos, |r: &mut ChaCha8Rng| vec![pos_t(r, &[2, 3])], |t, v| {
    let a = t.log(v[0]).unwrap();
    let b = t.exp(a);
    let c = t.sin(b);
    let d = t.cos(v[0]);
    t.add(c, d).unwrap()
});

fd!(abs_op, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3])], |t, v| t.abs(v[0]));

fd!(sum_mean_variance, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3])], |t, v| {
    let a = t.mean(v[0]);
    let b = t.variance(v[0]);
    let sq = t.mul(v[0], v[0]).unwrap();
    let c = t.sum(sq);
    let ab = t.add(a, b).unwrap();
    t.add(ab, c).unwrap()
});

fd!(softmax_rows, |r: &mut ChaCha8Rng| vec![rand_t(r, &[3, 5])], |t, v| t
    .softmax_rows(v[0])
    .unwrap());

fd!(cross_entropy, |r: &mut ChaCha8Rng| vec![rand_t(r, &[4, 6])], |t, v| t
    .cross_entropy(v[0], &[0, 5, 2, 2])
    .unwrap());

fd!(embedding_lookup, |r: &mut ChaCha8Rng| vec![rand_t(r, &[5, 3])], |t, v| t
    .embedding(v[0], &[4, 1, 1, 0])
    .unwrap());

fd!(layer_norm, |r: &mut ChaCha8Rng| vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])], |t, v| t
    .layer_norm(v[0], v[1], v[2])
    .unwrap());

fd!(concat_slice, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 2]), rand_t(r, &[1, 5])], |t, v| {
    let c = t.concat_cols(&[v[0], v[1]]).unwrap();
    let r = t.concat_rows(&[c, v[2]]).unwrap();
    let s = t.slice_rows(r, 1, 2).unwrap();
    t.slice_cols(s, 1, 3).unwrap()
});

fd!(matmul_transpose_reshape, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3]), rand_t(r, &[4, 3])], |t, v| {
    let bt = t.transpose(v[1]).unwrap();
    let m = t.matmul(v[0], bt).unwrap();
    t.reshape(m, &[4, 2]).unwrap()
});

fd!(conv2d_zero_pad, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 5, 6]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])], |t, v| t
    .conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, pad: 1, circular_w: false })
    .unwrap());

fd!(conv2d_circular, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 4, 6]), rand_t(r, &[2, 2, 3, 3])], |t, v| t
    .conv2d(v[0], v[1], None, Conv2dSpec { stride: 1, pad: 1, circular_w: true })
    .unwrap());

fd!(upsample, |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 2, 3])], |t, v| t.upsample2x(v[0]).unwrap());

fd!(normalize_rows, |r: &mut ChaCha8Rng| vec![rand_t(r, &[3, 4])], |t, v| t
    .normalize_rows(v[0])
    .unwrap());

fd!(gather_weighted, |r: &mut ChaCha8Rng| vec![rand_t(r, &[6, 3])], |t, v| t
    .gather_weighted(
        v[0],
        &[[0, 1, 2, 3], [5, 5, 4, 0]],
        &[[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.4, 0.1]],
    )
    .unwrap());

#[test]
fn straight_through_matches_identity_path() {
    // With the forward value equal to the carrier (z_q = ẑ), the op is the
    // identity, so its backward rule must agree with finite differences of a
    // downstream nonlinearity.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zhat = rand_t(&mut rng, &[2, 3]);
    let r = check(&[zhat], H, |t, v| {
        let q = t.detach(v[0]);
        let st = t.straight_through(q, v[0])?;
        let y = t.sin(st);
        let y = t.mul(y, st)?;
        reduce(t, y)
    })
    .unwrap();
    assert!(r.rel_error < TOL, "rel error {}", r.rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random compositions of up to four ops agree with finite differences.
    #[test]
    fn random_composites(seed in 0u64..10_000, ops in proptest::collection::vec(0usize..6, 1..=4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[2, 3]);
        let b = rand_t(&mut rng, &[2, 3]);
        let r = check(&[a, b], H, |t, v| {
            let mut x = v[0];
            for op in &ops {
                x = match op {
                    0 => t.mul(x, v[1])?,
                    1 => t.add(x, v[1])?,
                    2 => t.sin(x),
                    3 => t.softmax_rows(x)?,
                    4 => { let s = t.scale(x, 0.5); t.exp(s) }
                    _ => t.normalize_rows(x)?,
                };
            }
            reduce(t, x)
        }).unwrap();
        prop_assert!(r.rel_error < TOL, "ops {:?} rel error {}", ops, r.rel_error);
    }

    /// Pool and sequential dispatch give identical bits.
    #[test]
    fn parallel_matches_sequential(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[3, 8, 8]);
        let w = rand_t(&mut rng, &[4, 3, 3, 3]);
        let run = || {
            let mut t = Tape::new(Precision::F64);
            let xv = t.input(x.clone());
            let wv = t.input(w.clone());
            let y = t.conv2d(xv, wv, None, Conv2dSpec { stride: 1, pad: 1, circular_w: true }).unwrap();
            let l = reduce(&mut t, y).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(y).clone(), g.wrt(wv).unwrap().clone())
        };
        panogen_autodiff::parallel::set_enabled(false);
        let seq = run();
        panogen_autodiff::parallel::set_enabled(true);
        let par = run();
        prop_assert_eq!(seq, par);
    }
}
