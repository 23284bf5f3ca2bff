//! Small layer helpers over the autodiff tape.

use panogen_autodiff::{Conv2dSpec, GradBuffer, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Gaussian init with the given standard deviation.
/// Cosine decay from `base` down to 5% of it over `steps`.
pub fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    let decay = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos());
    base * (0.05 + 0.95 * decay)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// `y = x·W + b` on `[n, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::with_std(store, name, in_dim, out_dim, (2.0 / in_dim as f64).sqrt(), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal(rng, &[in_dim, out_dim], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w)?;
        Ok(t.add_bias(y, b)?)
    }

    /// Plain-value forward for inference loops that never need gradients.
    pub fn apply(&self, store: &ParamStore, x: &[f64], out: &mut Vec<f64>) {
        let w = store.get(self.w).data();
        let b = store.get(self.b).data();
        out.clear();
        out.extend_from_slice(b);
        for (i, xv) in x.iter().enumerate() {
            if *xv == 0.0 {
                continue;
            }
            let row = &w[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        spec: Conv2dSpec,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain * (2.0 / (in_c * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal(rng, &[out_c, in_c, k, k], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_c]));
        Conv { w, b, spec }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        Ok(t.conv2d(x, w, Some(b), self.spec)?)
    }
}

/// Learned gain and bias for row-wise layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::filled(&[dim], 1.0)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = t.param(store, self.gain);
        let b = t.param(store, self.bias);
        Ok(t.layer_norm(x, g, b)?)
    }
}

/// Runs `f` on a fresh tape for each batch item (across the pool when
/// enabled), backpropagates each loss and sums parameter gradients in item
/// order. Returns the summed gradients and each item's auxiliary output.
pub fn batch_gradients<T, F>(store: &ParamStore, n: usize, f: F) -> Result<(GradBuffer, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &mut Tape) -> Result<(Var, T)> + Send + Sync,
{
    let items = panogen_autodiff::parallel::map_indexed(n, |i| -> Result<(GradBuffer, T)> {
        let mut t = Tape::new(store.precision());
        let (loss, aux) = f(i, &mut t)?;
        let g = t.backward(loss)?;
        let mut buf = GradBuffer::zeros_like(store);
        buf.accumulate(&g);
        Ok((buf, aux))
    });
    let mut total = GradBuffer::zeros_like(store);
    let mut aux = Vec::with_capacity(n);
    for item in items {
        let (g, a) = item?;
        total.merge(&g);
        aux.push(a);
    }
    Ok((total, aux))
}
