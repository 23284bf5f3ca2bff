//! Dense kernels shared by forward and backward rules.
//!
//! All matrices are row-major. Each kernel writes whole output rows, which
//! is the unit of work handed to [`crate::parallel::for_each_row`].

use crate::parallel;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    parallel::for_each_row(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    parallel::for_each_row(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    parallel::for_each_row(&mut out, n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Wrap the horizontal axis instead of zero padding it.
    pub circular_w: bool,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Source offset within one input channel, or `None` for padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        if iy < 0 || iy >= self.in_h as isize {
            return None;
        }
        let mut ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if self.circular_w {
            ix = ix.rem_euclid(self.in_w as isize);
        } else if ix < 0 || ix >= self.in_w as isize {
            return None;
        }
        Some(iy as usize * self.in_w + ix as usize)
    }
}

/// Unfolds `[C, H, W]` into `[C·k·k, Ho·Wo]` patch columns.
pub fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut cols = vec![0.0; g.in_c * g.k * g.k * oh * ow];
    parallel::for_each_row(&mut cols, oh * ow, |r, row| {
        let c = r / (g.k * g.k);
        let ky = (r / g.k) % g.k;
        let kx = r % g.k;
        let src = &input[c * plane..(c + 1) * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                if let Some(s) = g.source(oy, ox, ky, kx) {
                    row[oy * ow + ox] = src[s];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back onto `[C, H, W]`.
pub fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.in_c * plane];
    parallel::for_each_row(&mut out, plane, |c, dst| {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some(s) = g.source(oy, ox, ky, kx) {
                            dst[s] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let nn = gemm_nn(m, k, n, &a, &b);
        let nt = gemm_nt(m, k, n, &a, &transpose(k, n, &b));
        let tn = gemm_tn(m, k, n, &transpose(m, k, &a), &b);
        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-12);
            assert!((nt[i] - want[i]).abs() < 1e-12);
            assert!((tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_c: 2,
            in_h: 5,
            in_w: 6,
            k: 3,
            stride: 2,
            pad: 1,
            circular_w: true,
        };
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&g, &x);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&g, &y);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
