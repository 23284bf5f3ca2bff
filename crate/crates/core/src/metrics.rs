//! Image error metrics.

use crate::error::{Error, Result};
use crate::raster::Image;

fn check(pred: &Image, gt: &Image) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::domain(
            "metrics",
            format!(
                "shape mismatch: {}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    if pred.data.is_empty() {
        return Err(Error::domain("metrics", "empty images"));
    }
    Ok(())
}

/// Mean absolute error over all pixels and channels.
pub fn mae(pred: &Image, gt: &Image) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.data.len() as f64)
}

/// Root mean square error over all pixels and channels.
pub fn rmse(pred: &Image, gt: &Image) -> Result<f64> {
    check(pred, gt)?;
    Ok(mse(&pred.data, &gt.data).sqrt())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10·log10(peak² / mse)`; infinite for a perfect match.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    10.0 * (peak * peak / mse).log10()
}

/// PSNR of LDR images with values clamped to `[0, 1]`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check(pred, gt)?;
    let p: Vec<f64> = pred.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let g: Vec<f64> = gt.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(psnr_from_mse(mse(&p, &g), 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let a = Image::filled(2, 2, [1.0; 3]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 2.0);
        assert_eq!(mae(&b, &a).unwrap(), 2.0);
        assert_eq!(rmse(&b, &a).unwrap(), 2.0);
        let c = Image::from_fn(2, 2, |i, _| if i == 0 { [3.0; 3] } else { [1.0; 3] });
        assert_eq!(mae(&c, &a).unwrap(), 1.0);
        assert!((rmse(&c, &a).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(mae(&Image::filled(1, 2, [0.0; 3]), &a).is_err());
    }
}
