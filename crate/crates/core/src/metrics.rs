//! Image quality metrics: NMSE, PSNR and windowed SSIM.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("data range must be positive, got {0}")]
    DataRange(f64),
    #[error("target has zero norm; NMSE is undefined")]
    ZeroTarget,
    #[error("image {0:?} is smaller than the {1}×{1} SSIM window")]
    TooSmall((usize, usize), usize),
}

/// SSIM window side.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub nmse: f64,
    /// `f64::INFINITY` for a perfect reconstruction.
    pub psnr_db: f64,
    pub ssim: f64,
}

fn box_valid(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let norm = 1.0 / (k * k) as f64;
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|d| x[[i, j + d]]).sum();
        }
    }
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|d| rows[[i + d, j]]).sum::<f64>() * norm)
}

/// Per-window SSIM over every fully contained 7×7 window.
pub fn ssim_map(x: &Array2<f64>, y: &Array2<f64>, data_range: f64) -> Result<Array2<f64>, MetricsError> {
    if x.dim() != y.dim() {
        return Err(MetricsError::Shape(x.dim(), y.dim()));
    }
    if !(data_range > 0.0) {
        return Err(MetricsError::DataRange(data_range));
    }
    let (h, w) = x.dim();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(MetricsError::TooSmall((h, w), k));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let ux = box_valid(x, k);
    let uy = box_valid(y, k);
    let uxx = box_valid(&(x * x), k);
    let uyy = box_valid(&(y * y), k);
    let uxy = box_valid(&(x * y), k);
    Ok(ndarray::Zip::from(&ux)
        .and(&uy)
        .and(&uxx)
        .and(&uyy)
        .and(&uxy)
        .map_collect(|&mx, &my, &mxx, &myy, &mxy| {
            let vx = cov_norm * (mxx - mx * mx);
            let vy = cov_norm * (myy - my * my);
            let vxy = cov_norm * (mxy - mx * my);
            ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        }))
}

pub fn ssim(x: &Array2<f64>, y: &Array2<f64>, data_range: f64) -> Result<f64, MetricsError> {
    let m = ssim_map(x, y, data_range)?;
    Ok(m.mean().unwrap_or(0.0))
}

/// SSIM averaged only over windows whose centre lies where `region` is true.
pub fn ssim_in_region(
    x: &Array2<f64>,
    y: &Array2<f64>,
    data_range: f64,
    region: &Array2<bool>,
) -> Result<f64, MetricsError> {
    let m = ssim_map(x, y, data_range)?;
    let half = SSIM_WINDOW / 2;
    let (mut acc, mut n) = (0.0, 0usize);
    for ((i, j), &v) in m.indexed_iter() {
        if region[[i + half, j + half]] {
            acc += v;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { acc / n as f64 })
}

pub fn nmse(x: &Array2<f64>, target: &Array2<f64>) -> Result<f64, MetricsError> {
    if x.dim() != target.dim() {
        return Err(MetricsError::Shape(x.dim(), target.dim()));
    }
    let den: f64 = target.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(MetricsError::ZeroTarget);
    }
    let num: f64 = x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / den)
}

pub fn psnr(x: &Array2<f64>, target: &Array2<f64>, data_range: f64) -> Result<f64, MetricsError> {
    if x.dim() != target.dim() {
        return Err(MetricsError::Shape(x.dim(), target.dim()));
    }
    if !(data_range > 0.0) {
        return Err(MetricsError::DataRange(data_range));
    }
    let mse = x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    // errors below the data range's rounding resolution count as exact
    Ok(if mse <= (f64::EPSILON * data_range).powi(2) {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    })
}

/// `(nmse, psnr, ssim)`; the data range is taken from the caller, conventionally `max(target)`.
pub fn evaluate_metrics(x: &Array2<f64>, target: &Array2<f64>, data_range: f64) -> Result<Metrics, MetricsError> {
    Ok(Metrics {
        nmse: nmse(x, target)?,
        psnr_db: psnr(x, target, data_range)?,
        ssim: ssim(x, target, data_range)?,
    })
}

/// Per-slice data range convention: the target's maximum.
pub fn data_range(target: &Array2<f64>) -> f64 {
    target.fold(0.0f64, |a, &b| a.max(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_img(seed: u64, n: usize) -> Array2<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| r.random::<f64>())
    }

    #[test]
    fn identity_metrics() {
        let x = rand_img(1, 16);
        let m = evaluate_metrics(&x, &x, 1.0).unwrap();
        assert_eq!(m.nmse, 0.0);
        assert_eq!(m.psnr_db, f64::INFINITY);
        assert_eq!(m.ssim, 1.0);
    }

    #[test]
    fn zero_estimate_has_unit_nmse() {
        let x = rand_img(2, 16);
        assert_eq!(nmse(&Array2::zeros((16, 16)), &x).unwrap(), 1.0);
        assert_eq!(nmse(&x, &Array2::zeros((16, 16))), Err(MetricsError::ZeroTarget));
    }

    #[test]
    fn psnr_arithmetic() {
        let t = Array2::zeros((8, 8));
        let x = Array2::from_elem((8, 8), 0.1);
        assert!((psnr(&x, &t, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_closed_form() {
        let a = Array2::zeros((8, 8));
        let b = Array2::ones((8, 8));
        let c1 = 1e-4;
        assert!((ssim(&a, &b, 1.0).unwrap() - c1 / (1.0 + c1)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Array2::zeros((8, 8));
        assert!(matches!(ssim(&a, &Array2::zeros((8, 9)), 1.0), Err(MetricsError::Shape(..))));
        assert!(matches!(ssim(&a, &a, 0.0), Err(MetricsError::DataRange(_))));
        assert!(matches!(ssim(&Array2::zeros((4, 4)), &Array2::zeros((4, 4)), 1.0), Err(MetricsError::TooSmall(..))));
    }

    #[test]
    fn region_ssim_full_region_matches_global() {
        let x = rand_img(3, 20);
        let y = rand_img(4, 20);
        let all = Array2::from_elem((20, 20), true);
        let a = ssim_in_region(&x, &y, 1.0, &all).unwrap();
        assert!((a - ssim(&x, &y, 1.0).unwrap()).abs() < 1e-15);
    }
}
