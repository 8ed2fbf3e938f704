//! Differentiable structural-similarity loss.

use super::ModelError;
use crate::autodiff::Var;
use crate::metrics::{SSIM_K1, SSIM_K2, SSIM_WINDOW};

/// `−mean SSIM` over every 7×7 window fully inside the image, matching
/// [`crate::metrics::ssim`] in value.
pub fn ssim_loss<'t>(x: Var<'t>, y: Var<'t>, data_range: f64) -> Result<Var<'t>, ModelError> {
    if x.shape() != y.shape() {
        return Err(ModelError::Shape(format!("ssim inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    if !(data_range > 0.0) {
        return Err(ModelError::Config(format!("data range must be positive, got {data_range}")));
    }
    let sh = x.shape();
    let k = SSIM_WINDOW;
    if sh.len() < 2 || sh[sh.len() - 2] < k || sh[sh.len() - 1] < k {
        return Err(ModelError::Shape(format!("image {sh:?} smaller than the {k}×{k} window")));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let np = (k * k) as f64;
    let cov = np / (np - 1.0);
    let ux = x.box_filter_valid(k);
    let uy = y.box_filter_valid(k);
    let uxx = x.square().box_filter_valid(k);
    let uyy = y.square().box_filter_valid(k);
    let uxy = x.mul(y).box_filter_valid(k);
    let vx = uxx.sub(ux.square()).scale(cov);
    let vy = uyy.sub(uy.square()).scale(cov);
    let vxy = uxy.sub(ux.mul(uy)).scale(cov);
    let num = ux.mul(uy).scale(2.0).add_scalar(c1).mul(vxy.scale(2.0).add_scalar(c2));
    let den = ux.square().add(uy.square()).add_scalar(c1).mul(vx.add(vy).add_scalar(c2));
    Ok(num.div(den).mean().neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckOptions, Tape};
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_img(seed: u64, n: usize) -> Array2<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| r.random::<f64>())
    }

    #[test]
    fn identical_images_give_minus_one() {
        let t = Tape::new();
        let x = t.constant(rand_img(1, 12).into_dyn());
        assert_eq!(*ssim_loss(x, x, 1.0).unwrap().value().first().unwrap(), -1.0);
    }

    #[test]
    fn constant_images_closed_form() {
        let t = Tape::new();
        let a = t.constant(ArrayD::zeros(IxDyn(&[8, 8])));
        let b = t.constant(ArrayD::ones(IxDyn(&[8, 8])));
        let l = *ssim_loss(a, b, 1.0).unwrap().value().first().unwrap();
        let c1 = 1e-4;
        assert!((l + c1 / (1.0 + c1)).abs() < 1e-15);
    }

    #[test]
    fn matches_metric_value() {
        let (x, y) = (rand_img(2, 16), rand_img(3, 16));
        let t = Tape::new();
        let l = ssim_loss(t.constant(x.clone().into_dyn()), t.constant(y.clone().into_dyn()), 1.0).unwrap();
        let s = crate::metrics::ssim(&x, &y, 1.0).unwrap();
        assert!((l.value().first().unwrap() + s).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let t = Tape::new();
        let a = t.constant(ArrayD::zeros(IxDyn(&[8, 8])));
        let b = t.constant(ArrayD::zeros(IxDyn(&[8, 9])));
        assert!(ssim_loss(a, b, 1.0).is_err());
        assert!(ssim_loss(a, a, 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let y = rand_img(5, 10).into_dyn();
        let report = gradcheck(
            |t, v| ssim_loss(v[0], t.constant(y.clone()), 1.0).unwrap(),
            &[rand_img(4, 10).into_dyn()],
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.max_rel_error);
    }
}
