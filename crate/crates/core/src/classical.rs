//! Learning-free baselines: zero-filled inverse FFT and ℓ1-wavelet compressed
//! sensing solved with monotone FISTA.

use ndarray::{s, Array2, ArrayViewMut2, Zip};
use num_complex::Complex64;
use thiserror::Error;

use crate::kspace::{self, CoilKSpace, KSpaceError, SensitivityMaps};
use crate::mask::Mask;

#[derive(Debug, Error)]
pub enum ClassicalError {
    #[error("{h}×{w} image is not divisible by 2^{levels}")]
    Divisibility { h: usize, w: usize, levels: usize },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("FISTA diverged at iteration {iteration}; objective trace {trace:?}")]
    Diverged { iteration: usize, trace: Vec<f64> },
    #[error(transparent)]
    KSpace(#[from] KSpaceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FistaConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub step: f64,
    /// Stop once `‖x_{n+1} − x_n‖ / ‖x_n‖` drops below this.
    pub tolerance: f64,
    pub levels: usize,
}

impl Default for FistaConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_iters: 200,
            step: 1.0,
            tolerance: 1e-6,
            levels: 3,
        }
    }
}

impl FistaConfig {
    pub fn validate(&self) -> Result<(), ClassicalError> {
        let bad = |m: &str| Err(ClassicalError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return bad("step must lie in (0, 1]");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1");
        }
        if self.levels == 0 {
            return bad("wavelet levels must be >= 1");
        }
        Ok(())
    }
}

/// `1e-3 · max |x_zf|`, the default regularization weight.
pub fn default_lambda(k: &CoilKSpace) -> f64 {
    1e-3 * zero_filled(k).fold(0.0f64, |a, &b| a.max(b))
}

fn masked(k: &CoilKSpace) -> ndarray::Array3<Complex64> {
    let mut data = k.data.clone();
    if let Some(m) = &k.mask {
        for mut p in data.outer_iter_mut() {
            Zip::from(&mut p).and(m.weights()).for_each(|v, &w| *v *= w);
        }
    }
    data
}

/// RSS of the per-coil inverse FFT with unsampled entries set to zero.
pub fn zero_filled(k: &CoilKSpace) -> Array2<f64> {
    kspace::rss_combine(&kspace::ifft2c_coils(&masked(k)))
}

const SQRT1_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn check_levels(h: usize, w: usize, levels: usize) -> Result<(), ClassicalError> {
    let d = 1usize << levels;
    if levels == 0 || h % d != 0 || w % d != 0 {
        return Err(ClassicalError::Divisibility { h, w, levels });
    }
    Ok(())
}

fn haar_rows(mut x: ArrayViewMut2<f64>, buf: &mut [f64]) {
    let w = x.ncols();
    let half = w / 2;
    for mut row in x.rows_mut() {
        for j in 0..half {
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            buf[j] = (a + b) * SQRT1_2;
            buf[half + j] = (a - b) * SQRT1_2;
        }
        row.iter_mut().zip(&buf[..w]).for_each(|(r, v)| *r = *v);
    }
}

fn ihaar_rows(mut x: ArrayViewMut2<f64>, buf: &mut [f64]) {
    let w = x.ncols();
    let half = w / 2;
    for mut row in x.rows_mut() {
        for j in 0..half {
            let (s, d) = (row[j], row[half + j]);
            buf[2 * j] = (s + d) * SQRT1_2;
            buf[2 * j + 1] = (s - d) * SQRT1_2;
        }
        row.iter_mut().zip(&buf[..w]).for_each(|(r, v)| *r = *v);
    }
}

/// Orthonormal 2-D Haar analysis in Mallat layout (approximation band top-left).
pub fn haar_dwt(x: &Array2<f64>, levels: usize) -> Result<Array2<f64>, ClassicalError> {
    let (h, w) = x.dim();
    check_levels(h, w, levels)?;
    let mut c = x.clone();
    let mut buf = vec![0.0; h.max(w)];
    for l in 0..levels {
        let (hh, ww) = (h >> l, w >> l);
        let mut band = c.slice_mut(s![..hh, ..ww]);
        haar_rows(band.view_mut(), &mut buf);
        haar_rows(band.view_mut().reversed_axes(), &mut buf);
    }
    Ok(c)
}

pub fn haar_idwt(c: &Array2<f64>, levels: usize) -> Result<Array2<f64>, ClassicalError> {
    let (h, w) = c.dim();
    check_levels(h, w, levels)?;
    let mut x = c.clone();
    let mut buf = vec![0.0; h.max(w)];
    for l in (0..levels).rev() {
        let (hh, ww) = (h >> l, w >> l);
        let mut band = x.slice_mut(s![..hh, ..ww]);
        ihaar_rows(band.view_mut().reversed_axes(), &mut buf);
        ihaar_rows(band.view_mut(), &mut buf);
    }
    Ok(x)
}

/// `sign(c) · max(|c| − t, 0)`.
pub fn soft_threshold(c: f64, t: f64) -> f64 {
    c.signum() * (c.abs() - t).max(0.0)
}

/// Magnitude shrinkage with the phase preserved.
pub fn soft_threshold_complex(c: Complex64, t: f64) -> Complex64 {
    let m = c.norm();
    if m <= t {
        Complex64::new(0.0, 0.0)
    } else {
        c * ((m - t) / m)
    }
}

fn split(x: &Array2<Complex64>) -> (Array2<f64>, Array2<f64>) {
    (x.mapv(|v| v.re), x.mapv(|v| v.im))
}

fn join(re: &Array2<f64>, im: &Array2<f64>) -> Array2<Complex64> {
    Zip::from(re).and(im).map_collect(|&a, &b| Complex64::new(a, b))
}

/// Wavelet coefficients of a complex image (real and imaginary parts transformed separately).
fn dwt_complex(x: &Array2<Complex64>, levels: usize) -> Result<Array2<Complex64>, ClassicalError> {
    let (re, im) = split(x);
    Ok(join(&haar_dwt(&re, levels)?, &haar_dwt(&im, levels)?))
}

fn idwt_complex(c: &Array2<Complex64>, levels: usize) -> Result<Array2<Complex64>, ClassicalError> {
    let (re, im) = split(c);
    Ok(join(&haar_idwt(&re, levels)?, &haar_idwt(&im, levels)?))
}

/// Proximal map of `t‖W x‖₁`.
pub fn wavelet_prox(x: &Array2<Complex64>, t: f64, levels: usize) -> Result<Array2<Complex64>, ClassicalError> {
    let c = dwt_complex(x, levels)?.mapv(|v| soft_threshold_complex(v, t));
    idwt_complex(&c, levels)
}

struct Problem<'a> {
    k: &'a CoilKSpace,
    s: &'a SensitivityMaps,
    m: &'a Mask,
    lambda: f64,
    levels: usize,
}

impl Problem<'_> {
    fn objective(&self, x: &Array2<Complex64>) -> Result<f64, ClassicalError> {
        let mut r = kspace::forward_a(x, self.s, self.m)?;
        r.data -= &self.k.data;
        let mw = self.m.weights();
        let fit: f64 = r
            .data
            .outer_iter()
            .map(|p| p.iter().zip(mw.iter()).map(|(v, w)| v.norm_sqr() * w).sum::<f64>())
            .sum();
        let l1: f64 = if self.lambda > 0.0 {
            dwt_complex(x, self.levels)?.iter().map(|v| v.norm()).sum()
        } else {
            0.0
        };
        Ok(0.5 * fit + self.lambda * l1)
    }

    fn gradient(&self, x: &Array2<Complex64>) -> Result<Array2<Complex64>, ClassicalError> {
        let mut r = kspace::forward_a(x, self.s, self.m)?;
        r.data -= &self.k.data;
        Ok(kspace::adjoint_a(&r, self.s, self.m)?)
    }
}

/// Full solver output.
#[derive(Debug, Clone)]
pub struct FistaResult {
    pub solution: Array2<Complex64>,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl FistaResult {
    pub fn magnitude(&self) -> Array2<f64> {
        self.solution.mapv(|v| v.norm())
    }
}

fn norm(x: &Array2<Complex64>) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Monotone FISTA on `½‖A x − k̃‖² + λ‖W x‖₁`, starting from `A* k̃`.
///
/// A candidate step that increases the objective is rejected (the iterate stays
/// put while momentum continues), so the recorded objective never increases.
/// Ten consecutive rejected candidates whose objective keeps growing are
/// reported as divergence.
pub fn fista_solve(
    k: &CoilKSpace,
    s: &SensitivityMaps,
    m: &Mask,
    cfg: &FistaConfig,
) -> Result<FistaResult, ClassicalError> {
    cfg.validate()?;
    let (h, w) = k.shape();
    check_levels(h, w, cfg.levels)?;
    let p = Problem {
        k,
        s,
        m,
        lambda: cfg.lambda,
        levels: cfg.levels,
    };
    let mut x = kspace::adjoint_a(k, s, m)?;
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut f_x = p.objective(&x)?;
    let mut trace = vec![f_x];
    let mut candidates = vec![f_x];
    let mut worse = 0usize;
    let mut iterations = 0;
    for n in 0..cfg.max_iters {
        iterations = n + 1;
        let g = p.gradient(&y)?;
        let z = wavelet_prox(&(&y - &(g * cfg.step)), cfg.step * cfg.lambda, cfg.levels)?;
        let f_z = p.objective(&z)?;
        if !f_z.is_finite() {
            return Err(ClassicalError::Diverged { iteration: iterations, trace: candidates });
        }
        let prev_candidate = *candidates.last().unwrap();
        candidates.push(f_z);
        if f_z > f_x && f_z > prev_candidate {
            worse += 1;
            if worse >= 10 {
                return Err(ClassicalError::Diverged { iteration: iterations, trace: candidates });
            }
        } else {
            worse = 0;
        }
        let change = norm(&(&z - &x)) / norm(&x).max(f64::MIN_POSITIVE);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let x_prev = x;
        let accepted = f_z <= f_x;
        x = if accepted { z.clone() } else { x_prev.clone() };
        if accepted {
            f_x = f_z;
        }
        trace.push(f_x);
        y = &x + &((&z - &x) * (t / t_next)) + &((&x - &x_prev) * ((t - 1.0) / t_next));
        t = t_next;
        if change < cfg.tolerance {
            break;
        }
    }
    Ok(FistaResult {
        solution: x,
        objective: trace,
        iterations,
    })
}

/// Magnitude of the FISTA ℓ1-wavelet solution.
pub fn fista_l1wavelet(
    k: &CoilKSpace,
    s: &SensitivityMaps,
    m: &Mask,
    cfg: &FistaConfig,
) -> Result<Array2<f64>, ClassicalError> {
    Ok(fista_solve(k, s, m, cfg)?.magnitude())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_real(r: &mut impl Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| r.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn soft_threshold_cases() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-0.8, 0.0), -0.8);
        let c = Complex64::new(3.0, 4.0);
        let s = soft_threshold_complex(c, 1.0);
        assert!((s - Complex64::new(2.4, 3.2)).norm() < 1e-15);
        assert_eq!(soft_threshold_complex(c, 0.0), c);
    }

    #[test]
    fn haar_pair_definition() {
        let x = Array2::from_shape_vec((2, 2), vec![3.0, 1.0, 3.0, 1.0]).unwrap();
        let c = haar_dwt(&x, 1).unwrap();
        // rows: (4/√2, 2/√2) each; columns then sum the two equal rows
        assert!((c[[0, 0]] - 4.0).abs() < 1e-14);
        assert!((c[[0, 1]] - 2.0).abs() < 1e-14);
        assert!(c[[1, 0]].abs() < 1e-14 && c[[1, 1]].abs() < 1e-14);
    }

    #[test]
    fn haar_round_trip_and_isometry() {
        let mut r = rng(1);
        for &(h, w, l) in &[(8, 8, 3), (16, 32, 2), (64, 64, 3), (4, 12, 1)] {
            let x = rand_real(&mut r, h, w);
            let c = haar_dwt(&x, l).unwrap();
            let y = haar_idwt(&c, l).unwrap();
            assert!((&x - &y).iter().all(|v| v.abs() < 1e-12));
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nc: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - nc).abs() < 1e-12 * nx.max(1.0));
        }
    }

    #[test]
    fn haar_rejects_indivisible() {
        let x = Array2::zeros((12, 16));
        assert!(matches!(haar_dwt(&x, 3), Err(ClassicalError::Divisibility { .. })));
        assert!(haar_idwt(&x, 2).is_ok());
    }

    fn single_coil(x: &Array2<Complex64>, m: &Mask) -> (CoilKSpace, SensitivityMaps) {
        let (h, w) = x.dim();
        let s = SensitivityMaps::unit(h, w);
        (kspace::forward_a(x, &s, m).unwrap(), s)
    }

    fn rand_complex(r: &mut impl Rng, h: usize, w: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((h, w), |_| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5))
    }

    #[test]
    fn zero_filled_trivial_cases() {
        let mut r = rng(2);
        let x = rand_complex(&mut r, 16, 16);
        let m = Mask::full(16, 16);
        let (k, _) = single_coil(&x, &m);
        let zf = zero_filled(&k);
        let direct = kspace::ifft2c(k.data.index_axis(ndarray::Axis(0), 0)).mapv(|v| v.norm());
        assert!((&zf - &direct).iter().all(|v| v.abs() < 1e-12));
        let zero = CoilKSpace::new(Array3::zeros((2, 8, 8)));
        assert!(zero_filled(&zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_mask_matches_closed_form_prox() {
        let mut r = rng(3);
        let x = rand_complex(&mut r, 16, 16);
        let m = Mask::full(16, 16);
        let (k, s) = single_coil(&x, &m);
        let lambda = 0.05;
        let cfg = FistaConfig { lambda, max_iters: 50, tolerance: 1e-12, ..Default::default() };
        let got = fista_l1wavelet(&k, &s, &m, &cfg).unwrap();
        let x_zf = kspace::adjoint_a(&k, &s, &m).unwrap();
        let want = wavelet_prox(&x_zf, lambda, 3).unwrap().mapv(|v| v.norm());
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn unregularized_full_mask_returns_zero_filled() {
        let mut r = rng(4);
        let x = rand_complex(&mut r, 16, 16);
        let m = Mask::full(16, 16);
        let (k, s) = single_coil(&x, &m);
        let got = fista_l1wavelet(&k, &s, &m, &FistaConfig::default()).unwrap();
        let want = zero_filled(&k);
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn objective_monotone_after_warmup() {
        let mut r = rng(5);
        let x = rand_complex(&mut r, 32, 32);
        let m = crate::mask::generate_mask(crate::mask::MaskPattern::Random, 4, 0.08, (32, 32), 1).unwrap();
        let (k, s) = single_coil(&x, &m);
        let cfg = FistaConfig { lambda: 0.01, max_iters: 60, tolerance: 0.0, ..Default::default() };
        let res = fista_solve(&k, &s, &m, &cfg).unwrap();
        for w in res.objective[5..].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn oversized_operator_diverges() {
        let mut r = rng(6);
        let x = rand_complex(&mut r, 16, 16);
        let m = Mask::full(16, 16);
        // ‖A‖ = 3, so a unit step is far past the Lipschitz bound
        let s = SensitivityMaps::new(Array3::from_elem((1, 16, 16), Complex64::new(3.0, 0.0)));
        let k = kspace::forward_a(&x, &s, &m).unwrap();
        let cfg = FistaConfig { lambda: 1e-3, max_iters: 500, tolerance: 0.0, ..Default::default() };
        let err = fista_solve(&k, &s, &m, &cfg).unwrap_err();
        assert!(matches!(err, ClassicalError::Diverged { .. }), "{err}");
    }

    #[test]
    fn bad_config_rejected() {
        let k = CoilKSpace::new(Array3::zeros((1, 8, 8)));
        let s = SensitivityMaps::unit(8, 8);
        let m = Mask::full(8, 8);
        for cfg in [
            FistaConfig { step: 1.5, ..Default::default() },
            FistaConfig { max_iters: 0, ..Default::default() },
            FistaConfig { lambda: -1.0, ..Default::default() },
        ] {
            assert!(matches!(fista_solve(&k, &s, &m, &cfg), Err(ClassicalError::Config(_))));
        }
    }
}
