//! Measurement physics: centered orthonormal FFTs, the multi-coil forward
//! operator `A = M F S_i` and its adjoint, RSS coil combination and the
//! data-consistency gradient step.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::mask::Mask;

#[derive(Debug, Error, PartialEq)]
pub enum KSpaceError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, KSpaceError> {
    Err(KSpaceError::Shape(msg.into()))
}

/// Per-coil complex k-space samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilKSpace {
    /// `coils × H × W`
    pub data: Array3<Complex64>,
    pub mask: Option<Mask>,
    pub noise_sigma: f64,
}

impl CoilKSpace {
    pub fn new(data: Array3<Complex64>) -> Self {
        Self {
            data,
            mask: None,
            noise_sigma: 0.0,
        }
    }

    pub fn coils(&self) -> usize {
        self.data.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Complex coil sensitivities, `coils × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    pub maps: Array3<Complex64>,
}

impl SensitivityMaps {
    pub fn new(maps: Array3<Complex64>) -> Self {
        Self { maps }
    }

    /// Unit single-coil map.
    pub fn unit(h: usize, w: usize) -> Self {
        Self::new(Array3::from_elem((1, h, w), Complex64::new(1.0, 0.0)))
    }

    /// Scale every pixel so that `Σ_i |S_i|² = 1`; all-zero pixels stay zero.
    pub fn normalized(mut self) -> Self {
        let rss = rss_combine(&self.maps);
        Zip::from(self.maps.lanes_mut(Axis(0)))
            .and(&rss)
            .for_each(|mut lane, &r| {
                if r > 0.0 {
                    lane.mapv_inplace(|v| v / r);
                }
            });
        self
    }

    pub fn coils(&self) -> usize {
        self.maps.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Move index `i` to `(i + shift) mod n` along both axes, in place via a copy.
fn roll2(x: &mut ArrayViewMut2<Complex64>, sy: usize, sx: usize) {
    let (h, w) = x.dim();
    if (sy % h.max(1)) == 0 && (sx % w.max(1)) == 0 {
        return;
    }
    let src = x.to_owned();
    for i in 0..h {
        for j in 0..w {
            x[[(i + sy) % h, (j + sx) % w]] = src[[i, j]];
        }
    }
}

fn fft2_inplace(x: &mut ArrayViewMut2<Complex64>, inverse: bool) {
    let (h, w) = x.dim();
    let scratch_len = |f: &Arc<dyn Fft<f64>>| f.get_inplace_scratch_len();
    let row = plan(w, inverse);
    let col = plan(h, inverse);
    let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len(&row).max(scratch_len(&col))];
    let mut buf = vec![Complex64::new(0.0, 0.0); w.max(h)];
    for mut r in x.rows_mut() {
        buf[..w].iter_mut().zip(r.iter()).for_each(|(b, v)| *b = *v);
        row.process_with_scratch(&mut buf[..w], &mut scratch);
        r.iter_mut().zip(&buf[..w]).for_each(|(v, b)| *v = *b);
    }
    for mut c in x.columns_mut() {
        buf[..h].iter_mut().zip(c.iter()).for_each(|(b, v)| *b = *v);
        col.process_with_scratch(&mut buf[..h], &mut scratch);
        c.iter_mut().zip(&buf[..h]).for_each(|(v, b)| *v = *b);
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    x.mapv_inplace(|v| v * scale);
}

/// Centered orthonormal transform applied in place.
pub fn fft2c_inplace(x: &mut ArrayViewMut2<Complex64>) {
    let (h, w) = x.dim();
    // ifftshift: centre index n/2 moves to 0
    roll2(x, h - h / 2, w - w / 2);
    fft2_inplace(x, false);
    roll2(x, h / 2, w / 2);
}

pub fn ifft2c_inplace(x: &mut ArrayViewMut2<Complex64>) {
    let (h, w) = x.dim();
    roll2(x, h - h / 2, w - w / 2);
    fft2_inplace(x, true);
    roll2(x, h / 2, w / 2);
}

/// Centered (zero frequency at index `n/2`) orthonormal 2-D DFT.
pub fn fft2c(x: ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut y = x.to_owned();
    fft2c_inplace(&mut y.view_mut());
    y
}

pub fn ifft2c(x: ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut y = x.to_owned();
    ifft2c_inplace(&mut y.view_mut());
    y
}

/// Apply `fft2c` to every coil plane of a `coils × H × W` stack.
pub fn fft2c_coils(x: &Array3<Complex64>) -> Array3<Complex64> {
    let mut y = x.clone();
    for mut p in y.outer_iter_mut() {
        fft2c_inplace(&mut p);
    }
    y
}

pub fn ifft2c_coils(x: &Array3<Complex64>) -> Array3<Complex64> {
    let mut y = x.clone();
    for mut p in y.outer_iter_mut() {
        ifft2c_inplace(&mut p);
    }
    y
}

fn check(s: &SensitivityMaps, m: &Mask, h: usize, w: usize) -> Result<(), KSpaceError> {
    if s.shape() != (h, w) {
        return shape_err(format!("sensitivities {:?} vs image {h}×{w}", s.shape()));
    }
    if m.shape() != (h, w) {
        return shape_err(format!("mask {:?} vs image {h}×{w}", m.shape()));
    }
    Ok(())
}

/// `k_i = M ⊙ fft2c(S_i ⊙ x)`.
pub fn forward_a(
    x: &Array2<Complex64>,
    s: &SensitivityMaps,
    m: &Mask,
) -> Result<CoilKSpace, KSpaceError> {
    let (h, w) = x.dim();
    check(s, m, h, w)?;
    let mut k = Array3::zeros((s.coils(), h, w));
    let mw = m.weights();
    for (mut kp, sp) in k.outer_iter_mut().zip(s.maps.outer_iter()) {
        Zip::from(&mut kp).and(&sp).and(x).for_each(|k, &si, &xv| *k = si * xv);
        fft2c_inplace(&mut kp);
        Zip::from(&mut kp).and(&mw).for_each(|k, &mv| *k *= mv);
    }
    Ok(CoilKSpace {
        data: k,
        mask: Some(m.clone()),
        noise_sigma: 0.0,
    })
}

/// `Σ_i conj(S_i) ⊙ ifft2c(M ⊙ k_i)`.
pub fn adjoint_a(
    k: &CoilKSpace,
    s: &SensitivityMaps,
    m: &Mask,
) -> Result<Array2<Complex64>, KSpaceError> {
    let (h, w) = k.shape();
    check(s, m, h, w)?;
    if k.coils() != s.coils() {
        return shape_err(format!("{} k-space coils vs {} maps", k.coils(), s.coils()));
    }
    let mw = m.weights();
    let mut x = Array2::zeros((h, w));
    let mut buf = Array2::zeros((h, w));
    for (kp, sp) in k.data.outer_iter().zip(s.maps.outer_iter()) {
        Zip::from(&mut buf).and(&kp).and(&mw).for_each(|b, &kv, &mv| *b = kv * mv);
        ifft2c_inplace(&mut buf.view_mut());
        Zip::from(&mut x).and(&buf).and(&sp).for_each(|x, &b, &si| *x += si.conj() * b);
    }
    Ok(x)
}

/// Pixelwise `sqrt(Σ_i |c_i|²)`.
pub fn rss_combine(coils: &Array3<Complex64>) -> Array2<f64> {
    let (_, h, w) = coils.dim();
    let mut acc = Array2::<f64>::zeros((h, w));
    for p in coils.outer_iter() {
        Zip::from(&mut acc).and(&p).for_each(|a, v| *a += v.norm_sqr());
    }
    acc.mapv_inplace(f64::sqrt);
    acc
}

/// `x − η · A*(A x − k̃)`.
pub fn dc_step(
    x: &Array2<Complex64>,
    k_meas: &CoilKSpace,
    s: &SensitivityMaps,
    m: &Mask,
    eta: f64,
) -> Result<Array2<Complex64>, KSpaceError> {
    let mut resid = forward_a(x, s, m)?;
    if resid.data.dim() != k_meas.data.dim() {
        return shape_err(format!(
            "measurement {:?} vs model {:?}",
            k_meas.data.dim(),
            resid.data.dim()
        ));
    }
    resid.data -= &k_meas.data;
    let g = adjoint_a(&resid, s, m)?;
    Ok(x - &(g * eta))
}

/// `Σ conj(a) · b` over all entries.
pub fn inner(a: &ndarray::ArrayViewD<Complex64>, b: &ndarray::ArrayViewD<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}
