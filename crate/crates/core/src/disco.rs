//! Discrete-continuous (DISCO) convolution.
//!
//! A kernel is a finite combination of function-space basis members. For a
//! concrete grid it is sampled at pixel offsets inside the support disc and
//! multiplied by the quadrature weight `q = h²`, which turns the discrete sum
//! into an approximation of the continuous local integral. The pixel footprint
//! therefore grows with resolution while the physical support stays at `r`.

use ndarray::{Array2, Array3, Array4};
use thiserror::Error;

use crate::basis::{BasisError, BasisSpec};
use crate::conv::{self, ConvShape, Tap};
use crate::grid::GridSpec;

#[derive(Debug, Error, PartialEq)]
pub enum DiscoError {
    #[error("kernel under-resolved: radius {radius} is smaller than grid spacing {spacing}")]
    UnderResolved { radius: f64, spacing: f64 },
    #[error("grid spacing differs between axes")]
    Anisotropic,
    #[error("theta has {found} basis coefficients, basis has {expected}")]
    ThetaLength { expected: usize, found: usize },
    #[error("theta contains non-finite values")]
    NonFiniteTheta,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Basis coefficients of a multi-channel DISCO layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub basis: BasisSpec,
    /// `out_channels × in_channels × L`
    pub theta: Array3<f64>,
}

impl KernelSpec {
    pub fn new(basis: BasisSpec, theta: Array3<f64>) -> Result<Self, DiscoError> {
        basis.validate()?;
        if theta.shape()[2] != basis.len() {
            return Err(DiscoError::ThetaLength {
                expected: basis.len(),
                found: theta.shape()[2],
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(DiscoError::NonFiniteTheta);
        }
        Ok(Self { basis, theta })
    }

    pub fn out_channels(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.theta.shape()[1]
    }
}

/// The basis sampled on one grid: support taps and the `L × taps` value matrix
/// (quadrature weight not included).
#[derive(Debug, Clone, PartialEq)]
pub struct BasisTaps {
    pub half_width: usize,
    pub taps: Vec<Tap>,
    pub values: Array2<f64>,
    pub quadrature_weight: f64,
}

impl BasisTaps {
    pub fn footprint(&self) -> usize {
        2 * self.half_width + 1
    }
}

/// Sample `basis` at every pixel offset `p` with `|p·h| ≤ r`.
pub fn sample_basis(basis: &BasisSpec, grid: &GridSpec) -> Result<BasisTaps, DiscoError> {
    basis.validate()?;
    if !grid.is_isotropic() {
        return Err(DiscoError::Anisotropic);
    }
    let h = grid.spacing()[0];
    let r = basis.radius;
    if r < h {
        return Err(DiscoError::UnderResolved { radius: r, spacing: h });
    }
    let w = (r / h).floor() as usize;
    let wi = w as isize;
    let mut taps = Vec::new();
    for dy in -wi..=wi {
        for dx in -wi..=wi {
            let (oy, ox) = (dy as f64 * h, dx as f64 * h);
            if ox.hypot(oy) <= r {
                taps.push((dy, dx));
            }
        }
    }
    let l = basis.len();
    let mut values = Array2::zeros((l, taps.len()));
    let mut buf = vec![0.0; l];
    for (t, &(dy, dx)) in taps.iter().enumerate() {
        // offset vector is (x, y) in physical units
        basis.eval_into([dx as f64 * h, dy as f64 * h], &mut buf);
        for (ell, &v) in buf.iter().enumerate() {
            values[[ell, t]] = v;
        }
    }
    Ok(BasisTaps {
        half_width: w,
        taps,
        values,
        quadrature_weight: grid.quadrature_weight(),
    })
}

/// A DISCO kernel realized on a specific grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoKernel {
    pub grid: GridSpec,
    pub half_width: usize,
    /// `out × in × (2w+1) × (2w+1)`, zero outside the support disc.
    pub weights: Array4<f64>,
}

impl DiscoKernel {
    pub fn footprint(&self) -> usize {
        2 * self.half_width + 1
    }
}

/// `weights[o, i, p] = q · Σ_ℓ θ[o, i, ℓ] κ_ℓ(p·h)`.
pub fn synthesize_kernel(spec: &KernelSpec, grid: &GridSpec) -> Result<DiscoKernel, DiscoError> {
    let sampled = sample_basis(&spec.basis, grid)?;
    let (co, ci) = (spec.out_channels(), spec.in_channels());
    let s = sampled.footprint();
    let w = sampled.half_width as isize;
    let q = sampled.quadrature_weight;
    let mut weights = Array4::zeros((co, ci, s, s));
    for o in 0..co {
        for i in 0..ci {
            for (t, &(dy, dx)) in sampled.taps.iter().enumerate() {
                let v: f64 = (0..spec.basis.len())
                    .map(|l| spec.theta[[o, i, l]] * sampled.values[[l, t]])
                    .sum();
                weights[[o, i, (dy + w) as usize, (dx + w) as usize]] = q * v;
            }
        }
    }
    Ok(DiscoKernel {
        grid: *grid,
        half_width: sampled.half_width,
        weights,
    })
}

fn flatten_square(weights: &Array4<f64>) -> (Vec<Tap>, Vec<f64>) {
    let s = weights.shape()[2];
    let taps = conv::square_taps(s);
    let flat = weights.as_standard_layout().iter().copied().collect();
    (taps, flat)
}

/// `out(v_i) = Σ_j weights(u_j − v_i) · g(u_j)` with zero padding.
pub fn disco_conv2d(k: &DiscoKernel, g: &Array3<f64>) -> Result<Array3<f64>, DiscoError> {
    let (cin, h, w) = g.dim();
    if [h, w] != k.grid.resolution {
        return Err(DiscoError::Shape(format!(
            "input {h}×{w} does not match kernel grid {:?}",
            k.grid.resolution
        )));
    }
    if cin != k.weights.shape()[1] {
        return Err(DiscoError::Shape(format!(
            "input has {cin} channels, kernel expects {}",
            k.weights.shape()[1]
        )));
    }
    dense_conv(&k.weights, g)
}

/// Fixed-footprint convolution; the tap count does not depend on the grid.
pub fn cnn_conv2d(weights: &Array4<f64>, g: &Array3<f64>) -> Result<Array3<f64>, DiscoError> {
    let s = weights.shape()[2];
    if s % 2 == 0 || weights.shape()[3] != s {
        return Err(DiscoError::EvenKernel(s));
    }
    if g.dim().0 != weights.shape()[1] {
        return Err(DiscoError::Shape(format!(
            "input has {} channels, kernel expects {}",
            g.dim().0,
            weights.shape()[1]
        )));
    }
    dense_conv(weights, g)
}

fn dense_conv(weights: &Array4<f64>, g: &Array3<f64>) -> Result<Array3<f64>, DiscoError> {
    let (cin, h, w) = g.dim();
    let cout = weights.shape()[0];
    let (taps, flat) = flatten_square(weights);
    let input: Vec<f64> = g.as_standard_layout().iter().copied().collect();
    let out = conv::conv_forward(&input, &flat, &taps, &ConvShape { cin, cout, h, w });
    Ok(Array3::from_shape_vec((cout, h, w), out).expect("conv output size"))
}

/// Bilinear resize of each `S × S` tap grid to `new_s × new_s`, then rescale
/// so the sum of absolute tap values of every `(out, in)` pair is preserved.
///
/// Tap centres are aligned at the grid extremes (corner-aligned sampling), so
/// the centre tap maps to the centre tap for any odd size.
pub fn rescale_kernel_bilinear(
    weights: &Array4<f64>,
    new_s: usize,
) -> Result<Array4<f64>, DiscoError> {
    if new_s == 0 || new_s % 2 == 0 {
        return Err(DiscoError::EvenKernel(new_s));
    }
    let (co, ci, s, s2) = weights.dim();
    if s != s2 {
        return Err(DiscoError::Shape("kernel must be square".into()));
    }
    if new_s == s {
        return Ok(weights.clone());
    }
    let coord = |k: usize| -> (usize, usize, f64) {
        if new_s == 1 || s == 1 {
            let c = (s - 1) as f64 / 2.0;
            let lo = c.floor() as usize;
            return (lo, (lo + 1).min(s - 1), c - lo as f64);
        }
        let pos = k as f64 * (s - 1) as f64 / (new_s - 1) as f64;
        let lo = (pos.floor() as usize).min(s - 1);
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Array4::zeros((co, ci, new_s, new_s));
    for o in 0..co {
        for i in 0..ci {
            let src = weights.slice(ndarray::s![o, i, .., ..]);
            let before: f64 = src.iter().map(|v| v.abs()).sum();
            for ky in 0..new_s {
                let (y0, y1, fy) = coord(ky);
                for kx in 0..new_s {
                    let (x0, x1, fx) = coord(kx);
                    let v = (1.0 - fy) * ((1.0 - fx) * src[[y0, x0]] + fx * src[[y0, x1]])
                        + fy * ((1.0 - fx) * src[[y1, x0]] + fx * src[[y1, x1]]);
                    out[[o, i, ky, kx]] = v;
                }
            }
            let after: f64 = out.slice(ndarray::s![o, i, .., ..]).iter().map(|v| v.abs()).sum();
            if after > 0.0 {
                let scale = before / after;
                out.slice_mut(ndarray::s![o, i, .., ..]).mapv_inplace(|v| v * scale);
            }
        }
    }
    Ok(out)
}

/// Smallest odd size covering `size · ratio` taps (at least `size`).
pub fn rescaled_size(size: usize, ratio: f64) -> usize {
    let target = (size as f64 * ratio - 1e-9).ceil().max(1.0) as usize;
    let odd = if target % 2 == 0 { target + 1 } else { target };
    if ratio <= 1.0 {
        odd.min(size).max(1)
    } else {
        odd
    }
}
