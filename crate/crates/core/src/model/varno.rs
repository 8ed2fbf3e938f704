//! Sensitivity estimation and the unrolled cascade of data-consistency steps
//! and learned image-space corrections.

use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex64;

use super::udno::{place_params, udno_forward, OpContext, ParamVars};
use super::{ModelConfig, ModelError, ModelParams};
use crate::autodiff::{from_planar3, stack, to_planar3, Tape, Var, Value};
use crate::kspace::{ifft2c_coils, CoilKSpace, SensitivityMaps};
use crate::mask::Mask;

const MAP_EPS: f64 = 1e-24;

/// Physical sample spacing of the k-space and image grids. Coefficients are
/// expressed relative to each operator's reference spacing, so a geometry
/// other than the training one re-synthesizes every DISCO kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub kspace_spacing: f64,
    pub image_spacing: f64,
}

impl Geometry {
    /// Both domains `[-1, 1]` sampled with `n` points per axis.
    pub fn standard(n: usize) -> Self {
        let h = 2.0 / n as f64;
        Self {
            kspace_spacing: h,
            image_spacing: h,
        }
    }

    /// `n`-point k-space on `[-1, 1]` for a model trained on `train_n` points:
    /// the denser k-space sampling widens the image field of view by
    /// `n / train_n` at unchanged image spacing.
    pub fn extended_fov(n: usize, train_n: usize) -> Self {
        Self {
            kspace_spacing: 2.0 / n as f64,
            image_spacing: 2.0 / train_n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Skip the learned k-space operator and every image-space correction.
    pub bypass_no: bool,
    /// `None` uses the standard geometry of the input resolution.
    pub geometry: Option<Geometry>,
    /// Run the cascades on a grid this many times finer than the measurement.
    pub image_scale: usize,
    /// Resize fixed CNN kernels to the evaluation grid.
    pub cnn_rescale: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bypass_no: false,
            geometry: None,
            image_scale: 1,
            cnn_rescale: false,
        }
    }
}

fn check_inputs(cfg: &ModelConfig, k: &CoilKSpace, mask: &Mask, opts: &EvalOptions) -> Result<(), ModelError> {
    cfg.validate()?;
    if k.coils() == 0 {
        return Err(ModelError::Shape("no coils".into()));
    }
    if mask.shape() != k.shape() {
        return Err(ModelError::Shape(format!("mask {:?} vs k-space {:?}", mask.shape(), k.shape())));
    }
    if opts.image_scale == 0 {
        return Err(ModelError::Config("image scale must be >= 1".into()));
    }
    Ok(())
}

fn mask_value(mask: &Mask) -> Value {
    Rc::new(mask.weights().to_owned().into_dyn())
}

/// `s / sqrt(Σ_coils |s|² + ε)` for planar maps `C × 2 × H × W`.
fn normalize_maps(s: Var<'_>) -> Var<'_> {
    let sh = s.shape();
    let n = s
        .square()
        .reshape(&[sh[0] * 2, sh[2], sh[3]])
        .sum0()
        .add_scalar(MAP_EPS)
        .sqrt();
    s.div(n)
}

/// Coil images of the calibration region divided by their RSS (0 where it vanishes).
pub fn calibration_maps(k: &CoilKSpace, mask: &Mask) -> Result<Array3<Complex64>, ModelError> {
    let acs = mask.acs_region().ok_or(ModelError::EmptyCenter)?;
    if !acs.iter().any(|&v| v > 0.0) {
        return Err(ModelError::EmptyCenter);
    }
    let mut kc = k.data.clone();
    for mut p in kc.outer_iter_mut() {
        p.zip_mut_with(&acs, |v, &a| *v *= a);
    }
    let mut c = ifft2c_coils(&kc);
    let rss = crate::kspace::rss_combine(&c);
    for mut p in c.outer_iter_mut() {
        p.zip_mut_with(&rss, |v, &r| *v = if r > 0.0 { *v / r } else { Complex64::new(0.0, 0.0) });
    }
    Ok(c)
}

fn sens_graph<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    p: &ParamVars<'t>,
    k: &CoilKSpace,
    mask: &Mask,
    ctx: &OpContext,
) -> Result<Var<'t>, ModelError> {
    let c0 = tape.constant(to_planar3(&calibration_maps(k, mask)?));
    let refined = (0..k.coils())
        .map(|c| {
            let ci = c0.index0(c);
            Ok(ci.add(udno_forward(&cfg.sens, "sens", p, ci, ctx)?))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(normalize_maps(stack(&refined)))
}

fn geometry(k: &CoilKSpace, opts: &EvalOptions) -> Geometry {
    opts.geometry.unwrap_or_else(|| Geometry::standard(k.shape().1))
}

/// Learned coil sensitivities with unit pixelwise RSS.
pub fn estimate_sensitivities(
    cfg: &ModelConfig,
    params: &ModelParams,
    k: &CoilKSpace,
    mask: &Mask,
    opts: &EvalOptions,
) -> Result<SensitivityMaps, ModelError> {
    check_inputs(cfg, k, mask, opts)?;
    let tape = Tape::new();
    let p = place_params(&tape, params, false);
    let ctx = OpContext {
        spacing: geometry(k, opts).image_spacing,
        cnn_rescale: opts.cnn_rescale,
    };
    let s = sens_graph(&tape, cfg, &p, k, mask, &ctx)?;
    Ok(SensitivityMaps::new(from_planar3(&s.value())))
}

/// Zero-pad centred k-space by `scale` per axis, amplitude-corrected so the
/// image intensity is preserved.
fn pad_kspace(x: &ArrayD<f64>, scale: usize) -> ArrayD<f64> {
    let sh = x.shape();
    let (lead, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
    let (nh, nw) = (h * scale, w * scale);
    let (oy, ox) = ((nh - h) / 2, (nw - w) / 2);
    let mut out = ArrayD::zeros(IxDyn(&[sh[0], sh[1], nh, nw]));
    let src = x.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for p in 0..lead {
        for i in 0..h {
            for j in 0..w {
                dst[(p * nh + oy + i) * nw + ox + j] = src[(p * h + i) * w + j] * scale as f64;
            }
        }
    }
    out
}

fn pad_mask(m: &Array2<f64>, scale: usize) -> Array2<f64> {
    let (h, w) = m.dim();
    let (oy, ox) = ((h * scale - h) / 2, (w * scale - w) / 2);
    let mut out = Array2::zeros((h * scale, w * scale));
    out.slice_mut(ndarray::s![oy..oy + h, ox..ox + w]).assign(m);
    out
}

/// The reconstruction graph: returns the `H × W` magnitude image (times
/// `image_scale` per axis) with every parameter taken from `p`.
pub fn varno_graph<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    p: &ParamVars<'t>,
    k: &CoilKSpace,
    mask: &Mask,
    opts: &EvalOptions,
) -> Result<Var<'t>, ModelError> {
    check_inputs(cfg, k, mask, opts)?;
    let geo = geometry(k, opts);
    let kctx = OpContext {
        spacing: geo.kspace_spacing,
        cnn_rescale: opts.cnn_rescale,
    };
    let ictx = OpContext {
        spacing: geo.image_spacing / opts.image_scale as f64,
        cnn_rescale: opts.cnn_rescale,
    };
    let base_ictx = OpContext {
        spacing: geo.image_spacing,
        ..ictx
    };
    let m = mask_value(mask);
    let kt = tape.constant(to_planar3(&k.data)).mul_const(m.clone());

    let mut sens = sens_graph(tape, cfg, p, k, mask, &base_ictx)?;
    let kref = if opts.bypass_no {
        kt
    } else {
        let coils = (0..k.coils())
            .map(|c| {
                let kc = kt.index0(c);
                Ok(kc.add(udno_forward(&cfg.kspace, "nok", p, kc, &kctx)?))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        stack(&coils)
    };
    let mut x = sens.cconj().cmul(kref.ifft2c()).sum0();

    let (kt, m) = if opts.image_scale > 1 {
        let s = opts.image_scale;
        x = x.upsample_bilinear(s);
        sens = normalize_maps(sens.upsample_bilinear(s));
        let kp = tape.constant(pad_kspace(&kt.value(), s));
        (kp, Rc::new(pad_mask(&mask.weights().to_owned(), s).into_dyn()))
    } else {
        (kt, m)
    };

    let eta = p
        .get("eta")
        .copied()
        .ok_or_else(|| ModelError::Params("missing parameter eta".into()))?;
    if eta.shape() != [cfg.cascades] {
        return Err(ModelError::Params(format!("eta has shape {:?}, expected [{}]", eta.shape(), cfg.cascades)));
    }
    let sens_conj = sens.cconj();
    for t in 0..cfg.cascades {
        let resid = sens.cmul(x).fft2c().mul_const(m.clone()).sub(kt);
        let grad = sens_conj.cmul(resid.ifft2c()).sum0();
        let mut next = x.sub(grad.mul(eta.index0(t)));
        if !opts.bypass_no {
            let corr = udno_forward(&cfg.image, &format!("noi{t}"), p, x, &ictx)?;
            next = next.add(corr.scale(cfg.lambda));
        }
        x = next;
    }
    Ok(x.cabs())
}

/// Evaluate a trained model on one measurement.
pub fn reconstruct(
    cfg: &ModelConfig,
    params: &ModelParams,
    k: &CoilKSpace,
    mask: &Mask,
    opts: &EvalOptions,
) -> Result<Array2<f64>, ModelError> {
    let tape = Tape::new();
    let p = place_params(&tape, params, false);
    let y = varno_graph(&tape, cfg, &p, k, mask, opts)?;
    let v = y.value();
    let sh = v.shape().to_vec();
    Array2::from_shape_vec((sh[0], sh[1]), v.iter().copied().collect()).map_err(|e| ModelError::Shape(e.to_string()))
}
