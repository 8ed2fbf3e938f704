//! U-shaped encoder/decoder operator built from DISCO (or fixed CNN) layers.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{KernelKind, ModelError, ModelParams, UdnoConfig};
use crate::autodiff::{concat0, disco_weights, Tape, Var};
use crate::basis::BasisSpec;
use crate::conv::{square_taps, Tap};
use crate::disco::{rescale_kernel_bilinear, rescaled_size, sample_basis};
use crate::grid::GridSpec;

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const RMS_EPS: f64 = 1e-20;

/// Parameters placed on a tape, by name.
pub type ParamVars<'t> = BTreeMap<String, Var<'t>>;

/// Where an operator is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpContext {
    /// Physical spacing of the level-0 grid.
    pub spacing: f64,
    /// Resize fixed CNN kernels by the spacing ratio instead of reusing taps.
    pub cnn_rescale: bool,
}

impl OpContext {
    pub fn at(spacing: f64) -> Self {
        Self {
            spacing,
            cnn_rescale: false,
        }
    }
}

type SampledBasis = (Rc<Vec<Tap>>, Rc<Array2<f64>>);

thread_local! {
    static BASIS_CACHE: RefCell<HashMap<(u8, u64, usize, usize, usize, u64), SampledBasis>> =
        RefCell::new(HashMap::new());
}

/// Basis sampled on a grid of the given spacing, memoized per thread.
fn sampled_basis(b: &BasisSpec, spacing: f64) -> Result<SampledBasis, ModelError> {
    let key = (
        b.family.code(),
        b.radius.to_bits(),
        b.n_isotropic,
        b.n_rings,
        b.n_per_ring,
        spacing.to_bits(),
    );
    if let Some(hit) = BASIS_CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return Ok(hit);
    }
    let grid = GridSpec::new([0.0, 0.0], [spacing, spacing], [1, 1])
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let s = sample_basis(b, &grid)?;
    let entry = (Rc::new(s.taps), Rc::new(s.values));
    BASIS_CACHE.with(|c| c.borrow_mut().insert(key, entry.clone()));
    Ok(entry)
}

/// Pixel footprint side of a level-0 layer evaluated at `spacing`.
pub fn footprint(cfg: &UdnoConfig, ctx: &OpContext) -> Result<usize, ModelError> {
    Ok(match cfg.kernel {
        KernelKind::Disco(b) => {
            let (taps, _) = sampled_basis(&b, ctx.spacing)?;
            2 * taps.iter().map(|&(dy, _)| dy.unsigned_abs()).max().unwrap_or(0) + 1
        }
        KernelKind::Cnn(s) if ctx.cnn_rescale => rescaled_size(s, cfg.ref_spacing / ctx.spacing),
        KernelKind::Cnn(s) => s,
    })
}

fn normal(rng: &mut impl Rng, shape: &[usize], var: f64) -> ArrayD<f64> {
    let d = Normal::new(0.0, var.sqrt()).expect("finite variance");
    ArrayD::from_shape_fn(IxDyn(shape), |_| d.sample(rng))
}

/// Shapes `(name, cout, cin)` of every spatial layer, in construction order.
fn layers(cfg: &UdnoConfig, prefix: &str) -> Vec<(String, usize, usize)> {
    let mut v = Vec::new();
    let mut cin = cfg.in_channels;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        v.push((format!("{prefix}.enc{l}.a"), c, cin));
        v.push((format!("{prefix}.enc{l}.b"), c, c));
        cin = c;
    }
    let c = cfg.channels(cfg.depth);
    v.push((format!("{prefix}.mid.a"), c, cin));
    v.push((format!("{prefix}.mid.b"), c, c));
    for l in (0..cfg.depth).rev() {
        v.push((format!("{prefix}.dec{l}"), cfg.channels(l), cfg.channels(l + 1) + cfg.channels(l)));
    }
    v
}

/// Draw He-scaled kernels and a zero output projection into `params`.
pub fn init_udno(cfg: &UdnoConfig, prefix: &str, rng: &mut impl Rng, params: &mut ModelParams) -> Result<(), ModelError> {
    cfg.validate()?;
    for (name, cout, cin) in layers(cfg, prefix) {
        let theta = match cfg.kernel {
            KernelKind::Disco(b) => {
                let (taps, values) = sampled_basis(&b, cfg.ref_spacing)?;
                let beta = values.map(|v| v * v).sum() / taps.len() as f64;
                let var = 2.0 / (cin as f64 * taps.len() as f64 * beta);
                normal(rng, &[cout, cin, b.len()], var)
            }
            KernelKind::Cnn(s) => normal(rng, &[cout, cin, s * s], 2.0 / (cin * s * s) as f64),
        };
        params.insert(name, theta)?;
    }
    params.insert(format!("{prefix}.out.w"), ArrayD::zeros(IxDyn(&[cfg.out_channels, cfg.hidden, 1])))?;
    params.insert(format!("{prefix}.out.b"), ArrayD::zeros(IxDyn(&[cfg.out_channels])))?;
    Ok(())
}

fn param<'t>(p: &ParamVars<'t>, name: &str) -> Result<Var<'t>, ModelError> {
    p.get(name)
        .copied()
        .ok_or_else(|| ModelError::Params(format!("missing parameter {name}")))
}

fn conv<'t>(
    cfg: &UdnoConfig,
    p: &ParamVars<'t>,
    name: &str,
    x: Var<'t>,
    level: usize,
    ctx: &OpContext,
) -> Result<Var<'t>, ModelError> {
    let theta = param(p, name)?;
    let f = (1usize << level) as f64;
    let (weights, taps) = match cfg.kernel {
        KernelKind::Disco(b) => {
            let (taps, values) = sampled_basis(&b.with_radius(b.radius * f), ctx.spacing * f)?;
            if theta.shape()[2] != values.nrows() {
                return Err(ModelError::Params(format!("{name}: θ length {:?} vs basis {}", theta.shape(), values.nrows())));
            }
            let scale = (ctx.spacing / cfg.ref_spacing).powi(2);
            (disco_weights(theta, values, scale), taps)
        }
        KernelKind::Cnn(s) => {
            let ratio = cfg.ref_spacing / ctx.spacing;
            let ns = rescaled_size(s, ratio);
            if ctx.cnn_rescale && ns != s {
                let sh = theta.shape();
                let w4 = Array4::from_shape_vec((sh[0], sh[1], s, s), theta.value().iter().copied().collect())
                    .map_err(|e| ModelError::Shape(e.to_string()))?;
                let r = rescale_kernel_bilinear(&w4, ns)?;
                let w = r.into_shape_with_order(IxDyn(&[sh[0], sh[1], ns * ns])).expect("kernel layout");
                (x.tape().constant(w), Rc::new(square_taps(ns)))
            } else {
                (theta, Rc::new(square_taps(s)))
            }
        }
    };
    Ok(x.conv2d(weights, taps))
}

fn block<'t>(
    cfg: &UdnoConfig,
    p: &ParamVars<'t>,
    name: &str,
    x: Var<'t>,
    level: usize,
    ctx: &OpContext,
) -> Result<Var<'t>, ModelError> {
    Ok(conv(cfg, p, name, x, level, ctx)?.instance_norm(NORM_EPS).leaky_relu(LEAKY_SLOPE))
}

/// Apply the operator to a `C × H × W` input. The input is divided by its RMS
/// value and the output multiplied back, so the map is scale-equivariant.
pub fn udno_forward<'t>(
    cfg: &UdnoConfig,
    prefix: &str,
    p: &ParamVars<'t>,
    x: Var<'t>,
    ctx: &OpContext,
) -> Result<Var<'t>, ModelError> {
    let sh = x.shape();
    if sh.len() != 3 || sh[0] != cfg.in_channels {
        return Err(ModelError::Shape(format!("operator expects {}×H×W, got {sh:?}", cfg.in_channels)));
    }
    let (mut h, mut w) = (sh[1], sh[2]);
    for level in 0..cfg.depth {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ModelError::Divisibility { level, h, w });
        }
        h /= 2;
        w /= 2;
    }
    let rms = x.square().mean().add_scalar(RMS_EPS).sqrt();
    let inv = x.tape().scalar(1.0).div(rms);
    let mut y = x.mul(inv);
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        y = block(cfg, p, &format!("{prefix}.enc{l}.a"), y, l, ctx)?;
        y = block(cfg, p, &format!("{prefix}.enc{l}.b"), y, l, ctx)?;
        skips.push(y);
        y = y.avg_pool2();
    }
    y = block(cfg, p, &format!("{prefix}.mid.a"), y, cfg.depth, ctx)?;
    y = block(cfg, p, &format!("{prefix}.mid.b"), y, cfg.depth, ctx)?;
    for l in (0..cfg.depth).rev() {
        y = concat0(&[y.upsample_bilinear(2), skips[l]]);
        y = block(cfg, p, &format!("{prefix}.dec{l}"), y, l, ctx)?;
    }
    let ow = param(p, &format!("{prefix}.out.w"))?;
    let ob = param(p, &format!("{prefix}.out.b"))?;
    let out = y.conv2d(ow, Rc::new(vec![(0, 0)])).channel_bias(ob);
    Ok(out.mul(rms))
}

/// Place every parameter on `tape`; trainable ones require gradients.
pub fn place_params<'t>(tape: &'t Tape, params: &ModelParams, trainable: bool) -> ParamVars<'t> {
    params
        .iter()
        .map(|(k, v)| {
            let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
            (k.clone(), var)
        })
        .collect()
}
