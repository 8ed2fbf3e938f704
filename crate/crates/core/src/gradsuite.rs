//! Finite-difference checks of every differentiable operation, a two-layer
//! graph and a small unrolled model.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};

use crate::autodiff::{
    concat0, disco_weights, gradcheck, stack, AutodiffError, GradcheckOptions, GradcheckReport, Tape, Var,
};
use crate::basis::BasisSpec;
use crate::conv::{square_taps, Tap};
use crate::disco::sample_basis;
use crate::grid::GridSpec;
use crate::mask::{generate_mask, MaskPattern};
use crate::model::{ssim_loss, varno_graph, EvalOptions, KernelKind, ModelConfig};
use crate::phantom::{generate_phantoms, simulate_measurement};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradcheckReport,
}

fn rand_arr(seed: u64, shape: &[usize]) -> ArrayD<f64> {
    let mut r = crate::rng::indexed_stream(seed, "gradsuite", shape.len() as u64);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random::<f64>() * 2.0 - 1.0)
}

/// Contract a tensor with fixed random weights so every output entry matters.
fn probe<'t>(y: Var<'t>, seed: u64) -> Var<'t> {
    let w = rand_arr(seed, &y.shape());
    y.mul_const(Rc::new(w)).sum()
}

type Case = (&'static str, Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>, Vec<ArrayD<f64>>);

fn cases() -> Vec<Case> {
    let taps: Rc<Vec<Tap>> = Rc::new(square_taps(3));
    let grid = GridSpec::centered(1.0, 16, 16);
    let sampled = sample_basis(&BasisSpec::piecewise_linear(0.25), &grid).expect("resolved basis");
    let disco_taps = Rc::new(sampled.taps);
    let basis = Rc::new(sampled.values);
    let l = basis.nrows();
    let mask = Rc::new(rand_arr(90, &[8, 8]).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    let t2 = taps.clone();
    let (b2, dt2) = (basis.clone(), disco_taps.clone());
    let target = rand_arr(91, &[12, 12]).mapv(|v| v.abs());
    vec![
        ("add", Box::new(|_, v| probe(v[0].add(v[1]), 1)), vec![rand_arr(1, &[3, 4]), rand_arr(2, &[4])]),
        ("sub", Box::new(|_, v| probe(v[0].sub(v[1]), 2)), vec![rand_arr(3, &[3, 4]), rand_arr(4, &[3, 4])]),
        ("mul", Box::new(|_, v| probe(v[0].mul(v[1]), 3)), vec![rand_arr(5, &[2, 3, 4]), rand_arr(6, &[3, 4])]),
        ("div", Box::new(|_, v| probe(v[0].div(v[1].square().add_scalar(0.5)), 4)), vec![rand_arr(7, &[3, 4]), rand_arr(8, &[4])]),
        ("mul_const", Box::new(|_, v| probe(v[0].mul_const(Rc::new(rand_arr(9, &[4]))), 5)), vec![rand_arr(10, &[3, 4])]),
        ("scale_add_scalar_neg", Box::new(|_, v| probe(v[0].scale(1.7).add_scalar(0.3).neg(), 6)), vec![rand_arr(11, &[5])]),
        ("square_sqrt", Box::new(|_, v| probe(v[0].square().add_scalar(0.2).sqrt(), 7)), vec![rand_arr(12, &[6])]),
        ("sum_mean", Box::new(|_, v| v[0].sum().mul(v[0].mean())), vec![rand_arr(13, &[2, 5])]),
        ("sum0", Box::new(|_, v| probe(v[0].sum0(), 8)), vec![rand_arr(14, &[3, 2, 4])]),
        ("reshape_slice_index", Box::new(|_, v| probe(v[0].reshape(&[4, 3]).slice0(1, 2).index0(1), 9)), vec![rand_arr(15, &[2, 6])]),
        ("concat_stack", Box::new(|_, v| probe(stack(&[concat0(&[v[0], v[1]]), concat0(&[v[1], v[0]])]), 10)), vec![rand_arr(16, &[2, 3]), rand_arr(17, &[2, 3])]),
        ("leaky_relu", Box::new(|_, v| probe(v[0].leaky_relu(0.2), 11)), vec![rand_arr(18, &[2, 8, 8])]),
        ("instance_norm", Box::new(|_, v| probe(v[0].instance_norm(1e-5), 12)), vec![rand_arr(19, &[2, 8, 8])]),
        ("resize_bilinear", Box::new(|_, v| probe(v[0].resize_bilinear(7, 11), 13)), vec![rand_arr(20, &[2, 5, 6])]),
        ("upsample_bilinear", Box::new(|_, v| probe(v[0].upsample_bilinear(2), 14)), vec![rand_arr(21, &[2, 6, 6])]),
        ("avg_pool2", Box::new(|_, v| probe(v[0].avg_pool2(), 15)), vec![rand_arr(22, &[2, 8, 8])]),
        ("conv2d_bias", Box::new(move |_, v| probe(v[0].conv2d(v[1], taps.clone()).channel_bias(v[2]), 16)), vec![rand_arr(23, &[2, 8, 8]), rand_arr(24, &[3, 2, 9]), rand_arr(25, &[3])]),
        ("disco_conv", Box::new(move |_, v| probe(v[0].conv2d(disco_weights(v[1], basis.clone(), 0.7), disco_taps.clone()), 17)), vec![rand_arr(26, &[2, 8, 8]), rand_arr(27, &[2, 2, l])]),
        ("fft_ifft_mask", Box::new(move |_, v| probe(v[0].fft2c().mul_const(mask.clone()).ifft2c(), 18)), vec![rand_arr(28, &[3, 2, 8, 8])]),
        ("cmul_cconj", Box::new(|_, v| probe(v[0].cconj().cmul(v[1]), 19)), vec![rand_arr(29, &[3, 2, 4, 4]), rand_arr(30, &[2, 4, 4])]),
        ("cabs", Box::new(|_, v| probe(v[0].cabs(), 20)), vec![rand_arr(31, &[2, 2, 5, 5])]),
        ("box_filter_valid", Box::new(|_, v| probe(v[0].box_filter_valid(3), 21)), vec![rand_arr(32, &[2, 8, 9])]),
        ("ssim_loss", Box::new(|t, v| ssim_loss(v[0], t.constant(rand_arr(33, &[10, 10])), 2.0).expect("valid ssim")), vec![rand_arr(34, &[10, 10])]),
        (
            "two_layer_graph",
            Box::new(move |t, v| {
                let h = v[0]
                    .conv2d(disco_weights(v[1], b2.clone(), 1.0), dt2.clone())
                    .instance_norm(1e-5)
                    .leaky_relu(0.2)
                    .conv2d(v[2], t2.clone())
                    .channel_bias(v[3]);
                let img = h.square().sum0().add_scalar(1e-3).sqrt();
                ssim_loss(img, t.constant(target.clone()), 1.0).expect("valid ssim")
            }),
            vec![rand_arr(35, &[2, 12, 12]), rand_arr(36, &[3, 2, l]), rand_arr(37, &[2, 3, 9]), rand_arr(38, &[2])],
        ),
    ]
}

/// Run every check; all must pass for the engine to be trusted.
pub fn gradient_suite() -> Result<Vec<GradCase>, AutodiffError> {
    let opts = GradcheckOptions::default();
    let mut out = Vec::new();
    for (name, f, leaves) in cases() {
        let report = gradcheck(|t, v| f(t, v), &leaves, opts)?;
        out.push(GradCase { name, report });
    }
    out.push(GradCase {
        name: "unrolled_model",
        report: unrolled_model_check()?,
    });
    Ok(out)
}

/// Gradient of the SSIM loss of a tiny unrolled model with respect to all
/// of its parameters, on a sampled subset of entries.
fn unrolled_model_check() -> Result<GradcheckReport, AutodiffError> {
    let n = 16;
    let mut cfg = ModelConfig::desk(n, KernelKind::Disco(BasisSpec::piecewise_linear(0.2)), 1, 2);
    cfg.kspace.depth = 1;
    cfg.image.depth = 1;
    let mut params = cfg.init_params(5).expect("valid config");
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    for (name, v) in params.iter_mut() {
        if name.ends_with(".out.w") || name.ends_with(".out.b") {
            v.mapv_inplace(|_| 0.3 * (r.random::<f64>() - 0.5));
        }
    }
    let ds = generate_phantoms(1, n, 2, 7).expect("valid phantom request");
    let m = generate_mask(MaskPattern::Equispaced, 2, 0.25, (n, n), 1).expect("valid mask");
    let k = simulate_measurement(&ds.slices[0], &m, 0.0, 1).expect("matching shapes");
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let leaves: Vec<ArrayD<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let image = ds.slices[0].image.clone();
    let dr = crate::metrics::data_range(&image);
    gradcheck(
        |t, v| {
            let pv = names.iter().cloned().zip(v.iter().copied()).collect();
            let y = varno_graph(t, &cfg, &pv, &k, &m, &EvalOptions::default()).expect("consistent model");
            ssim_loss(y, t.constant(image.clone().into_dyn()), dr).expect("valid ssim")
        },
        &leaves,
        GradcheckOptions {
            max_checks_per_leaf: Some(3),
            ..GradcheckOptions::default()
        },
    )
}
