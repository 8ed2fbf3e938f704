//! Reverse-mode automatic differentiation over a small closed operation set.
//!
//! Values are real `f64` tensors. Complex quantities use a planar layout with
//! a length-2 (real, imaginary) axis third from the end, `(..., 2, H, W)`.
//! For a real loss `L` the gradient stored for a complex tensor is
//! `∂L/∂re + i ∂L/∂im`, which is the conjugate-Wirtinger convention: the vjp of
//! a complex-linear map is its Hermitian adjoint.
//!
//! Binary elementwise ops broadcast the right operand when its shape is a
//! suffix of the left operand's shape (or when it holds a single value).
//!
//! Shape misuse inside a graph is a programming error and panics with the
//! offending shapes; public model entry points validate their inputs first.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use thiserror::Error;

use crate::conv::{self, ConvShape, Tap};
use crate::kspace;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVariable,
}

pub type Value = Rc<ArrayD<f64>>;

/// User-supplied differentiable operation.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&ArrayD<f64>]) -> ArrayD<f64>;
    /// One gradient per input, each shaped like that input.
    fn vjp(&self, inputs: &[&ArrayD<f64>], output: &ArrayD<f64>, grad: &ArrayD<f64>) -> Vec<ArrayD<f64>>;
}

/// Per-output-index linear interpolation stencil `(i0, i1, w1)`.
type Stencil = Rc<Vec<(usize, usize, f64)>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulConst(usize, Value),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    Sum(usize),
    Sum0(usize),
    Mean(usize),
    Reshape(usize),
    Concat0(Vec<usize>),
    Slice0 { src: usize, start: usize },
    LeakyRelu(usize, f64),
    InstanceNorm { src: usize, inv_std: Vec<f64> },
    Resize { src: usize, rows: Stencil, cols: Stencil },
    AvgPool2(usize),
    Conv { input: usize, weights: usize, taps: Rc<Vec<Tap>> },
    DiscoWeights { theta: usize, basis: Rc<Array2<f64>>, scale: f64 },
    ChannelBias { src: usize, bias: usize },
    Fft2c(usize),
    Ifft2c(usize),
    CMul(usize, usize),
    CConj(usize),
    CAbs(usize),
    BoxFilter { src: usize, k: usize },
    Custom { inputs: Vec<usize>, op: Rc<dyn CustomOp> },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; one tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients from one backward pass, indexed by variable.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> ArrayD<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
    }
}

fn std_array(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

fn slice(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("tape values are kept in standard layout")
}

fn slice_mut(a: &mut ArrayD<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("tape values are kept in standard layout")
}

fn check_broadcast(a: &[usize], b: &[usize], what: &str) {
    let ok = b.iter().product::<usize>() == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b);
    assert!(ok, "{what}: shape {b:?} does not broadcast onto {a:?}");
}

/// `f(a_i, b_{i mod |b|})` over the big operand.
fn bcast_map(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let (av, bv) = (slice(a), slice(b));
    let n = bv.len();
    let data = av.chunks(n).flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect();
    std_array(a.shape(), data)
}

/// Sum a big-operand-shaped gradient down to the small operand's shape.
fn reduce_to(g: &[f64], shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for c in g.chunks(n) {
        out.iter_mut().zip(c).for_each(|(o, v)| *o += v);
    }
    std_array(shape, out)
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn planes(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "spatial op needs at least 2 dims, got {shape:?}");
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    (shape.iter().product::<usize>() / (h * w).max(1), h, w)
}

fn complex_planes(shape: &[usize]) -> (usize, usize, usize) {
    assert!(
        shape.len() >= 3 && shape[shape.len() - 3] == 2,
        "complex op needs a (..., 2, H, W) tensor, got {shape:?}"
    );
    let (n, h, w) = planes(shape);
    (n / 2, h, w)
}

fn fft_planar(a: &ArrayD<f64>, inverse: bool) -> ArrayD<f64> {
    let (n, h, w) = complex_planes(a.shape());
    let src = slice(a);
    let mut out = vec![0.0; src.len()];
    let plane = h * w;
    let mut buf = Array2::<Complex64>::zeros((h, w));
    for k in 0..n {
        let re = &src[2 * k * plane..][..plane];
        let im = &src[(2 * k + 1) * plane..][..plane];
        buf.iter_mut()
            .zip(re.iter().zip(im))
            .for_each(|(z, (&r, &i))| *z = Complex64::new(r, i));
        if inverse {
            kspace::ifft2c_inplace(&mut buf.view_mut());
        } else {
            kspace::fft2c_inplace(&mut buf.view_mut());
        }
        let (ore, oim) = out[2 * k * plane..][..2 * plane].split_at_mut(plane);
        for ((z, r), i) in buf.iter().zip(ore.iter_mut()).zip(oim.iter_mut()) {
            *r = z.re;
            *i = z.im;
        }
    }
    std_array(a.shape(), out)
}

/// `a ⊙ f(b)` for planar complex tensors, `b` broadcast over leading complex planes.
fn cmul_planar(a: &ArrayD<f64>, b: &ArrayD<f64>, conj_b: bool) -> ArrayD<f64> {
    let (_, h, w) = complex_planes(a.shape());
    let plane = h * w;
    let (av, bv) = (slice(a), slice(b));
    let sign = if conj_b { -1.0 } else { 1.0 };
    let mut out = vec![0.0; av.len()];
    for (oc, ac) in out.chunks_mut(bv.len()).zip(av.chunks(bv.len())) {
        for (k, bc) in bv.chunks(2 * plane).enumerate() {
            let (br, bi) = bc.split_at(plane);
            let base = k * 2 * plane;
            for p in 0..plane {
                let (ar, ai) = (ac[base + p], ac[base + plane + p]);
                let (xr, xi) = (br[p], sign * bi[p]);
                oc[base + p] = ar * xr - ai * xi;
                oc[base + plane + p] = ar * xi + ai * xr;
            }
        }
    }
    std_array(a.shape(), out)
}

fn stencil(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_forward(x: &[f64], n: usize, h: usize, w: usize, rows: &Stencil, cols: &Stencil) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; n * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for p in 0..n {
        let src = &x[p * h * w..][..h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in cols.iter().enumerate() {
                tmp[y * ow + ox] = (1.0 - f) * src[y * w + i0] + f * src[y * w + i1];
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(i0, i1, f)) in rows.iter().enumerate() {
            for ox in 0..ow {
                dst[oy * ow + ox] = (1.0 - f) * tmp[i0 * ow + ox] + f * tmp[i1 * ow + ox];
            }
        }
    }
    out
}

fn resize_backward(g: &[f64], n: usize, h: usize, w: usize, rows: &Stencil, cols: &Stencil) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; n * h * w];
    let mut tmp = vec![0.0; h * ow];
    for p in 0..n {
        tmp.fill(0.0);
        let gp = &g[p * oh * ow..][..oh * ow];
        for (oy, &(i0, i1, f)) in rows.iter().enumerate() {
            for ox in 0..ow {
                let v = gp[oy * ow + ox];
                tmp[i0 * ow + ox] += (1.0 - f) * v;
                tmp[i1 * ow + ox] += f * v;
            }
        }
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in cols.iter().enumerate() {
                let v = tmp[y * ow + ox];
                dst[y * w + i0] += (1.0 - f) * v;
                dst[y * w + i1] += f * v;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Value {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: ArrayD<f64>) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn unary(&self, src: usize, value: ArrayD<f64>, op: Op) -> Var<'_> {
        let rg = self.requires(src);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: ArrayD<f64>, op: Op) -> Var<'_> {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads, AutodiffError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::ForeignVariable);
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::ones(lv.raw_dim()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let gs = slice(g);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if rg(*b) {
                accumulate(&mut grads[*b], reduce_to(gs, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if rg(*b) {
                accumulate(&mut grads[*b], -reduce_to(gs, val(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], bcast_map(g, val(*b), |x, y| x * y));
            }
            if rg(*b) {
                let p = g * &**val(*a);
                accumulate(&mut grads[*b], reduce_to(slice(&p), val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], bcast_map(g, val(*b), |x, y| x / y));
            }
            if rg(*b) {
                let q = bcast_map(&(g * &*node.value), val(*b), |x, y| -x / y);
                accumulate(&mut grads[*b], reduce_to(slice(&q), val(*b).shape()));
            }
        }
        Op::MulConst(a, c) => accumulate(&mut grads[*a], bcast_map(g, c, |x, y| x * y)),
        Op::Scale(a, c) => accumulate(&mut grads[*a], g * *c),
        Op::AddScalar(a) => accumulate(&mut grads[*a], g.clone()),
        Op::Sqrt(a) => {
            let d = ndarray::Zip::from(g)
                .and(&*node.value)
                .map_collect(|&gv, &y| if y > 0.0 { 0.5 * gv / y } else { 0.0 });
            accumulate(&mut grads[*a], d);
        }
        Op::Sum(a) => accumulate(&mut grads[*a], ArrayD::from_elem(val(*a).raw_dim(), gs[0])),
        Op::Sum0(a) => {
            let av = val(*a);
            let data = gs.iter().copied().cycle().take(av.len()).collect();
            accumulate(&mut grads[*a], std_array(av.shape(), data));
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(&mut grads[*a], ArrayD::from_elem(val(*a).raw_dim(), gs[0] / n));
        }
        Op::Reshape(a) => accumulate(&mut grads[*a], std_array(val(*a).shape(), gs.to_vec())),
        Op::Concat0(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if rg(p) {
                    accumulate(&mut grads[p], std_array(val(p).shape(), gs[off..off + n].to_vec()));
                }
                off += n;
            }
        }
        Op::Slice0 { src, start } => {
            let sv = val(*src);
            let row: usize = sv.shape()[1..].iter().product();
            let mut d = vec![0.0; sv.len()];
            d[start * row..start * row + gs.len()].copy_from_slice(gs);
            accumulate(&mut grads[*src], std_array(sv.shape(), d));
        }
        Op::LeakyRelu(a, slope) => {
            let d = ndarray::Zip::from(g)
                .and(&**val(*a))
                .map_collect(|&gv, &x| if x >= 0.0 { gv } else { slope * gv });
            accumulate(&mut grads[*a], d);
        }
        Op::InstanceNorm { src, inv_std } => {
            let y = slice(&node.value);
            let (_, h, w) = planes(node.value.shape());
            let n = (h * w) as f64;
            let mut d = vec![0.0; y.len()];
            for (p, &is) in inv_std.iter().enumerate() {
                let r = p * h * w..(p + 1) * h * w;
                let (gp, yp) = (&gs[r.clone()], &y[r.clone()]);
                let mg = gp.iter().sum::<f64>() / n;
                let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((dv, &gv), &yv) in d[r].iter_mut().zip(gp).zip(yp) {
                    *dv = is * (gv - mg - yv * mgy);
                }
            }
            accumulate(&mut grads[*src], std_array(val(*src).shape(), d));
        }
        Op::Resize { src, rows, cols } => {
            let (n, h, w) = planes(val(*src).shape());
            let d = resize_backward(gs, n, h, w, rows, cols);
            accumulate(&mut grads[*src], std_array(val(*src).shape(), d));
        }
        Op::AvgPool2(a) => {
            let (n, h, w) = planes(val(*a).shape());
            let (oh, ow) = (h / 2, w / 2);
            let mut d = vec![0.0; n * h * w];
            for p in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        d[(p * h + y) * w + x] = 0.25 * gs[(p * oh + y / 2) * ow + x / 2];
                    }
                }
            }
            accumulate(&mut grads[*a], std_array(val(*a).shape(), d));
        }
        Op::Conv { input, weights, taps } => {
            let (iv, wv) = (val(*input), val(*weights));
            let sh = iv.shape();
            let s = ConvShape {
                cin: sh[0],
                cout: wv.shape()[0],
                h: sh[1],
                w: sh[2],
            };
            let (gi, gw) = conv::conv_backward(gs, slice(iv), slice(wv), taps, &s, rg(*input), rg(*weights));
            if let Some(gi) = gi {
                accumulate(&mut grads[*input], std_array(sh, gi));
            }
            if let Some(gw) = gw {
                accumulate(&mut grads[*weights], std_array(wv.shape(), gw));
            }
        }
        Op::DiscoWeights { theta, basis, scale } => {
            let tv = val(*theta);
            let pairs = tv.shape()[0] * tv.shape()[1];
            let g2 = g
                .view()
                .into_shape_with_order((pairs, basis.ncols()))
                .expect("weight gradient layout");
            let d = g2.dot(&basis.t()) * *scale;
            accumulate(&mut grads[*theta], std_array(tv.shape(), d.into_raw_vec_and_offset().0));
        }
        Op::ChannelBias { src, bias } => {
            if rg(*src) {
                accumulate(&mut grads[*src], g.clone());
            }
            if rg(*bias) {
                let c = val(*bias).len();
                let plane = gs.len() / c;
                let d = gs.chunks(plane).map(|p| p.iter().sum()).collect();
                accumulate(&mut grads[*bias], std_array(val(*bias).shape(), d));
            }
        }
        Op::Fft2c(a) => accumulate(&mut grads[*a], fft_planar(g, true)),
        Op::Ifft2c(a) => accumulate(&mut grads[*a], fft_planar(g, false)),
        Op::CMul(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], cmul_planar(g, val(*b), true));
            }
            if rg(*b) {
                let p = cmul_planar(g, val(*a), true);
                accumulate(&mut grads[*b], reduce_to(slice(&p), val(*b).shape()));
            }
        }
        Op::CConj(a) => {
            let (n, h, w) = complex_planes(g.shape());
            let mut d = gs.to_vec();
            for k in 0..n {
                d[(2 * k + 1) * h * w..(2 * k + 2) * h * w].iter_mut().for_each(|v| *v = -*v);
            }
            accumulate(&mut grads[*a], std_array(g.shape(), d));
        }
        Op::CAbs(a) => {
            let av = val(*a);
            let (n, h, w) = complex_planes(av.shape());
            let (src, mag) = (slice(av), slice(&node.value));
            let plane = h * w;
            let mut d = vec![0.0; src.len()];
            for k in 0..n {
                for p in 0..plane {
                    let m = mag[k * plane + p];
                    if m > 0.0 {
                        let gv = gs[k * plane + p] / m;
                        d[2 * k * plane + p] = gv * src[2 * k * plane + p];
                        d[(2 * k + 1) * plane + p] = gv * src[(2 * k + 1) * plane + p];
                    }
                }
            }
            accumulate(&mut grads[*a], std_array(av.shape(), d));
        }
        Op::BoxFilter { src, k } => {
            let sv = val(*src);
            let (n, h, w) = planes(sv.shape());
            let (oh, ow) = (h + 1 - k, w + 1 - k);
            let norm = 1.0 / (k * k) as f64;
            let mut d = vec![0.0; sv.len()];
            let mut tmp = vec![0.0; h * ow];
            for p in 0..n {
                tmp.fill(0.0);
                let gp = &gs[p * oh * ow..][..oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        let v = gp[y * ow + x] * norm;
                        for dy in 0..*k {
                            tmp[(y + dy) * ow + x] += v;
                        }
                    }
                }
                let dp = &mut d[p * h * w..][..h * w];
                for y in 0..h {
                    for x in 0..ow {
                        let v = tmp[y * ow + x];
                        for dx in 0..*k {
                            dp[y * w + x + dx] += v;
                        }
                    }
                }
            }
            accumulate(&mut grads[*src], std_array(sv.shape(), d));
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<&ArrayD<f64>> = inputs.iter().map(|&i| &**val(i)).collect();
            let ds = op.vjp(&vals, &node.value, g);
            assert_eq!(ds.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
            for (&i, d) in inputs.iter().zip(ds) {
                if rg(i) {
                    accumulate(&mut grads[i], d);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Value {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, o: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, o.tape), "variables from different tapes");
    }

    fn elementwise(self, o: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        check_broadcast(a.shape(), b.shape(), what);
        self.tape.binary(self.id, o.id, bcast_map(&a, &b, f), op)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.elementwise(o, "add", |x, y| x + y, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.elementwise(o, "sub", |x, y| x - y, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.elementwise(o, "mul", |x, y| x * y, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.elementwise(o, "div", |x, y| x / y, Op::Div(self.id, o.id))
    }

    /// Multiply by a constant broadcast onto this tensor (e.g. a sampling mask).
    pub fn mul_const(self, c: Value) -> Var<'t> {
        let a = self.value();
        check_broadcast(a.shape(), c.shape(), "mul_const");
        let v = bcast_map(&a, &c, |x, y| x * y);
        self.tape.unary(self.id, v, Op::MulConst(self.id, c))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.tape.unary(self.id, v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = &*self.value() + c;
        self.tape.unary(self.id, v, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.tape.unary(self.id, v, Op::Sqrt(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.tape.unary(self.id, v, Op::Sum(self.id))
    }

    /// Sum over the leading axis.
    pub fn sum0(self) -> Var<'t> {
        let a = self.value();
        assert!(a.ndim() >= 1, "sum0 of a scalar");
        let v = reduce_to(slice(&a), &a.shape()[1..]);
        self.tape.unary(self.id, v, Op::Sum0(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let v = ArrayD::from_elem(IxDyn(&[]), a.sum() / a.len() as f64);
        self.tape.unary(self.id, v, Op::Mean(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(
            a.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            a.shape()
        );
        self.tape.unary(self.id, std_array(shape, slice(&a).to_vec()), Op::Reshape(self.id))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice0(self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let sh = a.shape();
        assert!(start + len <= sh[0], "slice0 {start}+{len} out of {}", sh[0]);
        let row: usize = sh[1..].iter().product();
        let mut shape = sh.to_vec();
        shape[0] = len;
        let v = std_array(&shape, slice(&a)[start * row..(start + len) * row].to_vec());
        self.tape.unary(self.id, v, Op::Slice0 { src: self.id, start })
    }

    /// Row `i` of the leading axis, with that axis dropped.
    pub fn index0(self, i: usize) -> Var<'t> {
        let sh = self.shape();
        self.slice0(i, 1).reshape(&sh[1..])
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.tape.unary(self.id, v, Op::LeakyRelu(self.id, slope))
    }

    /// Per-plane standardization over the last two axes, no affine.
    pub fn instance_norm(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let (n, h, w) = planes(a.shape());
        let x = slice(&a);
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(n);
        let m = (h * w) as f64;
        for p in 0..n {
            let xp = &x[p * h * w..][..h * w];
            let mean = xp.iter().sum::<f64>() / m;
            let var = xp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in y[p * h * w..][..h * w].iter_mut().zip(xp) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = std_array(a.shape(), y);
        self.tape.unary(self.id, v, Op::InstanceNorm { src: self.id, inv_std })
    }

    /// Bilinear resampling of the last two axes (half-pixel centres, edge clamped).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'t> {
        let a = self.value();
        let (n, h, w) = planes(a.shape());
        assert!(oh > 0 && ow > 0 && h > 0 && w > 0);
        let rows: Stencil = Rc::new(stencil(h, oh));
        let cols: Stencil = Rc::new(stencil(w, ow));
        let out = resize_forward(slice(&a), n, h, w, &rows, &cols);
        let mut shape = a.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.tape.unary(
            self.id,
            std_array(&shape, out),
            Op::Resize { src: self.id, rows, cols },
        )
    }

    pub fn upsample_bilinear(self, scale: usize) -> Var<'t> {
        assert!(scale >= 1, "upsample scale must be >= 1");
        let sh = self.shape();
        let r = sh.len();
        self.resize_bilinear(sh[r - 2] * scale, sh[r - 1] * scale)
    }

    /// 2×2 mean down-sampling of the last two axes.
    pub fn avg_pool2(self) -> Var<'t> {
        let a = self.value();
        let (n, h, w) = planes(a.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents, got {h}×{w}");
        let (oh, ow) = (h / 2, w / 2);
        let x = slice(&a);
        let mut out = vec![0.0; n * oh * ow];
        for p in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(p * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let mut shape = a.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.tape.unary(self.id, std_array(&shape, out), Op::AvgPool2(self.id))
    }

    /// Cross-correlation of a `Cin × H × W` input with `Cout × Cin × taps` weights.
    pub fn conv2d(self, weights: Var<'t>, taps: Rc<Vec<Tap>>) -> Var<'t> {
        self.same_tape(&weights);
        let (iv, wv) = (self.value(), weights.value());
        assert_eq!(iv.ndim(), 3, "conv2d input must be C×H×W, got {:?}", iv.shape());
        let sh = iv.shape();
        let s = ConvShape {
            cin: sh[0],
            cout: wv.shape()[0],
            h: sh[1],
            w: sh[2],
        };
        assert_eq!(
            wv.shape(),
            &[s.cout, s.cin, taps.len()],
            "conv2d weights vs input {:?} with {} taps",
            sh,
            taps.len()
        );
        let out = conv::conv_forward(slice(&iv), slice(&wv), &taps, &s);
        self.tape.binary(
            self.id,
            weights.id,
            std_array(&[s.cout, s.h, s.w], out),
            Op::Conv { input: self.id, weights: weights.id, taps },
        )
    }

    /// Add `bias[c]` to every pixel of channel `c`.
    pub fn channel_bias(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let (a, b) = (self.value(), bias.value());
        assert_eq!(a.shape()[0], b.len(), "channel_bias {:?} vs {:?}", a.shape(), b.shape());
        let plane = a.len() / b.len();
        let bv = slice(&b);
        let data = slice(&a)
            .chunks(plane)
            .zip(bv)
            .flat_map(|(c, &bb)| c.iter().map(move |v| v + bb))
            .collect();
        self.tape.binary(
            self.id,
            bias.id,
            std_array(a.shape(), data),
            Op::ChannelBias { src: self.id, bias: bias.id },
        )
    }

    pub fn fft2c(self) -> Var<'t> {
        let v = fft_planar(&self.value(), false);
        self.tape.unary(self.id, v, Op::Fft2c(self.id))
    }

    pub fn ifft2c(self) -> Var<'t> {
        let v = fft_planar(&self.value(), true);
        self.tape.unary(self.id, v, Op::Ifft2c(self.id))
    }

    /// Complex product; `o` broadcasts over leading complex planes.
    pub fn cmul(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        complex_planes(b.shape());
        check_broadcast(a.shape(), b.shape(), "cmul");
        let v = cmul_planar(&a, &b, false);
        self.tape.binary(self.id, o.id, v, Op::CMul(self.id, o.id))
    }

    pub fn cconj(self) -> Var<'t> {
        let a = self.value();
        let (n, h, w) = complex_planes(a.shape());
        let mut d = slice(&a).to_vec();
        for k in 0..n {
            d[(2 * k + 1) * h * w..(2 * k + 2) * h * w].iter_mut().for_each(|v| *v = -*v);
        }
        self.tape.unary(self.id, std_array(a.shape(), d), Op::CConj(self.id))
    }

    /// Magnitude; drops the complex axis. The gradient at exactly zero is zero.
    pub fn cabs(self) -> Var<'t> {
        let a = self.value();
        let (n, h, w) = complex_planes(a.shape());
        let x = slice(&a);
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        for k in 0..n {
            for p in 0..plane {
                out[k * plane + p] = x[2 * k * plane + p].hypot(x[(2 * k + 1) * plane + p]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(shape.len() - 3);
        self.tape.unary(self.id, std_array(&shape, out), Op::CAbs(self.id))
    }

    /// Mean over every `k × k` window fully inside the last two axes.
    pub fn box_filter_valid(self, k: usize) -> Var<'t> {
        let a = self.value();
        let (n, h, w) = planes(a.shape());
        assert!(k >= 1 && k <= h && k <= w, "box window {k} larger than {h}×{w}");
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let norm = 1.0 / (k * k) as f64;
        let x = slice(&a);
        let mut out = vec![0.0; n * oh * ow];
        let mut tmp = vec![0.0; h * ow];
        for p in 0..n {
            let xp = &x[p * h * w..][..h * w];
            for y in 0..h {
                for xx in 0..ow {
                    tmp[y * ow + xx] = xp[y * w + xx..][..k].iter().sum();
                }
            }
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = (0..k).map(|dy| tmp[(y + dy) * ow + xx]).sum::<f64>() * norm;
                }
            }
        }
        let mut shape = a.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.tape.unary(self.id, std_array(&shape, out), Op::BoxFilter { src: self.id, k })
    }
}

/// Concatenate along the leading axis; trailing extents must agree.
pub fn concat0<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat0 of nothing");
    let tape = parts[0].tape;
    let vals: Vec<Value> = parts.iter().map(|p| p.value()).collect();
    let tail = &vals[0].shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for v in &vals {
        assert_eq!(&v.shape()[1..], tail, "concat0 trailing shapes differ");
        lead += v.shape()[0];
        data.extend_from_slice(slice(v));
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    let rg = parts.iter().any(|p| p.requires_grad());
    tape.push(std_array(&shape, data), Op::Concat0(parts.iter().map(|p| p.id).collect()), rg)
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let reshaped: Vec<Var<'t>> = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect();
    concat0(&reshaped)
}

/// Kernel weights `scale · θ · B` for `θ: Cout × Cin × L` and `basis: L × taps`.
pub fn disco_weights<'t>(theta: Var<'t>, basis: Rc<Array2<f64>>, scale: f64) -> Var<'t> {
    let tv = theta.value();
    assert_eq!(tv.ndim(), 3, "theta must be Cout×Cin×L");
    let (co, ci, l) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
    assert_eq!(basis.nrows(), l, "basis rows {} vs θ length {l}", basis.nrows());
    let t2 = tv.view().into_shape_with_order((co * ci, l)).expect("θ layout");
    let w = t2.dot(&*basis) * scale;
    let out = std_array(&[co, ci, basis.ncols()], w.as_standard_layout().iter().copied().collect());
    theta
        .tape
        .unary(theta.id, out, Op::DiscoWeights { theta: theta.id, basis, scale })
}

pub fn custom<'t>(inputs: &[Var<'t>], op: Rc<dyn CustomOp>) -> Var<'t> {
    let tape = inputs[0].tape;
    let vals: Vec<Value> = inputs.iter().map(|v| v.value()).collect();
    let refs: Vec<&ArrayD<f64>> = vals.iter().map(|v| &**v).collect();
    let out = op.forward(&refs);
    let rg = inputs.iter().any(|v| v.requires_grad());
    tape.push(out, Op::Custom { inputs: inputs.iter().map(|v| v.id).collect(), op }, rg)
}

/// Planar `2 × H × W` view of a complex image.
pub fn to_planar(x: &Array2<Complex64>) -> ArrayD<f64> {
    let (h, w) = x.dim();
    let mut d = Vec::with_capacity(2 * h * w);
    d.extend(x.iter().map(|v| v.re));
    d.extend(x.iter().map(|v| v.im));
    std_array(&[2, h, w], d)
}

/// Planar `C × 2 × H × W` view of a complex stack.
pub fn to_planar3(x: &ndarray::Array3<Complex64>) -> ArrayD<f64> {
    let (c, h, w) = x.dim();
    let mut d = Vec::with_capacity(2 * c * h * w);
    for p in x.outer_iter() {
        d.extend(p.iter().map(|v| v.re));
        d.extend(p.iter().map(|v| v.im));
    }
    std_array(&[c, 2, h, w], d)
}

/// Inverse of [`to_planar`] for a `2 × H × W` tensor.
pub fn from_planar(x: &ArrayD<f64>) -> Array2<Complex64> {
    let sh = x.shape();
    assert!(sh.len() == 3 && sh[0] == 2, "expected 2×H×W, got {sh:?}");
    let (h, w) = (sh[1], sh[2]);
    let v = slice(x);
    Array2::from_shape_fn((h, w), |(i, j)| Complex64::new(v[i * w + j], v[h * w + i * w + j]))
}

pub fn from_planar3(x: &ArrayD<f64>) -> ndarray::Array3<Complex64> {
    let sh = x.shape();
    assert!(sh.len() == 4 && sh[1] == 2, "expected C×2×H×W, got {sh:?}");
    let (c, h, w) = (sh[0], sh[2], sh[3]);
    let v = slice(x);
    ndarray::Array3::from_shape_fn((c, h, w), |(k, i, j)| {
        Complex64::new(v[(2 * k * h + i) * w + j], v[((2 * k + 1) * h + i) * w + j])
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per leaf (`None` = all).
    pub max_checks_per_leaf: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_checks_per_leaf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare tape gradients of the scalar graph `f` against central differences.
///
/// The relative error of each entry is `|a − n| / max(|a|, |n|, 1e-3·max|n|)`,
/// where the last floor (taken over the leaf) keeps entries whose true
/// derivative is negligible from being judged on rounding noise alone.
pub fn gradcheck<F>(f: F, leaves: &[ArrayD<f64>], opts: GradcheckOptions) -> Result<GradcheckReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<ArrayD<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = leaves.iter().map(|l| tape.param(l.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let eval = |ls: &[ArrayD<f64>]| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ls.iter().map(|l| tape.constant(l.clone())).collect();
        let out = f(&tape, &vars);
        let v = out.value();
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.iter().copied().next().unwrap())
    };
    let mut work: Vec<ArrayD<f64>> = leaves.iter().map(|l| l.as_standard_layout().into_owned()).collect();
    let mut max_rel = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let n = work[li].len();
        let stride = match opts.max_checks_per_leaf {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut pairs = Vec::new();
        for e in (0..n).step_by(stride) {
            let orig = slice(&work[li])[e];
            let (xp, xm) = (orig + opts.step, orig - opts.step);
            slice_mut(&mut work[li])[e] = xp;
            let fp = eval(&work)?;
            slice_mut(&mut work[li])[e] = xm;
            let fm = eval(&work)?;
            slice_mut(&mut work[li])[e] = orig;
            // divide by the step actually realized in floating point
            pairs.push((slice(&analytic[li])[e], (fp - fm) / (xp - xm)));
        }
        let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.1.abs()));
        let err = pairs
            .iter()
            .map(|&(a, num)| (a - num).abs() / a.abs().max(num.abs()).max(1e-3 * scale).max(1e-12))
            .fold(0.0f64, f64::max);
        max_rel.push(err);
    }
    let passed = max_rel.iter().all(|&e| e < opts.tolerance);
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        tolerance: opts.tolerance,
        passed,
    })
}
