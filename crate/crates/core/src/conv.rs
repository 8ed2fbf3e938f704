//! Dense multi-channel 2-D cross-correlation over an explicit tap list.
//!
//! `out[o, y, x] = Σ_i Σ_t w[o, i, t] · in[i, y + dy_t, x + dx_t]`, zero padded.
//! Both DISCO kernels (disc-shaped tap sets) and fixed square CNN kernels
//! lower onto this routine. Work is tiled over output rows and each tile is an
//! im2col product handed to `matrixmultiply`.

/// Pixel offset `(dy, dx)` of one kernel tap.
pub type Tap = (isize, isize);

/// All taps of an odd `size × size` square kernel, row-major.
pub fn square_taps(size: usize) -> Vec<Tap> {
    let w = (size / 2) as isize;
    let mut taps = Vec::with_capacity(size * size);
    for dy in -w..=w {
        for dx in -w..=w {
            taps.push((dy, dx));
        }
    }
    taps
}

#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

const TILE_BUDGET: usize = 1 << 18;

fn rows_per_tile(k: usize, w: usize, h: usize) -> usize {
    (TILE_BUDGET / (k * w).max(1)).clamp(1, h)
}

/// Fill `col` (K × tile_len, row-major) for output rows `[y0, y1)`.
fn im2col(input: &[f64], s: &ConvShape, taps: &[Tap], y0: usize, y1: usize, col: &mut [f64]) {
    let (h, w) = (s.h as isize, s.w as isize);
    let tile_len = (y1 - y0) * s.w;
    for i in 0..s.cin {
        let plane = &input[i * s.plane()..(i + 1) * s.plane()];
        for (t, &(dy, dx)) in taps.iter().enumerate() {
            let row = &mut col[(i * taps.len() + t) * tile_len..][..tile_len];
            for y in y0..y1 {
                let dst = &mut row[(y - y0) * s.w..][..s.w];
                let sy = y as isize + dy;
                if sy < 0 || sy >= h {
                    dst.fill(0.0);
                    continue;
                }
                let src = &plane[sy as usize * s.w..][..s.w];
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                dst[..x_lo].fill(0.0);
                if x_hi > x_lo {
                    let off = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[off..off + (x_hi - x_lo)]);
                }
                dst[x_hi.max(x_lo)..].fill(0.0);
            }
        }
    }
}

/// Scatter-add `dcol` back onto the input gradient (adjoint of [`im2col`]).
fn col2im(dcol: &[f64], s: &ConvShape, taps: &[Tap], y0: usize, y1: usize, grad: &mut [f64]) {
    let (h, w) = (s.h as isize, s.w as isize);
    let tile_len = (y1 - y0) * s.w;
    for i in 0..s.cin {
        let plane = &mut grad[i * s.plane()..(i + 1) * s.plane()];
        for (t, &(dy, dx)) in taps.iter().enumerate() {
            let row = &dcol[(i * taps.len() + t) * tile_len..][..tile_len];
            for y in y0..y1 {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h {
                    continue;
                }
                let src = &row[(y - y0) * s.w..][..s.w];
                let dst = &mut plane[sy as usize * s.w..][..s.w];
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                if x_hi > x_lo {
                    let off = (x_lo as isize + dx) as usize;
                    for (d, v) in dst[off..off + (x_hi - x_lo)].iter_mut().zip(&src[x_lo..x_hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) < c.len());
    // SAFETY: the debug assertions above spell out the extent of every operand;
    // callers construct strides from the same shapes used to size the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Forward pass; `weights` is `cout × cin × taps.len()` row-major.
pub fn conv_forward(input: &[f64], weights: &[f64], taps: &[Tap], s: &ConvShape) -> Vec<f64> {
    let k = s.cin * taps.len();
    assert_eq!(input.len(), s.cin * s.plane());
    assert_eq!(weights.len(), s.cout * k);
    let mut out = vec![0.0; s.cout * s.plane()];
    if k == 0 {
        return out;
    }
    let rows = rows_per_tile(k, s.w, s.h);
    let mut col = vec![0.0; k * rows * s.w];
    let mut y0 = 0;
    while y0 < s.h {
        let y1 = (y0 + rows).min(s.h);
        let n = (y1 - y0) * s.w;
        im2col(input, s, taps, y0, y1, &mut col[..k * n]);
        gemm(
            s.cout,
            k,
            n,
            weights,
            k,
            1,
            &col[..k * n],
            n,
            1,
            0.0,
            &mut out[y0 * s.w..],
            s.plane(),
        );
        y0 = y1;
    }
    out
}

/// Vector-Jacobian products of [`conv_forward`]: returns `(d input, d weights)`,
/// each computed only when requested.
pub fn conv_backward(
    grad_out: &[f64],
    input: &[f64],
    weights: &[f64],
    taps: &[Tap],
    s: &ConvShape,
    want_input: bool,
    want_weights: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let k = s.cin * taps.len();
    let mut g_in = want_input.then(|| vec![0.0; s.cin * s.plane()]);
    let mut g_w = want_weights.then(|| vec![0.0; s.cout * k]);
    if k == 0 || !(want_input || want_weights) {
        return (g_in, g_w);
    }
    let rows = rows_per_tile(k, s.w, s.h);
    let mut col = vec![0.0; k * rows * s.w];
    let mut gout_tile = vec![0.0; s.cout * rows * s.w];
    let mut y0 = 0;
    while y0 < s.h {
        let y1 = (y0 + rows).min(s.h);
        let n = (y1 - y0) * s.w;
        for o in 0..s.cout {
            gout_tile[o * n..(o + 1) * n]
                .copy_from_slice(&grad_out[o * s.plane() + y0 * s.w..][..n]);
        }
        let gt = &gout_tile[..s.cout * n];
        if let Some(gw) = g_w.as_mut() {
            im2col(input, s, taps, y0, y1, &mut col[..k * n]);
            // gW (cout × k) += gout (cout × n) · colᵀ (n × k)
            gemm(s.cout, n, k, gt, n, 1, &col[..k * n], 1, n, 1.0, gw, k);
        }
        if let Some(gi) = g_in.as_mut() {
            // dcol (k × n) = Wᵀ (k × cout) · gout (cout × n)
            gemm(k, s.cout, n, weights, 1, k, gt, n, 1, 0.0, &mut col[..k * n], n);
            col2im(&col[..k * n], s, taps, y0, y1, gi);
        }
        y0 = y1;
    }
    (g_in, g_w)
}
