//! k-space undersampling masks.
//!
//! Rectilinear patterns (equispaced, random, magic) select whole columns;
//! irregular patterns (gaussian, radial, poisson) select individual points.
//! Every pattern keeps a fully sampled calibration region at the k-space
//! centre and is a pure function of `(pattern, R, cf, shape, seed)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("empty calibration region: cf·W = {0} < 1")]
    EmptyCalibration(f64),
    #[error("invalid mask parameters: {0}")]
    Invalid(String),
    #[error("unknown mask pattern {0:?}")]
    UnknownPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPattern {
    Equispaced,
    Random,
    Magic,
    Gaussian,
    Radial,
    Poisson,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 6] = [
        MaskPattern::Equispaced,
        MaskPattern::Random,
        MaskPattern::Magic,
        MaskPattern::Gaussian,
        MaskPattern::Radial,
        MaskPattern::Poisson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskPattern::Equispaced => "equispaced",
            MaskPattern::Random => "random",
            MaskPattern::Magic => "magic",
            MaskPattern::Gaussian => "gaussian",
            MaskPattern::Radial => "radial",
            MaskPattern::Poisson => "poisson",
        }
    }

    pub fn is_column_mask(self) -> bool {
        matches!(
            self,
            MaskPattern::Equispaced | MaskPattern::Random | MaskPattern::Magic
        )
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskPattern {
    type Err = MaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MaskPattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| MaskError::UnknownPattern(s.to_string()))
    }
}

/// The four acceleration / center-fraction pairs used throughout the experiments.
pub const STANDARD_RATES: [(usize, f64); 4] = [(4, 0.08), (6, 0.06), (8, 0.04), (16, 0.02)];

/// Binary sampling pattern with its generation metadata. `pattern` is `None`
/// for hand-built masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub pattern: Option<MaskPattern>,
    pub accel: usize,
    pub center_fraction: f64,
    pub seed: u64,
    values: Array2<f64>,
}

impl Mask {
    pub fn from_bits(bits: Array2<bool>) -> Self {
        Self {
            pattern: None,
            accel: 1,
            center_fraction: 0.0,
            seed: 0,
            values: bits.mapv(|b| if b { 1.0 } else { 0.0 }),
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self::from_bits(Array2::from_elem((h, w), true))
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self::from_bits(Array2::from_elem((h, w), false))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// 0/1 weights, suitable for elementwise multiplication.
    pub fn weights(&self) -> ndarray::ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.values[[i, j]] != 0.0
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    fn column_full(&self, j: usize) -> bool {
        self.values.column(j).iter().all(|&v| v != 0.0)
    }

    /// Contiguous fully-sampled columns around the centre column `W/2`.
    fn center_columns(&self) -> Option<(usize, usize)> {
        let (_, w) = self.shape();
        let c = w / 2;
        if w == 0 || !self.column_full(c) {
            return None;
        }
        let mut lo = c;
        while lo > 0 && self.column_full(lo - 1) {
            lo -= 1;
        }
        let mut hi = c + 1;
        while hi < w && self.column_full(hi) {
            hi += 1;
        }
        Some((lo, hi))
    }

    /// Radius (pixels) of the largest fully sampled disc around the centre pixel.
    fn center_disc_radius(&self) -> Option<f64> {
        let (h, w) = self.shape();
        let (cy, cx) = (h / 2, w / 2);
        if !self.is_set(cy, cx) {
            return None;
        }
        // smallest distance to an unsampled pixel
        let mut best = f64::INFINITY;
        for ((i, j), &v) in self.values.indexed_iter() {
            if v == 0.0 {
                let d = ((i as f64 - cy as f64).powi(2) + (j as f64 - cx as f64).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        Some(if best.is_finite() { best - 0.5 } else { f64::INFINITY })
    }

    /// The auto-calibration region: fully sampled centre columns when present,
    /// otherwise the largest fully sampled centre disc. `None` if the centre
    /// sample itself is missing.
    pub fn acs_region(&self) -> Option<Array2<f64>> {
        let (h, w) = self.shape();
        if let Some((lo, hi)) = self.center_columns() {
            return Some(Array2::from_shape_fn((h, w), |(_, j)| {
                if (lo..hi).contains(&j) { 1.0 } else { 0.0 }
            }));
        }
        let r = self.center_disc_radius()?;
        let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
        Some(Array2::from_shape_fn((h, w), |(i, j)| {
            let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
            if d <= r { 1.0 } else { 0.0 }
        }))
    }

    /// Sidecar text header persisted next to mask tensors.
    pub fn header(&self) -> String {
        format!(
            "pattern={} R={} cf={} seed={}\n",
            self.pattern.map(|p| p.name()).unwrap_or("custom"),
            self.accel,
            self.center_fraction,
            self.seed
        )
    }
}

/// `(achieved sampling fraction, contiguous fully sampled centre width)`.
pub fn mask_stats(m: &Mask) -> (f64, usize) {
    let (h, w) = m.shape();
    let fraction = m.popcount() as f64 / (h * w) as f64;
    if let Some((lo, hi)) = m.center_columns() {
        return (fraction, hi - lo);
    }
    // point masks: run of sampled pixels along the centre row
    let (cy, cx) = (h / 2, w / 2);
    if h == 0 || w == 0 || !m.is_set(cy, cx) {
        return (fraction, 0);
    }
    let mut lo = cx;
    while lo > 0 && m.is_set(cy, lo - 1) {
        lo -= 1;
    }
    let mut hi = cx + 1;
    while hi < w && m.is_set(cy, hi) {
        hi += 1;
    }
    (fraction, hi - lo)
}

/// Number of fully sampled centre columns, `round(W·cf)` half away from zero.
pub fn center_columns(w: usize, cf: f64) -> usize {
    (w as f64 * cf).round() as usize
}

fn center_start(w: usize, n_c: usize) -> usize {
    (w / 2).saturating_sub(n_c.saturating_sub(1) / 2)
}

fn column_mask(h: usize, w: usize, cols: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(_, j)| if cols[j] { 1.0 } else { 0.0 })
}

fn equispaced_columns(w: usize, accel: usize, n_c: usize, seed: u64) -> Vec<bool> {
    let mut cols = vec![false; w];
    let start = center_start(w, n_c);
    cols[start..(start + n_c).min(w)].iter_mut().for_each(|c| *c = true);
    let extra = w as f64 / accel as f64 - n_c as f64;
    if extra > 0.0 {
        let step = (w - n_c) as f64 / extra;
        let phase = (seed % (step.round().max(1.0) as u64)) as f64;
        let mut k = 0.0;
        loop {
            let pos = (phase + k * step).round() as usize;
            if pos >= w {
                break;
            }
            cols[pos] = true;
            k += 1.0;
        }
    }
    cols
}

fn random_columns(w: usize, accel: usize, n_c: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut cols = vec![false; w];
    let start = center_start(w, n_c);
    cols[start..(start + n_c).min(w)].iter_mut().for_each(|c| *c = true);
    let mut outer: Vec<usize> = (0..w).filter(|&j| !cols[j]).collect();
    let want = (w as f64 / accel as f64 - n_c as f64).round().max(0.0) as usize;
    let want = want.min(outer.len());
    let (chosen, _) = outer.partial_shuffle(rng, want);
    for &j in chosen.iter() {
        cols[j] = true;
    }
    cols
}

fn magic_columns(w: usize, accel: usize, n_c: usize, seed: u64) -> Vec<bool> {
    let mut cols = vec![false; w];
    let start = center_start(w, n_c);
    cols[start..(start + n_c).min(w)].iter_mut().for_each(|c| *c = true);
    let target = (w as f64 / accel as f64).round() as usize;
    let adjusted = target.saturating_sub(n_c);
    if adjusted == 0 {
        return cols;
    }
    let stride = ((w as f64 / adjusted as f64).round() as usize).max(1);
    let offset_pos = (seed % stride as u64) as usize;
    // negative half sits half a stride away from the mirror image of the
    // positive half, so conjugate-symmetric positions are not both sampled
    let offset_neg = offset_pos + (stride / 2).max(1);
    let c = w / 2;
    let mut d = offset_pos;
    while c + d < w {
        cols[c + d] = true;
        d += stride;
    }
    let mut d = offset_neg;
    while d <= c {
        cols[c - d] = true;
        d += stride;
    }
    cols
}

fn center_disc(h: usize, w: usize, cf: f64) -> (f64, Array2<bool>) {
    let radius = cf * h.min(w) as f64 / 2.0;
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let disc = Array2::from_shape_fn((h, w), |(i, j)| {
        ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt() <= radius
    });
    (radius, disc)
}

fn gaussian_points(h: usize, w: usize, accel: usize, cf: f64, rng: &mut impl Rng) -> Array2<bool> {
    let (_, disc) = center_disc(h, w, cf);
    let sigma = h.min(w) as f64 / 4.0;
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let density = Array2::from_shape_fn((h, w), |(i, j)| {
        let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });
    let n_center = disc.iter().filter(|&&b| b).count() as f64;
    let target = (h * w) as f64 / accel as f64;
    let expected = |c: f64| -> f64 {
        n_center
            + density
                .iter()
                .zip(disc.iter())
                .filter(|(_, &d)| !d)
                .map(|(&p, _)| (c * p).min(1.0))
                .sum::<f64>()
    };
    let mut scale = 0.0;
    if target > n_center {
        let (mut lo, mut hi) = (0.0, 1.0);
        while expected(hi) < target && hi < 1e12 {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scale = 0.5 * (lo + hi);
    }
    let mut bits = disc;
    for (b, &p) in bits.iter_mut().zip(density.iter()) {
        let u: f64 = rng.random();
        if !*b && u < (scale * p).min(1.0) {
            *b = true;
        }
    }
    bits
}

fn radial_spokes(h: usize, w: usize, n_spokes: usize, phase: f64, disc: &Array2<bool>) -> Array2<bool> {
    let mut bits = disc.clone();
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let reach = h.max(w) as f64;
    let steps = (2.0 * reach / 0.5) as i64;
    for s in 0..n_spokes {
        let theta = phase + PI * s as f64 / n_spokes as f64;
        let (sn, cs) = theta.sin_cos();
        for k in 0..=steps {
            let t = -reach + 0.5 * k as f64;
            let i = (cy + t * sn).round();
            let j = (cx + t * cs).round();
            if i >= 0.0 && j >= 0.0 && (i as usize) < h && (j as usize) < w {
                bits[[i as usize, j as usize]] = true;
            }
        }
    }
    bits
}

fn radial_points(h: usize, w: usize, accel: usize, cf: f64, rng: &mut impl Rng) -> Array2<bool> {
    let (_, disc) = center_disc(h, w, cf);
    let target = 1.0 / accel as f64;
    let u: f64 = rng.random();
    let frac = |b: &Array2<bool>| b.iter().filter(|&&x| x).count() as f64 / (h * w) as f64;
    let nominal = ((PI * h.max(w) as f64) / (2.0 * accel as f64)).round().max(1.0) as usize;
    let build = |n: usize| radial_spokes(h, w, n, u * PI / n as f64, &disc);
    // spoke overlap near the centre makes the nominal count oversample; search
    // for the count whose achieved fraction is closest to 1/R
    let (mut lo, mut hi) = (1usize, nominal.max(2) * 2);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if frac(&build(mid)) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = build(lo);
    let b = build(hi);
    if (frac(&a) - target).abs() <= (frac(&b) - target).abs() {
        a
    } else {
        b
    }
}

struct DartGrid {
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<(f64, f64)>>,
}

impl DartGrid {
    fn new(h: usize, w: usize, cell: f64) -> Self {
        let ny = (h as f64 / cell).ceil() as usize + 1;
        let nx = (w as f64 / cell).ceil() as usize + 1;
        Self {
            cell,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        }
    }

    fn clear_of(&self, y: f64, x: f64, r: f64) -> bool {
        let reach = (r / self.cell).ceil() as isize;
        let (gy, gx) = ((y / self.cell) as isize, (x / self.cell) as isize);
        for cy in (gy - reach).max(0)..=(gy + reach).min(self.ny as isize - 1) {
            for cx in (gx - reach).max(0)..=(gx + reach).min(self.nx as isize - 1) {
                for &(py, px) in &self.cells[cy as usize * self.nx + cx as usize] {
                    if (py - y).powi(2) + (px - x).powi(2) < r * r {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, y: f64, x: f64) {
        let idx = (y / self.cell) as usize * self.nx + (x / self.cell) as usize;
        self.cells[idx].push((y, x));
    }
}

fn poisson_darts(h: usize, w: usize, order: &[usize], d_min: f64, growth: f64, disc: &Array2<bool>) -> Array2<bool> {
    let mut bits = disc.clone();
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let edge = h.max(w) as f64 / 2.0;
    let mut grid = DartGrid::new(h, w, d_min.max(0.5));
    for &p in order {
        let (i, j) = (p / w, p % w);
        let (y, x) = (i as f64, j as f64);
        let rho = (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / edge).min(1.0);
        let r = d_min * (1.0 + growth * rho);
        if grid.clear_of(y, x, r) {
            grid.insert(y, x);
            bits[[i, j]] = true;
        }
    }
    bits
}

fn poisson_points(h: usize, w: usize, accel: usize, cf: f64, rng: &mut impl Rng) -> Result<Array2<bool>, MaskError> {
    let (_, disc) = center_disc(h, w, cf);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(rng);
    let target = 1.0 / accel as f64;
    let frac = |b: &Array2<bool>| b.iter().filter(|&&x| x).count() as f64 / (h * w) as f64;
    // d_max = 4·d_min; bisect the common scale in log space
    let growth = 3.0;
    let (mut lo, mut hi) = (0.25f64.ln(), (h.max(w) as f64).ln());
    let mut best: Option<(f64, Array2<bool>)> = None;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let bits = poisson_darts(h, w, &order, mid.exp(), growth, &disc);
        let f = frac(&bits);
        let err = (f - target).abs() / target;
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, bits));
        }
        if err < 0.01 {
            break;
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (err, bits) = best.expect("at least one bisection step");
    if err > 0.1 {
        return Err(MaskError::Invalid(format!(
            "poisson calibration reached only {:.1}% relative error",
            100.0 * err
        )));
    }
    Ok(bits)
}

/// Generate a mask. `R = 1` always yields the fully sampled mask.
pub fn generate_mask(
    pattern: MaskPattern,
    accel: usize,
    center_fraction: f64,
    shape: (usize, usize),
    seed: u64,
) -> Result<Mask, MaskError> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(MaskError::Invalid("shape must be non-empty".into()));
    }
    if accel == 0 {
        return Err(MaskError::Invalid("acceleration must be >= 1".into()));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(MaskError::Invalid(format!(
            "center fraction {center_fraction} must lie in (0, 1)"
        )));
    }
    if center_fraction * (w as f64) < 1.0 {
        return Err(MaskError::EmptyCalibration(center_fraction * w as f64));
    }
    let mut rng = rng::stream(seed, pattern.name());
    let n_c = center_columns(w, center_fraction);
    let values = if accel == 1 {
        Array2::ones((h, w))
    } else {
        let to_f = |b: Array2<bool>| b.mapv(|x| if x { 1.0 } else { 0.0 });
        match pattern {
            MaskPattern::Equispaced => column_mask(h, w, &equispaced_columns(w, accel, n_c, seed)),
            MaskPattern::Random => column_mask(h, w, &random_columns(w, accel, n_c, &mut rng)),
            MaskPattern::Magic => column_mask(h, w, &magic_columns(w, accel, n_c, seed)),
            MaskPattern::Gaussian => to_f(gaussian_points(h, w, accel, center_fraction, &mut rng)),
            MaskPattern::Radial => to_f(radial_points(h, w, accel, center_fraction, &mut rng)),
            MaskPattern::Poisson => to_f(poisson_points(h, w, accel, center_fraction, &mut rng)?),
        }
    };
    Ok(Mask {
        pattern: Some(pattern),
        accel,
        center_fraction,
        seed,
        values,
    })
}
