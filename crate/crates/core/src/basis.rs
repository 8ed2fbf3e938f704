//! Function-space kernel bases on the radius-`r` disc.
//!
//! Every family returns exactly `L` values per offset and vanishes outside
//! the disc. Component order is fixed: isotropic members first, then
//! ring-major / sector-minor (piecewise-linear, Morlet), or `(n, l)`
//! ascending (Zernike).

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("basis family mismatch: expected {expected:?}, spec has {found:?}")]
    WrongFamily {
        expected: BasisFamily,
        found: BasisFamily,
    },
    #[error("invalid basis spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisFamily {
    PiecewiseLinear,
    Zernike,
    Morlet,
}

impl BasisFamily {
    pub fn code(self) -> u8 {
        match self {
            BasisFamily::PiecewiseLinear => 0,
            BasisFamily::Zernike => 1,
            BasisFamily::Morlet => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(BasisFamily::PiecewiseLinear),
            1 => Some(BasisFamily::Zernike),
            2 => Some(BasisFamily::Morlet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub radius: f64,
    pub n_isotropic: usize,
    pub n_rings: usize,
    pub n_per_ring: usize,
}

impl BasisSpec {
    pub fn new(
        family: BasisFamily,
        radius: f64,
        n_isotropic: usize,
        n_rings: usize,
        n_per_ring: usize,
    ) -> Result<Self, BasisError> {
        let spec = Self {
            family,
            radius,
            n_isotropic,
            n_rings,
            n_per_ring,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One isotropic member plus five rings of seven sectors (L = 36).
    pub fn piecewise_linear(radius: f64) -> Self {
        Self::new(BasisFamily::PiecewiseLinear, radius, 1, 5, 7).expect("valid default basis")
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self { radius, ..*self }
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(BasisError::Invalid(format!("radius {} must be > 0", self.radius)));
        }
        if self.len() == 0 {
            return Err(BasisError::Invalid("basis has no members".into()));
        }
        if self.family != BasisFamily::Zernike && self.n_isotropic > 1 {
            return Err(BasisError::Invalid(
                "lattice bases support at most one isotropic member".into(),
            ));
        }
        if self.n_rings > 0 && self.n_per_ring == 0 {
            return Err(BasisError::Invalid("rings need at least one sector".into()));
        }
        Ok(())
    }

    /// Total number of members `L`.
    pub fn len(&self) -> usize {
        self.n_isotropic + self.n_rings * self.n_per_ring
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Radial node spacing `r / (n_rings + 1)`; the outermost hat reaches zero at `r`.
    pub fn ring_spacing(&self) -> f64 {
        self.radius / (self.n_rings + 1) as f64
    }

    /// Evaluate whichever family this spec names.
    pub fn eval(&self, offset: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(offset, &mut out);
        out
    }

    pub fn eval_into(&self, offset: [f64; 2], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match self.family {
            BasisFamily::PiecewiseLinear => piecewise_linear_into(self, offset, out),
            BasisFamily::Zernike => zernike_into(self, offset, out),
            BasisFamily::Morlet => morlet_into(self, offset, out),
        }
    }

    fn expect(&self, family: BasisFamily) -> Result<(), BasisError> {
        if self.family != family {
            return Err(BasisError::WrongFamily {
                expected: family,
                found: self.family,
            });
        }
        self.validate()
    }
}

fn hat(x: f64, center: f64, width: f64) -> f64 {
    (1.0 - (x - center).abs() / width).max(0.0)
}

/// Periodic angular distance in `[0, π]`.
fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn polar(offset: [f64; 2]) -> (f64, f64) {
    let [x, y] = offset;
    (x.hypot(y), y.atan2(x))
}

fn piecewise_linear_into(spec: &BasisSpec, offset: [f64; 2], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (rho, phi) = polar(offset);
    if rho > spec.radius {
        return;
    }
    let dr = spec.ring_spacing();
    let mut k = 0;
    if spec.n_isotropic == 1 {
        out[0] = hat(rho, 0.0, dr);
        k = 1;
    }
    let dphi = 2.0 * PI / spec.n_per_ring.max(1) as f64;
    for j in 1..=spec.n_rings {
        let radial = hat(rho, j as f64 * dr, dr);
        for m in 0..spec.n_per_ring {
            if radial > 0.0 {
                let ang = if spec.n_per_ring == 1 {
                    1.0
                } else {
                    (1.0 - angular_distance(phi, m as f64 * dphi) / dphi).max(0.0)
                };
                out[k] = radial * ang;
            }
            k += 1;
        }
    }
}

/// Piecewise-linear ring/sector basis.
pub fn eval_piecewise_linear(spec: &BasisSpec, offset: [f64; 2]) -> Result<Vec<f64>, BasisError> {
    spec.expect(BasisFamily::PiecewiseLinear)?;
    Ok(spec.eval(offset))
}

/// `(n, l)` pairs of the first `count` Zernike functions, `n` ascending then `l` ascending.
pub fn zernike_indices(count: usize) -> Vec<(usize, i64)> {
    let mut idx = Vec::with_capacity(count);
    let mut n = 0usize;
    while idx.len() < count {
        let mut l = -(n as i64);
        while l <= n as i64 && idx.len() < count {
            idx.push((n, l));
            l += 2;
        }
        n += 1;
    }
    idx
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Zernike radial polynomial `R_n^m(ρ)`, `m ≤ n`, `n − m` even.
pub fn zernike_radial(n: usize, m: usize, rho: f64) -> f64 {
    if m > n || (n - m) % 2 == 1 {
        return 0.0;
    }
    (0..=(n - m) / 2)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let c = factorial(n - k)
                / (factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k));
            sign * c * rho.powi((n - 2 * k) as i32)
        })
        .sum()
}

fn zernike_into(spec: &BasisSpec, offset: [f64; 2], out: &mut [f64]) {
    let (dist, phi) = polar(offset);
    let rho = dist / spec.radius;
    if rho > 1.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for (v, (n, l)) in out.iter_mut().zip(zernike_indices(spec.len())) {
        let m = l.unsigned_abs() as usize;
        let radial = zernike_radial(n, m, rho);
        *v = if l >= 0 {
            radial * (l as f64 * phi).cos()
        } else {
            radial * (m as f64 * phi).sin()
        };
    }
}

/// Real Zernike functions on the disc rescaled to radius `r`.
pub fn eval_zernike(spec: &BasisSpec, offset: [f64; 2]) -> Result<Vec<f64>, BasisError> {
    spec.expect(BasisFamily::Zernike)?;
    Ok(spec.eval(offset))
}

/// Wave vectors of the Morlet members: zero for the isotropic member, then
/// `|k| = j·π / r` at the sector angles of ring `j`.
pub fn morlet_wave_vectors(spec: &BasisSpec) -> Vec<[f64; 2]> {
    let mut ks = Vec::with_capacity(spec.len());
    if spec.n_isotropic == 1 {
        ks.push([0.0, 0.0]);
    }
    let dphi = 2.0 * PI / spec.n_per_ring.max(1) as f64;
    for j in 1..=spec.n_rings {
        let mag = j as f64 * PI / spec.radius;
        for m in 0..spec.n_per_ring {
            let a = m as f64 * dphi;
            ks.push([mag * a.cos(), mag * a.sin()]);
        }
    }
    ks
}

fn morlet_into(spec: &BasisSpec, offset: [f64; 2], out: &mut [f64]) {
    let (rho, _) = polar(offset);
    if rho > spec.radius {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let sigma = spec.radius / 2.0;
    let env = (-rho * rho / (2.0 * sigma * sigma)).exp();
    for (v, k) in out.iter_mut().zip(morlet_wave_vectors(spec)) {
        *v = env * (k[0] * offset[0] + k[1] * offset[1]).cos();
    }
}

/// Gaussian-enveloped cosines with envelope `σ = r/2`.
pub fn eval_morlet(spec: &BasisSpec, offset: [f64; 2]) -> Result<Vec<f64>, BasisError> {
    spec.expect(BasisFamily::Morlet)?;
    Ok(spec.eval(offset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: BasisFamily) -> BasisSpec {
        BasisSpec::new(family, 0.5, 1, 5, 7).unwrap()
    }

    #[test]
    fn default_basis_has_36_members() {
        let s = BasisSpec::piecewise_linear(0.02);
        assert_eq!(s.len(), 36);
        assert_eq!((s.n_isotropic, s.n_rings, s.n_per_ring), (1, 5, 7));
    }

    #[test]
    fn pl_origin_is_isotropic_only() {
        let b = eval_piecewise_linear(&spec(BasisFamily::PiecewiseLinear), [0.0, 0.0]).unwrap();
        assert_eq!(b[0], 1.0);
        assert!(b[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pl_ring_node_peaks() {
        let s = spec(BasisFamily::PiecewiseLinear);
        let b = eval_piecewise_linear(&s, [s.ring_spacing(), 0.0]).unwrap();
        assert!((b[1] - 1.0).abs() < 1e-12);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn all_families_vanish_outside_disc() {
        for fam in [BasisFamily::PiecewiseLinear, BasisFamily::Zernike, BasisFamily::Morlet] {
            let s = spec(fam);
            for h in [1e-9, 1e-3, 0.7] {
                for a in [0.0, 1.0, 2.5, -2.0] {
                    let r = s.radius + h;
                    let b = s.eval([r * f64::cos(a), r * f64::sin(a)]);
                    assert_eq!(b.len(), s.len());
                    assert!(b.iter().all(|&v| v == 0.0), "{fam:?} nonzero outside");
                }
            }
        }
    }

    #[test]
    fn radial_hats_partition_unity_on_dense_sweep() {
        let s = spec(BasisFamily::PiecewiseLinear);
        let dr = s.ring_spacing();
        let top = s.n_rings as f64 * dr;
        let mut worst: f64 = 0.0;
        for i in 0..=100_000 {
            let rho = top * i as f64 / 100_000.0;
            let total: f64 = (0..=s.n_rings).map(|j| hat(rho, j as f64 * dr, dr)).sum();
            worst = worst.max((total - 1.0).abs());
        }
        assert!(worst < 1e-12, "partition deviation {worst}");
    }

    #[test]
    fn full_pl_basis_sums_to_one_inside_last_ring() {
        let s = spec(BasisFamily::PiecewiseLinear);
        let top = s.n_rings as f64 * s.ring_spacing();
        for i in 0..200 {
            let rho = top * (i as f64 + 0.5) / 200.0;
            let phi = i as f64 * 0.377;
            let total: f64 = s.eval([rho * phi.cos(), rho * phi.sin()]).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zernike_closed_forms() {
        let s = spec(BasisFamily::Zernike);
        let idx = zernike_indices(s.len());
        assert_eq!(idx[0], (0, 0));
        assert_eq!(idx[1..3], [(1, -1), (1, 1)]);
        let at = |o: [f64; 2]| eval_zernike(&s, o).unwrap();
        assert_eq!(at([0.1, 0.2])[0], 1.0);
        let n2l0 = idx.iter().position(|&p| p == (2, 0)).unwrap();
        assert!((at([s.radius, 0.0])[n2l0] - 1.0).abs() < 1e-12);
        assert!((zernike_radial(2, 0, 0.3) - (2.0 * 0.09 - 1.0)).abs() < 1e-15);
        assert!((zernike_radial(4, 2, 0.5) - (4.0 * 0.0625 - 3.0 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn zernike_radial_orthogonality_by_quadrature() {
        // midpoint rule on [0, 1] with 4096 nodes
        let n_q = 4096;
        let integral = |n: usize, m: usize, l: usize| -> f64 {
            (0..n_q)
                .map(|i| {
                    let rho = (i as f64 + 0.5) / n_q as f64;
                    zernike_radial(n, l, rho) * zernike_radial(m, l, rho) * rho / n_q as f64
                })
                .sum()
        };
        for l in 0..4usize {
            for n in (l..8).step_by(2) {
                for m in (l..8).step_by(2) {
                    let v = integral(n, m, l);
                    if n != m {
                        assert!(v.abs() < 1e-3, "R_{n}^{l} vs R_{m}^{l}: {v}");
                    } else {
                        assert!((v - 1.0 / (2.0 * (n + 1) as f64)).abs() < 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn morlet_values() {
        let s = spec(BasisFamily::Morlet);
        let b = eval_morlet(&s, [0.0, 0.0]).unwrap();
        assert!(b.iter().all(|&v| v == 1.0));
        let sigma = s.radius / 2.0;
        let b = eval_morlet(&s, [0.0, sigma]).unwrap();
        assert!((b[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((b[0] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn wrong_family_rejected() {
        let s = spec(BasisFamily::Zernike);
        assert!(matches!(
            eval_piecewise_linear(&s, [0.0, 0.0]),
            Err(BasisError::WrongFamily { .. })
        ));
        assert!(eval_morlet(&s, [0.0, 0.0]).is_err());
        assert!(eval_zernike(&spec(BasisFamily::Morlet), [0.0, 0.0]).is_err());
    }

    #[test]
    fn evaluation_is_bitwise_pure() {
        for fam in [BasisFamily::PiecewiseLinear, BasisFamily::Zernike, BasisFamily::Morlet] {
            let s = spec(fam);
            let a = s.eval([0.123, -0.211]);
            let b = s.eval([0.123, -0.211]);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
