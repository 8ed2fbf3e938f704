//! Regular 2-D sampling grids over a physical domain.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("resolution must be >= 1 on both axes, got {0:?}")]
    ZeroResolution([usize; 2]),
    #[error("domain must have max > min on both axes")]
    EmptyDomain,
}

/// Uniform grid over `[min, max)` per axis, axis 0 = rows (y), axis 1 = columns (x).
///
/// Sample `i` along an axis sits at `min + i * h`, so the sample at index
/// `resolution / 2` is the domain midpoint for symmetric domains and refining by
/// an integer factor nests the coarse samples inside the fine ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub domain_min: [f64; 2],
    pub domain_max: [f64; 2],
    pub resolution: [usize; 2],
}

impl GridSpec {
    pub fn new(
        domain_min: [f64; 2],
        domain_max: [f64; 2],
        resolution: [usize; 2],
    ) -> Result<Self, GridError> {
        if resolution.iter().any(|&r| r == 0) {
            return Err(GridError::ZeroResolution(resolution));
        }
        if (0..2).any(|a| !(domain_max[a] > domain_min[a])) {
            return Err(GridError::EmptyDomain);
        }
        Ok(Self {
            domain_min,
            domain_max,
            resolution,
        })
    }

    /// Grid on the default `[-1, 1]²` domain.
    pub fn unit(h: usize, w: usize) -> Self {
        Self::new([-1.0, -1.0], [1.0, 1.0], [h, w]).expect("non-zero resolution")
    }

    /// Square grid on `[-half, half]²`.
    pub fn centered(half: f64, h: usize, w: usize) -> Self {
        Self::new([-half, -half], [half, half], [h, w]).expect("valid grid")
    }

    pub fn spacing(&self) -> [f64; 2] {
        [
            (self.domain_max[0] - self.domain_min[0]) / self.resolution[0] as f64,
            (self.domain_max[1] - self.domain_min[1]) / self.resolution[1] as f64,
        ]
    }

    /// Cell area, the midpoint-rule quadrature weight shared by every sample.
    pub fn quadrature_weight(&self) -> f64 {
        let [hy, hx] = self.spacing();
        hy * hx
    }

    /// Physical coordinate `(y, x)` of sample `(i, j)`.
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        let [hy, hx] = self.spacing();
        [
            self.domain_min[0] + i as f64 * hy,
            self.domain_min[1] + j as f64 * hx,
        ]
    }

    pub fn with_resolution(&self, h: usize, w: usize) -> Self {
        Self {
            resolution: [h, w],
            ..*self
        }
    }

    /// Same domain, `factor` times as many samples per axis.
    pub fn refine(&self, factor: usize) -> Self {
        self.with_resolution(self.resolution[0] * factor, self.resolution[1] * factor)
    }

    /// Same domain, resolution divided by `factor` (integer division).
    pub fn coarsen(&self, factor: usize) -> Self {
        self.with_resolution(
            (self.resolution[0] / factor).max(1),
            (self.resolution[1] / factor).max(1),
        )
    }

    pub fn is_isotropic(&self) -> bool {
        let [hy, hx] = self.spacing();
        (hy - hx).abs() <= 1e-12 * hy.abs().max(hx.abs())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.resolution[0], self.resolution[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_domain_spacing() {
        let g = GridSpec::unit(320, 320);
        assert_eq!(g.spacing(), [0.00625, 0.00625]);
        assert!((g.quadrature_weight() - 3.90625e-5).abs() < 1e-18);
        assert_eq!(g.point(160, 160), [0.0, 0.0]);
    }

    #[test]
    fn zero_resolution_rejected() {
        assert_eq!(
            GridSpec::new([-1.0, -1.0], [1.0, 1.0], [0, 4]),
            Err(GridError::ZeroResolution([0, 4]))
        );
        assert_eq!(
            GridSpec::new([1.0, -1.0], [1.0, 1.0], [4, 4]),
            Err(GridError::EmptyDomain)
        );
    }

    proptest! {
        #[test]
        fn refining_by_two_halves_spacing_exactly(n in 1usize..2048, half in 0.1f64..10.0) {
            let g = GridSpec::centered(half, n, n);
            let f = g.refine(2);
            prop_assert_eq!(f.spacing()[0] * 2.0, g.spacing()[0]);
            prop_assert_eq!(f.spacing()[1] * 2.0, g.spacing()[1]);
            prop_assert_eq!(f.quadrature_weight() * 4.0, g.quadrature_weight());
        }
    }
}
