//! Benchmark protocol: seeded masks and measurements over a dataset, and mean
//! metrics of any reconstruction method.

use ndarray::Array2;
use rand::RngCore;
use thiserror::Error;

use crate::classical::{default_lambda, fista_l1wavelet, zero_filled, ClassicalError, FistaConfig};
use crate::kspace::CoilKSpace;
use crate::mask::{generate_mask, Mask, MaskError, MaskPattern};
use crate::metrics::{data_range, evaluate_metrics, Metrics, MetricsError};
use crate::model::{reconstruct, EvalOptions, ModelConfig, ModelError, ModelParams};
use crate::phantom::{simulate_measurement, PhantomDataset, PhantomError, PhantomSlice};
use crate::rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which masks and noise a benchmark uses. Slice `i` always receives the
/// same mask seed, so methods are compared on identical measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub pattern: MaskPattern,
    pub accel: usize,
    pub center_fraction: f64,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl EvalProtocol {
    pub fn new(pattern: MaskPattern, accel: usize, center_fraction: f64, seed: u64) -> Self {
        Self {
            pattern,
            accel,
            center_fraction,
            seed,
            noise_sigma: 0.0,
        }
    }

    pub fn slice_seed(&self, index: usize) -> u64 {
        rng::indexed_stream(self.seed, "eval-mask", index as u64).next_u64()
    }

    pub fn mask(&self, index: usize, shape: (usize, usize)) -> Result<Mask, EvalError> {
        Ok(generate_mask(self.pattern, self.accel, self.center_fraction, shape, self.slice_seed(index))?)
    }

    /// Mask and undersampled measurement of slice `index`.
    pub fn measure(&self, slice: &PhantomSlice, index: usize) -> Result<(Mask, CoilKSpace), EvalError> {
        let m = self.mask(index, slice.kspace.shape())?;
        let k = simulate_measurement(slice, &m, self.noise_sigma, self.slice_seed(index))?;
        Ok((m, k))
    }
}

/// A reconstruction method evaluated by the harness.
#[derive(Debug, Clone, Copy)]
pub enum Recon<'a> {
    ZeroFilled,
    /// ℓ1-wavelet FISTA with the slice's own coil maps; `lambda_rel` scales
    /// the zero-filled maximum.
    Fista { lambda_rel: f64, max_iters: usize },
    Model {
        cfg: &'a ModelConfig,
        params: &'a ModelParams,
        opts: EvalOptions,
    },
}

impl Recon<'_> {
    pub fn fista_default() -> Self {
        Recon::Fista {
            lambda_rel: 1e-3,
            max_iters: FistaConfig::default().max_iters,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Recon::ZeroFilled => "zero-filled",
            Recon::Fista { .. } => "fista",
            Recon::Model { .. } => "model",
        }
    }

    pub fn run(&self, slice: &PhantomSlice, m: &Mask, k: &CoilKSpace) -> Result<Array2<f64>, EvalError> {
        Ok(match *self {
            Recon::ZeroFilled => zero_filled(k),
            Recon::Fista { lambda_rel, max_iters } => {
                let cfg = FistaConfig {
                    lambda: lambda_rel * default_lambda(k) / 1e-3,
                    max_iters,
                    ..FistaConfig::default()
                };
                fista_l1wavelet(k, &slice.sens, m, &cfg)?
            }
            Recon::Model { cfg, params, opts } => reconstruct(cfg, params, k, m, &opts)?,
        })
    }
}

/// Per-slice metrics and their means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_slice: Vec<Metrics>,
    pub mean: Metrics,
}

impl EvalSummary {
    pub fn from_slices(per_slice: Vec<Metrics>) -> Result<Self, EvalError> {
        if per_slice.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = per_slice.len() as f64;
        let mean = Metrics {
            nmse: per_slice.iter().map(|m| m.nmse).sum::<f64>() / n,
            psnr_db: per_slice.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: per_slice.iter().map(|m| m.ssim).sum::<f64>() / n,
        };
        Ok(Self { per_slice, mean })
    }
}

/// Metrics of `recon` against every ground-truth image of `data`.
pub fn evaluate(recon: &Recon<'_>, data: &PhantomDataset, protocol: &EvalProtocol) -> Result<EvalSummary, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_slice = data
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (m, k) = protocol.measure(s, i)?;
            let x = recon.run(s, &m, &k)?;
            Ok(evaluate_metrics(&x, &s.image, data_range(&s.image))?)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalSummary::from_slices(per_slice)
}

/// FISTA weight (relative to the zero-filled maximum) with the best PSNR on
/// one slice.
pub fn tune_fista_lambda(
    slice: &PhantomSlice,
    index: usize,
    protocol: &EvalProtocol,
    grid: &[f64],
    max_iters: usize,
) -> Result<f64, EvalError> {
    let (m, k) = protocol.measure(slice, index)?;
    let dr = data_range(&slice.image);
    let mut best = None;
    for &lambda_rel in grid {
        let x = Recon::Fista { lambda_rel, max_iters }.run(slice, &m, &k)?;
        let p = crate::metrics::psnr(&x, &slice.image, dr)?;
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((lambda_rel, p));
        }
    }
    best.map(|b| b.0).ok_or_else(|| EvalError::Invalid("empty λ grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantoms;

    #[test]
    fn protocol_is_deterministic_per_slice() {
        let p = EvalProtocol::new(MaskPattern::Random, 4, 0.08, 3);
        assert_eq!(p.mask(2, (32, 32)).unwrap(), p.mask(2, (32, 32)).unwrap());
        assert_ne!(p.slice_seed(1), p.slice_seed(2));
    }

    #[test]
    fn full_sampling_zero_filled_is_perfect() {
        let ds = generate_phantoms(2, 32, 2, 1).unwrap();
        let p = EvalProtocol::new(MaskPattern::Equispaced, 1, 0.08, 1);
        let s = evaluate(&Recon::ZeroFilled, &ds, &p).unwrap();
        assert!(s.mean.nmse < 1e-20);
        assert!(s.mean.ssim > 1.0 - 1e-12);
    }

    #[test]
    fn lambda_tuning_picks_from_grid() {
        let ds = generate_phantoms(1, 32, 2, 1).unwrap();
        let p = EvalProtocol::new(MaskPattern::Equispaced, 4, 0.08, 1);
        let l = tune_fista_lambda(&ds.slices[0], 0, &p, &[1e-3, 1e-1], 50).unwrap();
        assert!(l == 1e-3 || l == 1e-1);
    }
}
