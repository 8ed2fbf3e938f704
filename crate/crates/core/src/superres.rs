//! Zero-shot resolution transfer: image-space super-resolution and extended
//! field of view from denser k-space sampling. Parameters are never updated;
//! a checksum taken before and after every evaluation proves it.

use std::fmt;

use ndarray::Array2;

use crate::autodiff::Tape;
use crate::eval::{EvalError, EvalProtocol, EvalSummary, Recon};
use crate::metrics::{data_range, evaluate_metrics, ssim_in_region, Metrics};
use crate::model::{footprint, EvalOptions, Geometry, KernelKind, ModelConfig, OpContext};
use crate::phantom::PhantomDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMethod {
    Disco,
    CnnFixed,
    CnnRescaled,
    ZeroFilled,
}

impl TransferMethod {
    pub fn name(self) -> &'static str {
        match self {
            TransferMethod::Disco => "disco",
            TransferMethod::CnnFixed => "cnn_fixed",
            TransferMethod::CnnRescaled => "cnn_rescaled",
            TransferMethod::ZeroFilled => "zero_filled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub method: TransferMethod,
    /// Mean metrics at the training discretization.
    pub train: Metrics,
    /// Mean metrics at the transfer discretization.
    pub transfer: Metrics,
    /// Mean SSIM restricted to the region never seen in training (extended
    /// field of view only).
    pub transfer_region_ssim: Option<f64>,
    /// Level-0 kernel footprint (pixels per side) of the transferred operator
    /// at both discretizations.
    pub footprint: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub mode: &'static str,
    pub train_resolution: usize,
    pub transfer_resolution: usize,
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    pub fn row(&self, m: TransferMethod) -> Option<&TransferRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    pub fn merge(mut self, other: TransferReport) -> Result<Self, EvalError> {
        if (self.mode, self.train_resolution, self.transfer_resolution)
            != (other.mode, other.train_resolution, other.transfer_resolution)
        {
            return Err(EvalError::Invalid("reports describe different transfers".into()));
        }
        self.rows.extend(other.rows);
        Ok(self)
    }

    /// DISCO footprints scale with the resolution ratio (±1 pixel) and fixed
    /// CNN footprints do not change.
    pub fn footprints_consistent(&self) -> bool {
        let ratio = self.transfer_resolution as f64 / self.train_resolution as f64;
        self.rows.iter().all(|r| match (r.method, r.footprint) {
            (TransferMethod::Disco, Some((a, b))) => (b as f64 - a as f64 * ratio).abs() <= 1.0,
            (TransferMethod::CnnFixed, Some((a, b))) => a == b,
            _ => true,
        })
    }
}

impl fmt::Display for TransferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# {} transfer {} -> {}",
            self.mode, self.train_resolution, self.transfer_resolution
        )?;
        writeln!(
            f,
            "{:<14}{:>11}{:>11}{:>11}{:>11}{:>11}{:>11}",
            "method", "ssim_train", "psnr_train", "ssim_xfer", "psnr_xfer", "ssim_new", "footprint"
        )?;
        for r in &self.rows {
            let region = r.transfer_region_ssim.map_or("-".to_string(), |v| format!("{v:.4}"));
            let fp = r.footprint.map_or("-".to_string(), |(a, b)| format!("{a}->{b}"));
            writeln!(
                f,
                "{:<14}{:>11.4}{:>11.2}{:>11.4}{:>11.2}{:>11}{:>11}",
                r.method.name(),
                r.train.ssim,
                r.train.psnr_db,
                r.transfer.ssim,
                r.transfer.psnr_db,
                region,
                fp
            )?;
        }
        Ok(())
    }
}

/// Bilinear resize (half-pixel centres) of a real image.
pub fn resize_image(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    if x.dim() == (h, w) {
        return x.clone();
    }
    let tape = Tape::new();
    let v = tape.constant(x.clone().into_dyn()).resize_bilinear(h, w).value();
    Array2::from_shape_vec((h, w), v.iter().copied().collect()).expect("resize output")
}

/// Methods a reconstruction contributes, with the options each one uses.
fn variants<'a>(recon: &Recon<'a>) -> Vec<(TransferMethod, Recon<'a>)> {
    match *recon {
        Recon::Model { cfg, params, opts } => match cfg.image.kernel {
            KernelKind::Disco(_) => vec![(TransferMethod::Disco, *recon)],
            KernelKind::Cnn(_) => vec![
                (TransferMethod::CnnFixed, Recon::Model { cfg, params, opts: EvalOptions { cnn_rescale: false, ..opts } }),
                (TransferMethod::CnnRescaled, Recon::Model { cfg, params, opts: EvalOptions { cnn_rescale: true, ..opts } }),
            ],
        },
        _ => vec![(TransferMethod::ZeroFilled, *recon)],
    }
}

fn with_options<'a>(recon: &Recon<'a>, f: impl Fn(EvalOptions) -> EvalOptions) -> Recon<'a> {
    match *recon {
        Recon::Model { cfg, params, opts } => Recon::Model { cfg, params, opts: f(opts) },
        other => other,
    }
}

fn checksum(recon: &Recon<'_>) -> Option<String> {
    match recon {
        Recon::Model { params, .. } => Some(params.checksum()),
        _ => None,
    }
}

fn unchanged(before: Option<String>, recon: &Recon<'_>) -> Result<(), EvalError> {
    if before != checksum(recon) {
        return Err(EvalError::Invalid("parameters changed during a transfer evaluation".into()));
    }
    Ok(())
}

fn model_footprint(cfg: &ModelConfig, image: bool, train: OpContext, xfer: OpContext) -> Result<(usize, usize), EvalError> {
    let u = if image { &cfg.image } else { &cfg.kspace };
    Ok((footprint(u, &train)?, footprint(u, &xfer)?))
}

/// Evaluate at the measurement resolution and with the cascades run on a grid
/// `scale` times finer, against bilinear-upsampled ground truth. The k-space
/// operator stays at the measurement grid.
pub fn superres_image(
    recon: &Recon<'_>,
    data: &PhantomDataset,
    scale: usize,
    protocol: &EvalProtocol,
) -> Result<TransferReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    if scale == 0 {
        return Err(EvalError::Invalid("scale must be >= 1".into()));
    }
    if let Recon::Model { cfg, .. } = recon {
        let d = 1usize << cfg.max_depth();
        if data.resolution % d != 0 {
            return Err(EvalError::Invalid(format!("resolution {} not divisible by {d}", data.resolution)));
        }
    }
    let before = checksum(recon);
    let n = data.resolution;
    let mut rows = Vec::new();
    for (method, base) in variants(recon) {
        let up = with_options(&base, |o| EvalOptions { image_scale: scale, ..o });
        let (mut train, mut xfer) = (Vec::new(), Vec::new());
        for (i, s) in data.slices.iter().enumerate() {
            let (m, k) = protocol.measure(s, i)?;
            let a = base.run(s, &m, &k)?;
            train.push(evaluate_metrics(&a, &s.image, data_range(&s.image))?);
            let b = match up {
                Recon::Model { .. } => up.run(s, &m, &k)?,
                _ => resize_image(&a, n * scale, n * scale),
            };
            let gt = resize_image(&s.image, n * scale, n * scale);
            xfer.push(evaluate_metrics(&b, &gt, data_range(&gt))?);
        }
        let footprint = match base {
            Recon::Model { cfg, opts, .. } => {
                let h = 2.0 / n as f64;
                let train_ctx = OpContext { spacing: h, cnn_rescale: opts.cnn_rescale };
                let xfer_ctx = OpContext { spacing: h / scale as f64, ..train_ctx };
                Some(model_footprint(cfg, true, train_ctx, xfer_ctx)?)
            }
            _ => None,
        };
        rows.push(TransferRow {
            method,
            train: EvalSummary::from_slices(train)?.mean,
            transfer: EvalSummary::from_slices(xfer)?.mean,
            transfer_region_ssim: None,
            footprint,
        });
    }
    unchanged(before, recon)?;
    Ok(TransferReport {
        mode: "image",
        train_resolution: n,
        transfer_resolution: n * scale,
        rows,
    })
}

/// Pixels outside the centred `crop × crop` window.
pub fn outer_region(n: usize, crop: usize) -> Array2<bool> {
    let lo = (n - crop) / 2;
    Array2::from_shape_fn((n, n), |(i, j)| !((lo..lo + crop).contains(&i) && (lo..lo + crop).contains(&j)))
}

/// Evaluate on reduced field-of-view data (the training discretization) and
/// on the full k-space grid, whose image covers the never-seen outer region.
pub fn extend_fov(
    recon: &Recon<'_>,
    full: &PhantomDataset,
    crop: usize,
    protocol: &EvalProtocol,
) -> Result<TransferReport, EvalError> {
    let n = full.resolution;
    if crop == 0 || crop > n || crop % 16 != 0 || n % 16 != 0 {
        return Err(EvalError::Invalid(format!("crop {crop} of {n}: both must be multiples of 16 with crop <= {n}")));
    }
    let cropped = full.center_crop(crop)?;
    let region = outer_region(n, crop);
    let before = checksum(recon);
    let mut rows = Vec::new();
    for (method, base) in variants(recon) {
        let wide = with_options(&base, |o| EvalOptions { geometry: Some(Geometry::extended_fov(n, crop)), ..o });
        let train = crate::eval::evaluate(&base, &cropped, protocol)?.mean;
        let mut xfer = Vec::new();
        let mut outer = Vec::new();
        for (i, s) in full.slices.iter().enumerate() {
            let (m, k) = protocol.measure(s, i)?;
            let x = wide.run(s, &m, &k)?;
            let dr = data_range(&s.image);
            xfer.push(evaluate_metrics(&x, &s.image, dr)?);
            if crop < n {
                outer.push(ssim_in_region(&x, &s.image, dr, &region)?);
            }
        }
        let footprint = match base {
            Recon::Model { cfg, opts, .. } => {
                let train_ctx = OpContext { spacing: 2.0 / crop as f64, cnn_rescale: opts.cnn_rescale };
                let xfer_ctx = OpContext { spacing: 2.0 / n as f64, ..train_ctx };
                Some(model_footprint(cfg, false, train_ctx, xfer_ctx)?)
            }
            _ => None,
        };
        rows.push(TransferRow {
            method,
            train,
            transfer: EvalSummary::from_slices(xfer)?.mean,
            transfer_region_ssim: (!outer.is_empty()).then(|| outer.iter().sum::<f64>() / outer.len() as f64),
            footprint,
        });
    }
    unchanged(before, recon)?;
    Ok(TransferReport {
        mode: "fov",
        train_resolution: crop,
        transfer_resolution: n,
        rows,
    })
}

/// `NOTF` image stack `methods × H × W` of the first slice, for figures.
pub fn transfer_images(
    recon: &Recon<'_>,
    data: &PhantomDataset,
    protocol: &EvalProtocol,
    opts: EvalOptions,
) -> Result<Vec<(TransferMethod, Array2<f64>)>, EvalError> {
    let s = data.slices.first().ok_or(EvalError::Empty)?;
    let (m, k) = protocol.measure(s, 0)?;
    variants(recon)
        .into_iter()
        .map(|(method, r)| {
            let r = with_options(&r, |o| EvalOptions { cnn_rescale: o.cnn_rescale, ..opts });
            Ok((method, r.run(s, &m, &k)?))
        })
        .collect()
}
