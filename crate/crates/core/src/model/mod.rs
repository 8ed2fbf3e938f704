//! The unrolled variational reconstruction network and its building blocks.

mod loss;
mod params;
mod train;
mod udno;
mod varno;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::basis::{BasisFamily, BasisSpec};
use crate::disco::DiscoError;
use crate::mask::MaskError;
use crate::phantom::PhantomError;
use crate::tensor_io::TensorIoError;

pub use loss::ssim_loss;
pub use params::ModelParams;
pub use train::{train, Adam, TrainConfig, TrainOutcome};
pub use udno::{footprint, init_udno, place_params, udno_forward, OpContext, ParamVars};
pub use varno::{
    calibration_maps, estimate_sensitivities, reconstruct, varno_graph, EvalOptions, Geometry,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{h}×{w} input is not divisible by 2 at encoder level {level}")]
    Divisibility { level: usize, h: usize, w: usize },
    #[error("mask has no fully sampled centre region")]
    EmptyCenter,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Params(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        last_good: Box<ModelParams>,
    },
    #[error(transparent)]
    Disco(#[from] DiscoError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

/// How every convolution of a UDNO is parameterized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// DISCO layer: learned coefficients over a basis of fixed physical radius.
    Disco(BasisSpec),
    /// Ordinary convolution with a fixed odd `size × size` pixel footprint.
    Cnn(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UdnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub depth: usize,
    pub kernel: KernelKind,
    /// Level-0 grid spacing at which coefficients are expressed; kernels are
    /// scaled by the ratio of cell areas when evaluated on other grids.
    pub ref_spacing: f64,
}

impl UdnoConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.hidden == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if !(self.ref_spacing > 0.0) {
            return bad(format!("reference spacing {} must be > 0", self.ref_spacing));
        }
        match self.kernel {
            KernelKind::Disco(b) => b.validate().map_err(|e| ModelError::Config(e.to_string()))?,
            KernelKind::Cnn(s) if s % 2 == 0 => return bad(format!("CNN kernel size {s} must be odd")),
            KernelKind::Cnn(_) => {}
        }
        Ok(())
    }

    /// Channels of encoder level `l` (the bottleneck is level `depth`).
    pub fn channels(&self, level: usize) -> usize {
        self.hidden << level
    }
}

/// The full unrolled model: k-space operator, sensitivity refiner and one
/// image operator per cascade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub cascades: usize,
    /// Fixed weight of the image operator in every cascade.
    pub lambda: f64,
    pub kspace: UdnoConfig,
    pub image: UdnoConfig,
    pub sens: UdnoConfig,
}

/// DISCO radius that covers 3.2 cells of a 64-sample unit-domain grid.
pub const DESK_RADIUS: f64 = 0.1;

impl ModelConfig {
    /// Small configuration for CPU experiments at `resolution`² on a `[-1, 1]²` grid.
    pub fn desk(resolution: usize, kernel: KernelKind, cascades: usize, hidden: usize) -> Self {
        let h = 2.0 / resolution as f64;
        let op = |hidden, depth| UdnoConfig {
            in_channels: 2,
            out_channels: 2,
            hidden,
            depth,
            kernel,
            ref_spacing: h,
        };
        Self {
            cascades,
            lambda: 1.0,
            kspace: op(hidden, 2),
            image: op(hidden, 2),
            sens: op((hidden / 2).max(1), 1),
        }
    }

    pub fn desk_disco(resolution: usize) -> Self {
        Self::desk(resolution, KernelKind::Disco(BasisSpec::piecewise_linear(DESK_RADIUS)), 2, 8)
    }

    pub fn desk_cnn(resolution: usize) -> Self {
        Self::desk(resolution, KernelKind::Cnn(3), 2, 8)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cascades == 0 {
            return Err(ModelError::Config("need at least one cascade".into()));
        }
        for u in [&self.kspace, &self.image, &self.sens] {
            u.validate()?;
        }
        Ok(())
    }

    /// Largest encoder depth; inputs must be divisible by `2^max_depth`.
    pub fn max_depth(&self) -> usize {
        self.kspace.depth.max(self.image.depth).max(self.sens.depth)
    }

    /// `key=value` text manifest.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "cascades={}", self.cascades).unwrap();
        writeln!(s, "lambda={:?}", self.lambda).unwrap();
        for (name, u) in [("kspace", &self.kspace), ("image", &self.image), ("sens", &self.sens)] {
            writeln!(s, "{name}.in_channels={}", u.in_channels).unwrap();
            writeln!(s, "{name}.out_channels={}", u.out_channels).unwrap();
            writeln!(s, "{name}.hidden={}", u.hidden).unwrap();
            writeln!(s, "{name}.depth={}", u.depth).unwrap();
            writeln!(s, "{name}.ref_spacing={:?}", u.ref_spacing).unwrap();
            match u.kernel {
                KernelKind::Disco(b) => {
                    writeln!(s, "{name}.kernel=disco").unwrap();
                    writeln!(s, "{name}.basis_family={}", b.family.code()).unwrap();
                    writeln!(s, "{name}.basis_radius={:?}", b.radius).unwrap();
                    writeln!(s, "{name}.basis_isotropic={}", b.n_isotropic).unwrap();
                    writeln!(s, "{name}.basis_rings={}", b.n_rings).unwrap();
                    writeln!(s, "{name}.basis_per_ring={}", b.n_per_ring).unwrap();
                }
                KernelKind::Cnn(size) => {
                    writeln!(s, "{name}.kernel=cnn").unwrap();
                    writeln!(s, "{name}.kernel_size={size}").unwrap();
                }
            }
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self, ModelError> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        fn get<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T, ModelError> {
            kv.get(key)
                .ok_or_else(|| ModelError::Config(format!("manifest lacks {key}")))?
                .parse()
                .map_err(|_| ModelError::Config(format!("manifest value for {key} is malformed")))
        }
        let op = |name: &str| -> Result<UdnoConfig, ModelError> {
            let key = |k: &str| format!("{name}.{k}");
            let kernel = match kv.get(key("kernel").as_str()).copied() {
                Some("disco") => {
                    let code: u8 = get(&kv, &key("basis_family"))?;
                    let family = BasisFamily::from_code(code)
                        .ok_or_else(|| ModelError::Config(format!("unknown basis family {code}")))?;
                    let b = BasisSpec::new(
                        family,
                        get(&kv, &key("basis_radius"))?,
                        get(&kv, &key("basis_isotropic"))?,
                        get(&kv, &key("basis_rings"))?,
                        get(&kv, &key("basis_per_ring"))?,
                    )
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                    KernelKind::Disco(b)
                }
                Some("cnn") => KernelKind::Cnn(get(&kv, &key("kernel_size"))?),
                other => return Err(ModelError::Config(format!("unknown kernel kind {other:?}"))),
            };
            Ok(UdnoConfig {
                in_channels: get(&kv, &key("in_channels"))?,
                out_channels: get(&kv, &key("out_channels"))?,
                hidden: get(&kv, &key("hidden"))?,
                depth: get(&kv, &key("depth"))?,
                kernel,
                ref_spacing: get(&kv, &key("ref_spacing"))?,
            })
        };
        let cfg = Self {
            cascades: get(&kv, "cascades")?,
            lambda: get(&kv, "lambda")?,
            kspace: op("kspace")?,
            image: op("image")?,
            sens: op("sens")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_manifest()).map_err(|source| TensorIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TensorIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_manifest(&text)
    }

    /// Fresh parameters: random kernels, zero output projections, `η = 1`.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams, ModelError> {
        self.validate()?;
        let mut rng = crate::rng::stream(seed, "init");
        let mut p = ModelParams::new();
        init_udno(&self.kspace, "nok", &mut rng, &mut p)?;
        init_udno(&self.sens, "sens", &mut rng, &mut p)?;
        for t in 0..self.cascades {
            init_udno(&self.image, &format!("noi{t}"), &mut rng, &mut p)?;
        }
        p.insert("eta", ndarray::ArrayD::ones(ndarray::IxDyn(&[self.cascades])))?;
        Ok(p)
    }
}
