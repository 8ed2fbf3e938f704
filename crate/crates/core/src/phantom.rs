//! Deterministic synthetic multi-coil data: blurred ellipse phantoms, smooth
//! complex coil sensitivities and simulated undersampled measurements.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::GridSpec;
use crate::kspace::{self, CoilKSpace, SensitivityMaps};
use crate::mask::Mask;
use crate::rng;
use crate::tensor_io::{self, Tensor, TensorIoError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("malformed dataset index: {0}")]
    Index(String),
}

/// One ground-truth slice with its coil model and fully sampled k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSlice {
    pub image: Array2<f64>,
    pub sens: SensitivityMaps,
    pub kspace: CoilKSpace,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub slices: Vec<PhantomSlice>,
    pub seed: u64,
    pub resolution: usize,
    pub n_coils: usize,
}

fn paint_ellipses(n: usize, r: &mut impl Rng) -> Array2<f64> {
    let grid = GridSpec::unit(n, n);
    let mut img = Array2::<f64>::zeros((n, n));
    let count = r.random_range(6..=12usize);
    for e in 0..count {
        // the first ellipse is a large low-intensity "body"
        let (cy, cx, ay, ax, value) = if e == 0 {
            (
                r.random_range(-0.05..0.05),
                r.random_range(-0.05..0.05),
                r.random_range(0.65..0.85),
                r.random_range(0.55..0.75),
                r.random_range(0.1..0.4),
            )
        } else {
            (
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
                r.random_range(0.05..0.3),
                r.random_range(0.05..0.3),
                r.random_range(0.1..=1.0),
            )
        };
        let angle: f64 = r.random_range(0.0..PI);
        let (sn, cs) = angle.sin_cos();
        for ((i, j), v) in img.indexed_iter_mut() {
            let [y, x] = grid.point(i, j);
            let (dy, dx) = (y - cy, x - cx);
            let u = cs * dx + sn * dy;
            let w = -sn * dx + cs * dy;
            if (u / ax).powi(2) + (w / ay).powi(2) <= 1.0 {
                *v = value;
            }
        }
    }
    img
}

/// Separable Gaussian blur with zero padding, truncated at 3σ.
pub fn gaussian_blur(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-rad..=rad).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let (h, w) = x.dim();
    let pass = |src: &Array2<f64>, along_rows: bool| -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let d = k as isize - rad;
                let (si, sj) = if along_rows { (i as isize, j as isize + d) } else { (i as isize + d, j as isize) };
                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                    acc += t * src[[si as usize, sj as usize]];
                }
            }
            acc
        })
    };
    pass(&pass(x, true), false)
}

/// Smooth complex coil profiles: Gaussian bumps centred on a circle of radius
/// 1.2 around the image, each with a gentle linear phase, RSS-normalized.
pub fn coil_sensitivities(n: usize, n_coils: usize, r: &mut impl Rng) -> SensitivityMaps {
    let grid = GridSpec::unit(n, n);
    let offset: f64 = r.random_range(0.0..2.0 * PI);
    let mut maps = Array3::<Complex64>::zeros((n_coils, n, n));
    for c in 0..n_coils {
        let phi = offset + 2.0 * PI * c as f64 / n_coils as f64;
        let (py, px) = (1.2 * phi.sin(), 1.2 * phi.cos());
        let width: f64 = r.random_range(0.8..1.1);
        let (gy, gx): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let phase0: f64 = r.random_range(0.0..2.0 * PI);
        for i in 0..n {
            for j in 0..n {
                let [y, x] = grid.point(i, j);
                let d2 = (y - py).powi(2) + (x - px).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = phase0 + 0.5 * (gy * y + gx * x);
                maps[[c, i, j]] = Complex64::from_polar(mag, phase);
            }
        }
    }
    SensitivityMaps::new(maps).normalized()
}

/// Ellipse phantom slice `index` of the dataset with seed `seed`.
pub fn phantom_slice(n: usize, n_coils: usize, seed: u64, index: u64) -> PhantomSlice {
    let mut r = rng::indexed_stream(seed, "phantom", index);
    let image = gaussian_blur(&paint_ellipses(n, &mut r), 2.0);
    let sens = coil_sensitivities(n, n_coils, &mut r);
    let x = image.mapv(|v| Complex64::new(v, 0.0));
    let kspace = kspace::forward_a(&x, &sens, &Mask::full(n, n)).expect("consistent shapes");
    PhantomSlice {
        image,
        sens,
        kspace: CoilKSpace { mask: None, ..kspace },
        seed: index,
    }
}

pub fn generate_phantoms(n: usize, resolution: usize, n_coils: usize, seed: u64) -> Result<PhantomDataset, PhantomError> {
    if n == 0 {
        return Err(PhantomError::Invalid("need at least one slice".into()));
    }
    if resolution == 0 || resolution % 16 != 0 {
        return Err(PhantomError::Invalid(format!("resolution {resolution} is not a multiple of 16")));
    }
    if n_coils == 0 {
        return Err(PhantomError::Invalid("need at least one coil".into()));
    }
    Ok(PhantomDataset {
        slices: (0..n as u64).map(|i| phantom_slice(resolution, n_coils, seed, i)).collect(),
        seed,
        resolution,
        n_coils,
    })
}

/// `m ⊙ (k + ε)` with `ε` complex Gaussian, standard deviation `noise_sigma`
/// on each of the real and imaginary parts.
pub fn simulate_measurement(slice: &PhantomSlice, m: &Mask, noise_sigma: f64, seed: u64) -> Result<CoilKSpace, PhantomError> {
    let (h, w) = slice.kspace.shape();
    if m.shape() != (h, w) {
        return Err(PhantomError::Invalid(format!("mask {:?} vs k-space {h}×{w}", m.shape())));
    }
    if !(noise_sigma >= 0.0) {
        return Err(PhantomError::Invalid("noise sigma must be >= 0".into()));
    }
    let mut data = slice.kspace.data.clone();
    if noise_sigma > 0.0 {
        let mut r = rng::indexed_stream(seed, "noise", slice.seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        data.iter_mut().for_each(|v| *v += Complex64::new(normal.sample(&mut r), normal.sample(&mut r)));
    }
    let mw = m.weights();
    for mut p in data.outer_iter_mut() {
        Zip::from(&mut p).and(&mw).for_each(|v, &mv| *v *= mv);
    }
    Ok(CoilKSpace {
        data,
        mask: Some(m.clone()),
        noise_sigma,
    })
}

impl PhantomDataset {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Image-space centre crop of every slice (reduced field of view). The
    /// cropped k-space is recomputed from the cropped coil images, so it covers
    /// the same frequency extent at coarser sampling.
    pub fn center_crop(&self, crop: usize) -> Result<PhantomDataset, PhantomError> {
        let n = self.resolution;
        if crop == 0 || crop > n || crop % 16 != 0 {
            return Err(PhantomError::Invalid(format!("crop {crop} must be a multiple of 16 no larger than {n}")));
        }
        if crop == n {
            return Ok(self.clone());
        }
        let off = (n - crop) / 2;
        let win = ndarray::s![off..off + crop, off..off + crop];
        let slices = self
            .slices
            .iter()
            .map(|s| {
                let image = s.image.slice(win).to_owned();
                let maps = s.sens.maps.slice(ndarray::s![.., off..off + crop, off..off + crop]).to_owned();
                let sens = SensitivityMaps::new(maps).normalized();
                let x = image.mapv(|v| Complex64::new(v, 0.0));
                let k = kspace::forward_a(&x, &sens, &Mask::full(crop, crop)).expect("consistent shapes");
                PhantomSlice {
                    image,
                    sens,
                    kspace: CoilKSpace { mask: None, ..k },
                    seed: s.seed,
                }
            })
            .collect();
        Ok(PhantomDataset {
            slices,
            seed: self.seed,
            resolution: crop,
            n_coils: self.n_coils,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PhantomError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| TensorIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut index = format!(
            "# resolution={} coils={} seed={} slices={}\n",
            self.resolution,
            self.n_coils,
            self.seed,
            self.len()
        );
        for (i, s) in self.slices.iter().enumerate() {
            let names = [
                format!("slice{i:04}_image.notf"),
                format!("slice{i:04}_sens.notf"),
                format!("slice{i:04}_kspace.notf"),
            ];
            tensor_io::write_tensor(dir.join(&names[0]), &Tensor::from_real_array(&s.image.clone().into_dyn()))?;
            tensor_io::write_tensor(dir.join(&names[1]), &Tensor::from_complex_array(&s.sens.maps.clone().into_dyn()))?;
            tensor_io::write_tensor(dir.join(&names[2]), &Tensor::from_complex_array(&s.kspace.data.clone().into_dyn()))?;
            writeln!(index, "{} {} {} {}", names[0], names[1], names[2], s.seed).unwrap();
        }
        std::fs::write(dir.join("index.txt"), index).map_err(|source| TensorIoError::Io {
            path: dir.join("index.txt"),
            source,
        })?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<PhantomDataset, PhantomError> {
        let dir = dir.as_ref();
        let path = dir.join("index.txt");
        let text = std::fs::read_to_string(&path).map_err(|source| TensorIoError::Io { path: path.clone(), source })?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| PhantomError::Index("empty index".into()))?;
        let field = |key: &str| -> Result<u64, PhantomError> {
            header
                .trim_start_matches('#')
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| PhantomError::Index(format!("missing {key}")))?
                .parse()
                .map_err(|_| PhantomError::Index(format!("bad {key}")))
        };
        let (resolution, n_coils, seed) = (field("resolution")? as usize, field("coils")? as usize, field("seed")?);
        let mut slices = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(PhantomError::Index(line.to_string()));
            }
            let bad = |what: &str| PhantomError::Index(format!("{what} in {line}"));
            let image = tensor_io::read_tensor(dir.join(parts[0]))?
                .to_real_array()
                .and_then(|a| a.into_dimensionality().ok())
                .ok_or_else(|| bad("image"))?;
            let maps = tensor_io::read_tensor(dir.join(parts[1]))?
                .to_complex_array()
                .and_then(|a| a.into_dimensionality().ok())
                .ok_or_else(|| bad("sensitivities"))?;
            let data = tensor_io::read_tensor(dir.join(parts[2]))?
                .to_complex_array()
                .and_then(|a| a.into_dimensionality().ok())
                .ok_or_else(|| bad("k-space"))?;
            let seed = parts[3].parse().map_err(|_| bad("seed"))?;
            slices.push(PhantomSlice {
                image,
                sens: SensitivityMaps::new(maps),
                kspace: CoilKSpace::new(data),
                seed,
            });
        }
        Ok(PhantomDataset {
            slices,
            seed,
            resolution,
            n_coils,
        })
    }
}
