//! Adam training of the unrolled model against the SSIM loss.

use std::path::PathBuf;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::RngCore;

use super::udno::place_params;
use super::varno::{varno_graph, EvalOptions};
use super::{ssim_loss, ModelConfig, ModelError, ModelParams};
use crate::autodiff::Tape;
use crate::mask::{generate_mask, MaskPattern};
use crate::metrics::data_range;
use crate::phantom::{simulate_measurement, PhantomDataset};
use crate::rng;

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update; `grads` yields the gradient of each parameter by name.
    pub fn update<'a>(
        &mut self,
        params: &mut ModelParams,
        grad: impl Fn(&str) -> Option<&'a ArrayD<f64>>,
    ) -> Result<(), ModelError> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grad(name) else { continue };
            let m = self.m.get_mut(name).ok_or_else(|| ModelError::Params(format!("optimizer lacks {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| ModelError::Params(format!("optimizer lacks {name}")))?;
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub pattern: MaskPattern,
    pub accel: usize,
    pub center_fraction: f64,
    pub noise_sigma: f64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Write `epochNNN.ckpt` and `model.cfg` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per epoch to standard error.
    pub verbose: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            seed,
            pattern: MaskPattern::Equispaced,
            accel: 4,
            center_fraction: 0.08,
            noise_sigma: 0.0,
            max_steps: None,
            checkpoint_dir: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Train from a seeded initialization. Shuffling, masks and noise each draw
/// from their own stream, so runs with equal inputs are bitwise identical.
pub fn train(data: &PhantomDataset, cfg: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    if !(tc.lr >= 0.0) {
        return Err(ModelError::Config(format!("learning rate {} must be >= 0", tc.lr)));
    }
    let shape = data.slices[0].kspace.shape();
    if data.slices.iter().any(|s| s.kspace.shape() != shape) {
        return Err(ModelError::Shape("training slices differ in shape".into()));
    }
    if let Some(dir) = &tc.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| crate::tensor_io::TensorIoError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut params = cfg.init_params(tc.seed)?;
    let mut adam = Adam::new(&params, tc.lr);
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut steps = 0usize;
    let budget = tc.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..tc.epochs {
        if steps >= budget {
            break;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::indexed_stream(tc.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            if steps >= budget {
                break;
            }
            let mask_seed = rng::indexed_stream(tc.seed, "mask", steps as u64).next_u64();
            let mask = generate_mask(tc.pattern, tc.accel, tc.center_fraction, shape, mask_seed)?;
            let slice = &data.slices[i];
            let k = simulate_measurement(slice, &mask, tc.noise_sigma, mask_seed)?;
            let tape = Tape::new();
            let pv = place_params(&tape, &params, true);
            let y = varno_graph(&tape, cfg, &pv, &k, &mask, &EvalOptions::default())?;
            let target = tape.constant(slice.image.clone().into_dyn());
            let loss = ssim_loss(y, target, data_range(&slice.image))?;
            let lv = *loss.value().first().expect("scalar loss");
            let grads = tape.backward(loss).map_err(|e| ModelError::Params(e.to_string()))?;
            let finite = lv.is_finite()
                && pv.values().all(|v| grads.get(*v).is_none_or(|g| g.iter().all(|x| x.is_finite())));
            if !finite {
                return Err(ModelError::NonFinite {
                    epoch,
                    step: steps,
                    last_good: Box::new(params),
                });
            }
            adam.update(&mut params, |name| pv.get(name).and_then(|v| grads.get(*v)))?;
            total += lv;
            count += 1;
            steps += 1;
        }
        let mean = total / count.max(1) as f64;
        epoch_losses.push(mean);
        if tc.verbose {
            eprintln!("epoch {epoch:3}  steps {steps:6}  loss {mean:.6}");
        }
        if let Some(dir) = &tc.checkpoint_dir {
            params.save(dir.join(format!("epoch{epoch:03}.ckpt")))?;
            cfg.save_manifest(dir.join("model.cfg"))?;
        }
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        steps,
    })
}
