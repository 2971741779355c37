use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CovarianceEstimate, Repr, Role, SigmaKind};
use crate::error::{check_len, invalid, Result};
use crate::models::{Dataset, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub batch: usize,
    /// Number of batches drawn; `None` uses `⌈10 / decay⌉`.
    pub steps: Option<usize>,
    pub seed: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            decay: 1e-3,
            batch: 32,
            steps: None,
            seed: 0,
        }
    }
}

/// Running, bias-corrected exponential average of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaDiagFisher {
    decay: f64,
    state: Vec<f64>,
    updates: u64,
    /// `(1 - decay)^updates`, tracked incrementally.
    retained: f64,
}

impl EmaDiagFisher {
    pub fn new(dim: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(invalid!("EMA decay must lie in (0, 1), got {decay}"));
        }
        Ok(Self {
            decay,
            state: vec![0.0; dim],
            updates: 0,
            retained: 1.0,
        })
    }

    /// Folds in the mean squared gradient of one batch.
    pub fn update<G: AsRef<[f64]>>(&mut self, batch: &[G]) -> Result<()> {
        if batch.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let inv = 1.0 / batch.len() as f64;
        for g in batch {
            check_len(self.state.len(), g.as_ref().len())?;
        }
        for (k, s) in self.state.iter_mut().enumerate() {
            let m: f64 = batch.iter().map(|g| g.as_ref()[k] * g.as_ref()[k]).sum::<f64>() * inv;
            *s = (1.0 - self.decay) * *s + self.decay * m;
        }
        self.updates += 1;
        self.retained *= 1.0 - self.decay;
        Ok(())
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn estimate(&self) -> Vec<f64> {
        if self.updates == 0 {
            return self.state.clone();
        }
        let c = 1.0 / (1.0 - self.retained);
        self.state.iter().map(|s| s * c).collect()
    }
}

/// EMA of squared per-example gradients over uniformly drawn training batches.
pub fn ema_diag_fisher(model: &Model, data: &Dataset, cfg: &EmaConfig) -> Result<CovarianceEstimate> {
    let mut acc = EmaDiagFisher::new(model.n_params(), cfg.decay)?;
    if cfg.batch == 0 || data.is_empty() {
        return Err(invalid!("EMA Fisher needs a non-empty dataset and batch >= 1"));
    }
    let steps = cfg.steps.unwrap_or_else(|| libm::ceil(10.0 / cfg.decay) as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Gradients are fixed at the trained parameters, so cache them once.
    let grads = super::per_example_grads(model, data)?;
    let mut batch = Vec::with_capacity(cfg.batch);
    for _ in 0..steps {
        batch.clear();
        for _ in 0..cfg.batch {
            batch.push(grads[rng.random_range(0..data.len())].as_slice());
        }
        acc.update(&batch)?;
    }
    CovarianceEstimate::new(
        SigmaKind::FisherEmaDiag,
        Repr::Diagonal(acc.estimate()),
        Role::Curvature,
        data.len(),
        model.params().blocks().to_vec(),
    )
}
