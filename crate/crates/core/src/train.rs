//! Unsupervised training loop with Adam.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{accumulate_grad, ModelConfig, PanModel, PanParams};
use crate::params::Parameters;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, flattened in parameter visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grad: &[f64]) -> Result<()> {
        if grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                actual: grad.len(),
            });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, t| {
            for p in t.data.iter_mut() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                i += 1;
            }
        });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::brain(),
            batch: 1,
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad clip must be positive, got {c}")));
            }
        }
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        Ok(())
    }
}

/// One moving/fixed training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub moving: Volume,
    pub fixed: Volume,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub ncc: f64,
    pub reg: f64,
    pub orth: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: PanModel,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = PanModel::new(config.model, config.seed)?;
        let adam = Adam::new(config.adam, model.params.num_parameters());
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
        })
    }

    /// Pair indices used by step `step` (0-based): consecutive pairs,
    /// cycling through the dataset.
    fn batch_indices(&self, step: usize, len: usize) -> impl Iterator<Item = usize> {
        let b = self.config.batch;
        (0..b).map(move |i| (step * b + i) % len)
    }

    /// Runs one optimisation step and returns the batch-mean losses.
    pub fn train_step(&mut self, pairs: &[TrainPair]) -> Result<StepRecord> {
        if pairs.is_empty() {
            return Err(Error::Config("training needs at least one pair".into()));
        }
        let step = self.step + 1;
        let params = &self.model.params;
        let mut grad: PanParams = params.zeros_like();
        let mut sum = LossBreakdown::default();
        let indices: Vec<usize> = self.batch_indices(self.step, pairs.len()).collect();
        for &i in &indices {
            let p = &pairs[i];
            let l = accumulate_grad(params, &p.moving, &p.fixed, self.config.weights, &mut grad).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { step, term: what.into() },
                e => e,
            })?;
            if let Some(term) = l.non_finite_term() {
                return Err(Error::Diverged { step, term: term.into() });
            }
            sum.ncc += l.ncc;
            sum.reg += l.reg;
            sum.orth += l.orth;
            sum.total += l.total;
        }
        let scale = 1.0 / indices.len() as f64;
        let mut flat = grad.flatten();
        flat.iter_mut().for_each(|g| *g *= scale);
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                term: "gradient".into(),
            });
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                flat.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        self.adam.update(&mut self.model.params, &flat)?;
        if !self.model.params.all_finite() {
            return Err(Error::Diverged {
                step,
                term: "parameters".into(),
            });
        }
        self.step = step;
        Ok(StepRecord {
            step,
            ncc: sum.ncc * scale,
            reg: sum.reg * scale,
            orth: sum.orth * scale,
            total: sum.total * scale,
        })
    }

    /// Trains until `config.steps` steps are complete, calling `on_step`
    /// after every step.
    pub fn run(&mut self, pairs: &[TrainPair], mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let rec = self.train_step(pairs)?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}
