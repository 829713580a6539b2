//! Plain-text `key = value` configuration for training.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so typos do not silently fall back to defaults.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `lr` | Adam learning rate | 0.0001 |
//! | `beta1`, `beta2`, `eps` | Adam moments | 0.9, 0.999, 1e-8 |
//! | `alpha` | smoothness weight | 1 |
//! | `beta` | orthogonality weight | 1 |
//! | `widths` | encoder widths, finest first | 4,8,16,16,16 |
//! | `heads` | heads per level, deepest first | 8,4,2,1,1 |
//! | `neighborhood` | attention window side | 3 |
//! | `batch` | pairs per step | 1 |
//! | `steps` | optimisation steps | 2000 |
//! | `seed` | initialisation seed | 0 |
//! | `checkpoint_every` | steps between checkpoints, 0 = off | 500 |
//! | `grad_clip` | global norm clip or `none` | none |

use std::fmt::Write as _;
use std::str::FromStr;

use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// `(line number, key, value)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Manifest {
            line: n + 1,
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad(line: usize, key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: `{key} = {value}`: {why}"))
}

fn scalar<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(line, key, value, e))
}

pub fn parse_levels(value: &str) -> std::result::Result<[usize; LEVELS], String> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected {LEVELS} comma-separated values, got {}", v.len()))
}

fn join_levels(v: &[usize; LEVELS]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.adam.lr = scalar(line, key, value)?,
            "beta1" => self.adam.beta1 = scalar(line, key, value)?,
            "beta2" => self.adam.beta2 = scalar(line, key, value)?,
            "eps" => self.adam.eps = scalar(line, key, value)?,
            "alpha" => self.weights.alpha = scalar(line, key, value)?,
            "beta" => self.weights.beta = scalar(line, key, value)?,
            "widths" => self.model.widths = parse_levels(value).map_err(|e| bad(line, key, value, e))?,
            "heads" => self.model.heads = parse_levels(value).map_err(|e| bad(line, key, value, e))?,
            "neighborhood" => self.model.neighborhood = scalar(line, key, value)?,
            "batch" => self.batch = scalar(line, key, value)?,
            "steps" => self.steps = scalar(line, key, value)?,
            "seed" => self.seed = scalar(line, key, value)?,
            "checkpoint_every" => self.checkpoint_every = scalar(line, key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(scalar(line, key, v)?),
                }
            }
            _ => return Err(bad(line, key, value, "unknown key")),
        }
        Ok(())
    }

    /// Defaults overridden by every setting in `text`, then validated.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(line, &k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`TrainConfig::from_kv_text`]; floats print round-trip exact.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.adam.lr);
        let _ = writeln!(s, "beta1 = {}", self.adam.beta1);
        let _ = writeln!(s, "beta2 = {}", self.adam.beta2);
        let _ = writeln!(s, "eps = {}", self.adam.eps);
        let _ = writeln!(s, "alpha = {}", self.weights.alpha);
        let _ = writeln!(s, "beta = {}", self.weights.beta);
        let _ = writeln!(s, "widths = {}", join_levels(&self.model.widths));
        let _ = writeln!(s, "heads = {}", join_levels(&self.model.heads));
        let _ = writeln!(s, "neighborhood = {}", self.model.neighborhood);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        match self.grad_clip {
            Some(c) => {
                let _ = writeln!(s, "grad_clip = {c}");
            }
            None => {
                let _ = writeln!(s, "grad_clip = none");
            }
        }
        s
    }
}
