//! Squeeze-and-excitation channel gating.

use rand::Rng;

use crate::params::{join, Parameters, Tensor};
use crate::volume::FeatureMap;

pub const SE_REDUCTION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    /// `[hidden, channels]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[channels, hidden]`
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct SeCache {
    input: FeatureMap,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    gate: Vec<f64>,
}

impl SeCache {
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self {
            channels,
            hidden,
            w1: Tensor::uniform(&[hidden, channels], b1, rng),
            b1: Tensor::uniform(&[hidden], b1, rng),
            w2: Tensor::uniform(&[channels, hidden], b2, rng),
            b2: Tensor::uniform(&[channels], b2, rng),
        }
    }

    /// Per-channel gates in (0, 1) for the given pooled descriptor.
    fn excite(&self, pooled: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c, h) = (self.channels, self.hidden);
        let hidden_pre: Vec<f64> = (0..h)
            .map(|r| self.b1.data[r] + (0..c).map(|k| self.w1.data[r * c + k] * pooled[k]).sum::<f64>())
            .collect();
        let gate = (0..c)
            .map(|r| {
                let logit = self.b2.data[r]
                    + (0..h)
                        .map(|k| self.w2.data[r * h + k] * hidden_pre[k].max(0.0))
                        .sum::<f64>();
                sigmoid(logit)
            })
            .collect();
        (hidden_pre, gate)
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, SeCache) {
        let n = x.voxels() as f64;
        let pooled: Vec<f64> = (0..x.channels).map(|c| x.channel(c).iter().sum::<f64>() / n).collect();
        let (hidden_pre, gate) = self.excite(&pooled);
        let mut y = x.clone();
        for (c, &g) in gate.iter().enumerate() {
            y.channel_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        (
            y,
            SeCache {
                input: x.clone(),
                pooled,
                hidden_pre,
                gate,
            },
        )
    }

    pub fn backward(&self, cache: &SeCache, gy: &FeatureMap, grad: &mut SeBlock) -> FeatureMap {
        let (c, h) = (self.channels, self.hidden);
        let n = gy.voxels() as f64;
        let x = &cache.input;
        let mut gx = gy.clone();
        let mut dlogit = vec![0.0; c];
        for ch in 0..c {
            let g = cache.gate[ch];
            gx.channel_mut(ch).iter_mut().for_each(|v| *v *= g);
            let dg: f64 = gy.channel(ch).iter().zip(x.channel(ch)).map(|(a, b)| a * b).sum();
            dlogit[ch] = dg * g * (1.0 - g);
        }
        let mut dhidden = vec![0.0; h];
        for r in 0..c {
            grad.b2.data[r] += dlogit[r];
            for k in 0..h {
                grad.w2.data[r * h + k] += dlogit[r] * cache.hidden_pre[k].max(0.0);
                dhidden[k] += self.w2.data[r * h + k] * dlogit[r];
            }
        }
        let mut dpooled = vec![0.0; c];
        for r in 0..h {
            if cache.hidden_pre[r] <= 0.0 {
                continue;
            }
            grad.b1.data[r] += dhidden[r];
            for k in 0..c {
                grad.w1.data[r * c + k] += dhidden[r] * cache.pooled[k];
                dpooled[k] += self.w1.data[r * c + k] * dhidden[r];
            }
        }
        for (ch, dp) in dpooled.iter().enumerate() {
            let add = dp / n;
            gx.channel_mut(ch).iter_mut().for_each(|v| *v += add);
        }
        gx
    }
}

impl Parameters for SeBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
    }
}
