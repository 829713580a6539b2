//! Instance normalization, layer normalization and LeakyReLU.

use crate::params::{join, Parameters, Tensor};
use crate::volume::FeatureMap;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn leaky_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

pub(crate) fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Per-channel normalization over the spatial axes with affine scale/shift.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct InstanceNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, InstanceNormCache) {
        let n = x.voxels();
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = Vec::with_capacity(x.channels);
        let mut y = FeatureMap::zeros(x.channels, x.dims);
        for c in 0..x.channels {
            let ch = x.channel(c);
            let (mean, var) = moments(ch);
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            let (g, b) = (self.gamma.data[c], self.beta.data[c]);
            let xh = &mut xhat[c * n..(c + 1) * n];
            let out = y.channel_mut(c);
            for t in 0..n {
                xh[t] = (ch[t] - mean) * is;
                out[t] = g * xh[t] + b;
            }
        }
        (y, InstanceNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &InstanceNormCache, gy: &FeatureMap, grad: &mut InstanceNorm) -> FeatureMap {
        let n = gy.voxels();
        let mut gx = FeatureMap::zeros(gy.channels, gy.dims);
        for c in 0..gy.channels {
            let g = gy.channel(c);
            let xh = &cache.xhat[c * n..(c + 1) * n];
            let gamma = self.gamma.data[c];
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for t in 0..n {
                sum_g += g[t];
                sum_gx += g[t] * xh[t];
            }
            grad.beta.data[c] += sum_g;
            grad.gamma.data[c] += sum_gx;
            let scale = gamma * cache.inv_std[c] / n as f64;
            let out = gx.channel_mut(c);
            for t in 0..n {
                out[t] = scale * (n as f64 * g[t] - sum_g - xh[t] * sum_gx);
            }
        }
        gx
    }
}

impl Parameters for InstanceNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Mean and biased variance.
pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Normalizes one row in place, returning its inverse standard deviation.
/// `row` holds the normalized values (before scale/shift) afterwards.
pub(crate) fn normalize_row(row: &mut [f64]) -> f64 {
    let (mean, var) = moments(row);
    let is = 1.0 / (var + NORM_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * is;
    }
    is
}

/// Gradient through [`normalize_row`]: `g` is d/d xhat on entry and d/d x on exit.
pub(crate) fn normalize_row_backward(xhat: &[f64], inv_std: f64, g: &mut [f64]) {
    let m = g.len() as f64;
    let sum_g: f64 = g.iter().sum();
    let sum_gx: f64 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for (gv, &xh) in g.iter_mut().zip(xhat) {
        *gv = inv_std / m * (m * *gv - sum_g - xh * sum_gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instance_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = FeatureMap::zeros(3, [6, 5, 4]);
        x.data.iter_mut().for_each(|v| *v = rng.random_range(-3.0..5.0));
        let (y, _) = InstanceNorm::new(3).forward(&x);
        for c in 0..3 {
            let (mean, var) = moments(y.channel(c));
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_zero_channel_maps_to_shift() {
        let x = FeatureMap::zeros(1, [3, 3, 3]);
        let (y, _) = InstanceNorm::new(1).forward(&x);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leaky_relu_slope() {
        let mut x = vec![-1.0, 0.0, 2.0];
        leaky_relu(&mut x);
        assert_eq!(x, vec![-0.2, 0.0, 2.0]);
    }
}
