//! 3×3×3 convolution (padding 1) and the conv → instance norm → LeakyReLU block.

use rand::Rng;

use super::norm::{leaky_relu, leaky_relu_backward, InstanceNorm, InstanceNormCache};
use crate::error::{Error, Result};
use crate::params::{join, Parameters, Tensor};
use crate::volume::{voxel_count, Dims, FeatureMap};

const TAPS: usize = 27;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    /// `[c_out, c_in, 3, 3, 3]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * TAPS) as f64).sqrt();
        Self {
            c_in,
            c_out,
            stride,
            weight: Tensor::uniform(&[c_out, c_in, 3, 3, 3], bound, rng),
            bias: Tensor::uniform(&[c_out], bound, rng),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            stride,
            weight: Tensor::zeros(&[c_out, c_in, 3, 3, 3]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn output_dims(&self, input: Dims) -> Dims {
        input.map(|d| (d - 1) / self.stride + 1)
    }
}

impl Parameters for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Output positions `o` along one axis for which `o * stride + tap - 1` is
/// inside `[0, d_in)`; returned as a half-open range.
#[inline]
fn tap_range(tap: usize, stride: usize, d_in: usize, d_out: usize) -> (usize, usize) {
    let lo = if tap == 0 { 1usize.div_ceil(stride) } else { 0 };
    if d_in < tap {
        return (0, 0);
    }
    let hi = ((d_in - tap) / stride + 1).min(d_out);
    (lo, hi.max(lo))
}

/// Visits every (tap, output row) pair, handing the callback the offsets of
/// the matching input and output rows plus the valid `k` range.
#[inline]
fn for_each_row(
    in_dims: Dims,
    out_dims: Dims,
    stride: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for tx in 0..3 {
        let (x_lo, x_hi) = tap_range(tx, stride, in_dims[0], out_dims[0]);
        for ty in 0..3 {
            let (y_lo, y_hi) = tap_range(ty, stride, in_dims[1], out_dims[1]);
            for tz in 0..3 {
                let (z_lo, z_hi) = tap_range(tz, stride, in_dims[2], out_dims[2]);
                if z_lo >= z_hi {
                    continue;
                }
                let tap = (tx * 3 + ty) * 3 + tz;
                for ox in x_lo..x_hi {
                    let ix = ox * stride + tx - 1;
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ty - 1;
                        let out_row = (ox * out_dims[1] + oy) * out_dims[2];
                        // input column of output z_lo
                        let in_row = (ix * in_dims[1] + iy) * in_dims[2] + z_lo * stride + tz - 1;
                        f(tap, out_row + z_lo, in_row, z_hi - z_lo);
                    }
                }
            }
        }
    }
}

pub fn conv3d(x: &FeatureMap, p: &Conv3d) -> Result<FeatureMap> {
    if x.channels != p.c_in {
        return Err(Error::ChannelMismatch {
            expected: p.c_in,
            actual: x.channels,
        });
    }
    let out_dims = p.output_dims(x.dims);
    let n_in = x.voxels();
    let n_out = voxel_count(out_dims);
    let s = p.stride;
    let mut y = FeatureMap::zeros(p.c_out, out_dims);
    for oc in 0..p.c_out {
        let out = &mut y.data[oc * n_out..(oc + 1) * n_out];
        out.iter_mut().for_each(|v| *v = p.bias.data[oc]);
        for ic in 0..p.c_in {
            let inp = &x.data[ic * n_in..(ic + 1) * n_in];
            let w = &p.weight.data[(oc * p.c_in + ic) * TAPS..(oc * p.c_in + ic + 1) * TAPS];
            for_each_row(x.dims, out_dims, s, |tap, o, i, len| {
                let wt = w[tap];
                if s == 1 {
                    for (dst, src) in out[o..o + len].iter_mut().zip(&inp[i..i + len]) {
                        *dst += wt * src;
                    }
                } else {
                    for t in 0..len {
                        out[o + t] += wt * inp[i + t * s];
                    }
                }
            });
        }
    }
    Ok(y)
}

/// Accumulates weight/bias gradients into `grad` and returns the input
/// gradient (empty when `need_input` is false).
pub fn conv3d_backward(x: &FeatureMap, p: &Conv3d, gy: &FeatureMap, grad: &mut Conv3d, need_input: bool) -> FeatureMap {
    let out_dims = gy.dims;
    let n_in = x.voxels();
    let n_out = voxel_count(out_dims);
    let s = p.stride;
    let mut gx = if need_input {
        FeatureMap::zeros(p.c_in, x.dims)
    } else {
        FeatureMap {
            channels: p.c_in,
            dims: x.dims,
            data: Vec::new(),
        }
    };
    for oc in 0..p.c_out {
        let g = &gy.data[oc * n_out..(oc + 1) * n_out];
        grad.bias.data[oc] += g.iter().sum::<f64>();
        for ic in 0..p.c_in {
            let inp = &x.data[ic * n_in..(ic + 1) * n_in];
            let base = (oc * p.c_in + ic) * TAPS;
            let w = &p.weight.data[base..base + TAPS];
            let mut gw = [0.0; TAPS];
            let mut gin = if need_input {
                Some(&mut gx.data[ic * n_in..(ic + 1) * n_in])
            } else {
                None
            };
            for_each_row(x.dims, out_dims, s, |tap, o, i, len| {
                let wt = w[tap];
                let mut acc = 0.0;
                if s == 1 {
                    for (gv, xv) in g[o..o + len].iter().zip(&inp[i..i + len]) {
                        acc += gv * xv;
                    }
                    if let Some(gin) = gin.as_deref_mut() {
                        for (dst, gv) in gin[i..i + len].iter_mut().zip(&g[o..o + len]) {
                            *dst += wt * gv;
                        }
                    }
                } else {
                    for t in 0..len {
                        acc += g[o + t] * inp[i + t * s];
                    }
                    if let Some(gin) = gin.as_deref_mut() {
                        for t in 0..len {
                            gin[i + t * s] += wt * g[o + t];
                        }
                    }
                }
                gw[tap] += acc;
            });
            for (dst, v) in grad.weight.data[base..base + TAPS].iter_mut().zip(gw) {
                *dst += v;
            }
        }
    }
    gx
}

/// Convolution → instance normalization → LeakyReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

pub struct ConvBlockCache {
    input: FeatureMap,
    norm: InstanceNormCache,
    pre_act: Vec<f64>,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv3d::new(c_in, c_out, stride, rng),
            norm: InstanceNorm::new(c_out),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvBlockCache)> {
        let conv = conv3d(x, &self.conv)?;
        let (mut normed, norm_cache) = self.norm.forward(&conv);
        let pre_act = normed.data.clone();
        leaky_relu(&mut normed.data);
        Ok((
            normed,
            ConvBlockCache {
                input: x.clone(),
                norm: norm_cache,
                pre_act,
            },
        ))
    }

    pub fn backward(&self, cache: &ConvBlockCache, gy: &FeatureMap, grad: &mut ConvBlock, need_input: bool) -> FeatureMap {
        let mut g = gy.clone();
        leaky_relu_backward(&cache.pre_act, &mut g.data);
        let g_conv = self.norm.backward(&cache.norm, &g, &mut grad.norm);
        conv3d_backward(&cache.input, &self.conv, &g_conv, &mut grad.conv, need_input)
    }
}

impl Parameters for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
