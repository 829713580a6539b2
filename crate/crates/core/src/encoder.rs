//! Weight-shared pyramid encoder with channel attention, plus the matching
//! image pyramid.
//!
//! Each of the five units is `conv_block → conv_block → SE`. Units 2–5
//! halve the grid with a stride-2 first convolution, so level `t` sits at
//! `1/2^(t-1)` of the input resolution. The moving and fixed images run
//! through the same [`EncoderParams`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::interp::downsample2;
use crate::nn::{ConvBlock, ConvBlockCache, SeBlock, SeCache};
use crate::params::{join, Parameters, Tensor};
use crate::volume::{Dims, FeatureMap, Volume};

pub const LEVELS: usize = 5;
pub const DEFAULT_WIDTHS: [usize; LEVELS] = [8, 16, 32, 48, 48];
pub const DESK_WIDTHS: [usize; LEVELS] = [4, 8, 16, 16, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderUnit {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub se: SeBlock,
}

impl Parameters for EncoderUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.block1.visit(&join(prefix, "block1"), f);
        self.block2.visit(&join(prefix, "block2"), f);
        self.se.visit(&join(prefix, "se"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.block1.visit_mut(&join(prefix, "block1"), f);
        self.block2.visit_mut(&join(prefix, "block2"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub widths: [usize; LEVELS],
    pub units: Vec<EncoderUnit>,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(widths: [usize; LEVELS], rng: &mut R) -> Self {
        let mut c_in = 1;
        let units = widths
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let stride = if t == 0 { 1 } else { 2 };
                let unit = EncoderUnit {
                    block1: ConvBlock::new(c_in, c, stride, rng),
                    block2: ConvBlock::new(c, c, 1, rng),
                    se: SeBlock::new(c, rng),
                };
                c_in = c;
                unit
            })
            .collect();
        Self { widths, units }
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (t, unit) in self.units.iter().enumerate() {
            unit.visit(&join(prefix, &format!("level{}", t + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (t, unit) in self.units.iter_mut().enumerate() {
            unit.visit_mut(&join(prefix, &format!("level{}", t + 1)), f);
        }
    }
}

/// Five feature grids, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

pub struct EncoderCache {
    units: Vec<(ConvBlockCache, ConvBlockCache, SeCache)>,
}

pub fn check_divisible(dims: Dims) -> Result<()> {
    if dims.iter().any(|d| d % 16 != 0) {
        return Err(Error::NotDivisible(dims));
    }
    Ok(())
}

pub fn encode_pyramid(img: &Volume, params: &EncoderParams) -> Result<FeaturePyramid> {
    Ok(encode_with_cache(img, params)?.0)
}

pub(crate) fn encode_with_cache(img: &Volume, params: &EncoderParams) -> Result<(FeaturePyramid, EncoderCache)> {
    check_divisible(img.dims())?;
    let mut x = FeatureMap::from_volume(img);
    let mut levels = Vec::with_capacity(LEVELS);
    let mut caches = Vec::with_capacity(LEVELS);
    for unit in &params.units {
        let (h1, c1) = unit.block1.forward(&x)?;
        let (h2, c2) = unit.block2.forward(&h1)?;
        let (out, c3) = unit.se.forward(&h2);
        caches.push((c1, c2, c3));
        levels.push(out.clone());
        x = out;
    }
    Ok((FeaturePyramid { levels }, EncoderCache { units: caches }))
}

/// Accumulates parameter gradients given d loss / d (level output) for every
/// level. Missing levels are treated as zero.
pub(crate) fn encoder_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    level_grads: Vec<Option<FeatureMap>>,
    grad: &mut EncoderParams,
) {
    let mut carry: Option<FeatureMap> = None;
    for (t, level_grad) in level_grads.into_iter().enumerate().rev() {
        let g = match (level_grad, carry.take()) {
            (Some(mut a), Some(b)) => {
                a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => continue,
        };
        let unit = &params.units[t];
        let gunit = &mut grad.units[t];
        let (c1, c2, c3) = &cache.units[t];
        let g = unit.se.backward(c3, &g, &mut gunit.se);
        let g = unit.block2.backward(c2, &g, &mut gunit.block2, true);
        let g = unit.block1.backward(c1, &g, &mut gunit.block1, t > 0);
        if t > 0 {
            carry = Some(g);
        }
    }
}

/// `D^1 = img`, `D^t` = 2×2×2 average of `D^(t-1)`.
pub fn image_pyramid(img: &Volume) -> Result<Vec<Volume>> {
    check_divisible(img.dims())?;
    let mut out = vec![img.clone()];
    for _ in 1..LEVELS {
        let next = downsample2(out.last().expect("nonempty"))?;
        out.push(next);
    }
    Ok(out)
}
