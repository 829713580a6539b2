//! Coarse-to-fine cascade of LAT levels.
//!
//! The deepest level estimates the first field directly. Every finer level
//! upsamples the accumulated field, warps the moving features and image with
//! it, estimates a residual, and composes: `φ_t(x) = ψ_t(x) + φ_up(x + ψ_t(x))`.

use rand::Rng;

use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::interp::{compose, compose_backward, upsample_field, upsample_field_backward, warp_channels, warp_channels_backward};
use crate::lat::{lat_backward, lat_forward_cached, HeadGrid, LatCache, LatLevel, LatOutput};
use crate::params::{join, Parameters, Tensor};
use crate::volume::{DisplacementField, FeatureMap, Volume};

/// Heads per level, deepest level first.
pub const DEFAULT_HEADS: [usize; LEVELS] = [8, 4, 2, 1, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct LatParams {
    pub neighborhood: usize,
    /// Finest level first (index `t - 1` for level `t`).
    pub levels: Vec<LatLevel>,
}

impl LatParams {
    /// `widths` are encoder widths finest-first; `heads_deep_first` follows
    /// the usual deep-to-shallow convention.
    pub fn new<R: Rng + ?Sized>(
        widths: [usize; LEVELS],
        heads_deep_first: [usize; LEVELS],
        neighborhood: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = (0..LEVELS)
            .map(|t| LatLevel::new(widths[t], heads_deep_first[LEVELS - 1 - t], neighborhood, rng))
            .collect::<Result<_>>()?;
        Ok(Self { neighborhood, levels })
    }
}

impl Parameters for LatParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (t, level) in self.levels.iter().enumerate() {
            level.visit(&join(prefix, &format!("level{}", t + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (t, level) in self.levels.iter_mut().enumerate() {
            level.visit_mut(&join(prefix, &format!("level{}", t + 1)), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Final field at input resolution.
    pub field: DisplacementField,
    /// Residual field of each level, finest first.
    pub residuals: Vec<DisplacementField>,
    /// Per-level LAT outputs (Q, K, attention), finest first.
    pub levels: Vec<LatOutput>,
}

impl DecodeOutput {
    pub fn queries(&self) -> impl Iterator<Item = &HeadGrid> {
        self.levels.iter().map(|l| &l.query)
    }

    pub fn keys(&self) -> impl Iterator<Item = &HeadGrid> {
        self.levels.iter().map(|l| &l.key)
    }
}

struct LevelCache {
    lat: LatCache,
    /// Upsampled accumulated field from the level below (absent at the deepest).
    upsampled: Option<DisplacementField>,
    moving_features: FeatureMap,
    moving_image: Vec<f64>,
}

pub(crate) struct DecoderCache {
    levels: Vec<LevelCache>,
}

fn check_levels(pyr_m: &FeaturePyramid, pyr_f: &FeaturePyramid, imgs_m: &[Volume], imgs_f: &[Volume], params: &LatParams) -> Result<()> {
    let counts = [pyr_m.levels.len(), pyr_f.levels.len(), imgs_m.len(), imgs_f.len(), params.levels.len()];
    if counts.iter().any(|&c| c != LEVELS) {
        return Err(Error::shapes(counts, [LEVELS; 5]));
    }
    Ok(())
}

pub fn decode_pyramid(
    pyr_m: &FeaturePyramid,
    pyr_f: &FeaturePyramid,
    imgs_m: &[Volume],
    imgs_f: &[Volume],
    params: &LatParams,
) -> Result<DecodeOutput> {
    Ok(decode_with_cache(pyr_m, pyr_f, imgs_m, imgs_f, params)?.0)
}

pub(crate) fn decode_with_cache(
    pyr_m: &FeaturePyramid,
    pyr_f: &FeaturePyramid,
    imgs_m: &[Volume],
    imgs_f: &[Volume],
    params: &LatParams,
) -> Result<(DecodeOutput, DecoderCache)> {
    check_levels(pyr_m, pyr_f, imgs_m, imgs_f, params)?;
    let mut outputs: Vec<Option<LatOutput>> = (0..LEVELS).map(|_| None).collect();
    let mut caches: Vec<Option<LevelCache>> = (0..LEVELS).map(|_| None).collect();
    let mut residuals: Vec<Option<DisplacementField>> = vec![None; LEVELS];
    let mut acc: Option<DisplacementField> = None;
    for t in (0..LEVELS).rev() {
        let fm = &pyr_m.levels[t];
        let dm = imgs_m[t].data();
        let (warped_f, warped_d, upsampled) = match &acc {
            None => (fm.clone(), dm.to_vec(), None),
            Some(coarse) => {
                let up = upsample_field(coarse);
                if up.dims() != fm.dims {
                    return Err(Error::shapes(up.dims(), fm.dims));
                }
                let wf = FeatureMap {
                    channels: fm.channels,
                    dims: fm.dims,
                    data: warp_channels(&fm.data, fm.channels, &up),
                };
                let wd = warp_channels(dm, 1, &up);
                (wf, wd, Some(up))
            }
        };
        let (out, lat_cache) = lat_forward_cached(&warped_f, &pyr_f.levels[t], &warped_d, imgs_f[t].data(), &params.levels[t])?;
        let next = match &upsampled {
            None => out.residual.clone(),
            Some(up) => compose(up, &out.residual)?,
        };
        residuals[t] = Some(out.residual.clone());
        outputs[t] = Some(out);
        caches[t] = Some(LevelCache {
            lat: lat_cache,
            upsampled,
            moving_features: fm.clone(),
            moving_image: dm.to_vec(),
        });
        acc = Some(next);
    }
    let output = DecodeOutput {
        field: acc.expect("at least one level"),
        residuals: residuals.into_iter().map(|r| r.expect("filled")).collect(),
        levels: outputs.into_iter().map(|o| o.expect("filled")).collect(),
    };
    let cache = DecoderCache {
        levels: caches.into_iter().map(|c| c.expect("filled")).collect(),
    };
    Ok((output, cache))
}

/// Gradients w.r.t. both feature pyramids.
pub(crate) struct DecoderInputGrads {
    pub moving: Vec<Option<FeatureMap>>,
    pub fixed: Vec<Option<FeatureMap>>,
}

/// Backward through the cascade. `g_queries` / `g_keys` (finest first) are
/// direct gradients on each level's Q and K.
pub(crate) fn decoder_backward(
    params: &LatParams,
    out: &DecodeOutput,
    cache: &DecoderCache,
    g_field: &[f64],
    g_queries: &[Vec<f64>],
    g_keys: &[Vec<f64>],
    grad: &mut LatParams,
) -> DecoderInputGrads {
    let mut moving = vec![None; LEVELS];
    let mut fixed = vec![None; LEVELS];
    let mut g_acc = g_field.to_vec();
    for t in 0..LEVELS {
        let lc = &cache.levels[t];
        let residual = &out.levels[t].residual;
        let (g_residual, g_up) = match &lc.upsampled {
            Some(up) => {
                let (g_outer, g_inner) = compose_backward(up, residual, &g_acc);
                (g_inner, Some(g_outer))
            }
            None => (std::mem::take(&mut g_acc), None),
        };
        let gq = g_queries.get(t).map(|v| v.as_slice());
        let gk = g_keys.get(t).map(|v| v.as_slice());
        let g_in = lat_backward(&params.levels[t], &out.levels[t], &lc.lat, &g_residual, gq, gk, &mut grad.levels[t]);
        fixed[t] = Some(g_in.fixed_features);
        match (&lc.upsampled, g_up) {
            (Some(up), Some(mut g_up)) => {
                let fm = &lc.moving_features;
                let (g_fm, g_pos_f) = warp_channels_backward(&fm.data, fm.channels, up, &g_in.moving_features.data, true);
                let (_, g_pos_d) = warp_channels_backward(&lc.moving_image, 1, up, &g_in.moving_image, false);
                for ((g, a), b) in g_up.iter_mut().zip(&g_pos_f).zip(&g_pos_d) {
                    *g += a + b;
                }
                moving[t] = Some(FeatureMap {
                    channels: fm.channels,
                    dims: fm.dims,
                    data: g_fm,
                });
                let coarse = cache.levels[t + 1].moving_features.dims;
                g_acc = upsample_field_backward(coarse, &g_up);
            }
            _ => moving[t] = Some(g_in.moving_features),
        }
    }
    DecoderInputGrads { moving, fixed }
}
