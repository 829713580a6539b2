//! The full registration network: shared encoder, LAT cascade, and the
//! forward/backward pass of the training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_with_cache, decoder_backward, DecodeOutput, LatParams, DEFAULT_HEADS};
use crate::encoder::{encode_with_cache, encoder_backward, image_pyramid, EncoderParams, DESK_WIDTHS, LEVELS};
use crate::error::{Error, Result};
use crate::interp::{warp, warp_channels_backward, Interpolation};
use crate::lat::DEFAULT_NEIGHBORHOOD;
use crate::losses::{
    ncc_loss_grad, orthogonality_loss_grad, smoothness_loss_grad, HeadMatrix, LossBreakdown, LossWeights, NCC_WINDOW,
};
use crate::params::{join, Parameters, Tensor};
use crate::volume::{DisplacementField, Volume};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder channel widths, finest level first.
    pub widths: [usize; LEVELS],
    /// Attention heads, deepest level first.
    pub heads: [usize; LEVELS],
    pub neighborhood: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: DESK_WIDTHS,
            heads: DEFAULT_HEADS,
            neighborhood: DEFAULT_NEIGHBORHOOD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.heads.contains(&0) {
            return Err(Error::Config("heads per level must be positive".into()));
        }
        if self.neighborhood.is_multiple_of(2) {
            return Err(Error::Config(format!("neighborhood must be odd, got {}", self.neighborhood)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanParams {
    pub encoder: EncoderParams,
    pub decoder: LatParams,
}

impl PanParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::new(config.widths, &mut rng);
        let decoder = LatParams::new(config.widths, config.heads, config.neighborhood, &mut rng)?;
        Ok(Self { encoder, decoder })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for PanParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[derive(Debug, Clone)]
pub struct PanModel {
    pub config: ModelConfig,
    pub params: PanParams,
}

impl PanModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: PanParams::init(&config, seed)?,
            config,
        })
    }

    /// Estimates the field that warps `moving` onto `fixed`.
    pub fn forward(&self, moving: &Volume, fixed: &Volume) -> Result<DecodeOutput> {
        forward_parts(&self.params, moving, fixed).map(|p| p.decoded)
    }

    pub fn register(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        Ok(self.forward(moving, fixed)?.field)
    }

    pub fn loss(&self, moving: &Volume, fixed: &Volume, weights: LossWeights) -> Result<LossBreakdown> {
        let out = self.forward(moving, fixed)?;
        crate::losses::total_loss(fixed, moving, &out, weights)
    }

    /// Training objective and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, moving: &Volume, fixed: &Volume, weights: LossWeights) -> Result<(LossBreakdown, PanParams)> {
        let mut grad = self.params.zeros_like();
        let loss = accumulate_grad(&self.params, moving, fixed, weights, &mut grad)?;
        Ok((loss, grad))
    }
}

struct ForwardParts {
    decoded: DecodeOutput,
    dec_cache: crate::decoder::DecoderCache,
    enc_m: crate::encoder::EncoderCache,
    enc_f: crate::encoder::EncoderCache,
}

fn forward_parts(params: &PanParams, moving: &Volume, fixed: &Volume) -> Result<ForwardParts> {
    if moving.dims() != fixed.dims() {
        return Err(Error::shapes(moving.dims(), fixed.dims()));
    }
    let (pyr_m, enc_m) = encode_with_cache(moving, &params.encoder)?;
    let (pyr_f, enc_f) = encode_with_cache(fixed, &params.encoder)?;
    let imgs_m = image_pyramid(moving)?;
    let imgs_f = image_pyramid(fixed)?;
    let (decoded, dec_cache) = decode_with_cache(&pyr_m, &pyr_f, &imgs_m, &imgs_f, &params.decoder)?;
    Ok(ForwardParts {
        decoded,
        dec_cache,
        enc_m,
        enc_f,
    })
}

/// Adds d loss / d params into `grad` and returns the loss.
pub(crate) fn accumulate_grad(
    params: &PanParams,
    moving: &Volume,
    fixed: &Volume,
    weights: LossWeights,
    grad: &mut PanParams,
) -> Result<LossBreakdown> {
    let parts = forward_parts(params, moving, fixed)?;
    let out = &parts.decoded;
    let field = &out.field;

    let warped = warp(moving, field, Interpolation::Trilinear)?;
    let (ncc, g_warped) = ncc_loss_grad(fixed, &warped, NCC_WINDOW)?;
    let (reg, g_reg) = smoothness_loss_grad(field)?;
    let (_, mut g_field) = warp_channels_backward(moving.data(), 1, field, &g_warped, false);
    for (g, r) in g_field.iter_mut().zip(&g_reg) {
        *g += weights.alpha * r;
    }

    let n_terms = (2 * LEVELS) as f64;
    let mut orth = 0.0;
    let mut g_queries = Vec::with_capacity(LEVELS);
    let mut g_keys = Vec::with_capacity(LEVELS);
    for level in &out.levels {
        for (grid, sink) in [(&level.query, &mut g_queries), (&level.key, &mut g_keys)] {
            let m = HeadMatrix::from_heads(grid);
            let (l, mut g) = orthogonality_loss_grad(&m);
            orth += l;
            g.data.iter_mut().for_each(|v| *v *= weights.beta / n_terms);
            sink.push(g.scatter_to_heads(grid));
        }
    }
    orth /= n_terms;

    let loss = LossBreakdown {
        ncc,
        reg,
        orth,
        total: ncc + weights.alpha * reg + weights.beta * orth,
    };

    let g_in = decoder_backward(&params.decoder, out, &parts.dec_cache, &g_field, &g_queries, &g_keys, &mut grad.decoder);
    encoder_backward(&params.encoder, &parts.enc_m, g_in.moving, &mut grad.encoder);
    encoder_backward(&params.encoder, &parts.enc_f, g_in.fixed, &mut grad.encoder);
    Ok(loss)
}
