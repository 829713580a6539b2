//! Local attention transformer (LAT) for one decoding level.
//!
//! Queries come from the fixed stream and keys from the (already warped)
//! moving stream. For each head and voxel the attention over the `n³`
//! neighbourhood is turned into a displacement by weighting the relative
//! neighbour offsets, and a 3×3×3 convolution merges the per-head
//! displacements into one residual field.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::norm::{normalize_row, normalize_row_backward};
use crate::nn::{conv3d, conv3d_backward, Conv3d};
use crate::params::{join, Parameters, Tensor};
use crate::volume::{coords_of, linear_index, Dims, DisplacementField, FeatureMap};

pub const HEAD_DIM: usize = 6;
pub const DEFAULT_NEIGHBORHOOD: usize = 3;

/// Relative integer offsets of an `n³` neighbourhood, last axis fastest.
pub fn neighborhood_offsets(n: usize) -> Vec<[i64; 3]> {
    let r = (n / 2) as i64;
    let mut out = Vec::with_capacity(n * n * n);
    for a in 0..n as i64 {
        for b in 0..n as i64 {
            for c in 0..n as i64 {
                out.push([a - r, b - r, c - r]);
            }
        }
    }
    out
}

/// Linear index of every neighbour of every voxel, replicate-padded at the
/// faces. Layout `[voxel][offset]`.
pub(crate) fn neighbor_table(dims: Dims, offsets: &[[i64; 3]]) -> Vec<usize> {
    let n = dims[0] * dims[1] * dims[2];
    let mut out = Vec::with_capacity(n * offsets.len());
    let clamp = |p: i64, d: usize| p.clamp(0, d as i64 - 1) as usize;
    for idx in 0..n {
        let [i, j, k] = coords_of(dims, idx);
        for o in offsets {
            out.push(linear_index(
                dims,
                clamp(i as i64 + o[0], dims[0]),
                clamp(j as i64 + o[1], dims[1]),
                clamp(k as i64 + o[2], dims[2]),
            ));
        }
    }
    out
}

/// Per-voxel multi-head embeddings, voxel-major: voxel `v`, head `s`,
/// channel `j` lives at `v * heads * head_dim + s * head_dim + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrid {
    pub heads: usize,
    pub head_dim: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl HeadGrid {
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    #[inline]
    pub fn head_at(&self, voxel: usize, head: usize) -> &[f64] {
        let base = voxel * self.width() + head * self.head_dim;
        &self.data[base..base + self.head_dim]
    }
}

/// Attention weights, layout `[head][voxel][offset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub heads: usize,
    pub dims: Dims,
    pub taps: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, head: usize, voxel: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        let base = (head * n + voxel) * self.taps;
        &self.data[base..base + self.taps]
    }
}

/// Per-voxel linear projection followed by layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_out, c_in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

struct ProjectionCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Self {
            c_in,
            c_out,
            weight: Tensor::uniform(&[c_out, c_in], bound, rng),
            bias: Tensor::uniform(&[c_out], bound, rng),
            ln_gamma: Tensor::filled(&[c_out], 1.0),
            ln_beta: Tensor::zeros(&[c_out]),
        }
    }

    /// `LN(LP(concat(features, image)))`, voxel-major output.
    fn forward(&self, features: &FeatureMap, image: &[f64]) -> (Vec<f64>, ProjectionCache) {
        let n = features.voxels();
        let mut input = Vec::with_capacity(self.c_in * n);
        input.extend_from_slice(&features.data);
        input.extend_from_slice(image);
        let (ci, co) = (self.c_in, self.c_out);
        let mut xhat = vec![0.0; n * co];
        let mut inv_std = Vec::with_capacity(n);
        let mut out = vec![0.0; n * co];
        for v in 0..n {
            let row = &mut xhat[v * co..(v + 1) * co];
            for (o, r) in row.iter_mut().enumerate() {
                let w = &self.weight.data[o * ci..(o + 1) * ci];
                let mut acc = self.bias.data[o];
                for c in 0..ci {
                    acc += w[c] * input[c * n + v];
                }
                *r = acc;
            }
            inv_std.push(normalize_row(row));
            for o in 0..co {
                out[v * co + o] = self.ln_gamma.data[o] * row[o] + self.ln_beta.data[o];
            }
        }
        (out, ProjectionCache { input, xhat, inv_std })
    }

    /// Returns the gradient w.r.t. the concatenated input, channel-major.
    fn backward(&self, cache: &ProjectionCache, g_out: &[f64], grad: &mut Projection) -> Vec<f64> {
        let (ci, co) = (self.c_in, self.c_out);
        let n = cache.inv_std.len();
        let mut g_in = vec![0.0; ci * n];
        let mut g = vec![0.0; co];
        for v in 0..n {
            let xh = &cache.xhat[v * co..(v + 1) * co];
            for o in 0..co {
                let go = g_out[v * co + o];
                grad.ln_gamma.data[o] += go * xh[o];
                grad.ln_beta.data[o] += go;
                g[o] = go * self.ln_gamma.data[o];
            }
            normalize_row_backward(xh, cache.inv_std[v], &mut g);
            for o in 0..co {
                let gz = g[o];
                grad.bias.data[o] += gz;
                let w = &self.weight.data[o * ci..(o + 1) * ci];
                let gw = &mut grad.weight.data[o * ci..(o + 1) * ci];
                for c in 0..ci {
                    gw[c] += gz * cache.input[c * n + v];
                    g_in[c * n + v] += w[c] * gz;
                }
            }
        }
        g_in
    }
}

impl Parameters for Projection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
        f(join(prefix, "ln_gamma"), &self.ln_gamma);
        f(join(prefix, "ln_beta"), &self.ln_beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        f(join(prefix, "ln_gamma"), &mut self.ln_gamma);
        f(join(prefix, "ln_beta"), &mut self.ln_beta);
    }
}

/// Parameters of one decoding level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatLevel {
    pub heads: usize,
    pub head_dim: usize,
    pub neighborhood: usize,
    /// Fixed-stream path.
    pub query: Projection,
    /// Moving-stream path.
    pub key: Projection,
    /// `[heads, n, n, n]`
    pub pos_bias: Tensor,
    /// `3·heads → 3` channels.
    pub merge: Conv3d,
}

impl LatLevel {
    /// Small random projections, zero positional bias and a zero merge
    /// convolution so a fresh level emits the zero field.
    pub fn new<R: Rng + ?Sized>(feature_channels: usize, heads: usize, neighborhood: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("attention heads must be positive".into()));
        }
        if neighborhood.is_multiple_of(2) {
            return Err(Error::Config(format!("neighborhood size must be odd, got {neighborhood}")));
        }
        let width = heads * HEAD_DIM;
        let n = neighborhood;
        let query = Projection::new(feature_channels + 1, width, rng);
        Ok(Self {
            heads,
            head_dim: HEAD_DIM,
            neighborhood,
            key: query.clone(),
            query,
            pos_bias: Tensor::zeros(&[heads, n, n, n]),
            merge: Conv3d::zeros(3 * heads, 3, 1),
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.query.c_in - 1
    }
}

impl Parameters for LatLevel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        f(join(prefix, "pos_bias"), &self.pos_bias);
        self.merge.visit(&join(prefix, "merge"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        f(join(prefix, "pos_bias"), &mut self.pos_bias);
        self.merge.visit_mut(&join(prefix, "merge"), f);
    }
}

/// `softmax(Q_x · K_N(x) + P)` per head and voxel, without `1/√d` scaling.
pub fn local_attention(q: &HeadGrid, k: &HeadGrid, pos_bias: &Tensor, neighborhood: usize) -> Result<AttentionMap> {
    if q.dims != k.dims || q.heads != k.heads || q.head_dim != k.head_dim {
        return Err(Error::shapes((q.heads, q.dims, q.head_dim), (k.heads, k.dims, k.head_dim)));
    }
    let taps = neighborhood.pow(3);
    if pos_bias.data.len() != q.heads * taps {
        return Err(Error::shapes(&pos_bias.shape, (q.heads, neighborhood)));
    }
    let table = neighbor_table(q.dims, &neighborhood_offsets(neighborhood));
    Ok(attention_with_table(q, k, pos_bias, &table, taps))
}

fn attention_with_table(q: &HeadGrid, k: &HeadGrid, pos_bias: &Tensor, table: &[usize], taps: usize) -> AttentionMap {
    let n = q.voxels();
    let mut data = vec![0.0; q.heads * n * taps];
    for s in 0..q.heads {
        let bias = &pos_bias.data[s * taps..(s + 1) * taps];
        for v in 0..n {
            let qv = q.head_at(v, s);
            let row = &mut data[(s * n + v) * taps..(s * n + v + 1) * taps];
            let nbrs = &table[v * taps..(v + 1) * taps];
            let mut max = f64::NEG_INFINITY;
            for o in 0..taps {
                let kv = k.head_at(nbrs[o], s);
                let mut logit = bias[o];
                for j in 0..qv.len() {
                    logit += qv[j] * kv[j];
                }
                row[o] = logit;
                max = max.max(logit);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
    }
    AttentionMap {
        heads: q.heads,
        dims: q.dims,
        taps,
        data,
    }
}

/// Attention-weighted sum of the neighbour offsets for every head, as a
/// `3·heads` channel map (head `s`, axis `c` → channel `3s + c`).
pub fn subfields(att: &AttentionMap, neighborhood: usize) -> FeatureMap {
    let offsets = neighborhood_offsets(neighborhood);
    let n = att.dims[0] * att.dims[1] * att.dims[2];
    let mut out = FeatureMap::zeros(3 * att.heads, att.dims);
    for s in 0..att.heads {
        for v in 0..n {
            let row = att.row(s, v);
            let mut acc = [0.0; 3];
            for (w, o) in row.iter().zip(&offsets) {
                acc[0] += w * o[0] as f64;
                acc[1] += w * o[1] as f64;
                acc[2] += w * o[2] as f64;
            }
            for c in 0..3 {
                out.data[(3 * s + c) * n + v] = acc[c];
            }
        }
    }
    out
}

/// Output of one LAT level.
#[derive(Debug, Clone)]
pub struct LatOutput {
    pub residual: DisplacementField,
    pub query: HeadGrid,
    pub key: HeadGrid,
    pub attention: AttentionMap,
}

pub(crate) struct LatCache {
    q_cache: ProjectionCache,
    k_cache: ProjectionCache,
    table: Vec<usize>,
    subfields: FeatureMap,
}

/// Gradients w.r.t. the level inputs.
pub(crate) struct LatInputGrads {
    pub moving_features: FeatureMap,
    pub moving_image: Vec<f64>,
    pub fixed_features: FeatureMap,
}

fn check_inputs(fm: &FeatureMap, ff: &FeatureMap, dm: &[f64], df: &[f64], level: &LatLevel) -> Result<()> {
    if fm.dims != ff.dims || fm.channels != ff.channels {
        return Err(Error::shapes((fm.channels, fm.dims), (ff.channels, ff.dims)));
    }
    let n = fm.voxels();
    if dm.len() != n || df.len() != n {
        return Err(Error::shapes(fm.dims, (dm.len(), df.len())));
    }
    if fm.channels != level.feature_channels() {
        return Err(Error::ChannelMismatch {
            expected: level.feature_channels(),
            actual: fm.channels,
        });
    }
    Ok(())
}

pub fn lat_forward(fm: &FeatureMap, ff: &FeatureMap, dm: &[f64], df: &[f64], level: &LatLevel) -> Result<LatOutput> {
    Ok(lat_forward_cached(fm, ff, dm, df, level)?.0)
}

pub(crate) fn lat_forward_cached(
    fm: &FeatureMap,
    ff: &FeatureMap,
    dm: &[f64],
    df: &[f64],
    level: &LatLevel,
) -> Result<(LatOutput, LatCache)> {
    check_inputs(fm, ff, dm, df, level)?;
    let dims = fm.dims;
    let (qd, q_cache) = level.query.forward(ff, df);
    let (kd, k_cache) = level.key.forward(fm, dm);
    let grid = |data| HeadGrid {
        heads: level.heads,
        head_dim: level.head_dim,
        dims,
        data,
    };
    let query = grid(qd);
    let key = grid(kd);
    let n = level.neighborhood;
    let taps = n * n * n;
    let table = neighbor_table(dims, &neighborhood_offsets(n));
    let attention = attention_with_table(&query, &key, &level.pos_bias, &table, taps);
    let sub = subfields(&attention, n);
    let merged = conv3d(&sub, &level.merge)?;
    let residual = DisplacementField::new(dims, merged.data)?;
    Ok((
        LatOutput {
            residual,
            query,
            key,
            attention,
        },
        LatCache {
            q_cache,
            k_cache,
            table,
            subfields: sub,
        },
    ))
}

/// Runs one level and backpropagates `g_residual` (d loss / d residual,
/// component-major) into a fresh gradient of the level parameters.
pub fn lat_forward_backward(
    fm: &FeatureMap,
    ff: &FeatureMap,
    dm: &[f64],
    df: &[f64],
    level: &LatLevel,
    g_residual: &[f64],
) -> Result<(LatOutput, LatLevel)> {
    let (out, cache) = lat_forward_cached(fm, ff, dm, df, level)?;
    if g_residual.len() != 3 * fm.voxels() {
        return Err(Error::LengthMismatch {
            expected: 3 * fm.voxels(),
            actual: g_residual.len(),
        });
    }
    let mut grad = level.clone();
    grad.zero();
    lat_backward(level, &out, &cache, g_residual, None, None, &mut grad);
    Ok((out, grad))
}

/// Backward through one level. `g_query` / `g_key` carry extra gradient
/// that reaches Q and K directly (the orthogonality term).
pub(crate) fn lat_backward(
    level: &LatLevel,
    out: &LatOutput,
    cache: &LatCache,
    g_residual: &[f64],
    g_query: Option<&[f64]>,
    g_key: Option<&[f64]>,
    grad: &mut LatLevel,
) -> LatInputGrads {
    let dims = out.residual.dims();
    let nvox = out.residual.voxels();
    let heads = level.heads;
    let hd = level.head_dim;
    let width = heads * hd;
    let n = level.neighborhood;
    let taps = n * n * n;
    let offsets = neighborhood_offsets(n);

    let g_merged = FeatureMap {
        channels: 3,
        dims,
        data: g_residual.to_vec(),
    };
    let g_sub = conv3d_backward(&cache.subfields, &level.merge, &g_merged, &mut grad.merge, true);

    let mut gq = match g_query {
        Some(g) => g.to_vec(),
        None => vec![0.0; nvox * width],
    };
    let mut gk = match g_key {
        Some(g) => g.to_vec(),
        None => vec![0.0; nvox * width],
    };
    let mut dlogit = vec![0.0; taps];
    for s in 0..heads {
        let gp = &mut grad.pos_bias.data[s * taps..(s + 1) * taps];
        for v in 0..nvox {
            let row = out.attention.row(s, v);
            let gpsi = [
                g_sub.data[(3 * s) * nvox + v],
                g_sub.data[(3 * s + 1) * nvox + v],
                g_sub.data[(3 * s + 2) * nvox + v],
            ];
            let mut dot = 0.0;
            for o in 0..taps {
                let off = offsets[o];
                let gla = gpsi[0] * off[0] as f64 + gpsi[1] * off[1] as f64 + gpsi[2] * off[2] as f64;
                dlogit[o] = gla;
                dot += row[o] * gla;
            }
            let nbrs = &cache.table[v * taps..(v + 1) * taps];
            let qv = v * width + s * hd;
            for o in 0..taps {
                let dl = row[o] * (dlogit[o] - dot);
                if dl == 0.0 {
                    continue;
                }
                gp[o] += dl;
                let kv = nbrs[o] * width + s * hd;
                for j in 0..hd {
                    gq[qv + j] += dl * out.key.data[kv + j];
                    gk[kv + j] += dl * out.query.data[qv + j];
                }
            }
        }
    }

    let g_fixed_in = level.query.backward(&cache.q_cache, &gq, &mut grad.query);
    let g_moving_in = level.key.backward(&cache.k_cache, &gk, &mut grad.key);
    let c = level.feature_channels();
    let split = |g: Vec<f64>| {
        let image = g[c * nvox..].to_vec();
        let mut feats = g;
        feats.truncate(c * nvox);
        (
            FeatureMap {
                channels: c,
                dims,
                data: feats,
            },
            image,
        )
    };
    let (fixed_features, _) = split(g_fixed_in);
    let (moving_features, moving_image) = split(g_moving_in);
    LatInputGrads {
        moving_features,
        moving_image,
        fixed_features,
    }
}
