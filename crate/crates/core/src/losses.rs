//! Training objective: local NCC similarity, diffusion smoothness and the
//! multi-head orthogonality penalty, with their gradients.

use serde::{Deserialize, Serialize};

use crate::decoder::DecodeOutput;
use crate::error::{Error, Result};
use crate::interp::{warp, Interpolation};
use crate::lat::HeadGrid;
use crate::volume::{voxel_count, Dims, DisplacementField, Volume};

pub const NCC_WINDOW: usize = 9;
pub const NCC_EPS: f64 = 1e-5;
pub const ORTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Smoothness weight.
    pub alpha: f64,
    /// Orthogonality weight.
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got ({alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn brain() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }

    pub fn abdomen() -> Self {
        Self { alpha: 0.5, beta: 1.0 }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::brain()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ncc: f64,
    pub reg: f64,
    pub orth: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("ncc", self.ncc), ("reg", self.reg), ("orth", self.orth), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Cubic window sum of side `2r + 1` clipped to the grid (self-adjoint).
pub(crate) fn box_sum(data: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        let mut prefix = vec![0.0; len + 1];
        for base in 0..cur.len() {
            // only start from positions whose coordinate along `axis` is 0
            if !(base / stride).is_multiple_of(len) {
                continue;
            }
            for p in 0..len {
                prefix[p + 1] = prefix[p] + cur[base + p * stride];
            }
            for p in 0..len {
                let lo = p.saturating_sub(r);
                let hi = (p + r + 1).min(len);
                next[base + p * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn check_window(window: usize) -> Result<()> {
    if window.is_multiple_of(2) {
        return Err(Error::Config(format!("NCC window must be odd, got {window}")));
    }
    Ok(())
}

/// [`ncc_loss`] and its gradient w.r.t. `warped`.
pub fn ncc_loss_grad(fixed: &Volume, warped: &Volume, window: usize) -> Result<(f64, Vec<f64>)> {
    check_window(window)?;
    if fixed.dims() != warped.dims() {
        return Err(Error::shapes(fixed.dims(), warped.dims()));
    }
    let dims = fixed.dims();
    let r = window / 2;
    let i = fixed.data();
    let j = warped.data();
    let n = i.len();
    let prod = |f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();
    let count = box_sum(&vec![1.0; n], dims, r);
    let i_sum = box_sum(i, dims, r);
    let j_sum = box_sum(j, dims, r);
    let i2_sum = box_sum(&prod(&|t| i[t] * i[t]), dims, r);
    let j2_sum = box_sum(&prod(&|t| j[t] * j[t]), dims, r);
    let ij_sum = box_sum(&prod(&|t| i[t] * j[t]), dims, r);

    let mut total = 0.0;
    let mut g_js = vec![0.0; n];
    let mut g_j2s = vec![0.0; n];
    let mut g_ijs = vec![0.0; n];
    let scale = -1.0 / n as f64;
    for t in 0..n {
        let wn = count[t];
        let cross = ij_sum[t] - i_sum[t] * j_sum[t] / wn;
        let i_var = i2_sum[t] - i_sum[t] * i_sum[t] / wn;
        let j_var = j2_sum[t] - j_sum[t] * j_sum[t] / wn;
        let den = i_var * j_var + NCC_EPS;
        let cc = cross * cross / den;
        total += cc;
        let d_cross = scale * 2.0 * cross / den;
        let d_jvar = -scale * cross * cross * i_var / (den * den);
        g_ijs[t] = d_cross;
        g_js[t] = -d_cross * i_sum[t] / wn - d_jvar * 2.0 * j_sum[t] / wn;
        g_j2s[t] = d_jvar;
    }
    let b_js = box_sum(&g_js, dims, r);
    let b_j2s = box_sum(&g_j2s, dims, r);
    let b_ijs = box_sum(&g_ijs, dims, r);
    let grad = (0..n).map(|t| b_js[t] + 2.0 * j[t] * b_j2s[t] + i[t] * b_ijs[t]).collect();
    Ok((-total / n as f64, grad))
}

/// Negative mean squared local correlation over `window³` neighbourhoods,
/// clipped to the grid at the faces.
pub fn ncc_loss(fixed: &Volume, warped: &Volume, window: usize) -> Result<f64> {
    Ok(ncc_loss_grad(fixed, warped, window)?.0)
}

/// Mean over components and axes of the mean squared forward difference.
pub fn smoothness_loss(field: &DisplacementField) -> Result<f64> {
    Ok(smoothness_loss_grad(field)?.0)
}

/// [`smoothness_loss`] and its gradient w.r.t. the field (component-major).
pub fn smoothness_loss_grad(field: &DisplacementField) -> Result<(f64, Vec<f64>)> {
    let dims = field.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Domain(format!("smoothness needs at least 2 voxels per axis, got {dims:?}")));
    }
    let n = voxel_count(dims);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut grad = vec![0.0; 3 * n];
    let mut loss = 0.0;
    for axis in 0..3 {
        let stride = strides[axis];
        let count = (n / dims[axis]) * (dims[axis] - 1);
        let w = 1.0 / (9.0 * count as f64);
        for c in 0..3 {
            let comp = field.component(c);
            let g = &mut grad[c * n..(c + 1) * n];
            let mut acc = 0.0;
            for idx in 0..n {
                if (idx / stride) % dims[axis] == dims[axis] - 1 {
                    continue;
                }
                let d = comp[idx + stride] - comp[idx];
                acc += d * d;
                g[idx + stride] += 2.0 * w * d;
                g[idx] -= 2.0 * w * d;
            }
            loss += w * acc;
        }
    }
    Ok((loss, grad))
}

/// Per-head flattened embeddings: `rows` heads × `cols` values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl HeadMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Domain("head matrix needs at least one row and column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Gathers each head of a voxel-major grid into one row.
    pub fn from_heads(grid: &HeadGrid) -> Self {
        let n = grid.voxels();
        let (s, d) = (grid.heads, grid.head_dim);
        let mut data = Vec::with_capacity(s * n * d);
        for head in 0..s {
            for v in 0..n {
                data.extend_from_slice(grid.head_at(v, head));
            }
        }
        Self { rows: s, cols: n * d, data }
    }

    /// Scatters a row-major gradient back into the voxel-major layout.
    pub(crate) fn scatter_to_heads(&self, grid: &HeadGrid) -> Vec<f64> {
        let n = grid.voxels();
        let (s, d) = (grid.heads, grid.head_dim);
        let mut out = vec![0.0; grid.data.len()];
        for head in 0..s {
            for v in 0..n {
                let src = &self.data[head * n * d + v * d..head * n * d + (v + 1) * d];
                out[v * s * d + head * d..v * s * d + (head + 1) * d].copy_from_slice(src);
            }
        }
        out
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// MSE between the Gram matrix of the row-normalized matrix and identity.
pub fn orthogonality_loss(w: &HeadMatrix) -> f64 {
    orthogonality_loss_grad(w).0
}

/// [`orthogonality_loss`] and its gradient w.r.t. the raw rows.
pub fn orthogonality_loss_grad(w: &HeadMatrix) -> (f64, HeadMatrix) {
    let s = w.rows;
    let norms: Vec<f64> = (0..s)
        .map(|r| w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(ORTH_EPS))
        .collect();
    let unit: Vec<Vec<f64>> = (0..s).map(|r| w.row(r).iter().map(|v| v / norms[r]).collect()).collect();
    let mut gram = vec![0.0; s * s];
    for a in 0..s {
        for b in 0..s {
            gram[a * s + b] = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
        }
    }
    let denom = (s * s) as f64;
    let mut loss = 0.0;
    let mut d_gram = vec![0.0; s * s];
    for a in 0..s {
        for b in 0..s {
            let e = gram[a * s + b] - if a == b { 1.0 } else { 0.0 };
            loss += e * e;
            d_gram[a * s + b] = 2.0 * e / denom;
        }
    }
    loss /= denom;

    let mut grad = vec![0.0; w.data.len()];
    for a in 0..s {
        // d unit_a = sum_b (dG_ab + dG_ba) unit_b
        let mut du = vec![0.0; w.cols];
        for b in 0..s {
            let coef = d_gram[a * s + b] + d_gram[b * s + a];
            for (x, y) in du.iter_mut().zip(&unit[b]) {
                *x += coef * y;
            }
        }
        let raw_norm = w.row(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = &mut grad[a * w.cols..(a + 1) * w.cols];
        if raw_norm > ORTH_EPS {
            let proj: f64 = du.iter().zip(&unit[a]).map(|(x, y)| x * y).sum();
            for ((gv, d), u) in g.iter_mut().zip(&du).zip(&unit[a]) {
                *gv = (d - u * proj) / norms[a];
            }
        } else {
            for (gv, d) in g.iter_mut().zip(&du) {
                *gv = d / ORTH_EPS;
            }
        }
    }
    (
        loss,
        HeadMatrix {
            rows: w.rows,
            cols: w.cols,
            data: grad,
        },
    )
}

/// Mean orthogonality loss over Q and K of every level.
pub fn orthogonality_term(out: &DecodeOutput) -> f64 {
    let terms: Vec<f64> = out
        .queries()
        .chain(out.keys())
        .map(|g| orthogonality_loss(&HeadMatrix::from_heads(g)))
        .collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// `ncc(I_f, I_m ∘ φ) + α·reg(φ) + β·orth`.
pub fn total_loss(fixed: &Volume, moving: &Volume, out: &DecodeOutput, weights: LossWeights) -> Result<LossBreakdown> {
    let warped = warp(moving, &out.field, Interpolation::Trilinear)?;
    let ncc = ncc_loss(fixed, &warped, NCC_WINDOW)?;
    let reg = smoothness_loss(&out.field)?;
    let orth = orthogonality_term(out);
    Ok(LossBreakdown {
        ncc,
        reg,
        orth,
        total: ncc + weights.alpha * reg + weights.beta * orth,
    })
}
