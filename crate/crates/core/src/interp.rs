//! Trilinear resampling, warping, field upsampling and composition.
//!
//! Out-of-grid positions are clamped to the border (replication). Each
//! forward operation used by the network has a matching backward pass that
//! returns the gradient with respect to its differentiable inputs.

use crate::error::{Error, Result};
use crate::volume::{coords_of, linear_index, voxel_count, Dims, DisplacementField, LabelMap, Volume};

/// Eight-corner trilinear stencil at one continuous position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// d w / d position, per axis. Zero along an axis that is clamped.
    pub dw: [[f64; 8]; 3],
}

#[inline]
fn axis_interp(pos: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let p = pos.clamp(0.0, hi);
    let i0 = (p.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let frac = p - i0 as f64;
    let live = n > 1 && pos >= 0.0 && pos <= hi;
    (i0, i1, frac, live)
}

impl Stencil {
    #[inline]
    pub(crate) fn at(dims: Dims, pos: [f64; 3]) -> Self {
        let (x0, x1, fx, lx) = axis_interp(pos[0], dims[0]);
        let (y0, y1, fy, ly) = axis_interp(pos[1], dims[1]);
        let (z0, z1, fz, lz) = axis_interp(pos[2], dims[2]);
        let xs = [x0, x1];
        let ys = [y0, y1];
        let zs = [z0, z1];
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let sign = [-1.0, 1.0];
        let gx = if lx { 1.0 } else { 0.0 };
        let gy = if ly { 1.0 } else { 0.0 };
        let gz = if lz { 1.0 } else { 0.0 };
        let mut s = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 8]; 3],
        };
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let corner = a * 4 + b * 2 + c;
                    s.idx[corner] = linear_index(dims, xs[a], ys[b], zs[c]);
                    s.w[corner] = wx[a] * wy[b] * wz[c];
                    s.dw[0][corner] = gx * sign[a] * wy[b] * wz[c];
                    s.dw[1][corner] = gy * wx[a] * sign[b] * wz[c];
                    s.dw[2][corner] = gz * wx[a] * wy[b] * sign[c];
                }
            }
        }
        s
    }

    #[inline]
    pub(crate) fn sample(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            acc += self.w[c] * data[self.idx[c]];
        }
        acc
    }

    /// Gradient of the sampled value w.r.t. the sampling position.
    #[inline]
    pub(crate) fn position_grad(&self, data: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for c in 0..8 {
            let v = data[self.idx[c]];
            g[0] += self.dw[0][c] * v;
            g[1] += self.dw[1][c] * v;
            g[2] += self.dw[2][c] * v;
        }
        g
    }

    #[inline]
    pub(crate) fn scatter(&self, grad: f64, out: &mut [f64]) {
        for c in 0..8 {
            out[self.idx[c]] += self.w[c] * grad;
        }
    }
}

#[inline]
fn nearest_index(dims: Dims, pos: [f64; 3]) -> usize {
    let r = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64).round() as usize;
    linear_index(dims, r(pos[0], dims[0]), r(pos[1], dims[1]), r(pos[2], dims[2]))
}

/// Samples `vol` at a continuous voxel position with border clamping.
pub fn trilinear_sample(vol: &Volume, pos: [f64; 3]) -> Result<f64> {
    if pos.iter().any(|p| !p.is_finite()) {
        return Err(Error::Domain(format!("non-finite sample position {pos:?}")));
    }
    Ok(Stencil::at(vol.dims(), pos).sample(vol.data()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

fn check_same(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::shapes(a, b));
    }
    Ok(())
}

#[inline]
fn displaced(dims: Dims, field: &DisplacementField, idx: usize) -> [f64; 3] {
    let [i, j, k] = coords_of(dims, idx);
    let u = field.at(idx);
    [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]]
}

/// `out[x] = vol(x + field[x])`.
pub fn warp(vol: &Volume, field: &DisplacementField, mode: Interpolation) -> Result<Volume> {
    check_same(vol.dims(), field.dims())?;
    let dims = vol.dims();
    let data = vol.data();
    let out = (0..voxel_count(dims))
        .map(|idx| {
            let pos = displaced(dims, field, idx);
            match mode {
                Interpolation::Trilinear => Stencil::at(dims, pos).sample(data),
                Interpolation::Nearest => data[nearest_index(dims, pos)],
            }
        })
        .collect();
    Ok(Volume::new(dims, out)?.with_spacing(vol.spacing()))
}

/// Nearest-neighbour warp of a label map.
pub fn warp_labels(labels: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    check_same(labels.dims(), field.dims())?;
    let dims = labels.dims();
    let out = (0..voxel_count(dims))
        .map(|idx| labels.data()[nearest_index(dims, displaced(dims, field, idx))])
        .collect();
    LabelMap::new(dims, out)
}

/// Trilinear warp of every channel of a channel-major grid.
pub(crate) fn warp_channels(data: &[f64], channels: usize, field: &DisplacementField) -> Vec<f64> {
    let dims = field.dims();
    let n = voxel_count(dims);
    debug_assert_eq!(data.len(), channels * n);
    let mut out = vec![0.0; channels * n];
    for idx in 0..n {
        let st = Stencil::at(dims, displaced(dims, field, idx));
        for c in 0..channels {
            out[c * n + idx] = st.sample(&data[c * n..(c + 1) * n]);
        }
    }
    out
}

/// Backward of [`warp_channels`]. Returns (d data, d field); the data
/// gradient is skipped when `need_data` is false.
pub(crate) fn warp_channels_backward(
    data: &[f64],
    channels: usize,
    field: &DisplacementField,
    grad_out: &[f64],
    need_data: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dims = field.dims();
    let n = voxel_count(dims);
    let mut gdata = if need_data { vec![0.0; channels * n] } else { Vec::new() };
    let mut gfield = vec![0.0; 3 * n];
    for idx in 0..n {
        let st = Stencil::at(dims, displaced(dims, field, idx));
        for c in 0..channels {
            let g = grad_out[c * n + idx];
            if g == 0.0 {
                continue;
            }
            let ch = &data[c * n..(c + 1) * n];
            let pg = st.position_grad(ch);
            gfield[idx] += g * pg[0];
            gfield[n + idx] += g * pg[1];
            gfield[2 * n + idx] += g * pg[2];
            if need_data {
                st.scatter(g, &mut gdata[c * n..(c + 1) * n]);
            }
        }
    }
    (gdata, gfield)
}

/// Coarse-grid coordinate of fine voxel `x` under half-voxel alignment.
#[inline]
fn coarse_coord(x: usize) -> f64 {
    (x as f64 + 0.5) * 0.5 - 0.5
}

fn upsample_stencils(coarse: Dims) -> (Dims, Vec<Stencil>) {
    let fine = [coarse[0] * 2, coarse[1] * 2, coarse[2] * 2];
    let stencils = (0..voxel_count(fine))
        .map(|idx| {
            let [i, j, k] = coords_of(fine, idx);
            Stencil::at(coarse, [coarse_coord(i), coarse_coord(j), coarse_coord(k)])
        })
        .collect();
    (fine, stencils)
}

/// Doubles the grid by trilinear interpolation and rescales the
/// displacements by 2 so they stay in voxel units of the finer grid.
pub fn upsample_field(field: &DisplacementField) -> DisplacementField {
    let coarse = field.dims();
    let (fine, stencils) = upsample_stencils(coarse);
    let nf = voxel_count(fine);
    let mut out = vec![0.0; 3 * nf];
    for c in 0..3 {
        let comp = field.component(c);
        for (idx, st) in stencils.iter().enumerate() {
            out[c * nf + idx] = 2.0 * st.sample(comp);
        }
    }
    DisplacementField::new(fine, out).expect("upsampling preserves finiteness")
}

/// Adjoint of [`upsample_field`].
pub(crate) fn upsample_field_backward(coarse: Dims, grad_fine: &[f64]) -> Vec<f64> {
    let (fine, stencils) = upsample_stencils(coarse);
    let nf = voxel_count(fine);
    let nc = voxel_count(coarse);
    let mut out = vec![0.0; 3 * nc];
    for c in 0..3 {
        let dst = &mut out[c * nc..(c + 1) * nc];
        for (idx, st) in stencils.iter().enumerate() {
            st.scatter(2.0 * grad_fine[c * nf + idx], dst);
        }
    }
    out
}

/// Halves every axis by averaging 2×2×2 blocks (trilinear sampling at the
/// coarse voxel centre). Odd trailing voxels are dropped.
pub fn downsample2(vol: &Volume) -> Result<Volume> {
    let d = vol.dims();
    let out_dims = [(d[0] / 2).max(1), (d[1] / 2).max(1), (d[2] / 2).max(1)];
    let data = vol.data();
    let out = Volume::from_fn(out_dims, |i, j, k| {
        let mut acc = 0.0;
        let mut count = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let (x, y, z) = (2 * i + a, 2 * j + b, 2 * k + c);
                    if x < d[0] && y < d[1] && z < d[2] {
                        acc += data[linear_index(d, x, y, z)];
                        count += 1.0;
                    }
                }
            }
        }
        acc / count
    })?;
    Ok(out.with_spacing(vol.spacing().map(|s| 2.0 * s)))
}

/// `result[x] = inner[x] + outer(x + inner[x])`: applying the result equals
/// applying `inner` first and then `outer`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    check_same(outer.dims(), inner.dims())?;
    let dims = inner.dims();
    let n = voxel_count(dims);
    let mut out = inner.data().to_vec();
    for idx in 0..n {
        let st = Stencil::at(dims, displaced(dims, inner, idx));
        for c in 0..3 {
            out[c * n + idx] += st.sample(outer.component(c));
        }
    }
    DisplacementField::new(dims, out)
}

/// Backward of [`compose`]: returns (d outer, d inner).
pub(crate) fn compose_backward(
    outer: &DisplacementField,
    inner: &DisplacementField,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dims = inner.dims();
    let n = voxel_count(dims);
    let mut gouter = vec![0.0; 3 * n];
    let mut ginner = grad.to_vec();
    for idx in 0..n {
        let st = Stencil::at(dims, displaced(dims, inner, idx));
        for c in 0..3 {
            let g = grad[c * n + idx];
            if g == 0.0 {
                continue;
            }
            let comp = outer.component(c);
            let pg = st.position_grad(comp);
            ginner[idx] += g * pg[0];
            ginner[n + idx] += g * pg[1];
            ginner[2 * n + idx] += g * pg[2];
            st.scatter(g, &mut gouter[c * n..(c + 1) * n]);
        }
    }
    (gouter, ginner)
}
