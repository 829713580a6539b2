//! Jacobian determinant of the mapping `x ↦ x + u(x)`.

use crate::error::{Error, Result};
use crate::volume::{coords_of, voxel_count, DisplacementField, Volume};

/// Spatial derivative of one component along `axis`: central differences in
/// the interior, one-sided differences on the faces.
fn derivative(comp: &[f64], dims: [usize; 3], idx: usize, pos: [usize; 3], axis: usize) -> f64 {
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let p = pos[axis];
    let n = dims[axis];
    if p == 0 {
        comp[idx + stride] - comp[idx]
    } else if p == n - 1 {
        comp[idx] - comp[idx - stride]
    } else {
        0.5 * (comp[idx + stride] - comp[idx - stride])
    }
}

pub(crate) fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-voxel `det(I + ∇u)`. Every axis needs at least two voxels.
pub fn jacobian_det(field: &DisplacementField) -> Result<Volume> {
    let dims = field.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Domain(format!(
            "jacobian needs at least 2 voxels per axis, got {dims:?}"
        )));
    }
    let comps = [field.component(0), field.component(1), field.component(2)];
    let out = (0..voxel_count(dims))
        .map(|idx| {
            let pos = coords_of(dims, idx);
            let mut m = [[0.0; 3]; 3];
            for (c, row) in m.iter_mut().enumerate() {
                for (a, entry) in row.iter_mut().enumerate() {
                    *entry = derivative(comps[c], dims, idx, pos, a) + if a == c { 1.0 } else { 0.0 };
                }
            }
            det3(m)
        })
        .collect();
    Volume::new(dims, out)
}
