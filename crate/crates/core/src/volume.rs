//! Grid containers: scalar volumes, displacement fields, multi-channel
//! feature maps and integer label maps.
//!
//! Every grid is stored row-major with the last axis fastest, so voxel
//! `(i, j, k)` of an `h × w × l` grid lives at `(i * w + j) * l + k`.
//! Multi-channel grids are channel-major: channel `c` occupies the
//! contiguous block `c * n .. (c + 1) * n`.

use crate::error::{Error, Result};

/// Grid extent `(h, w, l)`.
pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

#[inline]
pub fn coords_of(dims: Dims, idx: usize) -> [usize; 3] {
    let k = idx % dims[2];
    let j = (idx / dims[2]) % dims[1];
    let i = idx / (dims[1] * dims[2]);
    [i, j, k]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::EmptyDims(dims));
    }
    Ok(())
}

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A scalar 3D image with physical voxel spacing (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::LengthMismatch {
                expected: voxel_count(dims),
                actual: data.len(),
            });
        }
        check_finite(&data, "volume")?;
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; voxel_count(dims)])
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    /// Applies `f` voxelwise, keeping dims and spacing.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Ok(Self::new(self.dims, self.data.iter().map(|&v| f(v)).collect())?.with_spacing(self.spacing))
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense per-voxel displacement in voxel units of the field's own grid.
///
/// Component `c` (displacement along axis `c`) is stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::LengthMismatch {
                expected: 3 * voxel_count(dims),
                actual: data.len(),
            });
        }
        check_finite(&data, "displacement field")?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![0.0; 3 * voxel_count(dims)])
    }

    pub fn constant(dims: Dims, value: [f64; 3]) -> Result<Self> {
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(3 * n);
        for v in value {
            data.extend(std::iter::repeat_n(v, n));
        }
        Self::new(dims, data)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        check_dims(dims)?;
        let n = voxel_count(dims);
        let mut data = vec![0.0; 3 * n];
        for idx in 0..n {
            let [i, j, k] = coords_of(dims, idx);
            let u = f(i, j, k);
            for c in 0..3 {
                data[c * n + idx] = u[c];
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        let n = self.voxels();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.at(linear_index(self.dims, i, j, k))
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.voxels())
            .map(|idx| {
                let u = self.at(idx);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.dims, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// A multi-channel feature grid (channel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn from_volume(vol: &Volume) -> Self {
        Self {
            channels: 1,
            dims: vol.dims(),
            data: vol.data().to_vec(),
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Integer segmentation; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u32>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::LengthMismatch {
                expected: voxel_count(dims),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    /// Sorted nonzero labels present in the map.
    pub fn labels(&self) -> Vec<u32> {
        let mut set: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn mask(&self, label: u32) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }
}

/// Binary mask used by overlap and surface metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::LengthMismatch {
                expected: voxel_count(dims),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
