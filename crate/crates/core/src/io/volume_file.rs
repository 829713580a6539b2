//! NIfTI-1 reading and writing (`.nii` or `.nii.gz`).
//!
//! Array axes map to volume axes in order: NIfTI `(i, j, k)` is `(h, w, l)`.
//! Images are written as float64 so a save/load cycle is bitwise exact,
//! labels as int32, displacement fields as a 5-D vector image
//! `(h, w, l, 1, 3)`.

use std::path::Path;

use ndarray::{Array, ArrayD, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiError, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{Dims, DisplacementField, LabelMap, Volume};

/// NIFTI_INTENT_VECTOR
const INTENT_VECTOR: i16 = 1007;

fn read_error(path: &Path, err: NiftiError) -> Error {
    match err {
        NiftiError::Io(e) => {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::CorruptHeader {
                    path: path.to_path_buf(),
                    reason: "file is truncated".into(),
                }
            } else {
                Error::Io(e)
            }
        }
        NiftiError::UnsupportedDataType(t) => Error::UnsupportedVolume {
            path: path.to_path_buf(),
            reason: format!("voxel type {t:?}"),
        },
        other => Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn write_error(path: &Path, err: NiftiError) -> Error {
    match err {
        NiftiError::Io(e) => Error::Io(e),
        other => Error::UnsupportedVolume {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn read(path: &Path) -> Result<(NiftiHeader, ArrayD<f64>)> {
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| read_error(path, e))?;
    let header = obj.header().clone();
    let array = obj.into_volume().into_ndarray::<f64>().map_err(|e| read_error(path, e))?;
    Ok((header, array))
}

/// Drops trailing singleton axes and insists on three remaining.
fn spatial_dims(shape: &[usize]) -> Result<Dims> {
    let mut s = shape.to_vec();
    while s.len() > 3 && s.last() == Some(&1) {
        s.pop();
    }
    match s.as_slice() {
        [h, w, l] => Ok([*h, *w, *l]),
        _ => Err(Error::NotThreeD(shape.to_vec())),
    }
}

fn spacing_of(header: &NiftiHeader) -> [f64; 3] {
    [1, 2, 3].map(|a| {
        let v = f64::from(header.pixdim[a]).abs();
        if v.is_finite() && v > 0.0 {
            v
        } else {
            1.0
        }
    })
}

fn header_with_spacing(spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    for a in 0..3 {
        h.pixdim[a + 1] = spacing[a] as f32;
    }
    h
}

/// Row-major `(h, w, l)` copy of a 3-D array.
fn flatten(array: ArrayD<f64>) -> Vec<f64> {
    array.iter().copied().collect()
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, array) = read(path)?;
    let dims = spatial_dims(array.shape())?;
    Ok(Volume::new(dims, flatten(array))?.with_spacing(spacing_of(&header)))
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    let array = Array::from_shape_vec(IxDyn(&vol.dims()), vol.data().to_vec()).expect("volume length matches dims");
    let header = header_with_spacing(vol.spacing());
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&array)
        .map_err(|e| write_error(path, e))
}

/// Loads an integer label image; any stored type is accepted as long as
/// every value is a nonnegative integer.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (_, array) = read(path)?;
    let dims = spatial_dims(array.shape())?;
    let data = array
        .iter()
        .map(|&v| {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                Ok(v as u32)
            } else {
                Err(Error::Domain(format!("label value {v} in {} is not a nonnegative integer", path.display())))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(dims, data)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let data = labels
        .data()
        .iter()
        .map(|&l| i32::try_from(l).map_err(|_| Error::Domain(format!("label {l} does not fit int32"))))
        .collect::<Result<Vec<_>>>()?;
    let array = Array::from_shape_vec(IxDyn(&labels.dims()), data).expect("label length matches dims");
    WriterOptions::new(path)
        .reference_header(&NiftiHeader::default())
        .write_nifti(&array)
        .map_err(|e| write_error(path, e))
}

pub fn save_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let path = path.as_ref();
    let d = field.dims();
    let n = field.voxels();
    // (h, w, l, 1, 3) row-major: component varies fastest
    let mut data = Vec::with_capacity(3 * n);
    for v in 0..n {
        data.extend(field.at(v));
    }
    let array = Array::from_shape_vec(IxDyn(&[d[0], d[1], d[2], 1, 3]), data).expect("field length matches dims");
    let mut header = NiftiHeader::default();
    header.intent_code = INTENT_VECTOR;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&array)
        .map_err(|e| write_error(path, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let (_, array) = read(path)?;
    let shape = array.shape().to_vec();
    let dims = match shape.as_slice() {
        [h, w, l, 1, 3] => [*h, *w, *l],
        _ => {
            return Err(Error::CorruptHeader {
                path: path.to_path_buf(),
                reason: format!("expected a (h, w, l, 1, 3) vector image, got {shape:?}"),
            })
        }
    };
    let flat = flatten(array);
    let n = flat.len() / 3;
    let mut data = vec![0.0; 3 * n];
    for v in 0..n {
        for c in 0..3 {
            data[c * n + v] = flat[3 * v + c];
        }
    }
    DisplacementField::new(dims, data)
}
