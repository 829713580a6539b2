//! Bringing arbitrary volumes onto a network-ready grid.

use crate::encoder::check_divisible;
use crate::error::{Error, Result};
use crate::volume::{linear_index, Dims, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Per-volume min-max to [0, 1]; constant volumes become zero.
    #[default]
    MinMax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSpec {
    /// Every axis divisible by 16.
    pub target: Dims,
    pub normalize: Normalization,
}

impl PreprocessSpec {
    pub fn new(target: Dims) -> Result<Self> {
        if target.contains(&0) {
            return Err(Error::EmptyDims(target));
        }
        check_divisible(target)?;
        Ok(Self {
            target,
            normalize: Normalization::MinMax,
        })
    }
}

/// Source index for each target index along one axis under a centered crop
/// or pad, `None` in the padding.
fn axis_map(src: usize, dst: usize) -> Vec<Option<usize>> {
    let (src, dst) = (src as i64, dst as i64);
    let shift = (src - dst).div_euclid(2);
    (0..dst)
        .map(|x| {
            let s = x + shift;
            (0..src).contains(&s).then_some(s as usize)
        })
        .collect()
}

fn center_fit<T: Copy>(data: &[T], from: Dims, to: Dims, fill: T) -> Vec<T> {
    let maps: Vec<Vec<Option<usize>>> = (0..3).map(|a| axis_map(from[a], to[a])).collect();
    let mut out = Vec::with_capacity(to.iter().product());
    for i in &maps[0] {
        for j in &maps[1] {
            for k in &maps[2] {
                out.push(match (i, j, k) {
                    (Some(i), Some(j), Some(k)) => data[linear_index(from, *i, *j, *k)],
                    _ => fill,
                });
            }
        }
    }
    out
}

/// Center crop or zero-pad to `to`.
pub fn center_crop_or_pad(vol: &Volume, to: Dims) -> Result<Volume> {
    Ok(Volume::new(to, center_fit(vol.data(), vol.dims(), to, 0.0))?.with_spacing(vol.spacing()))
}

/// Center crop or pad with background.
pub fn center_crop_or_pad_labels(labels: &LabelMap, to: Dims) -> Result<LabelMap> {
    LabelMap::new(to, center_fit(labels.data(), labels.dims(), to, 0))
}

/// Per-volume min-max to [0, 1]; a constant volume maps to zeros.
pub fn min_max_normalize(vol: &Volume) -> Result<Volume> {
    let lo = vol.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vol.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= f64::EPSILON * hi.abs().max(1.0) {
        return vol.map(|_| 0.0);
    }
    vol.map(|v| (v - lo) / span)
}

/// Center crop/pad to the target grid, then normalize intensities.
pub fn preprocess(vol: &Volume, spec: &PreprocessSpec) -> Result<Volume> {
    let fitted = center_crop_or_pad(vol, spec.target)?;
    match spec.normalize {
        Normalization::MinMax => min_max_normalize(&fitted),
        Normalization::None => Ok(fitted),
    }
}

/// Same geometry as [`preprocess`] for a label map.
pub fn preprocess_labels(labels: &LabelMap, spec: &PreprocessSpec) -> Result<LabelMap> {
    center_crop_or_pad_labels(labels, spec.target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conforming_volume_unchanged() {
        let v = Volume::from_fn([16, 16, 32], |i, j, k| ((i * 7 + j * 3 + k) % 11) as f64 / 10.0).unwrap();
        let spec = PreprocessSpec::new([16, 16, 32]).unwrap();
        assert_eq!(preprocess(&v, &spec).unwrap(), v);
    }

    #[test]
    fn constant_becomes_zero() {
        let spec = PreprocessSpec::new([16, 16, 16]).unwrap();
        let out = preprocess(&Volume::filled([16, 16, 16], 42.0).unwrap(), &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pads_symmetrically() {
        let v = Volume::from_fn([20, 20, 20], |i, j, k| 1.0 + (i + 20 * j + 400 * k) as f64).unwrap();
        let spec = PreprocessSpec {
            target: [32, 32, 32],
            normalize: Normalization::None,
        };
        let out = preprocess(&v, &spec).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                for k in 0..32 {
                    let inside = [i, j, k].iter().all(|&x| (6..26).contains(&x));
                    let want = if inside { v.get(i - 6, j - 6, k - 6) } else { 0.0 };
                    assert_eq!(out.get(i, j, k), want);
                }
            }
        }
    }

    #[test]
    fn crops_centrally() {
        let v = Volume::from_fn([36, 16, 17], |i, j, k| (i * 10000 + j * 100 + k) as f64).unwrap();
        let out = center_crop_or_pad(&v, [32, 16, 16]).unwrap();
        assert_eq!(out.get(0, 0, 0), v.get(2, 0, 0));
        assert_eq!(out.get(31, 15, 15), v.get(33, 15, 15));
    }

    #[test]
    fn rejects_indivisible_target() {
        assert!(PreprocessSpec::new([16, 16, 20]).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(h in 1usize..40, w in 1usize..40, l in 1usize..24, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = Volume::from_fn([h, w, l], |_, _, _| rng.random_range(-100.0..100.0)).unwrap();
            let spec = PreprocessSpec::new([32, 16, 16]).unwrap();
            let once = preprocess(&v, &spec).unwrap();
            prop_assert_eq!(preprocess(&once, &spec).unwrap(), once.clone());
            prop_assert!(once.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
