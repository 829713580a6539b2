//! Seeded synthetic registration problems with known deformations.
//!
//! The moving image is a sum of Gaussian bumps on a smooth background. The
//! first `n_labels` bumps double as anatomical labels. The fixed image is the
//! moving image warped by a smooth, fold-free ground-truth field, so the
//! ground truth aligns the pair exactly.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interp::{trilinear_sample, warp, warp_labels, Interpolation};
use crate::metrics::neg_jacobian_fraction;
use crate::volume::{linear_index, voxel_count, Dims, DisplacementField, LabelMap, Volume};

/// Rescale attempts before the final halving.
const FOLD_RETRIES: usize = 10;
const RETRY_SHRINK: f64 = 0.8;
const BACKGROUND_BLOBS: usize = 10;
const DETAIL_BLOBS: usize = 24;
/// Voxels between displacement control points.
const CONTROL_SPACING: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub size: Dims,
    pub n_labels: usize,
    /// Largest displacement magnitude of the ground truth, in voxels.
    pub max_disp: f64,
    /// Multiplies the fixed image by a random factor in [0.9, 1].
    pub bias: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: [32, 32, 32],
            n_labels: 4,
            max_disp: 3.0,
            bias: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 16 || s % 16 != 0) {
            return Err(Error::Config(format!(
                "synthetic size must be a multiple of 16 and at least 16 per axis, got {:?}",
                self.size
            )));
        }
        if self.n_labels == 0 {
            return Err(Error::Config("n_labels must be at least 1".into()));
        }
        let limit = *self.size.iter().min().expect("3 axes") as f64 / 8.0;
        if !(self.max_disp.is_finite() && self.max_disp >= 0.0 && self.max_disp < limit) {
            return Err(Error::Config(format!(
                "max_disp must lie in [0, {limit}) for size {:?}, got {}",
                self.size, self.max_disp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub seed: u64,
    pub moving: Volume,
    pub fixed: Volume,
    pub gt_field: DisplacementField,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
}

impl SynthPair {
    /// SHA-256 over the images, field and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.moving.data(), self.fixed.data(), self.gt_field.data()] {
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        for l in [self.moving_labels.data(), self.fixed_labels.data()] {
            for x in l {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

struct Bump {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

impl Bump {
    fn random(rng: &mut ChaCha8Rng, dims: Dims, margin: f64, sigma: (f64, f64), amplitude: (f64, f64)) -> Self {
        let center = [0, 1, 2].map(|a| rng.random_range(margin..=(dims[a] as f64 - 1.0 - margin)));
        Self {
            center,
            sigma: rng.random_range(sigma.0..=sigma.1),
            amplitude: rng.random_range(amplitude.0..=amplitude.1),
        }
    }

    /// Unit-peak profile at a voxel.
    fn profile(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

fn min_max(mut data: Vec<f64>) -> Vec<f64> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    data.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    data
}

/// Moving image and labels.
fn anatomy(rng: &mut ChaCha8Rng, dims: Dims, n_labels: usize) -> Result<(Volume, LabelMap)> {
    let scale = *dims.iter().min().expect("3 axes") as f64 / 32.0;
    let organs: Vec<Bump> = (0..n_labels)
        .map(|_| Bump::random(rng, dims, 7.0 * scale, (2.5 * scale, 3.5 * scale), (0.5, 1.0)))
        .collect();
    let background: Vec<Bump> = (0..BACKGROUND_BLOBS)
        .map(|_| Bump::random(rng, dims, 0.0, (4.0 * scale, 8.0 * scale), (-0.3, 0.3)))
        .collect();
    let detail: Vec<Bump> = (0..DETAIL_BLOBS)
        .map(|_| Bump::random(rng, dims, 0.0, (1.0 * scale, 2.0 * scale), (-0.25, 0.25)))
        .collect();
    let gradient = [0, 1, 2].map(|_| rng.random_range(-0.2..=0.2) / dims[0] as f64);

    let n = voxel_count(dims);
    let mut img = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64, j as f64, k as f64];
                let mut v: f64 = (0..3).map(|a| gradient[a] * p[a]).sum();
                let mut best = (0u32, 0.5);
                for (l, b) in organs.iter().enumerate() {
                    let g = b.profile(p);
                    v += b.amplitude * g;
                    if g > best.1 {
                        best = (l as u32 + 1, g);
                    }
                }
                for b in background.iter().chain(&detail) {
                    v += b.amplitude * b.profile(p);
                }
                img.push(v);
                labels.push(best.0);
            }
        }
    }
    Ok((Volume::new(dims, min_max(img))?, LabelMap::new(dims, labels)?))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with border replication.
pub(crate) fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let mut cur = data.to_vec();
    for ax in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let c = [i, j, k];
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let mut q = c;
                        q[ax] = (c[ax] as i64 + t as i64 - r).clamp(0, dims[ax] as i64 - 1) as usize;
                        acc += w * cur[linear_index(dims, q[0], q[1], q[2])];
                    }
                    next[linear_index(dims, i, j, k)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Normal noise on a coarse control grid spanning the volume, trilinearly
/// interpolated to every voxel and then blurred. Blurring white noise at full
/// resolution instead concentrates the peak at the replicated borders and
/// leaves the interior nearly still.
fn control_noise(rng: &mut ChaCha8Rng, dims: Dims) -> Result<Vec<f64>> {
    let ctrl = dims.map(|d| (d / CONTROL_SPACING).max(2));
    let coarse: Vec<f64> = (0..voxel_count(ctrl)).map(|_| rng.sample(StandardNormal)).collect();
    let coarse = Volume::new(ctrl, coarse)?;
    let mut fine = Vec::with_capacity(voxel_count(dims));
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let c = [i, j, k];
                let pos = [0, 1, 2].map(|a| c[a] as f64 * (ctrl[a] - 1) as f64 / (dims[a] - 1) as f64);
                fine.push(trilinear_sample(&coarse, pos)?);
            }
        }
    }
    let sigma = *dims.iter().min().expect("3 axes") as f64 / 16.0;
    Ok(gaussian_smooth(&fine, dims, sigma))
}

/// Smooth random field rescaled to the requested peak magnitude, shrunk
/// until no voxel folds.
fn smooth_field(rng: &mut ChaCha8Rng, dims: Dims, max_disp: f64) -> Result<DisplacementField> {
    let n = voxel_count(dims);
    if max_disp == 0.0 {
        return DisplacementField::zeros(dims);
    }
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        data.extend(control_noise(rng, dims)?);
    }
    let base = DisplacementField::new(dims, data)?;
    let peak = base.max_magnitude();
    if peak == 0.0 {
        return Ok(base);
    }
    let mut magnitude = max_disp;
    for _ in 0..FOLD_RETRIES {
        let field = base.scaled(magnitude / peak)?;
        if neg_jacobian_fraction(&field)? == 0.0 {
            return Ok(field);
        }
        magnitude *= RETRY_SHRINK;
    }
    let field = base.scaled(0.5 * magnitude / peak)?;
    if neg_jacobian_fraction(&field)? == 0.0 {
        return Ok(field);
    }
    Err(Error::FoldingField { max_disp })
}

fn assemble(seed: u64, rng: &mut ChaCha8Rng, moving: Volume, moving_labels: LabelMap, gt_field: DisplacementField, bias: bool) -> Result<SynthPair> {
    let mut fixed = warp(&moving, &gt_field, Interpolation::Trilinear)?;
    if bias {
        let b: f64 = rng.random_range(0.9..=1.0);
        fixed = fixed.map(|v| v * b)?;
    }
    let fixed_labels = warp_labels(&moving_labels, &gt_field)?;
    Ok(SynthPair {
        seed,
        moving,
        fixed,
        gt_field,
        moving_labels,
        fixed_labels,
    })
}

/// One pair; equal seeds and configs give bitwise-identical pairs.
pub fn generate_pair(seed: u64, config: &SynthConfig) -> Result<SynthPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (moving, labels) = anatomy(&mut rng, config.size, config.n_labels)?;
    let field = smooth_field(&mut rng, config.size, config.max_disp)?;
    assemble(seed, &mut rng, moving, labels, field, config.bias)
}

/// A pair related by a constant translation `shift` (voxels).
pub fn generate_translation_pair(seed: u64, config: &SynthConfig, shift: [f64; 3]) -> Result<SynthPair> {
    config.validate()?;
    if shift.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("translation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (moving, labels) = anatomy(&mut rng, config.size, config.n_labels)?;
    let field = DisplacementField::constant(config.size, shift)?;
    assemble(seed, &mut rng, moving, labels, field, config.bias)
}

/// Generation parameters and per-pair checksums.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    /// `(pair seed, checksum)` in index order.
    pub pairs: Vec<(u64, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "count = {}", self.pairs.len());
        let _ = writeln!(s, "size = {}x{}x{}", c.size[0], c.size[1], c.size[2]);
        let _ = writeln!(s, "n_labels = {}", c.n_labels);
        let _ = writeln!(s, "max_disp = {}", c.max_disp);
        let _ = writeln!(s, "bias = {}", c.bias);
        for (i, (seed, sum)) in self.pairs.iter().enumerate() {
            let _ = writeln!(s, "checksum = {i} {seed} {sum}");
        }
        s
    }
}

/// `count` pairs seeded `seed + index`.
pub fn generate_dataset(seed: u64, count: usize, config: &SynthConfig) -> Result<(Vec<SynthPair>, Manifest)> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let pairs = (0..count as u64)
        .map(|i| generate_pair(seed.wrapping_add(i), config))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed,
        config: *config,
        pairs: pairs.iter().map(|p| (p.seed, p.checksum())).collect(),
    };
    Ok((pairs, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;

    fn small() -> SynthConfig {
        SynthConfig {
            size: [16, 16, 32],
            n_labels: 3,
            max_disp: 1.5,
            bias: false,
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_pair(5, &small()).unwrap();
        let b = generate_pair(5, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), generate_pair(6, &small()).unwrap().checksum());
    }

    #[test]
    fn construction_identity() {
        let p = generate_pair(9, &small()).unwrap();
        assert_eq!(warp(&p.moving, &p.gt_field, Interpolation::Trilinear).unwrap(), p.fixed);
        assert_eq!(warp_labels(&p.moving_labels, &p.gt_field).unwrap(), p.fixed_labels);
        for l in p.fixed_labels.labels() {
            let w = warp_labels(&p.moving_labels, &p.gt_field).unwrap();
            assert_eq!(dsc(&w.mask(l), &p.fixed_labels.mask(l)).unwrap(), 1.0);
        }
        assert_eq!(neg_jacobian_fraction(&p.gt_field).unwrap(), 0.0);
        assert!(p.gt_field.max_magnitude() <= 1.5 + 1e-12);
        for v in [&p.moving, &p.fixed] {
            assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn labels_present() {
        let p = generate_pair(2, &SynthConfig::default()).unwrap();
        assert_eq!(p.moving_labels.labels(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn zero_displacement() {
        let cfg = SynthConfig { max_disp: 0.0, ..small() };
        let p = generate_pair(1, &cfg).unwrap();
        assert!(p.gt_field.is_zero());
        assert_eq!(p.moving, p.fixed);
    }

    #[test]
    fn bias_stays_in_range() {
        let cfg = SynthConfig { bias: true, ..small() };
        let p = generate_pair(4, &cfg).unwrap();
        assert!(p.fixed.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(p.fixed, warp(&p.moving, &p.gt_field, Interpolation::Trilinear).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SynthConfig { max_disp: 2.0, ..small() },
            SynthConfig { size: [16, 16, 24], ..small() },
            SynthConfig { size: [8, 16, 16], ..small() },
            SynthConfig { n_labels: 0, ..small() },
            SynthConfig { max_disp: -1.0, ..small() },
        ] {
            assert!(matches!(generate_pair(0, &cfg), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(generate_dataset(0, 0, &small()).is_err());
    }

    #[test]
    fn translation_probe() {
        let p = generate_translation_pair(3, &small(), [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.fixed.get(4, 5, 6), p.moving.get(5, 5, 6));
    }

    #[test]
    fn manifest_is_stable() {
        let (pairs, m1) = generate_dataset(10, 3, &small()).unwrap();
        let (_, m2) = generate_dataset(10, 3, &small()).unwrap();
        assert_eq!(m1.to_text(), m2.to_text());
        assert_eq!(pairs.iter().map(|p| p.seed).collect::<Vec<_>>(), vec![10, 11, 12]);
        assert_ne!(m1.pairs[0].1, m1.pairs[1].1);
        assert!(m1.to_text().contains("max_disp = 1.5"));
    }

    #[test]
    fn smoothing_preserves_constants() {
        let dims = [5, 6, 7];
        let out = gaussian_smooth(&vec![2.5; 210], dims, 1.5);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
