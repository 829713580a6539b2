//! Shared finite-difference helpers for the integration tests.
#![allow(dead_code)]

use panreg_core::{Parameters, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor for a difference step `h`. Structurally zero gradients
/// (a bias feeding a normalization) come back from central differences as
/// rounding noise of order `eps·|L|/h`, so tiny entries are compared
/// against this floor instead of their own magnitude.
pub fn rel_floor(step: f64) -> f64 {
    1e-10 / step
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at every entry of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn record(&mut self, name: &str, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_err(analytic, numeric, floor);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{name}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel < MAX_REL_ERR
    }
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut r = GradReport::default();
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        r.record(&format!("{name}[{i}]"), *a, *n, rel_floor(FD_STEP));
    }
    r
}

/// Perturbs every scalar of every parameter tensor of `params` (or every
/// `stride`-th one) by `±step` and compares against the analytic gradient `grad`.
pub fn check_params<P: Parameters + Clone>(
    params: &P,
    grad: &P,
    stride: usize,
    step: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> GradReport {
    let names: Vec<(String, usize)> = params.named_tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let grads: Vec<Tensor> = grad.named_tensors().into_iter().map(|(_, t)| t).collect();
    let values: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut report = GradReport::default();
    let mut probe = params.clone();
    let mut counter = 0usize;
    for (ti, (name, len)) in names.iter().enumerate() {
        for e in 0..*len {
            counter += 1;
            if !counter.is_multiple_of(stride) {
                continue;
            }
            let orig = values[ti].data[e];
            let mut eval = |delta: f64| {
                set_entry(&mut probe, ti, e, orig + delta);
                let v = loss(&probe);
                set_entry(&mut probe, ti, e, orig);
                v
            };
            let up = eval(step);
            let down = eval(-step);
            let numeric = (up - down) / (2.0 * step);
            report.record(&format!("{name}[{e}]"), grads[ti].data[e], numeric, rel_floor(step));
        }
    }
    report
}

fn set_entry<P: Parameters>(p: &mut P, tensor: usize, entry: usize, value: f64) {
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == tensor {
            t.data[entry] = value;
        }
        i += 1;
    });
}

use panreg_core::{
    lat_forward, lat_forward_backward, ncc_loss, ncc_loss_grad, orthogonality_loss, orthogonality_loss_grad, smoothness_loss,
    smoothness_loss_grad, DisplacementField, FeatureMap, HeadMatrix, LatLevel, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

pub fn random_features(channels: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> FeatureMap {
    let mut fm = FeatureMap::zeros(channels, dims);
    fm.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    fm
}

/// Overwrites every parameter with uniform noise in `±scale`.
pub fn randomize<P: Parameters>(p: &mut P, scale: f64, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale)));
}

/// One LAT level on a 4³ grid with every parameter (including the merge
/// convolution and positional bias) randomized. The scalar is a weighted
/// sum of the residual, or a plain sum when `weighted` is false.
pub fn lat_level_report(seed: u64, heads: usize, weighted: bool) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [4, 4, 4];
    let c = 3;
    let mut level = LatLevel::new(c, heads, 3, &mut rng).unwrap();
    randomize(&mut level, 0.5, &mut rng);
    let fm = random_features(c, dims, &mut rng);
    let ff = random_features(c, dims, &mut rng);
    let dm: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let df: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let w: Vec<f64> = (0..192).map(|_| if weighted { rng.random_range(-1.0..1.0) } else { 1.0 }).collect();
    let (_, grad) = lat_forward_backward(&fm, &ff, &dm, &df, &level, &w).unwrap();
    check_params(&level, &grad, 1, FD_STEP, |l| {
        let out = lat_forward(&fm, &ff, &dm, &df, l).unwrap();
        out.residual.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    })
}

pub fn ncc_report(seed: u64, window: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [4, 4, 4];
    let fixed = random_volume(dims, &mut rng);
    let warped = random_volume(dims, &mut rng);
    let (_, analytic) = ncc_loss_grad(&fixed, &warped, window).unwrap();
    let numeric = numeric_grad(warped.data(), |x| {
        ncc_loss(&fixed, &Volume::new(dims, x.to_vec()).unwrap(), window).unwrap()
    });
    compare(&format!("ncc(w={window})"), &analytic, &numeric)
}

pub fn reg_report(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [4, 4, 4];
    let data: Vec<f64> = (0..192).map(|_| rng.random_range(-2.0..2.0)).collect();
    let field = DisplacementField::new(dims, data.clone()).unwrap();
    let (_, analytic) = smoothness_loss_grad(&field).unwrap();
    let numeric = numeric_grad(&data, |x| smoothness_loss(&DisplacementField::new(dims, x.to_vec()).unwrap()).unwrap());
    compare("reg", &analytic, &numeric)
}

/// Head matrices shaped like Q/K of a 4³ level: `heads` rows of `64·6`.
pub fn orth_report(seed: u64, heads: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = 64 * 6;
    let data: Vec<f64> = (0..heads * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = HeadMatrix::new(heads, cols, data.clone()).unwrap();
    let (_, analytic) = orthogonality_loss_grad(&m);
    let numeric = numeric_grad(&data, |x| orthogonality_loss(&HeadMatrix::new(heads, cols, x.to_vec()).unwrap()));
    compare(&format!("orth(S={heads})"), &analytic.data, &numeric)
}
