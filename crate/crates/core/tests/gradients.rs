mod common;

use common::*;
use panreg_core::{LossWeights, ModelConfig, PanModel, Parameters, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_ok(r: &GradReport) {
    assert!(r.ok(), "max relative error {:e} over {} entries, worst {}", r.max_rel, r.checked, r.worst);
}

#[test]
fn lat_level_sum_gradients() {
    assert_ok(&lat_level_report(1, 2, false));
}

#[test]
fn lat_level_weighted_gradients() {
    for (seed, heads) in [(2, 1), (3, 3)] {
        assert_ok(&lat_level_report(seed, heads, true));
    }
}

#[test]
fn ncc_gradients() {
    for (seed, window) in [(4, 9), (5, 3)] {
        assert_ok(&ncc_report(seed, window));
    }
}

#[test]
fn smoothness_gradients() {
    assert_ok(&reg_report(6));
}

#[test]
fn orthogonality_gradients() {
    for (seed, heads) in [(7, 1), (8, 2), (9, 4)] {
        assert_ok(&orth_report(seed, heads));
    }
}

#[test]
fn full_model_gradients() {
    let config = ModelConfig {
        widths: [2, 3, 2, 2, 2],
        heads: [2, 1, 2, 1, 1],
        neighborhood: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model = PanModel::new(config, 10).unwrap();
    // a live merge convolution puts every level on the gradient path
    for level in &mut model.params.decoder.levels {
        randomize(&mut level.merge, 0.3, &mut rng);
        level.pos_bias.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    // the 1³ deepest level normalizes to exactly beta, which would sit on
    // the LeakyReLU kink at zero
    model.params.encoder.visit_mut("", &mut |name, t| {
        if name.ends_with("norm.beta") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(0.1..0.5));
        }
    });
    let dims = [16, 16, 16];
    let moving = smooth(dims, 0.0);
    let fixed = smooth(dims, 0.7);
    let weights = LossWeights::new(1.0, 0.5).unwrap();
    let (_, grad) = model.loss_and_grad(&moving, &fixed, weights).unwrap();
    assert!(model.loss(&moving, &fixed, weights).unwrap().total.is_finite());

    // LeakyReLU and trilinear cell boundaries make the objective only
    // piecewise smooth; across 16³ voxels a 1e-4 step crosses some kink for
    // a fair share of the encoder weights, so the whole network is probed
    // with a finer step.
    let report = check_params(&model.params, &grad, 7, 1e-6, |p| {
        let m = PanModel {
            config,
            params: p.clone(),
        };
        m.loss(&moving, &fixed, weights).unwrap().total
    });
    assert!(report.checked > 500);
    assert_ok(&report);
}

fn smooth(dims: [usize; 3], phase: f64) -> Volume {
    Volume::from_fn(dims, |i, j, k| {
        let (x, y, z) = (i as f64 / 4.0, j as f64 / 5.0, k as f64 / 3.0);
        0.5 + 0.25 * (x + phase).sin() * (y - phase).cos() + 0.2 * (z + 0.3 * x).sin()
    })
    .unwrap()
}
