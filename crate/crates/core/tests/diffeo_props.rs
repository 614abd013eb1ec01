//! Properties of fitted maps: inversion, Jacobian, monotone fit error, determinism.

use chebds::demo;
use chebds::diffeo::{self, DiffeoModel, FitParams, KERNEL_MAX_SLOPE};
use chebds::pipeline::{self, FitOutcome};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spiral_fit(c: f64, mu: f64, beta: f64, layers: usize) -> FitOutcome {
    let demo = demo::unstable_spiral(c, 500).unwrap();
    pipeline::fit_demo(&demo, None, &FitParams::new(mu, beta, layers)).unwrap()
}

/// Uniform points in the bounding box of `points`, dilated by 50% per side.
fn dilated_box_samples(points: &DMatrix<f64>, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds: Vec<(f64, f64)> = points
        .column_iter()
        .map(|c| {
            let (lo, hi) = (c.min(), c.max());
            let pad = 0.5 * (hi - lo).max(1e-3);
            (lo - pad, hi + pad)
        })
        .collect();
    (0..count)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn layers_respect_the_invertibility_bound() {
    let out = spiral_fit(7.0, 0.9, 0.5, 175);
    for layer in &out.model.layers {
        let norm = layer.translation.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm * KERNEL_MAX_SLOPE / layer.width <= 0.9);
        assert!(layer.lipschitz() <= 0.9);
    }
}

#[test]
fn round_trips_in_the_dilated_box() {
    let out = spiral_fit(3.0, 0.8, 0.9, 75);
    let model = &out.model;
    for x in dilated_box_samples(&out.aligned, 1000, 1) {
        let back = model.inverse_default(&model.forward(&x)).unwrap();
        assert!(dist(&back, &x) <= 1e-8, "{x:?}");
    }
    for y in dilated_box_samples(&out.model.forward_rows(&out.aligned), 1000, 2) {
        let again = model.forward(&model.inverse_default(&y).unwrap());
        assert!(dist(&again, &y) <= 1e-8, "{y:?}");
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let out = spiral_fit(1.0, 0.6, 0.9, 50);
    let model = &out.model;
    let h = 1e-6;
    for x in dilated_box_samples(&out.aligned, 100, 3) {
        let jac = model.jacobian(&x);
        let mut fd = DMatrix::zeros(3, 3);
        for col in 0..3 {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[col] += h;
            minus[col] -= h;
            let (fp, fm) = (model.forward(&plus), model.forward(&minus));
            for row in 0..3 {
                fd[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        let scale = fd.amax();
        for (a, b) in jac.iter().zip(fd.iter()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(scale), "{jac} vs {fd}");
        }
    }
}

#[test]
fn jacobian_determinant_is_positive_on_training_points() {
    let out = spiral_fit(7.0, 0.9, 0.5, 175);
    for row in out.aligned.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        assert!(out.model.jacobian(&x).determinant() > 0.0);
    }
}

#[test]
fn fit_error_never_increases_with_budget() {
    let demo = demo::unstable_spiral(3.0, 200).unwrap();
    let emb = pipeline::embed(200, 3, None).unwrap();
    let aligned = emb.align_to_demo(&demo).unwrap();
    let mut previous = f64::INFINITY;
    let mut reference: Option<DiffeoModel> = None;
    for budget in 0..=30 {
        let mut params = FitParams::new(0.8, 0.9, budget);
        params.mse_stop = 0.0;
        let model = diffeo::fit(&aligned, &demo.points, &params).unwrap();
        assert!(model.normalized_mse <= previous);
        assert!(model.layer_mse.windows(2).all(|w| w[1] <= w[0]));
        if let Some(prev) = &reference {
            // the smaller fit is a prefix of the larger one
            assert_eq!(&model.layers[..prev.layers.len()], &prev.layers[..]);
        }
        previous = model.normalized_mse;
        reference = Some(model);
    }
}

#[test]
fn fitting_is_bit_for_bit_deterministic() {
    let a = spiral_fit(3.0, 0.8, 0.9, 75).model.to_json().unwrap();
    let b = spiral_fit(3.0, 0.8, 0.9, 75).model.to_json().unwrap();
    assert_eq!(a, b);
    let back = DiffeoModel::from_json(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
}

#[test]
fn batch_forward_equals_sequential() {
    let out = spiral_fit(1.0, 0.6, 0.9, 50);
    let batch = out.model.forward_rows(&out.aligned);
    for (i, row) in out.aligned.row_iter().enumerate() {
        let x: Vec<f64> = row.iter().copied().collect();
        let y = out.model.forward(&x);
        for j in 0..3 {
            assert_eq!(batch[(i, j)].to_bits(), y[j].to_bits());
        }
    }
}

#[test]
fn saved_model_loads_identically() {
    let out = spiral_fit(1.0, 0.6, 0.9, 50);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.model.save(&path).unwrap();
    assert_eq!(DiffeoModel::load(&path).unwrap(), out.model);
}
