//! Randomised invariants.

use chebds::demo::{self, Demonstration};
use chebds::diffeo::{DiffeoLayer, DiffeoModel, KERNEL_MAX_SLOPE};
use chebds::eval;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn sequence(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), 1..max_len)
}

fn matrix(rows: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-5.0..5.0f64, n * dim).prop_map(move |v| DMatrix::from_row_slice(n, dim, &v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dtw_is_symmetric(a in sequence(150, 3), b in sequence(150, 3), radius in 0usize..3) {
        let ab = eval::fast_dtw(&a, &b, radius).unwrap();
        let ba = eval::fast_dtw(&b, &a, radius).unwrap();
        prop_assert!((ab.raw - ba.raw).abs() <= 1e-12 * ab.raw.max(1.0));
        prop_assert!((ab.normalized - ba.normalized).abs() <= 1e-12 * ab.normalized.max(1.0));
    }

    #[test]
    fn dtw_of_a_sequence_with_itself_is_zero(a in sequence(300, 2), radius in 0usize..3) {
        let s = eval::fast_dtw(&a, &a, radius).unwrap();
        prop_assert_eq!(s.raw, 0.0);
        prop_assert_eq!(s.normalized, 0.0);
    }

    #[test]
    fn fast_dtw_never_beats_exact(a in sequence(120, 2), b in sequence(120, 2)) {
        let fast = eval::fast_dtw(&a, &b, 1).unwrap();
        let (exact, _) = eval::exact_dtw(&a, &b).unwrap();
        prop_assert!(fast.raw >= exact - 1e-9 * exact.max(1.0));
    }

    #[test]
    fn mse_is_scale_invariant(a in matrix(3..40, 3), shift in -1.0..1.0f64, s in 0.1..20.0f64) {
        let b = a.map(|v| v + shift * v.sin());
        prop_assume!(eval::diameter(&a) > 1e-3);
        let base = eval::normalized_mse(&b, &a).unwrap();
        let scaled = eval::normalized_mse(&(&b * s), &(&a * s)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1e-300));
    }

    #[test]
    fn csv_round_trip_is_exact(points in matrix(3..30, 4), dt in prop::option::of(1e-4..1.0f64)) {
        let mut d = Demonstration::new(points, "prop").unwrap();
        d.dt = dt;
        d.velocities = Some(d.points.map(|v| v * 0.5 - 1.0 / 3.0));
        let mut buf = Vec::new();
        demo::write_csv(&d, &mut buf).unwrap();
        let back = demo::read_csv(buf.as_slice(), "x").unwrap();
        prop_assert_eq!(back.points, d.points);
        prop_assert_eq!(back.velocities, d.velocities);
        prop_assert_eq!(back.label, "prop");
    }

    #[test]
    fn resample_keeps_endpoints(points in matrix(2..50, 3), n_out in 2usize..120) {
        let r = demo::resample_uniform(&points, n_out).unwrap();
        prop_assert_eq!(r.nrows(), n_out);
        prop_assert_eq!(r.row(0), points.row(0));
        prop_assert_eq!(r.row(n_out - 1), points.row(points.nrows() - 1));
    }

    #[test]
    fn perturbed_starts_stay_in_the_ball(radius in 1e-3..2.0f64, count in 1usize..40, seed: u64) {
        let center = [0.0, 0.0, 1.0];
        let pts = demo::perturb_starts(&center, radius, count, seed).unwrap();
        prop_assert_eq!(pts.len(), count);
        for p in &pts {
            let d: f64 = p.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= radius);
        }
        prop_assert_eq!(demo::perturb_starts(&center, radius, count, seed).unwrap(), pts);
    }

    #[test]
    fn bounded_layers_invert(
        centers in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 2), 1..20),
        dirs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 2), 20),
        widths in prop::collection::vec(0.01..1.0f64, 20),
        x in prop::collection::vec(-3.0..3.0f64, 2),
    ) {
        let mu = 0.9;
        let mut model = DiffeoModel::identity(2);
        for (i, c) in centers.iter().enumerate() {
            let norm = dirs[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let scale = mu * widths[i] / KERNEL_MAX_SLOPE / norm;
            let v: Vec<f64> = dirs[i].iter().map(|d| d * scale).collect();
            model.layers.push(DiffeoLayer::new(c.clone(), v, widths[i]).unwrap());
        }
        let back = model.inverse_default(&model.forward(&x)).unwrap();
        let err: f64 = back.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8, "err {}", err);
        prop_assert!(model.jacobian(&x).determinant() > 0.0);
    }
}
