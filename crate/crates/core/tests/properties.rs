//! Randomized invariants.

use cbt_core::eval::compute_metrics;
use cbt_core::numerics::{mean_center, standardize_columns, Tensor};
use cbt_core::ssl_bt::{bt_loss, cross_correlation, BtLossConfig};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..9, 1usize..6).prop_flat_map(|(b, d)| (matrix(b, d), matrix(b, d)))
}

proptest! {
    #[test]
    fn correlation_entries_are_bounded((za, zb) in pair()) {
        let c = cross_correlation(&za, &zb, 1e-5).unwrap();
        prop_assert!(c.within_bounds(1e-4));
    }

    #[test]
    fn loss_terms_nonnegative_and_monotone_in_mu((za, zb) in pair(), mu in 0.0f64..1.0) {
        let c = cross_correlation(&za, &zb, 1e-5).unwrap();
        let lo = bt_loss(&c, &BtLossConfig { mu, ..BtLossConfig::default() }).unwrap();
        let hi = bt_loss(&c, &BtLossConfig { mu: mu + 0.5, ..BtLossConfig::default() }).unwrap();
        prop_assert!(lo.invariance >= 0.0 && lo.redundancy >= 0.0);
        prop_assert!(hi.total >= lo.total);
    }

    #[test]
    fn correlation_ignores_row_order((za, zb) in pair(), shift in 1usize..8) {
        let b = za.shape()[0];
        let order: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let c1 = cross_correlation(&za, &zb, 1e-5).unwrap();
        let c2 = cross_correlation(&za.select_rows(&order).unwrap(), &zb.select_rows(&order).unwrap(), 1e-5).unwrap();
        for (x, y) in c1.matrix.data().iter().zip(c2.matrix.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn correlation_ignores_positive_column_scale((za, zb) in pair(), s in 0.5f64..4.0) {
        let c1 = cross_correlation(&za, &zb, 1e-5).unwrap();
        let c2 = cross_correlation(&za.map(|v| v * s), &zb, 1e-5).unwrap();
        // eps breaks exact invariance by roughly eps / (s * std) per entry
        let (b, d) = za.dims2().unwrap();
        let min_std = (0..d)
            .map(|j| {
                let mean = (0..b).map(|i| za.at2(i, j)).sum::<f64>() / b as f64;
                ((0..b).map(|i| (za.at2(i, j) - mean).powi(2)).sum::<f64>() / b as f64).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        let tol = 1e-9 + 4.0 * 1e-5 / min_std;
        for (x, y) in c1.matrix.data().iter().zip(c2.matrix.data()) {
            prop_assert!((x - y).abs() < tol, "{x} vs {y}, tol {tol}");
        }
    }

    #[test]
    fn centering_and_standardizing((za, _) in pair()) {
        let (b, d) = za.dims2().unwrap();
        let m = mean_center(&za).unwrap();
        let s = standardize_columns(&za, 1e-5).unwrap();
        for j in 0..d {
            let col: f64 = (0..b).map(|i| m.at2(i, j)).sum();
            prop_assert!(col.abs() < 1e-9);
            let var: f64 = (0..b).map(|i| s.at2(i, j).powi(2)).sum::<f64>() / b as f64;
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn metrics_are_unit_interval(labels in prop::collection::vec((0u8..4, 0u8..4), 1..100)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
        let m = compute_metrics(&pred, &truth, 4).unwrap();
        for v in [m.oa, m.miou, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let same = compute_metrics(&truth, &truth, 4).unwrap();
        prop_assert_eq!((same.oa, same.miou, same.f1), (1.0, 1.0, 1.0));
    }
}
