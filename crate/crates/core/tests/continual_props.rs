mod common;

use cbt_core::augment::epoch_batches;
use cbt_core::continual::{
    advance_snapshot, cbt_loss, expected_samples, fisher_diagonal, run_continual, run_continual_with, train_joint,
    train_task, CbtConfig, UnlabeledSet, FISHER_DRAW_BASE, FISHER_EPOCH_KEY,
};
use cbt_core::model::init_params;
use cbt_core::numerics::{finite_diff_grad, AdamConfig};
use cbt_core::ssl_bt::bt_loss_on_batch;
use cbt_core::Error;
use common::{small_cbt, task, tiny_conv, tiny_mlp};

/// Fisher from finite-difference gradients over the same batches and draws
/// the estimator documents.
fn fisher_oracle(
    params: &cbt_core::numerics::ParameterVector,
    model: &cbt_core::model::EncoderConfig,
    data: &UnlabeledSet,
    cfg: &CbtConfig,
) -> Vec<f64> {
    let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, FISHER_EPOCH_KEY).unwrap();
    let mut acc = vec![0.0; params.total_len()];
    for (bi, idx) in batches.iter().enumerate() {
        let x = data.images.select_rows(idx).unwrap();
        let ids: Vec<u64> = idx.iter().map(|&i| data.ids[i]).collect();
        let draw = FISHER_DRAW_BASE + bi as u64;
        let g = finite_diff_grad(params, 1e-5, |p| {
            Ok(bt_loss_on_batch(p, model, &x, &ids, &cfg.augment, &cfg.bt, draw)?.total)
        })
        .unwrap();
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a += v * v;
        }
    }
    acc.iter().map(|a| a / batches.len() as f64).collect()
}

#[test]
fn fisher_matches_finite_difference_oracle() {
    let model = tiny_mlp(3);
    let params = init_params(&model).unwrap();
    let cfg = small_cbt(0.01, 1, 4);
    // 18 samples at batch 4: four full batches, the trailing two dropped
    let data = task("toy", 18, 11);
    let f = fisher_diagonal(&params, &model, &data, &cfg).unwrap();
    assert_eq!(f.num_batches, 4);
    let oracle = fisher_oracle(&params, &model, &data, &cfg);
    let scale = oracle.iter().cloned().fold(0.0, f64::max);
    let worst = f
        .values
        .values()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "fisher relative error {worst:e}");
}

#[test]
fn fisher_is_nonnegative_on_random_instances() {
    for seed in 0..100 {
        let model = if seed % 2 == 0 { tiny_mlp(seed) } else { tiny_conv(seed) };
        let params = init_params(&model).unwrap();
        let cfg = CbtConfig {
            seed,
            ..small_cbt(0.01, 1, 3)
        };
        let data = task("r", 6, seed + 1000);
        let f = fisher_diagonal(&params, &model, &data, &cfg).unwrap();
        assert!(f.values.values().all(|v| v >= 0.0 && v.is_finite()), "seed {seed}");
    }
}

#[test]
fn fisher_needs_one_full_batch() {
    let model = tiny_mlp(0);
    let params = init_params(&model).unwrap();
    let r = fisher_diagonal(&params, &model, &task("tiny", 3, 0), &small_cbt(0.01, 1, 4));
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn penalty_off_is_bitwise_bt() {
    let model = tiny_conv(1);
    let params = init_params(&model).unwrap();
    let data = task("a", 8, 5);
    let cfg = small_cbt(0.5, 1, 4);
    let snap = advance_snapshot(&params, &model, &data, &cfg).unwrap();
    let moved = params.map(|v| v * 1.1);
    let ids: Vec<u64> = (0..8).collect();
    let bt = bt_loss_on_batch(&moved, &model, &data.images, &ids, &cfg.augment, &cfg.bt, 9).unwrap();
    let none = cbt_loss(&moved, &model, &data.images, &ids, &cfg, None, 9).unwrap();
    let zero = CbtConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let lam0 = cbt_loss(&moved, &model, &data.images, &ids, &zero, Some(&snap), 9).unwrap();
    assert_eq!(none.bt, bt);
    assert_eq!(none.total.to_bits(), bt.total.to_bits());
    assert_eq!(lam0.bt, bt);
    assert_eq!(lam0.total.to_bits(), bt.total.to_bits());
    assert_eq!(lam0.penalty, 0.0);
    let on = cbt_loss(&moved, &model, &data.images, &ids, &cfg, Some(&snap), 9).unwrap();
    assert_eq!(on.bt, bt);
    assert!(on.penalty > 0.0);
}

#[test]
fn single_task_continual_is_plain_training() {
    let model = tiny_mlp(2);
    let cfg = small_cbt(0.1, 3, 4);
    let data = task("only", 16, 3);
    let (ck, logs, snap) = run_continual(std::slice::from_ref(&data), &model, &cfg).unwrap();
    let (params, log) = train_task(&init_params(&model).unwrap(), &model, &data, &cfg, None).unwrap();
    assert_eq!(ck.params, params);
    assert_eq!(logs[0].epochs, log.epochs);
    assert_eq!(ck.provenance, ["only"]);
    assert_eq!(snap.theta_star, params);
    assert_eq!(snap.fisher, fisher_diagonal(&params, &model, &data, &cfg).unwrap());
}

#[test]
fn penalty_dominates_at_huge_lambda() {
    let model = tiny_mlp(4);
    let a = task("a", 32, 21);
    let b = task("b", 32, 22);
    let cfg = |lambda| CbtConfig {
        adam: AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        },
        ..small_cbt(lambda, 4, 8)
    };
    let start = init_params(&model).unwrap();
    let (end_a, _) = train_task(&start, &model, &a, &small_cbt(0.0, 2, 8), None).unwrap();
    let snap = advance_snapshot(&end_a, &model, &a, &cfg(0.0)).unwrap();
    let drift = |lambda: f64| {
        let (end_b, _) = train_task(&end_a, &model, &b, &cfg(lambda), Some(&snap)).unwrap();
        end_b
            .values()
            .zip(snap.theta_star.values())
            .zip(snap.fisher.values.values())
            .filter(|(_, f)| *f > 0.0)
            .map(|((t, s), _)| (t - s).abs())
            .fold(0.0, f64::max)
    };
    let held = drift(1e6);
    let free = drift(0.0);
    assert!(held < 1e-3, "max drift {held:e} with lambda 1e6");
    assert!(free > 1e-3, "control run should move further, got {free:e}");
}

#[test]
fn snapshot_is_replaced_not_accumulated() {
    let model = tiny_mlp(5);
    let cfg = small_cbt(0.1, 1, 4);
    let tasks = [task("t1", 8, 1), task("t2", 8, 2), task("t3", 8, 3)];
    let mut seen = Vec::new();
    let (ck, logs, last) = run_continual_with(&tasks, &model, &cfg, |s| {
        seen.push(s.snapshot.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 3);
    for (k, snap) in seen.iter().enumerate() {
        assert_eq!(snap.task_name, tasks[k].name);
        assert_eq!(snap.fisher.source_task, tasks[k].name);
    }
    // the final snapshot depends only on the final parameters and task 3
    assert_eq!(last, advance_snapshot(&ck.params, &model, &tasks[2], &cfg).unwrap());
    assert_eq!(ck.provenance, ["t1", "t2", "t3"]);
    // each step's count is independent of how many tasks preceded it
    for log in &logs {
        assert_eq!(log.processed_sample_count, expected_samples(8, 1, 4));
    }
}

#[test]
fn continual_runs_are_deterministic() {
    let model = tiny_conv(6);
    let cfg = small_cbt(0.01, 2, 4);
    let tasks = [task("a", 12, 1), task("b", 12, 2)];
    let one = run_continual(&tasks, &model, &cfg).unwrap();
    let two = run_continual(&tasks, &model, &cfg).unwrap();
    assert_eq!(one.0, two.0);
    assert_eq!(one.2, two.2);
    let epochs = |logs: &[cbt_core::continual::TrainLog]| logs.iter().map(|l| l.epochs.clone()).collect::<Vec<_>>();
    assert_eq!(epochs(&one.1), epochs(&two.1));
}

#[test]
fn joint_and_continual_sample_accounting() {
    let model = tiny_mlp(7);
    let (epochs, bs) = (1, 4);
    let cfg = small_cbt(0.01, epochs, bs);
    let tasks = [task("a", 96, 1), task("b", 96, 2), task("c", 96, 3)];
    let (_, logs, _) = run_continual(&tasks, &model, &cfg).unwrap();
    let mut cbt_total = 0;
    let mut joint_total = 0;
    for k in 1..=3 {
        let (ck, log) = train_joint(&tasks, k, &model, &cfg).unwrap();
        assert_eq!(log.processed_sample_count, expected_samples(96 * k, epochs, bs));
        assert_eq!(ck.provenance.len(), k);
        joint_total += log.processed_sample_count;
        cbt_total += logs[k - 1].processed_sample_count;
        assert_eq!(logs[k - 1].processed_sample_count, expected_samples(96, epochs, bs));
    }
    assert_eq!(cbt_total * 2, joint_total);
    assert!(train_joint(&tasks, 0, &model, &cfg).is_err());
    assert!(train_joint(&tasks, 4, &model, &cfg).is_err());
}

#[test]
fn union_keeps_sample_identities_distinct() {
    let a = task("a", 5, 1);
    let b = task("b", 3, 2);
    let u = UnlabeledSet::union("a+b", &[&a, &b]).unwrap();
    assert_eq!(u.len(), 8);
    let mut ids = u.ids.clone();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 8);
}

#[test]
fn divergent_training_reports_non_finite() {
    let model = tiny_mlp(8);
    let cfg = CbtConfig {
        adam: AdamConfig {
            lr: 1e308,
            ..AdamConfig::default()
        },
        ..small_cbt(0.0, 3, 4)
    };
    let r = train_task(&init_params(&model).unwrap(), &model, &task("a", 8, 1), &cfg, None);
    assert!(matches!(r, Err(Error::NonFinite(_))), "{r:?}");
}
