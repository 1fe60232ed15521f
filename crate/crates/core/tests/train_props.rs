mod common;

use distillforge::model::{CellType, Seq2SeqConfig};
use distillforge::synth::{SyntheticTask, SyntheticTaskSpec};
use distillforge::tensor::{seeded_rng, Tensor};
use distillforge::textproc::Codec;
use distillforge::train::{
    combined_loss, lr_schedule_step, nll_loss, train_loop, word_kd_loss, AdamConfig, TrainConfig,
    TrainState,
};
use proptest::prelude::*;

fn log_softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, v) = x.dims2().unwrap();
    let mut out = Vec::with_capacity(n * v);
    for r in 0..n {
        let row = x.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|a| a - lse));
    }
    Tensor::new(vec![n, v], out).unwrap()
}

proptest! {
    #[test]
    fn nll_equals_one_hot_word_kd(seed in any::<u64>(), n in 1usize..6, v in 2usize..9) {
        let lp = log_softmax_rows(&common::random_tensor(&mut seeded_rng(seed, &[]), &[n, v]));
        // Avoid PAD so every row counts for both losses.
        let targets: Vec<usize> = (0..n).map(|i| 1 + (i * 7 + seed as usize % 5) % (v - 1)).collect();
        let mut onehot = vec![0.0; n * v];
        for (r, &t) in targets.iter().enumerate() {
            onehot[r * v + t] = 1.0;
        }
        let onehot = Tensor::new(vec![n, v], onehot).unwrap();
        let a = nll_loss(&lp, &targets, 0.0).unwrap();
        let b = word_kd_loss(&lp, &onehot, &vec![true; n]).unwrap();
        prop_assert_eq!(a.tokens, b.tokens);
        prop_assert!((a.sum - b.sum).abs() <= 1e-6);
    }

    #[test]
    fn combined_loss_is_linear(nll in 0.0f64..20.0, kd in 0.0f64..20.0, alpha in 0.0f64..=1.0) {
        let l1 = combined_loss(nll, kd, 1.0).unwrap();
        let l0 = combined_loss(nll, kd, 0.0).unwrap();
        prop_assert_eq!(combined_loss(nll, kd, alpha).unwrap(), alpha * l1 + (1.0 - alpha) * l0);
    }

    #[test]
    fn lr_never_increases(metrics in proptest::collection::vec((0u8..4, 1.0f64..50.0), 1..40)) {
        let params = distillforge::model::init_params(&Seq2SeqConfig { embed_size: 2, hidden_size: 2, ..Seq2SeqConfig::small() }, 6, 6, 0).unwrap();
        let mut s = TrainState::new(params, AdamConfig::default(), 0.0003, 0.7, 8);
        let mut last = s.lr;
        for (m, ppl) in metrics {
            lr_schedule_step(&mut s, m as f64, ppl);
            prop_assert!(s.lr <= last);
            prop_assert!((s.lr - 0.0003 * 0.7f64.powi(s.reductions as i32)).abs() < 1e-15);
            let best = s.history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(s.best.as_ref().unwrap().metric, best);
            last = s.lr;
        }
    }
}

#[test]
fn mixing_weight_outside_unit_interval_is_rejected() {
    assert!(combined_loss(1.0, 1.0, 1.5).is_err());
    assert!(combined_loss(1.0, 1.0, -0.1).is_err());
}

#[test]
fn budget_is_independent_of_dataset_size() {
    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let model = Seq2SeqConfig {
        bpe_merges: 20,
        embed_size: 8,
        hidden_size: 8,
        cell_type: CellType::Gru,
        ..Seq2SeqConfig::small()
    };
    let config = TrainConfig {
        batch_size: 200,
        checkpoint_every: 7,
        max_checkpoints: 3,
        initial_lr: 0.003,
        ..TrainConfig::default()
    };
    let valid = task.sample("valid", 2, 10);
    let updates: Vec<Vec<u64>> = [40, 400]
        .iter()
        .map(|&n| {
            let train = task.sample("train", 1, n);
            let codec = Codec::fit(&train, model.bpe_merges, 1).unwrap();
            let out = train_loop(&model, &config, &codec, &train, &valid, None).unwrap();
            out.metrics.iter().map(|m| m.updates).collect()
        })
        .collect();
    assert_eq!(updates[0], vec![7, 14, 21]);
    assert_eq!(updates[0], updates[1]);
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let train = task.sample("train", 1, 200);
    let valid = task.sample("valid", 2, 20);
    let model = Seq2SeqConfig {
        bpe_merges: 50,
        embed_size: 16,
        hidden_size: 16,
        ..Seq2SeqConfig::small()
    };
    let config = TrainConfig {
        batch_size: 300,
        checkpoint_every: 20,
        max_checkpoints: 3,
        initial_lr: 0.005,
        ..TrainConfig::default()
    };
    let codec = Codec::fit(&train, model.bpe_merges, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train_loop(&model, &config, &codec, &train, &valid, Some(dir.path())).unwrap();
    let b = train_loop(&model, &config, &codec, &train, &valid, None).unwrap();
    assert!(a.metrics.last().unwrap().train_loss < a.metrics[0].train_loss);
    assert_eq!(
        distillforge::train::metrics_tsv(&a.metrics, false),
        distillforge::train::metrics_tsv(&b.metrics, false)
    );
    let loaded = distillforge::train::Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.params.flatten(), a.checkpoint.params.flatten());
    assert!(dir.path().join("metrics.tsv").is_file());
}
