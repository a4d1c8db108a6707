mod common;

use cfl_core::data::{gen_blobs, Batch, Dataset};
use cfl_core::feedback::{AdapterInit, AdapterVariant, ProjectorSpec};
use cfl_core::training::{
    config_hash, evaluate, grad_check, trace_loss, train, LossKind, LossWeights, OptimizerSpec, TrainConfig,
};
use cfl_core::{refine, CflError, CflModel, Input, Mode, ModelSpec, Tensor};
use common::{adapter, mlp, random_init, random_input, rng, tiny, transformer};

fn dense_batch(seed: u64, rows: usize, cols: usize, classes: usize) -> Batch {
    let mut r = rng(seed);
    let x = random_input(&mut r, rows, cols);
    Batch::Dense {
        x,
        labels: (0..rows).map(|i| (i * 7 + seed as usize) % classes).collect(),
    }
}

fn blob_model(variant: AdapterVariant, projector: ProjectorSpec, seed: u64) -> CflModel {
    CflModel::new(ModelSpec {
        backbone: mlp(4, 6, 2, 2),
        projector,
        adapter: adapter(variant, random_init()),
        seed,
    })
    .unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    for variant in AdapterVariant::ALL {
        for t in 1..=3 {
            let m = tiny(variant, random_init(), 10 + t as u64);
            let batch = dense_batch(t as u64, 3, 3, 3);
            for mode in [Mode::Composed, Mode::Literal] {
                for (kind, weights) in [
                    (LossKind::CrossEntropy, LossWeights::final_only(t)),
                    (LossKind::SquaredError, LossWeights::new(vec![0.5; t + 1]).unwrap()),
                ] {
                    let g = grad_check(&m, &batch, &weights, kind, mode).unwrap();
                    assert!(g.checked > 0);
                    assert!(g.max_rel_error < 1e-4, "{variant:?} T={t} {mode} {kind:?}: {g:?}");
                }
            }
        }
    }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let m = CflModel::new(ModelSpec {
        backbone: transformer(5, 4, 3, 2),
        projector: ProjectorSpec::LowRank { d_z: 2, rank: 2 },
        adapter: adapter(AdapterVariant::TiedFilm, random_init()),
        seed: 2,
    })
    .unwrap();
    let batch = Batch::Tokens {
        seqs: vec![vec![0, 3, 1], vec![4, 2]],
        labels: vec![2, 0],
    };
    let g = grad_check(&m, &batch, &LossWeights::new(vec![1.0, 1.0]).unwrap(), LossKind::CrossEntropy, Mode::Composed)
        .unwrap();
    assert!(g.max_rel_error < 1e-4, "{g:?}");
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let data = gen_blobs(1, 100, 4, 4.0).unwrap();
    let mut m = blob_model(AdapterVariant::LowRankMerged, ProjectorSpec::LowRank { d_z: 2, rank: 2 }, 3);
    let before = m.params.clone();
    let mut cfg = TrainConfig::new(1, 50, 3);
    cfg.batch_size = 10;
    cfg.t_eval = vec![];
    let log = train(&mut m, &data, None, &cfg).unwrap();
    assert_eq!(log.steps, 500);
    for name in ["projector.basis", "adapter.base"] {
        let id = m.params.find(name).unwrap();
        assert_eq!(m.params.get(id), before.get(id), "{name} moved");
    }
    for name in ["projector.coef", "adapter.down", "adapter.up", "mlp.f1.weight"] {
        let id = m.params.find(name).unwrap();
        assert_ne!(m.params.get(id), before.get(id), "{name} did not move");
    }
}

#[test]
fn unfreezing_lets_basis_move() {
    let data = gen_blobs(1, 40, 4, 4.0).unwrap();
    let mut m = blob_model(AdapterVariant::LowRankMerged, ProjectorSpec::LowRank { d_z: 2, rank: 2 }, 3);
    let before = m.params.clone();
    let mut cfg = TrainConfig::new(1, 2, 3);
    cfg.freeze_projector_basis = false;
    cfg.freeze_merged_base = false;
    train(&mut m, &data, None, &cfg).unwrap();
    for name in ["projector.basis", "adapter.base"] {
        let id = m.params.find(name).unwrap();
        assert_ne!(m.params.get(id), before.get(id));
    }
}

#[test]
fn blobs_loss_decreases() {
    let all = gen_blobs(5, 300, 4, 4.0).unwrap();
    let (tr, ev) = all.split_at(200).unwrap();
    let mut m = blob_model(AdapterVariant::TiedFilm, ProjectorSpec::Full { d_z: 2 }, 5);
    let mut cfg = TrainConfig::new(1, 20, 5);
    cfg.t_eval = vec![0, 1];
    let log = train(&mut m, &tr, Some(&ev), &cfg).unwrap();
    let first: Vec<_> = log.rows_for("eval", 1).collect();
    assert_eq!(first.len(), 21);
    assert_eq!(first[0].epoch, 0);
    assert!(first[20].loss < first[0].loss);
    assert!(first[20].accuracy >= 0.95, "{}", first[20].accuracy);
    assert_eq!(log.rows_for("train", 0).count(), 21);
}

#[test]
fn training_is_deterministic() {
    let data = gen_blobs(2, 60, 4, 4.0).unwrap();
    let run = || {
        let mut m = blob_model(AdapterVariant::MergedCore, ProjectorSpec::Full { d_z: 2 }, 7);
        let log = train(&mut m, &data, None, &TrainConfig::new(2, 3, 7)).unwrap();
        (m.params, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for id in a.ids() {
        assert_eq!(a.get(id), b.get(id));
    }
}

#[test]
fn huge_step_reports_divergence() {
    let data = gen_blobs(3, 64, 4, 4.0).unwrap();
    let mut m = blob_model(AdapterVariant::MergedCore, ProjectorSpec::Full { d_z: 2 }, 1);
    let mut cfg = TrainConfig::new(1, 20, 1);
    cfg.optimizer = OptimizerSpec::Sgd { lr: 1e300 };
    cfg.t_eval = vec![];
    match train(&mut m, &data, None, &cfg) {
        Err(CflError::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn config_hash_and_log_csv() {
    let m = tiny(AdapterVariant::TiedFilm, AdapterInit::Identity, 0);
    let cfg = TrainConfig::new(1, 1, 0);
    let h = config_hash(&m, &cfg);
    assert_eq!(h.len(), 64);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(h, config_hash(&m, &cfg.clone()));
    assert_ne!(h, config_hash(&m, &TrainConfig::new(1, 1, 1)));

    let data = gen_blobs(0, 8, 3, 4.0).unwrap();
    let data = Dataset::new(data.inputs, data.labels.iter().map(|l| l + 1).collect(), 3).unwrap();
    let mut m = m;
    let log = train(&mut m, &data, Some(&data), &cfg).unwrap();
    assert_eq!(log.config_hash, h);
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("# seed=0 config_hash={h}"));
    assert_eq!(lines.next().unwrap(), "epoch,split,loss,accuracy,T,variant");
    assert_eq!(lines.count(), 4);
}

#[test]
fn trace_loss_matches_scalar_formula() {
    let m = tiny(AdapterVariant::MergedCore, random_init(), 4);
    let mut r = rng(4);
    let x = random_input(&mut r, 3, 3);
    let labels = [2, 0, 1];
    let t = refine(&m, Input::Dense(&x), 2, Mode::Composed).unwrap();
    let ce = |y: &Tensor<f64>| -> f64 {
        y.data()
            .chunks(3)
            .zip(&labels)
            .map(|(row, &l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
            .sum::<f64>()
            / 3.0
    };
    let se = |y: &Tensor<f64>| -> f64 {
        y.data()
            .chunks(3)
            .zip(&labels)
            .map(|(row, &l)| row.iter().enumerate().map(|(j, v)| (v - (j == l) as u8 as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 3.0
    };
    let w = LossWeights::new(vec![0.2, 0.0, 1.5]).unwrap();
    let want = 0.2 * ce(&t.outputs[0]) + 1.5 * ce(&t.outputs[2]);
    let got = trace_loss(&t.outputs, &labels, &w, LossKind::CrossEntropy).unwrap();
    assert!((got - want).abs() < 1e-12);
    let want = 0.2 * se(&t.outputs[0]) + 1.5 * se(&t.outputs[2]);
    let got = trace_loss(&t.outputs, &labels, &w, LossKind::SquaredError).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!(trace_loss(&t.outputs[..2], &labels, &w, LossKind::CrossEntropy).is_err());
}

#[test]
fn evaluate_counts_argmax_hits() {
    let m = tiny(AdapterVariant::TiedFilm, AdapterInit::Identity, 6);
    let mut r = rng(6);
    let x = random_input(&mut r, 20, 3);
    let y = refine(&m, Input::Dense(&x), 0, Mode::Composed).unwrap().outputs[0].clone();
    let labels: Vec<usize> = y
        .data()
        .chunks(3)
        .enumerate()
        .map(|(i, row)| {
            let best = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if i % 4 == 0 { (best + 1) % 3 } else { best }
        })
        .collect();
    let data = Dataset::new(cfl_core::data::Inputs::Dense(x), labels, 3).unwrap();
    let e = evaluate(&m, &data, 2, Mode::Composed, LossKind::CrossEntropy).unwrap();
    assert!((e.accuracy - 0.75).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(LossWeights::new(vec![]).is_err());
    assert!(LossWeights::new(vec![0.0, 0.0]).is_err());
    assert!(LossWeights::new(vec![1.0, -1.0]).is_err());
    assert!(LossWeights::new(vec![1.0, f64::NAN]).is_err());
    let mut cfg = TrainConfig::new(2, 1, 0);
    cfg.loss_weights = Some(LossWeights::new(vec![1.0, 1.0]).unwrap());
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::new(1, 1, 0);
    cfg.batch_size = 0;
    assert!(cfg.validate().is_err());
    cfg.batch_size = 4;
    cfg.optimizer = OptimizerSpec::Sgd { lr: -1.0 };
    assert!(cfg.validate().is_err());
    let empty = Dataset::new(cfl_core::data::Inputs::Tokens(vec![]), vec![], 3).unwrap();
    let mut m = tiny(AdapterVariant::TiedFilm, AdapterInit::Identity, 0);
    assert!(train(&mut m, &empty, None, &TrainConfig::new(1, 1, 0)).is_err());
}
