use veco::checkpoint::*;
use veco::data::*;
use veco::model::{is_cross_param, ModelConfig, Veco};
use veco::objective::{ca_mlm_loss, Objective};
use veco::params::Binder;
use veco::tensor::{Tape, Tensor};
use veco::training::*;

fn model_cfg(d: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: d,
        heads: 4,
        d_ff: 4 * d,
        vocab_size: 64,
        max_seq_len,
        dropout: 0.1,
        ..Default::default()
    }
}

fn syn(transform: Transform) -> SyntheticConfig {
    SyntheticConfig {
        transform,
        vocab_size: 30,
        branching: 2,
        pairs: 400,
        ..Default::default()
    }
}

fn small_corpora() -> PretrainCorpora {
    synthetic_pretrain_corpora(&syn(Transform::Cipher { seed: 7 }), 10, 6, 12).unwrap()
}

fn train_cfg(phase1: u64, phase2: u64) -> PretrainConfig {
    PretrainConfig {
        phase1_steps: phase1,
        phase2_steps: phase2,
        warmup_steps: 2,
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        batch: BatchConfig {
            batch_size: 4,
            max_seq_len: 12,
            vocab_size: 64,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn phase_one_touches_only_cross_attention() {
    let corpora = small_corpora();
    let init = Veco::init(model_cfg(16, 12), 1).unwrap();
    let mut t = Pretrainer::new(init.clone(), train_cfg(6, 2), &corpora, 4).unwrap();
    let rows = t.run(&corpora, 6, |_, _| Ok(())).unwrap();
    assert!(rows.iter().all(|r| r.phase == 1));
    let mut cross_changed = false;
    for (id, name, value) in t.model.store.iter() {
        let before = init.store.get(id);
        if is_cross_param(name) {
            cross_changed |= before != value;
        } else {
            assert_eq!(before, value, "{name} moved in phase 1");
        }
    }
    assert!(cross_changed);
    let row = t.step(&corpora).unwrap();
    assert_eq!(row.phase, 2);
    assert_ne!(
        t.model.store.by_name("embed.tokens"),
        init.store.by_name("embed.tokens")
    );
}

#[test]
fn fixed_batch_is_overfit() {
    let corpora = small_corpora();
    let mut model = Veco::init(
        ModelConfig {
            dropout: 0.0,
            ..model_cfg(32, 12)
        },
        2,
    )
    .unwrap();
    let cfg = train_cfg(0, 1);
    let mut st = IteratorState::new(5, &corpora);
    let batch = loop {
        let b = next_batch(&corpora, &cfg.batch, &mut st).unwrap();
        if b.kind == BatchKind::Bili {
            break b.pair;
        }
    };
    let adam_cfg = AdamConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut adam = AdamState::new(&model.store);
    let mut losses = vec![];
    for _ in 0..200 {
        let mut tape = Tape::new();
        let mut fwd = veco::model::Forward::eval(&mut tape, &model, Binder::all(&model.store));
        let l = ca_mlm_loss(&mut fwd, &batch, Objective::CaMlm)
            .unwrap()
            .total;
        losses.push(tape.value(l).item());
        apply_update(
            &mut model.store,
            tape,
            l,
            &mut adam,
            &adam_cfg,
            adam_cfg.lr,
            model.config.storage,
        )
        .unwrap();
    }
    assert!(
        losses[199] < 0.5 * losses[0],
        "{} -> {}",
        losses[0],
        losses[199]
    );
}

#[test]
fn same_seed_same_metrics() {
    let corpora = small_corpora();
    let run = || {
        let m = Veco::init(model_cfg(16, 12), 3).unwrap();
        let (ckpt, rows) = pretrain(m, &corpora, train_cfg(2, 4), 11).unwrap();
        (
            rows.iter().map(MetricsRow::to_tsv).collect::<Vec<_>>(),
            ckpt.params,
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpora = small_corpora();
    let cfg = train_cfg(3, 7);
    let m = Veco::init(model_cfg(16, 12), 7).unwrap();
    let mut straight = Pretrainer::new(m.clone(), cfg.clone(), &corpora, 21).unwrap();
    let full = straight.run(&corpora, 10, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = Pretrainer::new(m, cfg.clone(), &corpora, 21).unwrap();
    let mut rows = first.run(&corpora, 5, |_, _| Ok(())).unwrap();
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    drop(first);
    let mut second = Pretrainer::from_checkpoint(load_checkpoint(&path).unwrap(), cfg).unwrap();
    assert_eq!(second.step_count(), 5);
    rows.extend(second.run(&corpora, 5, |_, _| Ok(())).unwrap());

    assert_eq!(rows.len(), full.len());
    for (a, b) in rows.iter().zip(&full) {
        assert_eq!((a.step, a.phase, a.kind), (b.step, b.phase, b.kind));
        for (x, y) in a
            .terms
            .iter()
            .chain([&a.tlm, &a.total, &a.lr, &a.grad_norm])
            .zip(
                b.terms
                    .iter()
                    .chain([&b.tlm, &b.total, &b.lr, &b.grad_norm]),
            )
        {
            assert!((x - y).abs() <= 1e-12, "step {}: {x} vs {y}", a.step);
        }
    }
    assert_eq!(second.model.store, straight.model.store);
    assert_eq!(second.adam, straight.adam);
}

#[test]
fn checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = Veco::init(model_cfg(16, 12), 1).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Checkpoint::from_model(&m, 0), &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().params, m.store);
    assert!(load_checkpoint_for(&path, &m.config).is_ok());

    let other = ModelConfig {
        d_model: 32,
        ..m.config.clone()
    };
    match load_checkpoint_for(&path, &other) {
        Err(CheckpointError::ConfigMismatch(msg)) => assert!(msg.contains("d_model"), "{msg}"),
        r => panic!("expected config mismatch, got {r:?}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    assert!(load_checkpoint(&cut).is_err());
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.ckpt")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn averaging() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        num_layers: 1,
        ..model_cfg(8, 8)
    };
    let m = Veco::init(cfg.clone(), 1).unwrap();
    let a = dir.path().join("a.ckpt");
    save_checkpoint(&Checkpoint::from_model(&m, 0), &a).unwrap();
    assert_eq!(average_checkpoints(&[&a]).unwrap().params, m.store);
    assert_eq!(average_checkpoints(&[&a, &a]).unwrap().params, m.store);

    let fill = |v: f64, path: &std::path::Path| {
        let mut mm = m.clone();
        let ids: Vec<_> = mm.store.ids().collect();
        for id in ids {
            let shape = mm.store.get(id).shape().to_vec();
            *mm.store.get_mut(id) = Tensor::filled(&shape, v);
        }
        save_checkpoint(&Checkpoint::from_model(&mm, 0), path).unwrap();
    };
    let (z, t) = (dir.path().join("z.ckpt"), dir.path().join("t.ckpt"));
    fill(0.0, &z);
    fill(2.0, &t);
    let avg = average_checkpoints(&[&z, &t]).unwrap();
    assert!(avg
        .params
        .iter()
        .all(|(_, _, x)| x.data().iter().all(|&v| v == 1.0)));

    let wide = dir.path().join("w.ckpt");
    let mw = Veco::init(ModelConfig { d_model: 16, ..cfg }, 1).unwrap();
    save_checkpoint(&Checkpoint::from_model(&mw, 0), &wide).unwrap();
    assert!(matches!(
        average_checkpoints(&[&a, &wide]),
        Err(CheckpointError::ConfigMismatch(_))
    ));
    assert!(average_checkpoints(&[] as &[&std::path::Path]).is_err());
}

#[test]
fn reverse_corpus_loss_halves_in_500_joint_steps() {
    let syn = syn(Transform::Reverse);
    let corpora = synthetic_pretrain_corpora(&syn, 100, 10, 16).unwrap();
    let mut mc = model_cfg(64, 16);
    mc.dropout = 0.0;
    let cfg = PretrainConfig {
        phase1_steps: 0,
        phase2_steps: 500,
        warmup_steps: 50,
        adam: AdamConfig {
            lr: 5e-3,
            ..Default::default()
        },
        batch: BatchConfig {
            batch_size: 16,
            max_seq_len: 16,
            vocab_size: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut st = IteratorState::new(999, &corpora);
    let eval: Vec<PairBatch> = (0..8)
        .map(|_| next_batch(&corpora, &cfg.batch, &mut st).unwrap().pair)
        .collect();
    let m = Veco::init(mc, 1).unwrap();
    let before: f64 = evaluate_pair_loss(&m, &eval, Objective::CaMlm)
        .unwrap()
        .iter()
        .sum();
    let (ckpt, _) = pretrain(m, &corpora, cfg, 3).unwrap();
    let after: f64 = evaluate_pair_loss(&ckpt.model().unwrap(), &eval, Objective::CaMlm)
        .unwrap()
        .iter()
        .sum();
    assert!(after < 0.5 * before, "{before} -> {after}");
}
