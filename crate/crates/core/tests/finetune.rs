use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use veco::checkpoint::Checkpoint;
use veco::data::SyntheticConfig;
use veco::finetune::*;
use veco::model::{is_cross_param, ModelConfig, Precision, Veco};

fn cfg(layers: usize, d: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        d_model: d,
        heads: 2,
        d_ff: 2 * d,
        vocab_size: 24,
        max_seq_len: 12,
        dropout: 0.0,
        init_std: 0.1,
        storage: Precision::F64,
        ..Default::default()
    }
}

fn syn() -> SyntheticConfig {
    SyntheticConfig {
        vocab_start: 5,
        vocab_size: 19,
        min_len: 3,
        max_len: 6,
        ..Default::default()
    }
}

#[test]
fn deleting_cross_attention_leaves_plugout_unchanged() {
    let model = Veco::init(cfg(2, 8), 3).unwrap();
    let full = Classifier::new(model.clone(), ClsMode::PlugOut, 3, 9).unwrap();
    let ckpt = Checkpoint::from_model(&model, 0);
    let stripped = ckpt.params.filtered(|n| !is_cross_param(n));
    assert!(stripped.len() < ckpt.params.len());
    let bare = Veco::from_store(model.config.clone(), stripped).unwrap();
    let bare = Classifier::new(bare, ClsMode::PlugOut, 3, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let n = rng.gen_range(1..8);
        let mut toks = vec![1];
        toks.extend((0..n).map(|_| rng.gen_range(5..24)));
        toks.push(2);
        assert_eq!(
            plugout_classify(&full, &toks).unwrap(),
            plugout_classify(&bare, &toks).unwrap()
        );
    }
}

#[test]
fn plugin_with_silent_cross_half_equals_plugout() {
    let model = Veco::init(cfg(2, 8), 4).unwrap();
    let out = Classifier::new(model.clone(), ClsMode::PlugOut, 3, 1).unwrap();
    let mut inn = Classifier::new(model, ClsMode::PlugIn, 3, 2).unwrap();
    for l in 0..2 {
        let id = inn
            .model
            .store
            .id(&format!("layers.{l}.cross_attn.output"))
            .unwrap();
        inn.model
            .store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let w_out = out.model.store.get(out.head.weight).clone();
    let w_in = inn.model.store.get_mut(inn.head.weight).data_mut();
    let d = 8;
    for r in 0..2 * d {
        for c in 0..3 {
            w_in[r * 3 + c] = if r < d { w_out.at(r, c) } else { 0.0 };
        }
    }
    let x = [1, 6, 9, 12, 2];
    let y = [1, 14, 7, 2];
    let (px, _) = plugin_classify(&inn, &x, Some(&y)).unwrap();
    let po = plugout_classify(&out, &x).unwrap();
    for (a, b) in px.iter().zip(&po) {
        assert!((a - b).abs() < 1e-12, "{px:?} vs {po:?}");
    }
}

#[test]
fn degenerate_pair_is_well_defined() {
    let c = Classifier::new(Veco::init(cfg(1, 8), 5).unwrap(), ClsMode::PlugIn, 2, 0).unwrap();
    let x = [1, 6, 7, 8, 2];
    let (px, py) = plugin_classify(&c, &x, Some(&x)).unwrap();
    assert_eq!(px, py);
    assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn parity_task_is_learned_in_300_steps() {
    let examples = parity_task(&syn(), 400, 12, 11);
    let mut clf =
        Classifier::new(Veco::init(cfg(1, 16), 6).unwrap(), ClsMode::PlugOut, 2, 0).unwrap();
    let before = classifier_accuracy(&clf, &examples).unwrap();
    let cfg = ClsConfig {
        steps: 300,
        ..Default::default()
    };
    train_classifier(&mut clf, &examples, &cfg, 1, |_| {}).unwrap();
    let after = classifier_accuracy(&clf, &examples).unwrap();
    assert!(after > 0.95, "accuracy {before} -> {after}");
}

#[test]
fn classifier_training_is_deterministic() {
    let examples = parity_task(&syn(), 50, 12, 1);
    let tc = ClsConfig {
        steps: 5,
        ..Default::default()
    };
    let run = || {
        let mut clf =
            Classifier::new(Veco::init(cfg(1, 8), 6).unwrap(), ClsMode::PlugOut, 2, 0).unwrap();
        train_classifier(&mut clf, &examples, &tc, 3, |_| {}).unwrap()
    };
    assert_eq!(run(), run());
}
