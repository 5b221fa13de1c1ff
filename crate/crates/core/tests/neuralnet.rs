mod common;

use common::{
    random_example, random_sequence, small_config, LOSS_DOMAIN_LOGITS, LOSS_DOMAIN_TARGETS,
    LOSS_LOGITS, LOSS_TARGETS,
};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tus_core::encoder::{FeatureLayout, InputSequence};
use tus_core::nn::{example_loss, Adam, Checkpoint, NetConfig, NetError, Network};
use tus_core::Ontology;

#[test]
fn gradients_match_central_differences() {
    let check = common::gradient_check();
    assert!(check.failures.is_empty(), "{:#?}", check.failures);
    for name in [
        "embed.cls",
        "embed.sep",
        "domain_head.weight",
        "layer1.norm2.gamma",
    ] {
        assert!(check.tensors.contains(name));
    }
    assert!(check.worst < 1e-4, "worst relative error {:e}", check.worst);
}

#[test]
fn eval_forward_is_deterministic_and_shaped() {
    let layout = FeatureLayout::new(5, 9, 6, 10);
    let net = Network::new(small_config(16, 4, 6), layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random_sequence(&mut rng, layout.width(), 1, 0);
    let a = net.forward(&seq).unwrap();
    let b = net.forward(&seq).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.slot_logits.dim(), (1, 6));
    assert_eq!(a.domain_logits.len(), 6);
}

#[test]
fn packed_forward_equals_single_forward() {
    let layout = FeatureLayout::new(5, 9, 6, 10);
    let net = Network::new(small_config(16, 4, 6), layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs: Vec<InputSequence> = (0..4)
        .map(|i| random_sequence(&mut rng, layout.width(), 1 + i, i))
        .collect();
    let refs: Vec<&InputSequence> = seqs.iter().collect();
    let packed = net.forward_many(&refs).unwrap();
    for (s, p) in seqs.iter().zip(&packed) {
        let single = net.forward(s).unwrap();
        let diff = (&single.slot_logits - &p.slot_logits).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}

#[test]
fn zero_weights_leave_output_bias() {
    let layout = FeatureLayout::new(5, 9, 6, 10);
    let mut net = Network::new(small_config(8, 2, 6), layout).unwrap();
    let bias = [0.5, -1.0, 2.0, 0.0, 0.25, -0.75];
    let out_b = net.params.id("slot_head.bias").unwrap();
    let out_w = net.params.id("slot_head.weight").unwrap();
    net.params.fill(out_w, 0.0);
    net.params.slice_mut(out_b).copy_from_slice(&bias);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_sequence(&mut rng, layout.width(), 5, 2);
    let out = net.forward(&seq).unwrap();
    for row in out.slot_logits.rows() {
        assert_eq!(row.to_vec(), bias.to_vec());
    }
}

#[test]
fn width_mismatch_is_an_error() {
    let layout = FeatureLayout::new(5, 9, 6, 10);
    let net = Network::new(small_config(8, 2, 6), layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_sequence(&mut rng, layout.width() - 1, 2, 0);
    assert!(matches!(net.forward(&seq), Err(NetError::Width { .. })));
}

#[test]
fn loss_matches_independent_calculator() {
    let (combined, uniform) = common::loss_oracle_errors();
    assert!(combined < 1e-6, "{combined:e}");
    let (logits, targets, dom_t) = (LOSS_LOGITS, LOSS_TARGETS, LOSS_DOMAIN_TARGETS);
    let d = ndarray::Array1::from(LOSS_DOMAIN_LOGITS.to_vec());
    let a = ndarray::Array2::from_shape_vec((2, 6), logits.concat()).unwrap();
    assert!(example_loss(&a, &targets, &d, &dom_t).is_ok());

    // Uniform logits: ln 6 per slot.
    assert!(uniform < 1e-12);
    assert!((6f64.ln() - 1.7918).abs() < 1e-4);

    // Saturated correct predictions: loss near zero.
    let mut sharp = ndarray::Array2::zeros((2, 6));
    sharp[[0, 3]] = 50.0;
    sharp[[1, 0]] = 50.0;
    let sat = ndarray::Array1::from(vec![50.0, -50.0]);
    let (sl, dl) = example_loss(&sharp, &targets, &sat, &dom_t).unwrap();
    assert!(sl + dl < 1e-10 && sl + dl >= 0.0);

    assert!(matches!(
        example_loss(&a, &[3, 6], &d, &dom_t),
        Err(NetError::Target(6))
    ));
}

#[test]
fn zero_learning_rate_keeps_params() {
    let layout = FeatureLayout::new(5, 9, 2, 4);
    let mut config = small_config(8, 2, 2);
    config.learning_rate = 0.0;
    let mut net = Network::new(config, layout).unwrap();
    let before = net.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ex = random_example(&mut rng, &layout, 3, 2);
    let mut adam = Adam::new(net.params.len());
    net.train_step(&[&ex], &mut adam, &mut rng).unwrap();
    assert_eq!(net.params, before);
}

#[test]
fn memorizes_a_single_example() {
    let layout = FeatureLayout::new(5, 9, 2, 4);
    // Default architecture, dropout off so the loss is deterministic.
    let config = NetConfig {
        dropout: 0.0,
        domain_head_dim: 2,
        seed: 17,
        ..NetConfig::default()
    };
    let mut net = Network::new(config, layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ex = random_example(&mut rng, &layout, 4, 3);
    let initial = net.loss(&[&ex]).unwrap().loss;
    let mut adam = Adam::new(net.params.len());
    for _ in 0..500 {
        net.train_step(&[&ex], &mut adam, &mut rng).unwrap();
    }
    let last = net.loss(&[&ex]).unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    assert!(last < initial / 10.0);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let o = Ontology::toy();
    let layout = FeatureLayout::for_ontology(&o, 6, 10);
    let mut config = small_config(16, 4, 6);
    config.dropout = 0.1;
    let mut net = Network::new(config, layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ex = random_example(&mut rng, &layout, 3, 2);
    let mut adam = Adam::new(net.params.len());
    net.train_step(&[&ex], &mut adam, &mut rng).unwrap();
    let before = net.forward(&ex.input).unwrap();

    let path = dir.path().join("net.ckpt");
    let ckpt = Checkpoint {
        network: net.clone(),
        ontology_fingerprint: o.fingerprint(),
        adam: Some(adam.clone()),
        rng: Some(rng.clone()),
        extra: serde_json::json!({"window": 3}),
    };
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, &o.fingerprint()).unwrap();
    assert_eq!(back.network.forward(&ex.input).unwrap(), before);
    assert_eq!(back.adam.as_ref().unwrap(), &adam);
    assert_eq!(
        back.rng.clone().unwrap().gen::<u64>(),
        rng.clone().gen::<u64>()
    );
    assert_eq!(back.extra["window"], 3);

    // Training continues identically from the restored state.
    let mut a = net.clone();
    let mut b = back.network.clone();
    let mut adam_b = back.adam.unwrap();
    let mut rng_b = back.rng.unwrap();
    a.train_step(&[&ex], &mut adam, &mut rng).unwrap();
    b.train_step(&[&ex], &mut adam_b, &mut rng_b).unwrap();
    assert_eq!(a.params, b.params);

    let smaller = o.without_domain("transit");
    assert!(matches!(
        Checkpoint::load(&path, &smaller.fingerprint()),
        Err(NetError::Fingerprint { .. })
    ));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    let broken = dir.path().join("broken.ckpt");
    std::fs::write(&broken, &bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(&broken, &o.fingerprint()),
        Err(NetError::Format(_))
    ));
    std::fs::write(&broken, b"not a checkpoint").unwrap();
    assert!(matches!(
        Checkpoint::load(&broken, &o.fingerprint()),
        Err(NetError::Format(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn output_shape_follows_current_turn(n_t in 1usize..=64, prev in 0usize..8, seed in 0u64..1000) {
        let layout = FeatureLayout::new(5, 9, 6, 10);
        let net = Network::new(small_config(8, 2, 6), layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_sequence(&mut rng, layout.width(), n_t, prev);
        let out = net.forward(&seq).unwrap();
        prop_assert_eq!(out.slot_logits.dim(), (n_t, 6));
        let probs = out.slot_probs();
        for row in probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
