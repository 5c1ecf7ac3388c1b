use ckl_core::methods::*;
use ckl_core::model::{loss_and_grads, output_logits, save_checkpoint, Architecture, LmItem, ModelKind, ModelState};
use ckl_core::optim::{Adam, AdamConfig};
use ckl_core::CklError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 60;

fn base(kind: ModelKind) -> ModelState {
    ModelState::init(Architecture::toy(kind, VOCAB), 1).unwrap()
}

fn with_method(kind: ModelKind, method: &str) -> ModelState {
    let mut m = base(kind);
    prepare_method(&mut m, &MethodConfig::from_name(method).unwrap(), 5).unwrap();
    m
}

fn random_items(kind: ModelKind, n: usize, seed: u64) -> Vec<LmItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tok = |len: usize| (0..len).map(|_| rng.random_range(7..VOCAB)).collect::<Vec<_>>();
    (0..n)
        .map(|_| match kind {
            ModelKind::EncoderDecoder => LmItem::Seq2Seq { src: tok(9), tgt: tok(3) },
            ModelKind::DecoderOnly => LmItem::Causal { tokens: tok(10), loss_from: 0 },
        })
        .collect()
}

#[test]
fn vanilla_family_freezes_nothing() {
    for kind in [ModelKind::EncoderDecoder, ModelKind::DecoderOnly] {
        for method in ["vanilla", "recadam", "mixreview"] {
            let m = with_method(kind, method);
            assert!(m.frozen().is_empty(), "{method}");
            let (trainable, total) = trainable_param_count(&m);
            assert_eq!(trainable, total);
            assert_eq!(total, base(kind).param_count());
        }
    }
}

#[test]
fn expansion_on_encoder_decoder_freezes_only_the_encoder() {
    for method in ["lora", "kadapter", "modular"] {
        let m = with_method(ModelKind::EncoderDecoder, method);
        for name in m.names() {
            let expect = name.starts_with("enc.");
            assert_eq!(m.is_frozen(name), expect, "{method}: {name}");
        }
        assert!(m.names().any(|n| n.starts_with("x0.")));
    }
}

#[test]
fn expansion_on_decoder_only_freezes_the_whole_base() {
    for method in ["lora", "kadapter"] {
        let m = with_method(ModelKind::DecoderOnly, method);
        for name in m.names() {
            assert_eq!(m.is_frozen(name), !name.starts_with("x0."), "{method}: {name}");
        }
    }
}

#[test]
fn initial_has_no_freeze_policy() {
    let mut m = base(ModelKind::EncoderDecoder);
    assert!(matches!(
        apply_freeze_policy(&mut m, &MethodConfig::Initial),
        Err(CklError::Config(_))
    ));
}

#[test]
fn lora_adds_two_r_d_per_projection() {
    let arch = Architecture {
        layers: 1,
        ..Architecture::toy(ModelKind::EncoderDecoder, VOCAB)
    };
    let mut m = ModelState::init(arch, 0).unwrap();
    let before = m.param_count();
    let cfg = LoraConfig {
        targets: vec!["q".into()],
        ..LoraConfig::default()
    };
    lora_wrap(&mut m, &cfg, 0).unwrap();
    assert_eq!(m.param_count() - before, 2 * 4 * 64);
    assert_eq!(m.param_count() - before, 512);
}

#[test]
fn lora_touches_only_query_and_value() {
    let m = with_method(ModelKind::EncoderDecoder, "lora");
    let wrapped: Vec<&str> = m.names().filter(|n| n.starts_with("x0.")).collect();
    assert_eq!(wrapped.len(), 2 * 2 * 2);
    assert!(wrapped.iter().all(|n| n.contains(".attn.q.") || n.contains(".attn.v.")));
    let base = base(ModelKind::EncoderDecoder);
    for name in base.names() {
        assert_eq!(base.param(name), m.param(name), "{name}");
    }
}

#[test]
fn lora_rank_must_be_below_width() {
    let mut m = base(ModelKind::EncoderDecoder);
    for rank in [64, 65] {
        let cfg = LoraConfig {
            rank,
            ..LoraConfig::default()
        };
        assert!(matches!(lora_wrap(&mut m, &cfg, 0), Err(CklError::Config(_))));
    }
    let cfg = LoraConfig {
        rank: 0,
        ..LoraConfig::default()
    };
    assert!(lora_wrap(&mut m, &cfg, 0).is_err());
}

#[test]
fn zero_initialized_expansions_preserve_the_function() {
    for (kind, method) in [
        (ModelKind::EncoderDecoder, "lora"),
        (ModelKind::EncoderDecoder, "kadapter"),
        (ModelKind::EncoderDecoder, "modular"),
        (ModelKind::DecoderOnly, "lora"),
        (ModelKind::DecoderOnly, "kadapter"),
    ] {
        let plain = base(kind);
        let wrapped = with_method(kind, method);
        for item in random_items(kind, 10, 3) {
            let a = output_logits(&plain, &item).unwrap();
            let b = output_logits(&wrapped, &item).unwrap();
            assert_eq!(a.data(), b.data(), "{method} on {kind:?}");
        }
    }
}

/// Closed-form parameter count of one pre-norm layer without cross-attention.
fn layer_params(d: usize, f: usize) -> usize {
    2 * 2 * d + 4 * d * d + d * f + f * d
}

#[test]
fn third_adapter_costs_one_layer() {
    let arch = Architecture {
        layers: 3,
        ..Architecture::toy(ModelKind::EncoderDecoder, VOCAB)
    };
    let count = |k: usize| {
        let mut m = ModelState::init(arch.clone(), 0).unwrap();
        let cfg = MethodConfig::Kadapter {
            kadapter: KAdapterConfig { k, layers: None },
        };
        prepare_method(&mut m, &cfg, 0).unwrap();
        trainable_param_count(&m).0
    };
    assert_eq!(count(3) - count(2), layer_params(64, 128));
}

#[test]
fn adapter_count_bounds() {
    let mut m = base(ModelKind::EncoderDecoder);
    let zero = KAdapterConfig { k: 0, layers: None };
    assert!(matches!(kadapter_attach(&mut m, &zero, 0), Err(CklError::Config(_))));
    let three = KAdapterConfig { k: 3, layers: None };
    assert!(matches!(kadapter_attach(&mut m, &three, 0), Err(CklError::Config(_))));
    assert_eq!(m.param_count(), base(ModelKind::EncoderDecoder).param_count());
}

#[test]
fn modular_projection_is_width_by_model_width() {
    let m = with_method(ModelKind::EncoderDecoder, "modular");
    let p = m.param("x0.modular.proj").unwrap();
    assert_eq!(p.numel(), 32 * 64);
    assert!(p.data().iter().all(|&v| v == 0.0));
}

#[test]
fn modular_needs_an_encoder() {
    let mut m = base(ModelKind::DecoderOnly);
    assert!(matches!(
        modular_attach(&mut m, &ModularConfig::default(), 0),
        Err(CklError::Config(_))
    ));
    assert!(prepare_method(&mut m, &MethodConfig::from_name("modular").unwrap(), 0).is_err());
}

#[test]
fn frozen_encoder_gets_no_gradients() {
    let m = with_method(ModelKind::EncoderDecoder, "modular");
    let (_, grads) = loss_and_grads(&m, &random_items(ModelKind::EncoderDecoder, 4, 1)).unwrap();
    assert!(grads.keys().all(|n| !n.starts_with("enc.")));
    assert!(grads.contains_key("x0.modular.proj"));
    assert!(grads.contains_key("dec.0.attn.q"));
}

#[test]
fn adapter_base_is_bit_identical_after_training() {
    let mut m = with_method(ModelKind::DecoderOnly, "kadapter");
    let before = m.clone();
    let items = random_items(ModelKind::DecoderOnly, 8, 2);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..100 {
        let (_, g) = loss_and_grads(&m, &items).unwrap();
        adam.step(&mut m, &g, 1e-3).unwrap();
    }
    for name in before.frozen() {
        assert_eq!(before.param(name), m.param(name), "{name}");
    }
    assert_ne!(before.param("x0.adapter.fuse"), m.param("x0.adapter.fuse"));
}

#[test]
fn quota_examples() {
    let cfg = MixReviewConfig::default();
    assert_eq!(mixreview_quota(0, 60, &cfg), 42);
    assert_eq!(mixreview_quota(1, 60, &cfg), 10);
    assert_eq!(mixreview_quota(2, 60, &cfg), 2);
    assert_eq!(mixreview_quota(10, 60, &cfg), 0);
}

#[test]
fn counts_agree_with_serialized_length() {
    for method in ["vanilla", "lora", "kadapter", "modular"] {
        let m = with_method(ModelKind::EncoderDecoder, method);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path(), Default::default()).unwrap();
        let bytes = std::fs::metadata(dir.path().join("params.bin")).unwrap().len() as usize;
        let (trainable, total) = trainable_param_count(&m);
        assert_eq!(bytes, 4 * total, "{method}");
        let frozen: usize = m.frozen().iter().map(|n| m.param(n).unwrap().numel()).sum();
        assert_eq!(trainable + frozen, total);
    }
}

#[test]
fn expansions_grow_the_model_and_regularizers_do_not() {
    let base_total = base(ModelKind::EncoderDecoder).param_count();
    for method in ["lora", "kadapter", "modular"] {
        assert!(with_method(ModelKind::EncoderDecoder, method).param_count() > base_total);
    }
    for method in ["vanilla", "recadam", "mixreview"] {
        assert_eq!(with_method(ModelKind::EncoderDecoder, method).param_count(), base_total);
    }
}

#[test]
fn second_phase_adds_fresh_parameters_and_freezes_the_first() {
    let mut m = with_method(ModelKind::EncoderDecoder, "modular");
    let one = m.param_count();
    prepare_method(&mut m, &MethodConfig::from_name("modular").unwrap(), 6).unwrap();
    let two = m.param_count();
    assert_eq!(two - one, one - base(ModelKind::EncoderDecoder).param_count());
    assert!(m.names().filter(|n| n.starts_with("x0.")).all(|n| m.is_frozen(n)));
    assert!(m.names().filter(|n| n.starts_with("x1.")).all(|n| !m.is_frozen(n)));
}

#[test]
fn config_invariants() {
    let bad = [
        r#"{"kind": "mixreview", "mixreview": {"mix_ratio": 0.0}}"#,
        r#"{"kind": "mixreview", "mixreview": {"mix_decay": 1.0}}"#,
        r#"{"kind": "recadam", "recadam": {"gamma": 0.0}}"#,
        r#"{"kind": "lora", "lora": {"rank": 0}}"#,
        r#"{"kind": "lora", "lora": {"targets": ["w1"]}}"#,
    ];
    for text in bad {
        let cfg: MethodConfig = serde_json::from_str(text).unwrap();
        assert!(cfg.validate().is_err(), "{text}");
    }
    assert!(serde_json::from_str::<MethodConfig>(r#"{"kind": "lora", "modular": {}}"#).is_err());
}

proptest! {
    #[test]
    fn quota_never_increases(epoch in 0usize..40, batch in 1usize..500, ratio in 0.01f64..=1.0, decay in 1.01f64..10.0) {
        let cfg = MixReviewConfig { mix_ratio: ratio, mix_decay: decay };
        prop_assert!(mixreview_quota(epoch, batch, &cfg) >= mixreview_quota(epoch + 1, batch, &cfg));
        prop_assert!(mixreview_quota(epoch, batch, &cfg) <= batch);
    }
}
