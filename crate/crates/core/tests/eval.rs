use std::sync::OnceLock;

use ckl_core::eval::*;
use ckl_core::model::{Architecture, ModelKind, ModelState};
use ckl_core::runner::{pretrain, RunConfig};
use ckl_core::world::*;
use ckl_core::CklError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exact_match_examples() {
    assert_eq!(exact_match("Rome", "rome"), 1);
    assert_eq!(exact_match("Saudi Arabia", "Russia"), 0);
    assert_eq!(exact_match("Florence.", "Florence"), 1);
    assert_eq!(exact_match("  saudi   arabia ", "Saudi Arabia"), 1);
}

#[test]
fn token_f1_examples() {
    assert_eq!(token_f1("Florence", "Florence"), 1.0);
    // precision 2/3, recall 1
    assert!((token_f1("Andrew M. Cuomo", "Andrew Cuomo") - 0.8).abs() < 1e-12);
    assert_eq!(token_f1("Saudi Arabia", "Russia"), 0.0);
    assert_eq!(token_f1("", ""), 1.0);
    assert_eq!(token_f1("", "Rome"), 0.0);
    assert_eq!(token_f1("Rome", ""), 0.0);
}

#[test]
fn precision_at_k_examples() {
    for k in P_AT_K {
        assert_eq!(precision_at_k(1, k), 1);
    }
    assert_eq!(precision_at_k(7, 5), 0);
    assert_eq!(precision_at_k(7, 10), 1);
    assert_eq!(precision_at_k(100, 100), 1);
    assert_eq!(precision_at_k(101, 100), 0);
}

#[test]
#[should_panic]
fn rank_zero_is_rejected() {
    precision_at_k(0, 1);
}

#[test]
fn dataset_p_at_k_is_monotone_over_random_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ranks: Vec<usize> = (0..1000).map(|_| rng.random_range(1..=2000)).collect();
    let preds = vec![String::new(); ranks.len()];
    let golds = vec!["x".to_string(); ranks.len()];
    let score = TaskScore::from_parts("invariant", "d0", &preds, &golds, &ranks);
    let values: Vec<f64> = P_AT_K.iter().map(|k| score.p_at_k[k]).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]), "{values:?}");
    for (k, v) in P_AT_K.iter().zip(&values) {
        let oracle = ranks.iter().filter(|&&r| r <= *k).count() as f64 / 10.0;
        assert!((v - oracle).abs() < 1e-9);
    }
}

#[test]
fn single_token_p_at_1_equals_em() {
    let preds: Vec<String> = ["ent1", "ent2", "ent9"].map(String::from).to_vec();
    let golds: Vec<String> = ["ent1", "ent3", "ent9"].map(String::from).to_vec();
    // Greedy output is the argmax, so a correct single token has rank 1.
    let score = TaskScore::from_parts("invariant", "d0", &preds, &golds, &[1, 4, 1]);
    assert_eq!(score.p_at_k[&1], score.em);
    assert_eq!(score.n, 3);
}

fn punctuate(s: &str, i: usize) -> String {
    let marks = [".", ",", "!", "?", ";", ":"];
    format!("{}{}{}", marks[i % 6], s.to_uppercase(), marks[(i / 6) % 6])
}

proptest! {
    #[test]
    fn em_and_f1_ignore_case_and_punctuation(a in "[a-z]{1,6}( [a-z]{1,6}){0,3}", b in "[a-z]{1,6}( [a-z]{1,6}){0,3}", i in 0usize..36) {
        prop_assert_eq!(exact_match(&punctuate(&a, i), &b), exact_match(&a, &b));
        prop_assert_eq!(exact_match(&a, &punctuate(&b, i)), exact_match(&a, &b));
        prop_assert_eq!(token_f1(&punctuate(&a, i), &b), token_f1(&a, &b));
        prop_assert_eq!(token_f1(&a, &punctuate(&b, i)), token_f1(&a, &b));
    }

    #[test]
    fn f1_is_bounded_and_reflexive(a in "[a-z ]{0,20}", b in "[a-z ]{0,20}") {
        let f = token_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        if !a.trim().is_empty() {
            prop_assert_eq!(token_f1(&a, &a), 1.0);
        }
    }

    #[test]
    fn p_at_k_is_monotone_in_k(rank in 1usize..500) {
        let values: Vec<u32> = P_AT_K.iter().map(|&k| precision_at_k(rank, k)).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }
}

fn default_world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| generate_world(&WorldSpec::default()).unwrap())
}

fn small_spec() -> WorldSpec {
    WorldSpec {
        entities: 120,
        relations: 6,
        n_invariant: 150,
        n_updated: 20,
        n_new: 20,
        n_tuning: 30,
        ..WorldSpec::default()
    }
}

/// A small world pretrained until its corpus loss is below 0.01.
fn memorized() -> &'static (World, ModelState) {
    static FIXTURE: OnceLock<(World, ModelState)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let world = generate_world(&small_spec()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.phases[0].epochs = 30;
        cfg.phases[0].lr = 3e-3;
        let (model, losses) = pretrain(&world, &cfg).unwrap();
        let last = *losses.last().unwrap();
        assert!(last < 0.01, "fixture did not converge: {losses:?}");
        (world, model)
    })
}

#[test]
fn untrained_model_is_at_chance() {
    let world = default_world();
    let model = ModelState::init(Architecture::toy(ModelKind::EncoderDecoder, world.vocab.len()), 3).unwrap();
    let probes = world.build_probes(TaskTag::Invariant);
    assert!(probes.probes.len() >= 500);
    let out = probe_model(&model, &world.vocab, &probes, "d0", 4).unwrap();
    assert!(out.score.em < 1.0, "{}", out.score.em);
}

#[test]
fn memorized_world_scores_high_on_invariant_probes() {
    let (world, model) = memorized();
    let out = probe_model(model, &world.vocab, &world.build_probes(TaskTag::Invariant), "d0", 4).unwrap();
    assert!(out.score.em > 95.0, "{}", out.score.em);
    assert!(out.score.f1 >= out.score.em);
}

#[test]
fn probing_is_deterministic_and_read_only() {
    let (world, model) = memorized();
    let before = model.clone();
    let probes = world.build_probes(TaskTag::Updated);
    let a = probe_model(model, &world.vocab, &probes, "d0", 10).unwrap();
    let b = probe_model(model, &world.vocab, &probes, "d0", 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(&before, model);
    let values: Vec<f64> = P_AT_K.iter().map(|k| a.score.p_at_k[k]).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let (world, _) = memorized();
    let model = ModelState::init(Architecture::toy(ModelKind::EncoderDecoder, world.vocab.len() + 1), 0).unwrap();
    let err = probe_model(&model, &world.vocab, &world.build_probes(TaskTag::New), "d0", 4).unwrap_err();
    assert!(matches!(err, CklError::VocabularyMismatch(_)));
}

#[test]
fn scores_serialize_with_named_fields() {
    let (world, model) = memorized();
    let out = probe_model(model, &world.vocab, &world.build_probes(TaskTag::New), "d0", 10).unwrap();
    let json: serde_json::Value = serde_json::to_value(&out.score).unwrap();
    for key in ["task", "stage", "em", "f1", "p_at_k", "n"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["task"], "new");
}

fn decoder_only(world: &World) -> ModelState {
    ModelState::init(Architecture::toy(ModelKind::DecoderOnly, world.vocab.len()), 1).unwrap()
}

#[test]
fn light_tune_requires_one_epoch() {
    let (world, _) = memorized();
    let mut model = decoder_only(world);
    let cfg = LightTuneConfig {
        epochs: 2,
        ..LightTuneConfig::default()
    };
    let tuning = world.build_probes(TaskTag::Tuning);
    assert!(matches!(light_tune(&mut model, &world.vocab, &tuning, &[], &cfg), Err(CklError::Config(_))));
}

#[test]
fn light_tune_on_nothing_changes_nothing() {
    let (world, _) = memorized();
    let mut model = decoder_only(world);
    let before = model.clone();
    let empty = ProbeSet {
        task: TaskTag::Tuning,
        probes: Vec::new(),
    };
    light_tune(&mut model, &world.vocab, &empty, &[], &LightTuneConfig::default()).unwrap();
    assert_eq!(model, before);
}

#[test]
fn light_tune_rejects_overlapping_facts() {
    let (world, _) = memorized();
    let mut model = decoder_only(world);
    let invariant = world.build_probes(TaskTag::Invariant);
    let leaky = ProbeSet {
        task: TaskTag::Tuning,
        probes: invariant.probes[..3].to_vec(),
    };
    let err = light_tune(&mut model, &world.vocab, &leaky, &[&invariant], &LightTuneConfig::default()).unwrap_err();
    match err {
        CklError::TuningOverlap(ids) => assert_eq!(ids.len(), 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tuning_facts_are_disjoint_from_every_probe_task() {
    let world = default_world();
    let tuning: std::collections::HashSet<usize> =
        world.build_probes(TaskTag::Tuning).probes.iter().map(|p| p.fact_id).collect();
    assert!(!tuning.is_empty());
    for task in [TaskTag::Invariant, TaskTag::Updated, TaskTag::New, TaskTag::NewEasy] {
        assert!(world.build_probes(task).probes.iter().all(|p| !tuning.contains(&p.fact_id)), "{task:?}");
    }
}

#[test]
fn light_tuned_answers_respect_the_format() {
    let (world, _) = memorized();
    let mut model = decoder_only(world);
    let tuning = world.build_probes(TaskTag::Tuning);
    let held_out = world.build_probes(TaskTag::New);
    light_tune(&mut model, &world.vocab, &tuning, &[&held_out], &LightTuneConfig::default()).unwrap();
    let out = probe_model(&model, &world.vocab, &held_out, "d0", 3).unwrap();
    for p in &out.predictions {
        assert!(p.split_whitespace().count() <= 3, "{p}");
        assert!(!p.contains('<'), "{p}");
    }
}

#[test]
fn traces_grow_one_entry_per_epoch() {
    let (world, model) = memorized();
    let probes = world.build_probes(TaskTag::Invariant);
    let mut traces = select_tracked(&probes, 10, 7);
    assert_eq!(traces.len(), 10);
    assert_eq!(traces, select_tracked(&probes, 10, 7));
    for epoch in 1..=4 {
        track_predictions(model, &world.vocab, &mut traces, epoch, 4).unwrap();
    }
    assert!(traces.iter().all(|t| t.predictions.len() == 4));
    assert!(track_predictions(model, &world.vocab, &mut traces, 4, 4).is_err());

    // The last entry agrees with a direct probe of the same facts.
    let ids: std::collections::HashSet<usize> = traces.iter().map(|t| t.probe_id).collect();
    let subset = ProbeSet {
        task: TaskTag::Invariant,
        probes: probes.probes.iter().filter(|p| ids.contains(&p.fact_id)).cloned().collect(),
    };
    let out = probe_model(model, &world.vocab, &subset, "d0", 4).unwrap();
    let hits = traces
        .iter()
        .filter(|t| exact_match(t.predictions.last().unwrap(), &t.gold) == 1)
        .count();
    assert!((out.score.em - hits as f64 * 10.0).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    ckl_core::io::write_jsonl(&path, &traces).unwrap();
    let back: Vec<PredictionTrace> = ckl_core::io::read_jsonl(&path).unwrap();
    assert_eq!(back, traces);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 10);
}
