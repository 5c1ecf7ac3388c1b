//! End-to-end acceptance suite. Every test prints one `criterion N: PASS|FAIL`
//! line with the measured quantities before asserting.

mod common;

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ckl_autodiff::{check_gradients, AttentionSpec, Graph, NodeId, Tensor};
use ckl_core::eval::{exact_match, precision_at_k, token_f1, TaskScore, P_AT_K};
use ckl_core::fuar::{fuar, FuarResult, FuarSpec, ScoreTable};
use ckl_core::methods::{mixreview_quota, prepare_method, MethodConfig, MixReviewConfig};
use ckl_core::model::{loss_and_grads, output_logits, Architecture, LmItem, ModelKind, ModelState};
use ckl_core::optim::{lr_at_step, recadam_lambda, Adam, AdamConfig, LrSchedule, RecAdamConfig};
use ckl_core::runner::*;
use ckl_core::world::{generate_world, Phase, World, WorldSpec};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes straight to the process stdout so the lines show up even when
/// the harness captures test output.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        writeln!(std::io::stdout().lock(), $($arg)*).unwrap();
    }};
}

fn verdict(n: usize, pass: bool, detail: &str) {
    say!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn check_block(
    spec: &FuarSpec,
    table: ScoreTable,
    published: f64,
    label: &str,
    misses: &mut Vec<String>,
) -> f64 {
    let value = match fuar(spec, &table).unwrap() {
        FuarResult::Value(v) => v,
        FuarResult::NoGain => f64::INFINITY,
    };
    if (value - published).abs() > 0.005 {
        misses.push(format!("{label}: computed {value:.4}, published {published:.2}"));
    }
    value
}

#[test]
fn criterion_01_fuar_main_block() {
    let start = Instant::now();
    let mut misses = Vec::new();
    for (i, (row, published)) in MAIN.iter().enumerate() {
        check_block(&main_spec(), main_scores(*row), *published, METHODS[i], &mut misses);
    }
    let elapsed = start.elapsed();
    let pass = misses.is_empty() && elapsed < Duration::from_secs(1);
    verdict(1, pass, &format!("7 rows, mismatches {misses:?}, {elapsed:?}"));
}

#[test]
fn criterion_02_fuar_small_blocks() {
    let start = Instant::now();
    let mut misses = Vec::new();
    for (i, (row, published)) in SMALL.iter().enumerate() {
        let label = format!("Small {}", METHODS[i]);
        check_block(&small_spec(), small_scores(*row), *published, &label, &mut misses);
    }
    for (i, (row, published)) in SMALL_P1.iter().enumerate() {
        let label = format!("Small-P1 {}", METHODS[i]);
        check_block(&p1_spec(), p1_scores(*row), *published, &label, &mut misses);
    }
    for (i, (row, published)) in SMALL_P1_P2.iter().enumerate() {
        let label = format!("P1->P2 {}", METHODS[i]);
        check_block(&p1_p2_spec(), p1_p2_scores(*row), *published, &label, &mut misses);
    }
    let elapsed = start.elapsed();
    let pass = misses.is_empty() && elapsed < Duration::from_secs(1);
    verdict(2, pass, &format!("21 rows, mismatches {misses:?}, {elapsed:?}"));
}

// ---- criterion 3: gradient checks over the blocks the models are built from

struct Block {
    g: Graph<f64>,
    rng: ChaCha8Rng,
}

impl Block {
    fn new(seed: u64) -> Self {
        Self {
            g: Graph::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-1.0..1.0) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn input(&mut self, shape: &[usize]) -> NodeId {
        let t = self.tensor(shape, 1.0);
        self.g.leaf(t)
    }

    fn param(&mut self, shape: &[usize]) -> NodeId {
        let scale = 1.0 / (shape[0] as f64).sqrt();
        let t = self.tensor(shape, scale).with_requires_grad(true);
        self.g.leaf(t)
    }

    /// Fixed random weighting so every output element gets its own gradient.
    fn reduce(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let w = self.input(shape);
        let p = self.g.mul(x, w);
        self.g.sum(p)
    }

    fn layer_norm(&mut self, x: NodeId, d: usize) -> NodeId {
        let gamma = self.param(&[d]);
        let beta = self.param(&[d]);
        self.g.layer_norm(x, gamma, beta)
    }

    fn attention(&mut self, xq: NodeId, xkv: NodeId, d: usize, spec: AttentionSpec) -> NodeId {
        let (wq, wk, wv, wo) = (self.param(&[d, d]), self.param(&[d, d]), self.param(&[d, d]), self.param(&[d, d]));
        let q = self.g.matmul(xq, wq);
        let k = self.g.matmul(xkv, wk);
        let v = self.g.matmul(xkv, wv);
        let a = self.g.attention(q, k, v, spec);
        self.g.matmul(a, wo)
    }

    /// Pre-norm layer with optional cross-attention, as in the toy models.
    fn layer(&mut self, x: NodeId, d: usize, f: usize, spec: &AttentionSpec, cross: Option<(NodeId, &AttentionSpec)>) -> NodeId {
        let h = self.layer_norm(x, d);
        let a = self.attention(h, h, d, spec.clone());
        let mut x = self.g.add(x, a);
        if let Some((mem, cspec)) = cross {
            let h = self.layer_norm(x, d);
            let a = self.attention(h, mem, d, cspec.clone());
            x = self.g.add(x, a);
        }
        let h = self.layer_norm(x, d);
        let w1 = self.param(&[d, f]);
        let w2 = self.param(&[f, d]);
        let u = self.g.matmul(h, w1);
        let u = self.g.relu(u);
        let u = self.g.matmul(u, w2);
        self.g.add(x, u)
    }
}

const B: usize = 2;
const L: usize = 3;
const D: usize = 4;
const F: usize = 6;

fn self_spec(causal: bool) -> AttentionSpec {
    AttentionSpec {
        batch: B,
        q_len: L,
        kv_len: L,
        heads: 2,
        causal,
        key_valid: Some(vec![true, true, false, true, true, true]),
    }
}

fn gradient_block(name: &str, seed: u64) -> Graph<f64> {
    let mut b = Block::new(seed);
    let rows = B * L;
    match name {
        "linear" => {
            let x = b.input(&[rows, D]);
            let w = b.param(&[D, F]);
            let bias = b.param(&[F]);
            let y = b.g.matmul(x, w);
            let y = b.g.add_bias(y, bias);
            b.reduce(y, &[rows, F]);
        }
        "layer_norm" => {
            let x = b.param(&[rows, D]);
            let y = b.layer_norm(x, D);
            b.reduce(y, &[rows, D]);
        }
        "softmax" => {
            let x = b.param(&[rows, D]);
            let y = b.g.softmax(x);
            b.reduce(y, &[rows, D]);
        }
        "self_attention" | "causal_attention" => {
            let x = b.param(&[rows, D]);
            let y = b.attention(x, x, D, self_spec(name == "causal_attention"));
            b.reduce(y, &[rows, D]);
        }
        "feed_forward" | "encoder_layer" | "decoder_layer" => {
            let x = b.param(&[rows, D]);
            let y = match name {
                "feed_forward" => {
                    let w1 = b.param(&[D, F]);
                    let w2 = b.param(&[F, D]);
                    let u = b.g.matmul(x, w1);
                    let u = b.g.relu(u);
                    b.g.matmul(u, w2)
                }
                "encoder_layer" => b.layer(x, D, F, &self_spec(false), None),
                _ => {
                    let mem = b.param(&[B * 4, D]);
                    let cross = AttentionSpec {
                        batch: B,
                        q_len: L,
                        kv_len: 4,
                        heads: 2,
                        causal: false,
                        key_valid: Some(vec![true, true, true, false, true, true, true, true]),
                    };
                    b.layer(x, D, F, &self_spec(true), Some((mem, &cross)))
                }
            };
            b.reduce(y, &[rows, D]);
        }
        "lora_linear" => {
            let x = b.param(&[rows, D]);
            let w = b.param(&[D, D]);
            let a = b.param(&[D, 2]);
            let up = b.param(&[2, D]);
            let base = b.g.matmul(x, w);
            let down = b.g.matmul(x, a);
            let delta = b.g.matmul(down, up);
            let delta = b.g.scale(delta, 0.5);
            let y = b.g.add(base, delta);
            b.reduce(y, &[rows, D]);
        }
        "adapter_chain" => {
            let x = b.param(&[rows, D]);
            let h0 = b.layer(x, D, F, &self_spec(false), None);
            let h1 = b.layer(h0, D, F, &self_spec(false), None);
            let a0 = b.layer(h0, D, F, &self_spec(false), None);
            let joined = b.g.add(h1, a0);
            let a1 = b.layer(joined, D, F, &self_spec(false), None);
            let fuse = b.param(&[D, D]);
            let fused = b.g.matmul(a1, fuse);
            let y = b.g.add(h1, fused);
            b.reduce(y, &[rows, D]);
        }
        "modular_path" => {
            let x = b.param(&[rows, D]);
            let main = b.layer(x, D, F, &self_spec(false), None);
            let w_in = b.param(&[D, 3]);
            let small = b.g.matmul(x, w_in);
            let spec = AttentionSpec {
                heads: 1,
                ..self_spec(false)
            };
            let small = b.layer(small, 3, 5, &spec, None);
            let small = b.layer_norm(small, 3);
            let proj = b.param(&[3, D]);
            let p = b.g.matmul(small, proj);
            let y = b.g.add(main, p);
            b.reduce(y, &[rows, D]);
        }
        "embedding_head_loss" => {
            let tok = b.param(&[7, D]);
            let pos = b.param(&[L, D]);
            let t = b.g.embedding(tok, vec![1, 4, 6, 2, 2, 0]);
            let p = b.g.embedding(pos, vec![0, 1, 2, 0, 1, 2]);
            let x = b.g.add(t, p);
            let h = b.layer_norm(x, D);
            let head = b.param(&[D, 7]);
            let logits = b.g.matmul(h, head);
            b.g.cross_entropy(logits, vec![Some(4), Some(6), None, Some(2), Some(0), Some(5)]);
        }
        other => panic!("unknown block {other}"),
    }
    b.g
}

const BLOCKS: [&str; 12] = [
    "linear",
    "layer_norm",
    "softmax",
    "self_attention",
    "causal_attention",
    "feed_forward",
    "encoder_layer",
    "decoder_layer",
    "lora_linear",
    "adapter_chain",
    "modular_path",
    "embedding_head_loss",
];

#[test]
fn criterion_03_gradient_checks() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for name in BLOCKS {
        for seed in 0..10 {
            let mut g = gradient_block(name, seed);
            let report = check_gradients(&mut g, 1e-3);
            worst = worst.max(report.worst());
            if !report.passed() {
                failures.push(format!("{name}/{seed}: {:.2e} {:?}", report.worst(), report.error));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    verdict(
        3,
        pass,
        &format!("{} blocks x 10 seeds, worst rel err {worst:.2e}, failures {failures:?}, {elapsed:?}", BLOCKS.len()),
    );
}

// ---- criteria 4 and 5: expansion contracts on the toy model

const TOY_VOCAB: usize = 120;

fn random_items(n: usize, seed: u64) -> Vec<LmItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..20);
            let src = (0..len).map(|_| rng.random_range(7..TOY_VOCAB)).collect();
            let tlen = rng.random_range(2..5);
            let tgt = (0..tlen).map(|_| rng.random_range(1..TOY_VOCAB)).collect();
            LmItem::Seq2Seq { src, tgt }
        })
        .collect()
}

fn toy() -> ModelState {
    ModelState::init(Architecture::toy(ModelKind::EncoderDecoder, TOY_VOCAB), 11).unwrap()
}

#[test]
fn criterion_04_function_preserving_init() {
    let base = toy();
    let inputs = random_items(100, 4);
    let mut detail = Vec::new();
    let mut pass = true;
    for method in ["lora", "modular"] {
        let mut wrapped = base.clone();
        prepare_method(&mut wrapped, &MethodConfig::from_name(method).unwrap(), 4).unwrap();
        let differing = inputs
            .iter()
            .filter(|item| output_logits(&base, item).unwrap().data() != output_logits(&wrapped, item).unwrap().data())
            .count();
        pass &= differing == 0;
        detail.push(format!("{method}: {differing}/100 inputs differ"));
    }
    verdict(4, pass, &detail.join(", "));
}

#[test]
fn criterion_05_freeze_contract() {
    let items = random_items(8, 5);
    let mut detail = Vec::new();
    let mut pass = true;
    for method in ["lora", "kadapter", "modular"] {
        let mut model = toy();
        prepare_method(&mut model, &MethodConfig::from_name(method).unwrap(), 5).unwrap();
        let snapshot = model.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..500 {
            let (_, grads) = loss_and_grads(&model, &items).unwrap();
            adam.step(&mut model, &grads, 1e-3).unwrap();
        }
        let changed = snapshot
            .frozen()
            .iter()
            .filter(|n| snapshot.param(n) != model.param(n))
            .count();
        let trained = model.trainable_names().filter(|n| snapshot.param(n) != model.param(n)).count();
        pass &= changed == 0 && trained > 0 && !snapshot.frozen().is_empty();
        detail.push(format!(
            "{method}: {changed} of {} frozen tensors changed, {trained} trainable tensors moved",
            snapshot.frozen().len()
        ));
    }
    verdict(5, pass, &detail.join("; "));
}

#[test]
fn criterion_06_schedules() {
    let total = 1000;
    let s = LrSchedule::new(1e-3, total);
    let lrs = [lr_at_step(0, &s).unwrap(), lr_at_step(total / 10, &s).unwrap(), lr_at_step(total, &s).unwrap()];
    let cfg = MixReviewConfig::default();
    let quotas = [mixreview_quota(0, 60, &cfg), mixreview_quota(1, 60, &cfg), mixreview_quota(2, 60, &cfg)];
    let rec = RecAdamConfig::default();
    let lambda = recadam_lambda(rec.t0, &rec);
    let pass = lrs == [0.0, 1e-3, 5e-4] && quotas == [42, 10, 2] && (lambda - 0.5).abs() < 1e-12;
    verdict(6, pass, &format!("lr {lrs:?}, quota {quotas:?}, lambda(t0) {lambda}"));
}

// ---- criteria 7 and 8: desk-scale runs on the default world

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_METHODS: [&str; 5] = ["vanilla", "mixreview", "lora", "kadapter", "modular"];

#[derive(Debug, Clone)]
struct MethodOutcome {
    initial: BTreeMap<String, f64>,
    last: BTreeMap<String, f64>,
    fuar: Option<f64>,
}

impl MethodOutcome {
    fn gain(&self, task: &str) -> f64 {
        self.last[task] - self.initial[task]
    }
}

struct Desk {
    world: World,
    pretrained: Vec<ModelState>,
    runs: Vec<BTreeMap<String, MethodOutcome>>,
    elapsed: Duration,
}

fn outcome(out: &RunOutput) -> MethodOutcome {
    let em = |scores: Vec<&TaskScore>| scores.into_iter().map(|s| (s.task.clone(), s.em)).collect();
    let tasks: Vec<String> = out.ledger.initial.iter().map(|s| s.task.clone()).collect();
    MethodOutcome {
        initial: em(out.ledger.initial.iter().collect()),
        last: em(tasks.iter().filter_map(|t| out.ledger.final_score(t)).collect()),
        fuar: out.ledger.fuar_value("il-ul-nl").and_then(FuarResult::value),
    }
}

fn desk_seed(world: &World, seed: u64) -> (ModelState, BTreeMap<String, MethodOutcome>) {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let (pretrained, _) = pretrain(world, &cfg).unwrap();
    let mut runs = BTreeMap::new();
    for method in DESK_METHODS {
        let phase = PhaseConfig::continual(Phase::D1, MethodConfig::from_name(method).unwrap());
        let out = run_multi_phase(world, &pretrained, &[phase], &cfg.probe, seed, &RunOptions::default()).unwrap();
        assert!(out.completed, "{method} seed {seed}: {:?}", out.ledger.aborted);
        runs.insert(method.to_string(), outcome(&out));
    }
    (pretrained, runs)
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let world = generate_world(&WorldSpec::default()).unwrap();
        // One model per thread; each run stays single-threaded and seed-determined.
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = SEEDS.iter().map(|&seed| {
                let world = &world;
                s.spawn(move || desk_seed(world, seed))
            }).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let (pretrained, runs) = results.into_iter().unzip();
        Desk {
            world,
            pretrained,
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn criterion_07_desk_reproduction() {
    let d = desk();
    let med = |method: &str, f: &dyn Fn(&MethodOutcome) -> f64| median(d.runs.iter().map(|r| f(&r[method])).collect());
    let med_fuar = |method: &str| med(method, &|o| o.fuar.unwrap_or(f64::INFINITY));

    for (seed, runs) in SEEDS.iter().zip(&d.runs) {
        for (method, o) in runs {
            say!(
                "  seed {seed} {method:9} IL {:6.2} -> {:6.2}  UL {:6.2} -> {:6.2}  NL {:6.2} -> {:6.2}  FUAR {}",
                o.initial["invariant"],
                o.last["invariant"],
                o.initial["updated"],
                o.last["updated"],
                o.initial["new"],
                o.last["new"],
                o.fuar.map_or("no_gain".to_string(), |v| format!("{v:.3}"))
            );
        }
    }

    let il = med("vanilla", &|o| o.gain("invariant"));
    let ul = med("vanilla", &|o| o.gain("updated"));
    let nl = med("vanilla", &|o| o.gain("new"));
    let a = il < 0.0 && ul > 0.0 && nl > 0.0;

    let vanilla_fuar = med_fuar("vanilla");
    let expansion: Vec<(&str, f64)> = ["lora", "kadapter", "modular"].iter().map(|&m| (m, med_fuar(m))).collect();
    let b = expansion.iter().all(|&(_, f)| f < vanilla_fuar);

    let mix_ul = med("mixreview", &|o| o.gain("updated"));
    let mix_nl = med("mixreview", &|o| o.gain("new"));
    let c = mix_ul < ul && mix_nl < nl;

    let within_budget = d.elapsed < Duration::from_secs(45 * 60);
    let detail = format!(
        "(a) {} vanilla median IL {il:+.2} UL {ul:+.2} NL {nl:+.2}; \
         (b) {} median FUAR vanilla {vanilla_fuar:.3} vs {expansion:?}; \
         (c) {} mixreview UL {mix_ul:+.2} NL {mix_nl:+.2} vs vanilla UL {ul:+.2} NL {nl:+.2}; \
         runtime {:.1} min",
        if a { "ok" } else { "FAILED" },
        if b { "ok" } else { "FAILED" },
        if c { "ok" } else { "FAILED" },
        d.elapsed.as_secs_f64() / 60.0
    );
    verdict(7, a && b && c && within_budget, &detail);
}

#[test]
fn criterion_08_repetition() {
    let d = desk();
    let base = PhaseConfig::continual(Phase::D1, MethodConfig::Vanilla);
    let cfg = RepetitionConfig::default();
    let rows: Vec<RepetitionRow> = std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS
            .iter()
            .zip(&d.pretrained)
            .map(|(&seed, model)| {
                let (base, cfg) = (&base, &cfg);
                s.spawn(move || repetition_study(&d.world, model, base, cfg, seed).unwrap())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });

    let dir = std::env::temp_dir().join("ckl-acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("repetition.csv");
    write_repetition_table(&path, &rows).unwrap();
    say!("  repetition table ({}):", path.display());
    for line in std::fs::read_to_string(&path).unwrap().lines() {
        say!("    {line}");
    }

    let wins = SEEDS
        .iter()
        .filter(|&&seed| {
            let get = |run: &str| rows.iter().find(|r| r.seed == seed && r.run == run).unwrap().il_forgetting;
            get("small") >= get("full")
        })
        .count();
    let equal_steps = rows.chunks(2).all(|pair| pair[0].steps.abs_diff(pair[1].steps) <= pair[0].steps / 50);
    verdict(
        8,
        wins >= 2 && equal_steps,
        &format!("small-corpus run forgot at least as much IL in {wins} of 3 seeds, equal steps {equal_steps}"),
    );
}

// ---- criterion 9: determinism and resume

fn tiny_world() -> World {
    generate_world(&WorldSpec {
        entities: 80,
        relations: 5,
        n_invariant: 100,
        n_updated: 20,
        n_new: 20,
        n_tuning: 20,
        ..WorldSpec::default()
    })
    .unwrap()
}

#[test]
fn criterion_09_determinism_and_resume() {
    let world = tiny_world();
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.phases[0].epochs = 2;
    let (model, _) = pretrain(&world, &cfg).unwrap();
    let (again, _) = pretrain(&world, &cfg).unwrap();
    let phases = [PhaseConfig {
        epochs: 3,
        batch_size: 32,
        ..PhaseConfig::continual(Phase::D1, MethodConfig::from_name("mixreview").unwrap())
    }];
    let run_in = |dir: &std::path::Path, stop: Option<usize>, resume: bool| {
        run_multi_phase(
            &world,
            &model,
            &phases,
            &cfg.probe,
            3,
            &RunOptions {
                out_dir: Some(dir.to_path_buf()),
                stop_after_epochs: stop,
                resume,
                save_state: true,
                ..RunOptions::default()
            },
        )
        .unwrap()
    };
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run_in(&a, None, false);
    run_in(&b, None, false);
    let ledger = |dir: &std::path::Path| std::fs::read(dir.join(LEDGER_FILE)).unwrap();
    let identical = ledger(&a) == ledger(&b) && model == again;

    run_in(&c, Some(1), false);
    let resumed = run_in(&c, None, true);
    let strip = |bytes: Vec<u8>| String::from_utf8(bytes).unwrap();
    let resume_equal = strip(ledger(&c)) == strip(ledger(&a))
        && std::fs::read(c.join(TRACES_FILE)).unwrap() == std::fs::read(a.join(TRACES_FILE)).unwrap()
        && resumed.completed;
    let (ckpt_a, _) = ckl_core::model::load_checkpoint(&a.join("ckpt-d1")).unwrap();
    let (ckpt_c, _) = ckl_core::model::load_checkpoint(&c.join("ckpt-d1")).unwrap();
    let model_equal = ckpt_a == ckpt_c;
    verdict(
        9,
        identical && resume_equal && model_equal,
        &format!("reruns byte-identical {identical}, resumed ledger equal {resume_equal}, resumed checkpoint equal {model_equal}"),
    );
}

// ---- criterion 10: metric unit suite

#[test]
fn criterion_10_metric_suite() {
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            failures.push(name);
        }
    };
    check(exact_match("Rome", "rome") == 1, "em case");
    check(exact_match("Saudi Arabia", "Russia") == 0, "em mismatch");
    check(exact_match("Florence.", "Florence") == 1, "em punctuation");
    check(token_f1("Florence", "Florence") == 1.0, "f1 identical");
    check((token_f1("Andrew M. Cuomo", "Andrew Cuomo") - 0.8).abs() < 1e-12, "f1 0.8 hand case");
    check(token_f1("Saudi Arabia", "Russia") == 0.0, "f1 disjoint");
    check(token_f1("", "") == 1.0 && token_f1("", "x") == 0.0, "f1 empty");
    check(P_AT_K.iter().all(|&k| precision_at_k(1, k) == 1), "p@k rank 1");
    check(precision_at_k(7, 5) == 0 && precision_at_k(7, 10) == 1, "p@k rank 7");
    check(precision_at_k(100, 100) == 1, "p@k boundary");

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ranks: Vec<usize> = (0..1000).map(|_| rng.random_range(1..=TOY_VOCAB * 10)).collect();
    let monotone_each = ranks
        .iter()
        .all(|&r| P_AT_K.windows(2).all(|w| precision_at_k(r, w[0]) <= precision_at_k(r, w[1])));
    check(monotone_each, "p@k monotone per rank");
    let golds = vec!["x".to_string(); ranks.len()];
    let score = TaskScore::from_parts("t", "d0", &vec![String::new(); ranks.len()], &golds, &ranks);
    let values: Vec<f64> = P_AT_K.iter().map(|k| score.p_at_k[k]).collect();
    check(values.windows(2).all(|w| w[0] <= w[1]), "dataset p@k monotone");
    verdict(10, failures.is_empty(), &format!("13 checks, 1000 random ranks, failures {failures:?}"));
}
