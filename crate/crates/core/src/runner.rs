//! Experiment orchestration: pretraining, continual phases with per-epoch
//! probing, resume, FUAR summaries and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::eval::{light_tune, probe_model, select_tracked, track_predictions, LightTuneConfig, PredictionTrace, TaskScore, P_AT_K};
use crate::fuar::{fuar, FuarResult, FuarSpec, Metric, ScoreTable, TaskRef};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::methods::{mixreview_quota, prepare_method, trainable_param_count, MethodConfig};
use crate::model::{load_checkpoint, loss_and_grads, save_checkpoint, Architecture, Grads, LmItem, ModelKind, ModelState};
use crate::optim::{lr_at_step, Adam, AdamConfig, LrSchedule, RecAdam};
use crate::world::{partition_probes, subsample_corpus, Phase, ProbeSet, TaskTag, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let toy = Architecture::toy(ModelKind::EncoderDecoder, 0);
        Self {
            kind: toy.kind,
            layers: toy.layers,
            heads: toy.heads,
            d_model: toy.d_model,
            d_ff: toy.d_ff,
            max_len: toy.max_len,
        }
    }
}

impl ArchConfig {
    pub fn architecture(&self, vocab_size: usize) -> Architecture {
        Architecture {
            kind: self.kind,
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            expansions: Vec::new(),
        }
    }
}

/// One training phase over one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub corpus: Phase,
    pub method: MethodConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Desk-scale divisor applied to `batch_size`.
    pub batch_divisor: usize,
    pub lr: f64,
    /// Share of the corpus kept, each kept sentence repeated `corpus_repeat` times.
    pub corpus_fraction: f64,
    pub corpus_repeat: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            corpus: Phase::D1,
            method: MethodConfig::Vanilla,
            epochs: 4,
            batch_size: 60,
            batch_divisor: 1,
            lr: 1e-3,
            corpus_fraction: 1.0,
            corpus_repeat: 1,
        }
    }
}

impl PhaseConfig {
    pub fn pretraining(epochs: usize) -> Self {
        Self {
            corpus: Phase::D0,
            epochs,
            ..Self::default()
        }
    }

    pub fn continual(corpus: Phase, method: MethodConfig) -> Self {
        Self {
            corpus,
            method,
            ..Self::default()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size / self.batch_divisor.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if self.effective_batch() == 0 {
            return Err(CklError::Config("batch size after the divisor must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CklError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.corpus_fraction > 0.0 && self.corpus_fraction <= 1.0) || self.corpus_repeat == 0 {
            return Err(CklError::Config("corpus_fraction must be in (0, 1] and corpus_repeat positive".into()));
        }
        if matches!(self.method, MethodConfig::Initial) {
            return Err(CklError::Config("the initial method does not train; use zero epochs instead".into()));
        }
        Ok(())
    }
}

/// Which probe sets are scored after every epoch and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSchedule {
    pub tasks: Vec<TaskTag>,
    /// Probes per task whose decoded answers are traced across epochs.
    pub tracked_per_task: usize,
    pub max_answer_tokens: Option<usize>,
    /// Light-tune a copy of decoder-only models before probing.
    pub light_tune: bool,
    pub light_tune_config: LightTuneConfig,
}

impl Default for ProbeSchedule {
    fn default() -> Self {
        Self {
            tasks: vec![TaskTag::Invariant, TaskTag::Updated, TaskTag::New, TaskTag::NewEasy],
            tracked_per_task: 10,
            max_answer_tokens: None,
            light_tune: true,
            light_tune_config: LightTuneConfig::default(),
        }
    }
}

/// Full experiment description: the first phase pretrains on D0, later
/// phases continue with a CKL method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    pub model: ArchConfig,
    pub phases: Vec<PhaseConfig>,
    pub probe: ProbeSchedule,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: None,
            model: ArchConfig::default(),
            phases: vec![
                PhaseConfig::pretraining(DEFAULT_PRETRAIN_EPOCHS),
                PhaseConfig::continual(Phase::D1, MethodConfig::Vanilla),
            ],
            probe: ProbeSchedule::default(),
            seed: 0,
        }
    }
}

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 6;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .phases
            .first()
            .ok_or_else(|| CklError::Config("a run needs at least one phase".into()))?;
        if first.corpus != Phase::D0 || first.method != MethodConfig::Vanilla {
            return Err(CklError::Config("the first phase must be plain pretraining on d0".into()));
        }
        for p in &self.phases {
            p.validate()?;
        }
        if self.phases[1..].iter().any(|p| p.corpus == Phase::D0) {
            return Err(CklError::Config("continual phases must use a later corpus".into()));
        }
        Ok(())
    }

    pub fn pretrain_phase(&self) -> &PhaseConfig {
        &self.phases[0]
    }

    pub fn continual_phases(&self) -> &[PhaseConfig] {
        &self.phases[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// 1-based continual phase.
    pub phase: usize,
    /// 1-based epoch within the phase; 0 when the phase ran no epochs.
    pub epoch: usize,
    pub score: TaskScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub stage: String,
    pub corpus: Phase,
    pub method: String,
    pub epochs: usize,
    pub steps: usize,
    pub corpus_size: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub epoch_losses: Vec<f64>,
    /// Checkpoint written at the end of the phase, relative to the run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub checkpoint_tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuarRecord {
    pub method: String,
    pub spec: String,
    pub fuar: FuarSpec,
    pub result: FuarResult,
}

/// Everything a run measured. Contains no wall-clock data, so equal
/// configurations give byte-identical serializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub method: String,
    pub seed: u64,
    pub initial: Vec<TaskScore>,
    pub scores: Vec<ScoreRecord>,
    pub phases: Vec<PhaseRecord>,
    pub fuar: Vec<FuarRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl RunLedger {
    /// Initial scores plus the last record of every (task, stage).
    pub fn score_table(&self, metric: Metric) -> Result<ScoreTable> {
        ScoreTable::from_scores(self.initial.iter().chain(self.scores.iter().map(|r| &r.score)), metric)
    }

    pub fn final_score(&self, task: &str) -> Option<&TaskScore> {
        self.scores.iter().rev().map(|r| &r.score).find(|s| s.task == task)
    }

    pub fn initial_score(&self, task: &str) -> Option<&TaskScore> {
        self.initial.iter().find(|s| s.task == task)
    }

    pub fn fuar_value(&self, spec: &str) -> Option<FuarResult> {
        self.fuar.iter().find(|f| f.spec == spec).map(|f| f.result)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
    pub probing_seconds: f64,
}

pub const LEDGER_FILE: &str = "ledger.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const TRACES_FILE: &str = "traces.jsonl";

/// Where a run writes, and whether to stop early or pick up saved progress.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop once this many epochs (counted over all phases) have finished.
    pub stop_after_epochs: Option<usize>,
    pub resume: bool,
    /// Keep a resumable snapshot after every epoch (needs `out_dir`).
    pub save_state: bool,
    /// Extra entries for the manifest of every phase checkpoint.
    pub checkpoint_meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ledger: RunLedger,
    pub traces: Vec<PredictionTrace>,
    pub model: ModelState,
    pub timings: Timings,
    /// False when stopped by `stop_after_epochs` or a divergence.
    pub completed: bool,
}

fn phase_rng(seed: u64, phase: usize, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((phase as u64) << 32) ^ epoch as u64);
    rng.set_stream(stream);
    rng
}

fn corpus_items(world: &World, cfg: &PhaseConfig, kind: ModelKind, seed: u64) -> Result<Vec<LmItem>> {
    let mut corpus = world.render_corpus(cfg.corpus);
    if cfg.corpus_fraction < 1.0 || cfg.corpus_repeat > 1 {
        corpus = subsample_corpus(&corpus, cfg.corpus_fraction, cfg.corpus_repeat, seed);
    }
    Ok(corpus
        .masked_examples(&world.vocab)?
        .iter()
        .map(|e| LmItem::from_masked(kind, e))
        .collect())
}

enum Optimizer {
    Adam(Adam),
    RecAdam(RecAdam),
}

impl Optimizer {
    fn new(method: &MethodConfig) -> Self {
        match method {
            MethodConfig::Recadam { recadam } => Optimizer::RecAdam(RecAdam::new(*recadam, AdamConfig::default())),
            _ => Optimizer::Adam(Adam::new(AdamConfig::default())),
        }
    }

    fn step(&mut self, model: &mut ModelState, grads: &Grads, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(model, grads, lr),
            Optimizer::RecAdam(r) => r.step(model, grads, lr),
        }
    }

    fn adam(&self) -> &Adam {
        match self {
            Optimizer::Adam(a) => a,
            Optimizer::RecAdam(r) => &r.adam,
        }
    }

    fn set_adam(&mut self, adam: Adam) {
        match self {
            Optimizer::Adam(a) => *a = adam,
            Optimizer::RecAdam(r) => r.adam = adam,
        }
    }
}

/// Callback after each finished epoch: `(phase, epoch, model, optimizer)`.
type EpochHook<'h> = dyn FnMut(usize, usize, &ModelState, &Adam, f64) -> Result<EpochControl> + 'h;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpochControl {
    Continue,
    Stop,
}

struct PhaseRun {
    steps: usize,
    corpus_size: usize,
    completed: bool,
}

/// Trains one phase. `start_epoch` epochs are assumed done (resume), with
/// `adam` holding their optimizer state.
#[allow(clippy::too_many_arguments)]
fn train_phase(
    model: &mut ModelState,
    world: &World,
    cfg: &PhaseConfig,
    phase_index: usize,
    seed: u64,
    start_epoch: usize,
    adam: Option<Adam>,
    replay: Option<&[LmItem]>,
    hook: &mut EpochHook<'_>,
) -> Result<PhaseRun> {
    let kind = model.arch().kind;
    let items = corpus_items(world, cfg, kind, seed ^ phase_index as u64)?;
    let batch = cfg.effective_batch();
    let per_epoch = items.len().div_ceil(batch);
    let total = per_epoch * cfg.epochs;
    let sched = LrSchedule::new(cfg.lr, total);
    let mut opt = Optimizer::new(&cfg.method);
    if let Some(a) = adam {
        opt.set_adam(a);
    }
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut phase_rng(seed, phase_index, epoch, 1));
        let mut replay_rng = phase_rng(seed, phase_index, epoch, 2);
        let quota = match (&cfg.method, replay) {
            (MethodConfig::Mixreview { mixreview }, Some(_)) => mixreview_quota(epoch, batch, mixreview),
            _ => 0,
        };
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mut batch_items: Vec<LmItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            if let (true, Some(pool)) = (quota > 0, replay) {
                batch_items.extend(pool.choose_multiple(&mut replay_rng, quota.min(pool.len())).cloned());
            }
            let (loss, grads) = loss_and_grads(model, &batch_items)?;
            let step = epoch * per_epoch + b + 1;
            opt.step(model, &grads, lr_at_step(step, &sched)?)?;
            loss_sum += loss as f64;
        }
        let mean_loss = if per_epoch == 0 { 0.0 } else { loss_sum / per_epoch as f64 };
        if hook(phase_index, epoch + 1, model, opt.adam(), mean_loss)? == EpochControl::Stop {
            return Ok(PhaseRun {
                steps: total,
                corpus_size: items.len(),
                completed: epoch + 1 == cfg.epochs,
            });
        }
    }
    Ok(PhaseRun {
        steps: total,
        corpus_size: items.len(),
        completed: true,
    })
}

/// Pretrains a fresh model on D0. Returns the model and per-epoch mean losses.
pub fn pretrain(world: &World, config: &RunConfig) -> Result<(ModelState, Vec<f64>)> {
    config.validate()?;
    let arch = config.model.architecture(world.vocab.len());
    let mut model = ModelState::init(arch, config.seed)?;
    let mut losses = Vec::new();
    let mut hook = |_: usize, _: usize, _: &ModelState, _: &Adam, loss: f64| {
        losses.push(loss);
        Ok(EpochControl::Continue)
    };
    train_phase(&mut model, world, config.pretrain_phase(), 0, config.seed, 0, None, None, &mut hook)?;
    Ok((model, losses))
}

/// Probe sets scored during a run, keyed by ledger task name, with the first
/// stage at which each is scored after the initial evaluation.
pub struct ProbePlan {
    pub sets: Vec<(String, ProbeSet, usize)>,
    pub tuning: ProbeSet,
}

pub fn partition_task_name(phase: Phase) -> String {
    format!("{}.{}", TaskTag::NewEasy.name(), phase.name())
}

impl ProbePlan {
    pub fn new(world: &World, schedule: &ProbeSchedule, phases: &[PhaseConfig]) -> Self {
        let mut sets = Vec::new();
        for &task in &schedule.tasks {
            let set = world.build_probes(task);
            if task == TaskTag::NewEasy && world.phases().len() > 2 {
                for (i, p) in phases.iter().enumerate() {
                    let part = partition_probes(&set, &world.facts, p.corpus);
                    let name = partition_task_name(p.corpus);
                    if !sets.iter().any(|(n, _, _)| *n == name) {
                        sets.push((name, part, i + 1));
                    }
                }
            }
            sets.push((task.name().to_string(), set, 1));
        }
        Self {
            sets,
            tuning: world.build_probes(TaskTag::Tuning),
        }
    }

    fn max_tokens(schedule: &ProbeSchedule, task: TaskTag) -> usize {
        schedule.max_answer_tokens.unwrap_or(task.default_answer_limit())
    }

    /// Scores every set due at `stage`, light-tuning a copy of decoder-only models first.
    pub fn score(&self, model: &ModelState, world: &World, schedule: &ProbeSchedule, stage: usize) -> Result<Vec<TaskScore>> {
        let tuned;
        let model = if model.arch().kind == ModelKind::DecoderOnly && schedule.light_tune {
            let mut copy = model.clone();
            let evaluated: Vec<&ProbeSet> = self.sets.iter().map(|(_, s, _)| s).collect();
            light_tune(&mut copy, &world.vocab, &self.tuning, &evaluated, &schedule.light_tune_config)?;
            tuned = copy;
            &tuned
        } else {
            model
        };
        let label = format!("d{stage}");
        let mut out = Vec::new();
        for (name, set, from) in &self.sets {
            if stage != 0 && stage < *from {
                continue;
            }
            let mut score = probe_model(model, &world.vocab, set, &label, Self::max_tokens(schedule, set.task))?.score;
            score.task = name.clone();
            out.push(score);
        }
        Ok(out)
    }
}

/// FUAR wirings that apply to a run with `n` continual phases.
pub fn default_fuar_specs(n: usize, tasks: &[String]) -> Vec<(String, FuarSpec)> {
    let has = |t: &str| tasks.iter().any(|x| x == t);
    let forgetting: Vec<TaskRef> = (0..n)
        .map(|i| if i == 0 { TaskRef::task("invariant") } else { TaskRef::NotDefined })
        .collect();
    let mut out = Vec::new();
    if n == 0 || !has("invariant") {
        return out;
    }
    if has("updated") && has("new") {
        out.push((
            "il-ul-nl".to_string(),
            FuarSpec {
                n,
                forgetting: forgetting.clone(),
                update: TaskRef::task("updated"),
                acquisition: TaskRef::task("new"),
            },
        ));
    }
    if has("updated") && has("new-easy") {
        out.push((
            "il-ul-nle".to_string(),
            FuarSpec {
                n,
                forgetting: forgetting.clone(),
                update: TaskRef::task("updated"),
                acquisition: TaskRef::task("new-easy"),
            },
        ));
    }
    let last = partition_task_name(if n == 1 { Phase::D1 } else { Phase::D2 });
    if n == 2 && has(&last) {
        out.push((
            "il-nle-p2".to_string(),
            FuarSpec {
                n,
                forgetting,
                update: TaskRef::NotDefined,
                acquisition: TaskRef::task(&last),
            },
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    /// 1-based phase in progress, and epochs finished in it.
    phase: usize,
    epochs_done: usize,
    total_epochs_done: usize,
    ledger: RunLedger,
    traces: Vec<PredictionTrace>,
    timings: Timings,
}

const STATE_DIR: &str = "state";

fn save_progress(dir: &Path, model: &ModelState, adam: &Adam, progress: &Progress) -> Result<()> {
    let state = dir.join(STATE_DIR);
    let tmp = dir.join("state.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CklError::io(&tmp, e))?;
    }
    save_checkpoint(model, &tmp.join("model"), BTreeMap::new())?;
    adam.save(&tmp.join("optimizer"))?;
    write_json(&tmp.join("progress.json"), progress)?;
    if state.exists() {
        fs::remove_dir_all(&state).map_err(|e| CklError::io(&state, e))?;
    }
    fs::rename(&tmp, &state).map_err(|e| CklError::io(&state, e))
}

fn load_progress(dir: &Path) -> Result<Option<(ModelState, Adam, Progress)>> {
    let state = dir.join(STATE_DIR);
    if !state.exists() {
        return Ok(None);
    }
    let (model, _) = load_checkpoint(&state.join("model"))?;
    let adam = Adam::load(&state.join("optimizer"))?;
    let progress = read_json(&state.join("progress.json"))?;
    Ok(Some((model, adam, progress)))
}

fn method_label(phases: &[PhaseConfig]) -> String {
    phases
        .last()
        .map_or_else(|| "initial".to_string(), |p| p.method.name().to_string())
}

/// Runs continual phases from `initial`: scores the initial model, then trains
/// each phase with its method, probing after every epoch. Writes the ledger,
/// timings, traces and phase checkpoints when `options.out_dir` is set.
pub fn run_multi_phase(
    world: &World,
    initial: &ModelState,
    phases: &[PhaseConfig],
    schedule: &ProbeSchedule,
    seed: u64,
    options: &RunOptions,
) -> Result<RunOutput> {
    for p in phases {
        p.validate()?;
        if p.corpus == Phase::D0 {
            return Err(CklError::Config("continual phases must use a later corpus".into()));
        }
    }
    if (options.resume || options.save_state) && options.out_dir.is_none() {
        return Err(CklError::Config("resumable runs need an output directory".into()));
    }
    let plan = ProbePlan::new(world, schedule, phases);
    let tracked_tasks: Vec<(TaskTag, usize)> = schedule.tasks.iter().map(|&t| (t, schedule.tracked_per_task)).collect();

    let resumed = match (&options.out_dir, options.resume) {
        (Some(dir), true) => load_progress(dir)?,
        _ => None,
    };
    let (mut model, mut adam, mut progress) = match resumed {
        Some((m, a, p)) => {
            let adam = (p.epochs_done > 0).then_some(a);
            (m, adam, p)
        }
        None => {
            let started = Instant::now();
            let initial_scores = plan.score(initial, world, schedule, 0)?;
            let mut traces = Vec::new();
            for (i, &(task, count)) in tracked_tasks.iter().enumerate() {
                traces.extend(select_tracked(&world.build_probes(task), count, seed ^ i as u64));
            }
            let progress = Progress {
                phase: 1,
                epochs_done: 0,
                total_epochs_done: 0,
                ledger: RunLedger {
                    method: method_label(phases),
                    seed,
                    initial: initial_scores,
                    scores: Vec::new(),
                    phases: Vec::new(),
                    fuar: Vec::new(),
                    aborted: None,
                },
                traces,
                timings: Timings {
                    phases: Vec::new(),
                    probing_seconds: started.elapsed().as_secs_f64(),
                },
            };
            (initial.clone(), None, progress)
        }
    };

    let replay_pool: Option<Vec<LmItem>> = if phases.iter().any(|p| matches!(p.method, MethodConfig::Mixreview { .. })) {
        let kind = model.arch().kind;
        let d0 = world.render_corpus(Phase::D0);
        Some(d0.masked_examples(&world.vocab)?.iter().map(|e| LmItem::from_masked(kind, e)).collect())
    } else {
        None
    };

    let mut completed = true;
    while progress.phase <= phases.len() {
        let index = progress.phase;
        let cfg = &phases[index - 1];
        let stage = format!("d{index}");
        let started = Instant::now();
        if progress.epochs_done == 0 {
            prepare_method(&mut model, &cfg.method, seed.wrapping_add(index as u64))?;
            if matches!(cfg.method, MethodConfig::Recadam { .. }) {
                model.snapshot_theta0();
            } else {
                model.clear_theta0();
            }
            if cfg.epochs == 0 {
                let scores = plan.score(&model, world, schedule, index)?;
                progress
                    .ledger
                    .scores
                    .extend(scores.into_iter().map(|score| ScoreRecord { phase: index, epoch: 0, score }));
            }
        }
        let (trainable, total) = trainable_param_count(&model);
        let mut probing = 0.0;
        let mut losses: Vec<f64> = progress
            .ledger
            .phases
            .iter()
            .find(|p| p.stage == stage)
            .map(|p| p.epoch_losses.clone())
            .unwrap_or_default();
        let mut stopped = false;
        let start_epoch = progress.epochs_done;
        let mut hook = |phase: usize, epoch: usize, m: &ModelState, a: &Adam, loss: f64| -> Result<EpochControl> {
            let t = Instant::now();
            losses.push(loss);
            let scores = plan.score(m, world, schedule, phase)?;
            progress
                .ledger
                .scores
                .extend(scores.into_iter().map(|score| ScoreRecord { phase, epoch, score }));
            let limit = schedule.max_answer_tokens.unwrap_or(TaskTag::Updated.default_answer_limit());
            track_predictions(m, &world.vocab, &mut progress.traces, progress.total_epochs_done + 1, limit)?;
            progress.epochs_done = epoch;
            progress.total_epochs_done += 1;
            probing += t.elapsed().as_secs_f64();
            let record = PhaseRecord {
                stage: stage.clone(),
                corpus: cfg.corpus,
                method: cfg.method.name().to_string(),
                epochs: cfg.epochs,
                steps: 0,
                corpus_size: 0,
                trainable_params: trainable,
                total_params: total,
                epoch_losses: losses.clone(),
                checkpoint: None,
                checkpoint_tensors: m.params().len(),
            };
            upsert_phase(&mut progress.ledger, record);
            if let (Some(dir), true) = (&options.out_dir, options.save_state) {
                save_progress(dir, m, a, &progress)?;
            }
            if options.stop_after_epochs.is_some_and(|n| progress.total_epochs_done >= n) {
                stopped = true;
                return Ok(EpochControl::Stop);
            }
            Ok(EpochControl::Continue)
        };
        let result = train_phase(
            &mut model,
            world,
            cfg,
            index,
            seed,
            start_epoch,
            adam.take(),
            replay_pool.as_deref(),
            &mut hook,
        );
        let run = match result {
            Ok(run) => run,
            Err(CklError::Divergence(msg)) => {
                progress.ledger.aborted = Some(format!("phase {stage}: {msg}"));
                completed = false;
                break;
            }
            Err(e) => return Err(e),
        };
        progress.timings.probing_seconds += probing;
        let mut record = progress
            .ledger
            .phases
            .iter()
            .find(|p| p.stage == stage)
            .cloned()
            .unwrap_or(PhaseRecord {
                stage: stage.clone(),
                corpus: cfg.corpus,
                method: cfg.method.name().to_string(),
                epochs: cfg.epochs,
                steps: 0,
                corpus_size: 0,
                trainable_params: trainable,
                total_params: total,
                epoch_losses: Vec::new(),
                checkpoint: None,
                checkpoint_tensors: model.params().len(),
            });
        record.steps = run.steps;
        record.corpus_size = run.corpus_size;
        if stopped && !run.completed {
            upsert_phase(&mut progress.ledger, record);
            completed = false;
            break;
        }
        if let Some(dir) = &options.out_dir {
            let rel = format!("ckpt-{stage}");
            let mut meta = options.checkpoint_meta.clone();
            meta.insert("stage".to_string(), serde_json::Value::from(stage.clone()));
            meta.insert("method".to_string(), serde_json::Value::from(cfg.method.name()));
            save_checkpoint(&model, &dir.join(&rel), meta)?;
            record.checkpoint = Some(rel);
        }
        upsert_phase(&mut progress.ledger, record);
        progress
            .timings
            .phases
            .push((stage.clone(), started.elapsed().as_secs_f64()));
        progress.phase += 1;
        progress.epochs_done = 0;
        if stopped {
            completed = progress.phase > phases.len();
            if !completed {
                if let (Some(dir), true) = (&options.out_dir, options.save_state) {
                    save_progress(dir, &model, &Adam::new(AdamConfig::default()), &progress)?;
                }
                break;
            }
        }
    }

    if completed {
        let table = progress.ledger.score_table(Metric::Em)?;
        let tasks: Vec<String> = plan.sets.iter().map(|(n, _, _)| n.clone()).collect();
        let method = progress.ledger.method.clone();
        progress.ledger.fuar = default_fuar_specs(phases.len(), &tasks)
            .into_iter()
            .map(|(name, spec)| {
                Ok(FuarRecord {
                    method: method.clone(),
                    result: fuar(&spec, &table)?,
                    spec: name,
                    fuar: spec,
                })
            })
            .collect::<Result<_>>()?;
    }
    if let Some(dir) = &options.out_dir {
        write_run_files(dir, &progress.ledger, &progress.timings, &progress.traces)?;
        if completed && options.save_state {
            let state = dir.join(STATE_DIR);
            if state.exists() {
                fs::remove_dir_all(&state).map_err(|e| CklError::io(&state, e))?;
            }
        }
    }
    Ok(RunOutput {
        ledger: progress.ledger,
        traces: progress.traces,
        model,
        timings: progress.timings,
        completed,
    })
}

fn upsert_phase(ledger: &mut RunLedger, record: PhaseRecord) {
    match ledger.phases.iter_mut().find(|p| p.stage == record.stage) {
        Some(existing) => *existing = record,
        None => ledger.phases.push(record),
    }
}

pub fn ledger_json(ledger: &RunLedger) -> Result<String> {
    let mut text = serde_json::to_string_pretty(ledger).map_err(|e| CklError::json(LEDGER_FILE, e))?;
    text.push('\n');
    Ok(text)
}

fn write_run_files(dir: &Path, ledger: &RunLedger, timings: &Timings, traces: &[PredictionTrace]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CklError::io(dir, e))?;
    let path = dir.join(LEDGER_FILE);
    fs::write(&path, ledger_json(ledger)?).map_err(|e| CklError::io(&path, e))?;
    write_json(&dir.join(TIMINGS_FILE), timings)?;
    write_jsonl(&dir.join(TRACES_FILE), traces)
}

pub fn load_run(dir: &Path) -> Result<(RunLedger, Vec<PredictionTrace>)> {
    let ledger = read_json(&dir.join(LEDGER_FILE))?;
    let trace_path = dir.join(TRACES_FILE);
    let traces = if trace_path.exists() { read_jsonl(&trace_path)? } else { Vec::new() };
    Ok((ledger, traces))
}

pub const SCORES_CSV: &str = "scores.csv";
pub const INITIAL_CSV: &str = "initial_scores.csv";
pub const FUAR_CSV: &str = "fuar.csv";

pub fn score_header() -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "task", "stage", "em", "f1"].iter().map(|s| s.to_string()).collect();
    h.extend(P_AT_K.iter().map(|k| format!("p@{k}")));
    h
}

fn score_row(epoch: usize, s: &TaskScore) -> Vec<String> {
    let mut row = vec![epoch.to_string(), s.task.clone(), s.stage.clone(), s.em.to_string(), s.f1.to_string()];
    row.extend(P_AT_K.iter().map(|k| s.p_at_k.get(k).copied().unwrap_or(0.0).to_string()));
    row
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| CklError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |source: csv::Error| CklError::Csv {
        path: path.to_path_buf(),
        source,
    };
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CklError::io(path, e))
}

/// Writes the per-epoch score CSV, the initial scores, the FUAR summary and
/// the prediction traces into `out`.
pub fn emit_report(ledger: &RunLedger, traces: &[PredictionTrace], out: &Path) -> Result<Vec<PathBuf>> {
    if ledger.initial.is_empty() && ledger.scores.is_empty() {
        return Err(CklError::Config("ledger holds no scores".into()));
    }
    fs::create_dir_all(out).map_err(|e| CklError::io(out, e))?;
    let scores = out.join(SCORES_CSV);
    write_rows(
        &scores,
        std::iter::once(score_header()).chain(ledger.scores.iter().map(|r| score_row(r.epoch, &r.score))),
    )?;
    let initial = out.join(INITIAL_CSV);
    write_rows(
        &initial,
        std::iter::once(score_header()).chain(ledger.initial.iter().map(|s| score_row(0, s))),
    )?;
    let fuar_path = out.join(FUAR_CSV);
    write_rows(
        &fuar_path,
        std::iter::once(vec!["method".to_string(), "spec".to_string(), "value".to_string()]).chain(
            ledger
                .fuar
                .iter()
                .map(|f| vec![f.method.clone(), f.spec.clone(), f.result.to_string()]),
        ),
    )?;
    let trace_path = out.join(TRACES_FILE);
    write_jsonl(&trace_path, traces)?;
    Ok(vec![scores, initial, fuar_path, trace_path])
}

/// Parses a score CSV written by [`emit_report`] back into `(epoch, score)` rows.
pub fn read_score_csv(path: &Path) -> Result<Vec<(usize, TaskScore)>> {
    let err = |source: csv::Error| CklError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let bad = |m: &str| CklError::Config(format!("{}: {m}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let num = |i: usize| -> Result<f64> { rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad number")) };
        let epoch = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad epoch"))?;
        let mut p_at_k = BTreeMap::new();
        for (j, &k) in P_AT_K.iter().enumerate() {
            p_at_k.insert(k, num(5 + j)?);
        }
        out.push((
            epoch,
            TaskScore {
                task: rec.get(1).unwrap_or_default().to_string(),
                stage: rec.get(2).unwrap_or_default().to_string(),
                em: num(3)?,
                f1: num(4)?,
                p_at_k,
                n: 0,
            },
        ));
    }
    Ok(out)
}

/// Repetition study settings: the small run sees `fraction` of the corpus,
/// repeated so both runs take the same number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepetitionConfig {
    pub full_epochs: usize,
    pub small_epochs: usize,
    pub fraction: f64,
    pub method: MethodConfig,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self {
            full_epochs: 4,
            small_epochs: 8,
            fraction: 0.1,
            method: MethodConfig::Vanilla,
        }
    }
}

impl RepetitionConfig {
    /// Repeat count equalizing steps: `full_epochs / (fraction · small_epochs)`.
    pub fn repeat(&self) -> Result<usize> {
        let r = self.full_epochs as f64 / (self.fraction * self.small_epochs as f64);
        if (r - r.round()).abs() > 1e-9 || r < 1.0 {
            return Err(CklError::Config(format!("no integer repeat equalizes steps for {self:?}")));
        }
        Ok(r.round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow {
    pub seed: u64,
    pub run: String,
    pub epochs: usize,
    pub corpus_size: usize,
    pub steps: usize,
    pub il_initial: f64,
    pub il_final: f64,
    pub il_forgetting: f64,
}

/// Full corpus for `full_epochs` against the repeated subsample for
/// `small_epochs`, both from `initial`. Returns one row per run.
pub fn repetition_study(
    world: &World,
    initial: &ModelState,
    base: &PhaseConfig,
    config: &RepetitionConfig,
    seed: u64,
) -> Result<Vec<RepetitionRow>> {
    let repeat = config.repeat()?;
    let schedule = ProbeSchedule {
        tasks: vec![TaskTag::Invariant],
        tracked_per_task: 0,
        ..ProbeSchedule::default()
    };
    let runs = [
        ("full", config.full_epochs, 1.0, 1),
        ("small", config.small_epochs, config.fraction, repeat),
    ];
    let mut rows = Vec::new();
    for (name, epochs, fraction, corpus_repeat) in runs {
        let phase = PhaseConfig {
            method: config.method.clone(),
            epochs,
            corpus_fraction: fraction,
            corpus_repeat,
            ..base.clone()
        };
        let out = run_multi_phase(world, initial, &[phase], &schedule, seed, &RunOptions::default())?;
        let il0 = out.ledger.initial_score("invariant").map_or(0.0, |s| s.em);
        let il1 = out.ledger.final_score("invariant").map_or(0.0, |s| s.em);
        let p = &out.ledger.phases[0];
        rows.push(RepetitionRow {
            seed,
            run: name.to_string(),
            epochs,
            corpus_size: p.corpus_size,
            steps: p.steps,
            il_initial: il0,
            il_final: il1,
            il_forgetting: il0 - il1,
        });
    }
    Ok(rows)
}

pub fn write_repetition_table(path: &Path, rows: &[RepetitionRow]) -> Result<()> {
    let header = ["seed", "run", "epochs", "corpus_size", "steps", "il_initial", "il_final", "il_forgetting"];
    write_rows(
        path,
        std::iter::once(header.iter().map(|s| s.to_string()).collect()).chain(rows.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.run.clone(),
                r.epochs.to_string(),
                r.corpus_size.to_string(),
                r.steps.to_string(),
                format!("{:.2}", r.il_initial),
                format!("{:.2}", r.il_final),
                format!("{:.2}", r.il_forgetting),
            ]
        })),
    )
}
