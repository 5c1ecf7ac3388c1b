use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ckl_core::eval::{light_tune, probe_model, TaskScore};
use ckl_core::fuar::{fuar, FuarSpec, Metric, ScoreTable};
use ckl_core::io::{read_json, write_json};
use ckl_core::methods::MethodConfig;
use ckl_core::model::{load_checkpoint, save_checkpoint, ModelKind, ModelState};
use ckl_core::runner::{
    emit_report, load_run, pretrain, run_multi_phase, PhaseConfig, RunConfig, RunLedger, RunOptions, LEDGER_FILE,
};
use ckl_core::world::{generate_world, Phase, TaskTag, World, WorldSpec};
use ckl_core::CklError;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ckl", version, about = "Continual knowledge learning experiments on toy language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fact world and write its corpora and probes.
    Genworld {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model on the D0 corpus and save the checkpoint.
    Pretrain {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue pretraining a checkpoint on later corpora with one method.
    Continue {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        phase: String,
        #[arg(long)]
        phase2: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the epochs of every continual phase.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// World directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Stop after this many epochs and keep a resumable state.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Pick up the state left by an earlier `--stop-after`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one probe task.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        /// Stage label for the scores; defaults to the checkpoint's stage.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Compute FUAR from a run ledger or a directory of score files.
    Fuar {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Em)]
        metric: MetricArg,
    },
    /// Write plot-ready CSVs for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Vanilla,
    Recadam,
    Mixreview,
    Lora,
    Kadapter,
    Modular,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Recadam => "recadam",
            Method::Mixreview => "mixreview",
            Method::Lora => "lora",
            Method::Kadapter => "kadapter",
            Method::Modular => "modular",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Em,
    F1,
}

const META_WORLD: &str = "world";
const META_CONFIG: &str = "config";
const META_STAGE: &str = "stage";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err.downcast_ref::<CklError>().map_or("cli", CklError::kind);
            let record = json!({
                "error": kind,
                "message": message(&err),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined with ": ", skipping causes already spelled out
/// by the error above them.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Genworld { spec, out } => genworld(&spec, &out),
        Command::Pretrain { world, config, out } => pretrain_cmd(&world, &config, &out),
        Command::Continue {
            ckpt,
            method,
            phase,
            phase2,
            out,
            epochs,
            seed,
            world,
            stop_after,
            resume,
        } => {
            let mut corpora = vec![Phase::parse(&phase)?];
            if let Some(p) = phase2 {
                corpora.push(Phase::parse(&p)?);
            }
            let args = ContinueArgs {
                method,
                corpora,
                epochs,
                seed,
                world,
                stop_after,
                resume,
            };
            continue_cmd(&ckpt, &args, &out)
        }
        Command::Probe {
            ckpt,
            task,
            out,
            world,
            stage,
        } => probe_cmd(&ckpt, TaskTag::parse(&task)?, &out, world.as_deref(), stage),
        Command::Fuar { scores, spec, metric } => {
            let metric = match metric {
                MetricArg::Em => Metric::Em,
                MetricArg::F1 => Metric::F1,
            };
            fuar_cmd(&scores, &spec, metric)
        }
        Command::Report { run, out } => {
            let (ledger, traces) = load_run(&run)?;
            for path in emit_report(&ledger, &traces, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn genworld(spec: &Path, out: &Path) -> Result<()> {
    let spec: WorldSpec = read_json(spec)?;
    let world = generate_world(&spec)?;
    world.save(out)?;
    println!(
        "{}",
        json!({
            "world": out,
            "facts": world.facts.len(),
            "vocab": world.vocab.len(),
        })
    );
    Ok(())
}

fn pretrain_cmd(world_dir: &Path, config: &Path, out: &Path) -> Result<()> {
    let mut config: RunConfig = read_json(config)?;
    config.validate()?;
    let world = World::load(world_dir)?;
    let (model, losses) = pretrain(&world, &config)?;
    let world_dir = fs::canonicalize(world_dir).with_context(|| format!("resolving {}", world_dir.display()))?;
    config.world = Some(world_dir.clone());
    let mut meta = BTreeMap::new();
    meta.insert(META_WORLD.to_string(), json!(world_dir));
    meta.insert(META_CONFIG.to_string(), serde_json::to_value(&config)?);
    meta.insert(META_STAGE.to_string(), json!("d0"));
    meta.insert("losses".to_string(), json!(losses));
    save_checkpoint(&model, out, meta)?;
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "params": model.param_count(),
            "final_loss": losses.last(),
        })
    );
    Ok(())
}

struct Loaded {
    model: ModelState,
    world: World,
    world_dir: PathBuf,
    config: RunConfig,
    stage: Option<String>,
}

fn load(ckpt: &Path, world: Option<&Path>) -> Result<Loaded> {
    let (model, manifest) = load_checkpoint(ckpt)?;
    let world_dir = match (world, manifest.meta.get(META_WORLD).and_then(Value::as_str)) {
        (Some(w), _) => w.to_path_buf(),
        (None, Some(w)) => PathBuf::from(w),
        (None, None) => bail!("{} records no world directory; pass --world", ckpt.display()),
    };
    let config = match manifest.meta.get(META_CONFIG) {
        Some(v) => serde_json::from_value(v.clone()).context("checkpoint config")?,
        None => RunConfig::default(),
    };
    let world = World::load(&world_dir)?;
    let stage = manifest.meta.get(META_STAGE).and_then(Value::as_str).map(str::to_string);
    Ok(Loaded {
        model,
        world,
        world_dir,
        config,
        stage,
    })
}

struct ContinueArgs {
    method: Method,
    corpora: Vec<Phase>,
    epochs: Option<usize>,
    seed: Option<u64>,
    world: Option<PathBuf>,
    stop_after: Option<usize>,
    resume: bool,
}

/// Phase settings come from the matching continual phase of the pretraining
/// config when there is one, with the method chosen on the command line.
fn phase_config(config: &RunConfig, corpus: Phase, method: Method, epochs: Option<usize>) -> Result<PhaseConfig> {
    let template = config
        .continual_phases()
        .iter()
        .find(|p| p.corpus == corpus)
        .or_else(|| config.continual_phases().first());
    let method_config = match template {
        Some(p) if p.method.name() == method.name() => p.method.clone(),
        _ => MethodConfig::from_name(method.name())?,
    };
    let mut phase = match template {
        Some(p) => PhaseConfig {
            corpus,
            method: method_config,
            ..p.clone()
        },
        None => PhaseConfig::continual(corpus, method_config),
    };
    if let Some(e) = epochs {
        phase.epochs = e;
    }
    Ok(phase)
}

fn continue_cmd(ckpt: &Path, args: &ContinueArgs, out: &Path) -> Result<()> {
    let loaded = load(ckpt, args.world.as_deref())?;
    let phases = args
        .corpora
        .iter()
        .map(|&c| phase_config(&loaded.config, c, args.method, args.epochs))
        .collect::<Result<Vec<_>>>()?;
    let mut checkpoint_meta = BTreeMap::new();
    checkpoint_meta.insert(META_WORLD.to_string(), json!(loaded.world_dir));
    checkpoint_meta.insert(META_CONFIG.to_string(), serde_json::to_value(&loaded.config)?);
    let resumable = args.stop_after.is_some() || args.resume;
    let options = RunOptions {
        out_dir: Some(out.to_path_buf()),
        stop_after_epochs: args.stop_after,
        resume: args.resume,
        save_state: resumable,
        checkpoint_meta,
    };
    let seed = args.seed.unwrap_or(loaded.config.seed);
    let output = run_multi_phase(&loaded.world, &loaded.model, &phases, &loaded.config.probe, seed, &options)?;
    let fuar: BTreeMap<&str, String> = output
        .ledger
        .fuar
        .iter()
        .map(|r| (r.spec.as_str(), r.result.to_string()))
        .collect();
    println!(
        "{}",
        json!({
            "run": out,
            "method": args.method.name(),
            "completed": output.completed,
            "aborted": output.ledger.aborted,
            "fuar": fuar,
        })
    );
    if let Some(reason) = &output.ledger.aborted {
        bail!(CklError::Divergence(reason.clone()));
    }
    Ok(())
}

fn probe_cmd(ckpt: &Path, task: TaskTag, out: &Path, world: Option<&Path>, stage: Option<String>) -> Result<()> {
    let loaded = load(ckpt, world)?;
    let schedule = &loaded.config.probe;
    let probes = loaded.world.build_probes(task);
    let stage = stage.or(loaded.stage).unwrap_or_else(|| "d0".to_string());
    let mut model = loaded.model;
    if model.arch().kind == ModelKind::DecoderOnly && schedule.light_tune {
        let tuning = loaded.world.build_probes(TaskTag::Tuning);
        light_tune(&mut model, &loaded.world.vocab, &tuning, &[&probes], &schedule.light_tune_config)?;
    }
    let max_tokens = schedule.max_answer_tokens.unwrap_or(task.default_answer_limit());
    let outcome = probe_model(&model, &loaded.world.vocab, &probes, &stage, max_tokens)?;
    write_json(out, &outcome.score)?;
    println!("{}", serde_json::to_string(&outcome.score)?);
    Ok(())
}

/// A ledger file, or every `*.json` score record directly inside `dir`.
fn collect_scores(dir: &Path) -> Result<Vec<TaskScore>> {
    let ledger_path = dir.join(LEDGER_FILE);
    if ledger_path.exists() {
        let ledger: RunLedger = read_json(&ledger_path)?;
        return Ok(ledger
            .initial
            .into_iter()
            .chain(ledger.scores.into_iter().map(|r| r.score))
            .collect());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let scores = paths.iter().map(|p| read_json(p)).collect::<ckl_core::Result<Vec<TaskScore>>>()?;
    if scores.is_empty() {
        bail!(CklError::Config(format!("no score files in {}", dir.display())));
    }
    Ok(scores)
}

fn fuar_cmd(scores: &Path, spec: &Path, metric: Metric) -> Result<()> {
    let spec: FuarSpec = read_json(spec)?;
    let table = ScoreTable::from_scores(&collect_scores(scores)?, metric)?;
    let result = fuar(&spec, &table)?;
    println!("{}", json!({ "fuar": result }));
    Ok(())
}
