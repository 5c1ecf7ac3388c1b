//! Score gaps and the forgotten / (updated + acquired) ratio.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::eval::TaskScore;

/// Score of each task at each stage; stage `i` is the model after phase `i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    scores: BTreeMap<String, BTreeMap<usize, f64>>,
}

/// Which field of a [`TaskScore`] a table is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Em,
    F1,
}

/// Stage index of a stage label such as `d1`.
pub fn stage_index(stage: &str) -> Result<usize> {
    stage
        .strip_prefix('d')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CklError::Config(format!("stage label {stage:?} is not of the form d<index>")))
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: &str, stage: usize, score: f64) {
        self.scores.entry(task.to_string()).or_default().insert(stage, score);
    }

    pub fn with(mut self, task: &str, stage: usize, score: f64) -> Self {
        self.insert(task, stage, score);
        self
    }

    pub fn get(&self, task: &str, stage: usize) -> Result<f64> {
        self.scores
            .get(task)
            .and_then(|s| s.get(&stage))
            .copied()
            .ok_or_else(|| CklError::MissingScore {
                task: task.to_string(),
                stage,
            })
    }

    /// Later records for the same (task, stage) replace earlier ones, so a
    /// per-epoch ledger yields end-of-phase scores.
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a TaskScore>, metric: Metric) -> Result<Self> {
        let mut table = Self::new();
        for s in scores {
            let v = match metric {
                Metric::Em => s.em,
                Metric::F1 => s.f1,
            };
            table.insert(&s.task, stage_index(&s.stage)?, v);
        }
        Ok(table)
    }

    pub fn map_scores(&self, f: impl Fn(&str, f64) -> f64) -> Self {
        let scores = self
            .scores
            .iter()
            .map(|(t, m)| (t.clone(), m.iter().map(|(&i, &v)| (i, f(t, v))).collect()))
            .collect();
        Self { scores }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub task: String,
    pub weight: f64,
}

/// A task, a weighted sum of tasks, or "not defined".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawRef", into = "RawRef")]
pub enum TaskRef {
    NotDefined,
    Task(String),
    Composite(Vec<Component>),
}

const NOT_DEFINED: &str = "n.d.";

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawRef {
    Name(String),
    Composite(Vec<Component>),
}

impl From<RawRef> for TaskRef {
    fn from(raw: RawRef) -> Self {
        match raw {
            RawRef::Name(n) if n == NOT_DEFINED => TaskRef::NotDefined,
            RawRef::Name(n) => TaskRef::Task(n),
            RawRef::Composite(c) => TaskRef::Composite(c),
        }
    }
}

impl From<TaskRef> for RawRef {
    fn from(t: TaskRef) -> Self {
        match t {
            TaskRef::NotDefined => RawRef::Name(NOT_DEFINED.into()),
            TaskRef::Task(n) => RawRef::Name(n),
            TaskRef::Composite(c) => RawRef::Composite(c),
        }
    }
}

impl TaskRef {
    pub fn task(name: &str) -> Self {
        TaskRef::Task(name.to_string())
    }

    pub fn composite(parts: &[(&str, f64)]) -> Self {
        TaskRef::Composite(
            parts
                .iter()
                .map(|&(task, weight)| Component {
                    task: task.to_string(),
                    weight,
                })
                .collect(),
        )
    }

    pub fn is_defined(&self) -> bool {
        !matches!(self, TaskRef::NotDefined)
    }

    fn validate(&self) -> Result<()> {
        if let TaskRef::Composite(parts) = self {
            if parts.is_empty() {
                return Err(CklError::Config("empty composite task".into()));
            }
            if let Some(p) = parts.iter().find(|p| !(p.weight > 0.0 && p.weight.is_finite())) {
                return Err(CklError::Config(format!("composite weight for {} must be positive", p.task)));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TaskRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskRef::NotDefined => f.write_str(NOT_DEFINED),
            TaskRef::Task(n) => f.write_str(n),
            TaskRef::Composite(parts) => {
                let items: Vec<String> = parts.iter().map(|p| format!("{}*{}", p.weight, p.task)).collect();
                write!(f, "({})", items.join("+"))
            }
        }
    }
}

/// `Score(T, a) − Score(T, b)`; composites sum their weighted gaps.
pub fn gap(task: &TaskRef, stage_a: usize, stage_b: usize, table: &ScoreTable) -> Result<f64> {
    match task {
        TaskRef::NotDefined => Err(CklError::Config("gap of an undefined task".into())),
        TaskRef::Task(name) => Ok(table.get(name, stage_a)? - table.get(name, stage_b)?),
        TaskRef::Composite(parts) => parts
            .iter()
            .map(|p| Ok(p.weight * (table.get(&p.task, stage_a)? - table.get(&p.task, stage_b)?)))
            .sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuarSpec {
    /// Final stage.
    pub n: usize,
    /// Forgetting task per earlier stage `0..n`.
    pub forgetting: Vec<TaskRef>,
    pub update: TaskRef,
    pub acquisition: TaskRef,
}

impl FuarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CklError::Config("FUAR needs n >= 1".into()));
        }
        if self.forgetting.len() != self.n {
            return Err(CklError::Config(format!(
                "{} forgetting tasks given for n = {}",
                self.forgetting.len(),
                self.n
            )));
        }
        for t in self.forgetting.iter().chain([&self.update, &self.acquisition]) {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FuarResult {
    Value(f64),
    NoGain,
}

impl FuarResult {
    pub fn value(self) -> Option<f64> {
        match self {
            FuarResult::Value(v) => Some(v),
            FuarResult::NoGain => None,
        }
    }
}

impl fmt::Display for FuarResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FuarResult::Value(v) => write!(f, "{v:.2}"),
            FuarResult::NoGain => f.write_str("no_gain"),
        }
    }
}

impl Serialize for FuarResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FuarResult::Value(v) => s.serialize_f64(*v),
            FuarResult::NoGain => s.serialize_str("no_gain"),
        }
    }
}

impl<'de> Deserialize<'de> for FuarResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Value(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Value(v) => Ok(FuarResult::Value(v)),
            Raw::Tag(t) if t == "no_gain" => Ok(FuarResult::NoGain),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown FUAR outcome {t:?}"))),
        }
    }
}

fn clamped_gap(task: &TaskRef, a: usize, b: usize, table: &ScoreTable) -> Result<f64> {
    if task.is_defined() {
        Ok(gap(task, a, b, table)?.max(0.0))
    } else {
        Ok(0.0)
    }
}

pub fn fuar(spec: &FuarSpec, table: &ScoreTable) -> Result<FuarResult> {
    spec.validate()?;
    if spec.forgetting.iter().all(|t| !t.is_defined()) {
        return Err(CklError::AllNotDefined);
    }
    let n = spec.n;
    let mut forgotten = 0.0;
    let mut gained = 0.0;
    for (i, task) in spec.forgetting.iter().enumerate() {
        if !task.is_defined() {
            continue;
        }
        forgotten += clamped_gap(task, i, n, table)?;
        gained += clamped_gap(&spec.update, n, i, table)? + clamped_gap(&spec.acquisition, n, i, table)?;
    }
    Ok(if gained > 0.0 {
        FuarResult::Value(forgotten / gained)
    } else {
        FuarResult::NoGain
    })
}
