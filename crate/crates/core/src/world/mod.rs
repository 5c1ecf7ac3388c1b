//! Deterministic synthetic fact world: invariant, updated and new facts,
//! rendered into phase corpora and cloze probe sets.

mod templates;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::model::{ssm_mask, MaskedExample};
use crate::vocab::Vocabulary;

pub(crate) use templates::RELATIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Klass {
    Invariant,
    Updated,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    D0,
    D1,
    D2,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::D0 => "d0",
            Phase::D1 => "d1",
            Phase::D2 => "d2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d0" => Ok(Phase::D0),
            "d1" => Ok(Phase::D1),
            "d2" => Ok(Phase::D2),
            other => Err(CklError::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub klass: Klass,
    pub phase: Phase,
    /// Object before the update, for updated facts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_object: Option<String>,
    /// Reserved for light-tuning: rendered into D0 but never probed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tuning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub entities: usize,
    pub relations: usize,
    pub n_invariant: usize,
    pub n_updated: usize,
    pub n_new: usize,
    /// Extra invariant facts kept out of every probe set for light-tuning.
    pub n_tuning: usize,
    pub two_token_fraction: f64,
    /// Templates per relation used when rendering corpora.
    pub train_templates: usize,
    pub d0_duplication: usize,
    pub later_duplication: usize,
    /// Share of invariant facts restated in each later corpus.
    pub later_invariant_fraction: f64,
    /// Fractions of updated and new facts assigned to D1, D2, ...
    pub phase_split: Vec<f64>,
    /// Probe with a template never used in training.
    pub held_out_templates: bool,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            entities: 1000,
            relations: 20,
            n_invariant: 2000,
            n_updated: 200,
            n_new: 200,
            n_tuning: 100,
            two_token_fraction: 0.25,
            train_templates: 2,
            d0_duplication: 9,
            later_duplication: 3,
            later_invariant_fraction: 0.1,
            phase_split: vec![1.0],
            held_out_templates: false,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CklError::Config(m));
        if self.entities < 2 || self.relations == 0 {
            return bad("need at least 2 entities and 1 relation".into());
        }
        if self.relations > RELATIONS.len() {
            return bad(format!("at most {} relations are available", RELATIONS.len()));
        }
        if self.n_invariant == 0 || self.n_updated == 0 || self.n_new == 0 {
            return bad("fact counts per class must be positive".into());
        }
        let max_templates = if self.held_out_templates { 2 } else { 3 };
        if self.train_templates == 0 || self.train_templates > max_templates {
            return bad(format!("train_templates must be in 1..={max_templates}"));
        }
        if self.d0_duplication == 0 || self.later_duplication == 0 {
            return bad("duplication factors must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.later_invariant_fraction) || !(0.0..=1.0).contains(&self.two_token_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.phase_split.is_empty() || self.phase_split.len() > 2 || self.phase_split.iter().any(|&f| f < 0.0) {
            return bad(format!("phase_split {:?} must have 1 or 2 nonnegative entries", self.phase_split));
        }
        if (self.phase_split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("phase_split {:?} must sum to 1", self.phase_split));
        }
        let capacity = self.entities * self.relations;
        let requested = self.n_invariant + self.n_updated + self.n_new + self.n_tuning;
        if requested > capacity {
            return Err(CklError::Capacity { requested, capacity });
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn probe_template(&self) -> usize {
        if self.held_out_templates {
            self.train_templates
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub facts: Vec<FactTriple>,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub fact_id: usize,
    pub span_start: usize,
    pub span_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub phase: Phase,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Salient-span-masked examples, one per sentence.
    pub fn masked_examples(&self, vocab: &Vocabulary) -> Result<Vec<MaskedExample>> {
        self.sentences
            .iter()
            .map(|s| {
                let ids = vocab.tokenize(&s.text);
                ssm_mask(&ids, s.span_start..s.span_start + s.span_len)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTag {
    Invariant,
    Updated,
    New,
    NewEasy,
    Tuning,
}

impl TaskTag {
    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Invariant => "invariant",
            TaskTag::Updated => "updated",
            TaskTag::New => "new",
            TaskTag::NewEasy => "new-easy",
            TaskTag::Tuning => "tuning",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "invariant" => Ok(TaskTag::Invariant),
            "updated" => Ok(TaskTag::Updated),
            "new" => Ok(TaskTag::New),
            "new-easy" => Ok(TaskTag::NewEasy),
            "tuning" => Ok(TaskTag::Tuning),
            other => Err(CklError::Config(format!("unknown probe task {other:?}"))),
        }
    }

    /// Default decode limit: single entities for invariant probes, longer for the rest.
    pub fn default_answer_limit(self) -> usize {
        match self {
            TaskTag::Invariant | TaskTag::Tuning => 4,
            _ => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub task: TaskTag,
    pub input_text: String,
    pub answer: String,
    pub fact_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub task: TaskTag,
    pub probes: Vec<ProbeRecord>,
}

fn template_words() -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (_, forms) in RELATIONS {
        for form in forms {
            for w in form.split_whitespace() {
                if w != "[X]" && w != "[Y]" && seen.insert(w) {
                    out.push(w.to_string());
                }
            }
        }
    }
    out
}

fn entity_token(i: usize) -> String {
    format!("ent{i:04}")
}

/// Generates facts and the closed vocabulary. Byte-identical for equal specs.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = spec.rng(1);
    let names: Vec<String> = (0..spec.entities)
        .map(|i| {
            if rng.random_bool(spec.two_token_fraction) {
                let s = templates::NAME_SUFFIXES[rng.random_range(0..templates::NAME_SUFFIXES.len())];
                format!("{} {s}", entity_token(i))
            } else {
                entity_token(i)
            }
        })
        .collect();

    let total = spec.n_invariant + spec.n_tuning + spec.n_updated + spec.n_new;
    let mut keys = HashSet::with_capacity(total);
    let mut ordered = Vec::with_capacity(total);
    while ordered.len() < total {
        let key = (rng.random_range(0..spec.entities), rng.random_range(0..spec.relations));
        if keys.insert(key) {
            ordered.push(key);
        }
    }
    let other = |rng: &mut ChaCha8Rng, avoid: &[usize]| loop {
        let o = rng.random_range(0..spec.entities);
        if !avoid.contains(&o) {
            break o;
        }
    };
    let mut facts = Vec::with_capacity(total);
    for (id, &(s, r)) in ordered.iter().enumerate() {
        let (klass, tuning) = if id < spec.n_invariant {
            (Klass::Invariant, false)
        } else if id < spec.n_invariant + spec.n_tuning {
            (Klass::Invariant, true)
        } else if id < spec.n_invariant + spec.n_tuning + spec.n_updated {
            (Klass::Updated, false)
        } else {
            (Klass::New, false)
        };
        let object = other(&mut rng, &[s]);
        let old_object = (klass == Klass::Updated).then(|| other(&mut rng, &[s, object]));
        facts.push(FactTriple {
            id,
            subject: names[s].clone(),
            relation: RELATIONS[r].0.to_string(),
            object: names[object].clone(),
            klass,
            phase: if klass == Klass::Invariant { Phase::D0 } else { Phase::D1 },
            old_object: old_object.map(|o| names[o].clone()),
            tuning,
        });
    }
    let facts = assign_phases(&facts, &spec.phase_split)?;

    let mut words = template_words();
    words.extend((0..spec.entities).map(entity_token));
    words.extend(templates::NAME_SUFFIXES.iter().map(|s| s.to_string()));
    let vocab = Vocabulary::new(words)?;
    Ok(World {
        spec: spec.clone(),
        facts,
        vocab,
    })
}

/// Assigns updated and new facts to D1/D2 by `fractions`, in id order per class.
/// Invariant facts are returned unchanged.
pub fn assign_phases(facts: &[FactTriple], fractions: &[f64]) -> Result<Vec<FactTriple>> {
    if fractions.is_empty() || fractions.len() > 2 || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CklError::Config(format!("bad phase fractions {fractions:?}")));
    }
    let mut out = facts.to_vec();
    for klass in [Klass::Updated, Klass::New] {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].klass == klass).collect();
        let first = (fractions[0] * idx.len() as f64).round() as usize;
        for (j, &i) in idx.iter().enumerate() {
            out[i].phase = if j < first { Phase::D1 } else { Phase::D2 };
        }
    }
    Ok(out)
}

/// Updated and new facts of D1 and of D2 under `fractions`.
pub fn split_phases(facts: &[FactTriple], fractions: &[f64]) -> Result<(Vec<FactTriple>, Vec<FactTriple>)> {
    let assigned = assign_phases(facts, fractions)?;
    let (d1, d2): (Vec<FactTriple>, Vec<FactTriple>) = assigned
        .into_iter()
        .filter(|f| f.klass != Klass::Invariant)
        .partition(|f| f.phase == Phase::D1);
    Ok((d1, d2))
}

fn relation_forms(relation: &str) -> &'static [&'static str; 3] {
    &RELATIONS
        .iter()
        .find(|(name, _)| *name == relation)
        .unwrap_or_else(|| panic!("unknown relation {relation}"))
        .1
}

/// Renders one template; returns the text and the object's token span.
fn render(subject: &str, relation: &str, object: &str, template: usize) -> (String, usize, usize) {
    let mut tokens: Vec<&str> = Vec::new();
    let mut span = (0, 0);
    for w in relation_forms(relation)[template].split_whitespace() {
        match w {
            "[X]" => tokens.extend(subject.split_whitespace()),
            "[Y]" => {
                let start = tokens.len();
                tokens.extend(object.split_whitespace());
                span = (start, tokens.len() - start);
            }
            w => tokens.push(w),
        }
    }
    (tokens.join(" "), span.0, span.1)
}

fn cloze(fact: &FactTriple, template: usize) -> String {
    render(&fact.subject, &fact.relation, "<X0>", template).0
}

impl World {
    pub fn fact(&self, id: usize) -> Option<&FactTriple> {
        self.facts.get(id).filter(|f| f.id == id)
    }

    /// Facts restated in a corpus, paired with the object used there.
    fn corpus_facts(&self, phase: Phase) -> Vec<(&FactTriple, &str)> {
        match phase {
            Phase::D0 => self
                .facts
                .iter()
                .filter(|f| f.klass != Klass::New)
                .map(|f| (f, f.old_object.as_deref().unwrap_or(&f.object)))
                .collect(),
            later => {
                let mut invariant: Vec<&FactTriple> = self
                    .facts
                    .iter()
                    .filter(|f| f.klass == Klass::Invariant && !f.tuning)
                    .collect();
                let mut rng = self.spec.rng(10 + later as u64);
                invariant.shuffle(&mut rng);
                let keep = (self.spec.later_invariant_fraction * invariant.len() as f64).round() as usize;
                invariant.truncate(keep);
                invariant.sort_by_key(|f| f.id);
                let mut out: Vec<(&FactTriple, &str)> = invariant.into_iter().map(|f| (f, f.object.as_str())).collect();
                out.extend(
                    self.facts
                        .iter()
                        .filter(|f| f.klass != Klass::Invariant && f.phase == later)
                        .map(|f| (f, f.object.as_str())),
                );
                out
            }
        }
    }

    /// Shuffled, duplicated corpus for a phase.
    pub fn render_corpus(&self, phase: Phase) -> Corpus {
        let dup = if phase == Phase::D0 {
            self.spec.d0_duplication
        } else {
            self.spec.later_duplication
        };
        let mut sentences = Vec::new();
        for (fact, object) in self.corpus_facts(phase) {
            for t in 0..self.spec.train_templates {
                let (text, span_start, span_len) = render(&fact.subject, &fact.relation, object, t);
                for _ in 0..dup {
                    sentences.push(Sentence {
                        text: text.clone(),
                        fact_id: fact.id,
                        span_start,
                        span_len,
                    });
                }
            }
        }
        let mut rng = self.spec.rng(20 + phase as u64);
        sentences.shuffle(&mut rng);
        Corpus { phase, sentences }
    }

    /// One cloze probe per eligible fact.
    pub fn build_probes(&self, task: TaskTag) -> ProbeSet {
        let template = self.spec.probe_template();
        let record = |f: &FactTriple, input_text: String| ProbeRecord {
            task,
            input_text,
            answer: f.object.clone(),
            fact_id: f.id,
            old_answer: f.old_object.clone(),
        };
        let probes = match task {
            TaskTag::Invariant => self
                .facts
                .iter()
                .filter(|f| f.klass == Klass::Invariant && !f.tuning)
                .map(|f| record(f, cloze(f, template)))
                .collect(),
            TaskTag::Tuning => self
                .facts
                .iter()
                .filter(|f| f.tuning)
                .map(|f| record(f, cloze(f, template)))
                .collect(),
            TaskTag::Updated => self
                .facts
                .iter()
                .filter(|f| f.klass == Klass::Updated)
                .map(|f| record(f, cloze(f, template)))
                .collect(),
            TaskTag::New => self
                .facts
                .iter()
                .filter(|f| f.klass == Klass::New)
                .map(|f| record(f, cloze(f, template)))
                .collect(),
            TaskTag::NewEasy => self.easy_probes(),
        };
        ProbeSet { task, probes }
    }

    /// New facts asked with the second training surface form, preceded by
    /// another sentence of the same corpus, preferably about the same subject.
    fn easy_probes(&self) -> Vec<ProbeRecord> {
        let template = if self.spec.held_out_templates {
            self.spec.train_templates
        } else {
            (self.spec.train_templates - 1).min(1)
        };
        let mut rng = self.spec.rng(30);
        let mut out = Vec::new();
        for phase in [Phase::D1, Phase::D2] {
            let pool = self.corpus_facts(phase);
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, (f, _)) in pool.iter().enumerate() {
                by_subject.entry(f.subject.as_str()).or_default().push(i);
            }
            for (i, (f, _)) in pool.iter().enumerate() {
                if f.klass != Klass::New {
                    continue;
                }
                let siblings: Vec<usize> = by_subject[f.subject.as_str()].iter().copied().filter(|&j| j != i).collect();
                let j = if siblings.is_empty() {
                    loop {
                        let j = rng.random_range(0..pool.len());
                        if j != i || pool.len() == 1 {
                            break j;
                        }
                    }
                } else {
                    siblings[rng.random_range(0..siblings.len())]
                };
                let (cf, cobj) = pool[j];
                let context = if j == i {
                    String::new()
                } else {
                    render(&cf.subject, &cf.relation, cobj, 0).0 + " "
                };
                out.push(ProbeRecord {
                    task: TaskTag::NewEasy,
                    input_text: context + &cloze(f, template),
                    answer: f.object.clone(),
                    fact_id: f.id,
                    old_answer: None,
                });
            }
        }
        out.sort_by_key(|p| p.fact_id);
        out
    }

    pub fn phases(&self) -> Vec<Phase> {
        let mut out = vec![Phase::D0, Phase::D1];
        if self.facts.iter().any(|f| f.phase == Phase::D2) {
            out.push(Phase::D2);
        }
        out
    }

    /// Writes spec, vocabulary, facts, every corpus and every probe set.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("world.json"), &self.spec)?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        write_jsonl(&dir.join("facts.jsonl"), &self.facts)?;
        for phase in self.phases() {
            let corpus = self.render_corpus(phase);
            write_jsonl(&corpus_path(dir, phase), &corpus.sentences)?;
        }
        for task in [TaskTag::Invariant, TaskTag::Updated, TaskTag::New, TaskTag::NewEasy, TaskTag::Tuning] {
            let set = self.build_probes(task);
            write_jsonl(&probe_path(dir, task, None), &set.probes)?;
            if task == TaskTag::NewEasy && self.phases().len() > 2 {
                for phase in [Phase::D1, Phase::D2] {
                    let part = partition_probes(&set, &self.facts, phase);
                    write_jsonl(&probe_path(dir, task, Some(phase)), &part.probes)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: WorldSpec = read_json(&dir.join("world.json"))?;
        let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
        let facts: Vec<FactTriple> = read_jsonl(&dir.join("facts.jsonl"))?;
        Ok(Self { spec, facts, vocab })
    }
}

pub fn corpus_path(dir: &Path, phase: Phase) -> std::path::PathBuf {
    dir.join("corpus").join(format!("{}.jsonl", phase.name()))
}

pub fn probe_path(dir: &Path, task: TaskTag, phase: Option<Phase>) -> std::path::PathBuf {
    let name = match phase {
        Some(p) => format!("{}.{}.jsonl", task.name(), p.name()),
        None => format!("{}.jsonl", task.name()),
    };
    dir.join("probes").join(name)
}

pub fn load_corpus(dir: &Path, phase: Phase) -> Result<Corpus> {
    Ok(Corpus {
        phase,
        sentences: read_jsonl(&corpus_path(dir, phase))?,
    })
}

pub fn load_probes(dir: &Path, task: TaskTag, phase: Option<Phase>) -> Result<ProbeSet> {
    Ok(ProbeSet {
        task,
        probes: read_jsonl(&probe_path(dir, task, phase))?,
    })
}

/// Probes whose fact belongs to `phase`.
pub fn partition_probes(set: &ProbeSet, facts: &[FactTriple], phase: Phase) -> ProbeSet {
    let ids: HashSet<usize> = facts.iter().filter(|f| f.phase == phase).map(|f| f.id).collect();
    ProbeSet {
        task: set.task,
        probes: set.probes.iter().filter(|p| ids.contains(&p.fact_id)).cloned().collect(),
    }
}

/// A `fraction` of the corpus sentences, each repeated `repeat` times and reshuffled.
pub fn subsample_corpus(corpus: &Corpus, fraction: f64, repeat: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(40);
    let mut picked = corpus.sentences.clone();
    picked.shuffle(&mut rng);
    picked.truncate((fraction * corpus.len() as f64).round() as usize);
    let mut sentences: Vec<Sentence> = picked.iter().flat_map(|s| std::iter::repeat_n(s.clone(), repeat)).collect();
    sentences.shuffle(&mut rng);
    Corpus {
        phase: corpus.phase,
        sentences,
    }
}
