//! Zero-shot probing, light-tuning and the EM / token-F1 / P@k metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::model::{answer_ranks, greedy_decode_batch, loss_and_grads, LmItem, ModelKind, ModelState};
use crate::optim::{Adam, AdamConfig};
use crate::vocab::{is_sentinel, Vocabulary, EOS};
use crate::world::{ProbeRecord, ProbeSet};

pub const P_AT_K: [usize; 6] = [1, 5, 10, 20, 50, 100];

/// Lowercase, drop ASCII punctuation, collapse whitespace.
pub fn normalize(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> u32 {
    u32::from(normalize(prediction) == normalize(gold))
}

pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 iff the 1-based `rank` is within the top `k`.
pub fn precision_at_k(rank: usize, k: usize) -> u32 {
    assert!(rank >= 1, "ranks are 1-based");
    u32::from(rank <= k)
}

/// Aggregate probe scores, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub stage: String,
    pub em: f64,
    pub f1: f64,
    pub p_at_k: BTreeMap<usize, f64>,
    pub n: usize,
}

impl TaskScore {
    /// Scores from per-probe predictions, golds and first-token ranks.
    pub fn from_parts(task: &str, stage: &str, predictions: &[String], golds: &[String], ranks: &[usize]) -> Self {
        let n = golds.len();
        let pct = |total: f64| if n == 0 { 0.0 } else { 100.0 * total / n as f64 };
        let em = predictions.iter().zip(golds).map(|(p, g)| exact_match(p, g) as f64).sum();
        let f1 = predictions.iter().zip(golds).map(|(p, g)| token_f1(p, g)).sum();
        let p_at_k = P_AT_K
            .iter()
            .map(|&k| (k, pct(ranks.iter().map(|&r| precision_at_k(r, k) as f64).sum())))
            .collect();
        Self {
            task: task.to_string(),
            stage: stage.to_string(),
            em: pct(em),
            f1: pct(f1),
            p_at_k,
            n,
        }
    }
}

/// Scores plus the decoded answer of every probe, in probe order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub score: TaskScore,
    pub predictions: Vec<String>,
}

fn check_vocab(model: &ModelState, vocab: &Vocabulary) -> Result<()> {
    if model.arch().vocab_size != vocab.len() {
        return Err(CklError::VocabularyMismatch(format!(
            "model has {} output ids, vocabulary has {} tokens",
            model.arch().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn encode_probe(vocab: &Vocabulary, probe: &ProbeRecord) -> Result<(Vec<usize>, usize)> {
    let input = vocab.tokenize(&probe.input_text);
    if !input.iter().any(|&t| is_sentinel(t)) {
        return Err(CklError::Config(format!("probe for fact {} has no sentinel", probe.fact_id)));
    }
    let first = probe
        .answer
        .split_whitespace()
        .next()
        .and_then(|w| vocab.id(w))
        .ok_or_else(|| CklError::VocabularyMismatch(format!("answer {:?} is not in the vocabulary", probe.answer)))?;
    Ok((input, first))
}

/// Greedy-decodes every probe and ranks its first gold token. Read-only on the model.
pub fn probe_model(
    model: &ModelState,
    vocab: &Vocabulary,
    probes: &ProbeSet,
    stage: &str,
    max_answer_tokens: usize,
) -> Result<ProbeOutcome> {
    check_vocab(model, vocab)?;
    let mut inputs = Vec::with_capacity(probes.probes.len());
    let mut firsts = Vec::with_capacity(probes.probes.len());
    for p in &probes.probes {
        let (input, first) = encode_probe(vocab, p)?;
        inputs.push(input);
        firsts.push(first);
    }
    let (predictions, ranks) = if inputs.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let decoded = greedy_decode_batch(model, &inputs, max_answer_tokens)?;
        let predictions: Vec<String> = decoded.iter().map(|ids| vocab.detokenize_content(ids)).collect();
        (predictions, answer_ranks(model, &inputs, &firsts)?)
    };
    let golds: Vec<String> = probes.probes.iter().map(|p| p.answer.clone()).collect();
    Ok(ProbeOutcome {
        score: TaskScore::from_parts(probes.task.name(), stage, &predictions, &golds, &ranks),
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LightTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Probe in task format: prompt followed by the answer and `</s>`.
pub fn probe_item(kind: ModelKind, vocab: &Vocabulary, probe: &ProbeRecord) -> Result<LmItem> {
    let (input, _) = encode_probe(vocab, probe)?;
    let answer = vocab.tokenize(&probe.answer);
    Ok(match kind {
        ModelKind::EncoderDecoder => {
            let sentinel = *input.iter().find(|&&t| is_sentinel(t)).expect("checked by encode_probe");
            let mut tgt = vec![sentinel];
            tgt.extend(answer);
            tgt.push(EOS);
            LmItem::Seq2Seq { src: input, tgt }
        }
        ModelKind::DecoderOnly => {
            let prompt_len = input.iter().position(|&t| is_sentinel(t)).expect("checked by encode_probe");
            let mut tokens = input[..prompt_len].to_vec();
            tokens.extend(answer);
            tokens.push(EOS);
            LmItem::Causal {
                tokens,
                loss_from: prompt_len,
            }
        }
    })
}

/// One epoch of task-format tuning at a constant learning rate (no warmup).
/// The tuning facts must not overlap any evaluated probe.
pub fn light_tune(
    model: &mut ModelState,
    vocab: &Vocabulary,
    tuning: &ProbeSet,
    evaluated: &[&ProbeSet],
    config: &LightTuneConfig,
) -> Result<()> {
    if config.epochs != 1 {
        return Err(CklError::Config(format!("light-tuning runs exactly one epoch, got {}", config.epochs)));
    }
    if config.batch_size == 0 {
        return Err(CklError::Config("light-tuning batch size must be positive".into()));
    }
    check_vocab(model, vocab)?;
    let probe_ids: HashSet<usize> = evaluated.iter().flat_map(|s| s.probes.iter().map(|p| p.fact_id)).collect();
    let mut overlap: Vec<usize> = tuning
        .probes
        .iter()
        .map(|p| p.fact_id)
        .filter(|id| probe_ids.contains(id))
        .collect();
    if !overlap.is_empty() {
        overlap.sort_unstable();
        overlap.dedup();
        return Err(CklError::TuningOverlap(overlap));
    }
    let kind = model.arch().kind;
    let mut items = tuning
        .probes
        .iter()
        .map(|p| probe_item(kind, vocab, p))
        .collect::<Result<Vec<_>>>()?;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut adam = Adam::new(AdamConfig::default());
    for batch in items.chunks(config.batch_size) {
        let (_, grads) = loss_and_grads(model, batch)?;
        adam.step(model, &grads, config.lr)?;
    }
    Ok(())
}

/// Decoded answers of one tracked probe, one entry per completed epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub probe_id: usize,
    pub task: String,
    pub input_text: String,
    pub gold: String,
    pub predictions: Vec<String>,
}

/// A fixed, seed-determined subset of `count` probes to follow across epochs.
pub fn select_tracked(probes: &ProbeSet, count: usize, seed: u64) -> Vec<PredictionTrace> {
    let mut order: Vec<&ProbeRecord> = probes.probes.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(count);
    order.sort_by_key(|p| p.fact_id);
    order
        .into_iter()
        .map(|p| PredictionTrace {
            probe_id: p.fact_id,
            task: probes.task.name().to_string(),
            input_text: p.input_text.clone(),
            gold: p.answer.clone(),
            predictions: Vec::new(),
        })
        .collect()
}

/// Appends the model's current answer to every trace. `epoch` is 1-based and
/// must follow the entries already recorded.
pub fn track_predictions(
    model: &ModelState,
    vocab: &Vocabulary,
    traces: &mut [PredictionTrace],
    epoch: usize,
    max_answer_tokens: usize,
) -> Result<()> {
    check_vocab(model, vocab)?;
    if let Some(t) = traces.iter().find(|t| t.predictions.len() + 1 != epoch) {
        return Err(CklError::Config(format!(
            "trace for probe {} holds {} epochs, cannot record epoch {epoch}",
            t.probe_id,
            t.predictions.len()
        )));
    }
    if traces.is_empty() {
        return Ok(());
    }
    let inputs: Vec<Vec<usize>> = traces.iter().map(|t| vocab.tokenize(&t.input_text)).collect();
    let decoded = greedy_decode_batch(model, &inputs, max_answer_tokens)?;
    for (t, ids) in traces.iter_mut().zip(decoded) {
        t.predictions.push(vocab.detokenize_content(&ids));
    }
    Ok(())
}
