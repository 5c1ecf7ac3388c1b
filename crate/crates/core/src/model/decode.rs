//! Batched greedy decoding and first-answer-token ranks.

use std::collections::BTreeMap;

use ckl_autodiff::Tensor;

use super::forward::{Net, Padded};
use super::{ModelKind, ModelState};
use crate::error::{CklError, Result};
use crate::vocab::{is_sentinel, is_special, sentinel, EOS, PAD};

const CHUNK: usize = 128;

/// Highest logit; ties go to the lowest id.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// 1-based rank of `gold` under the same ordering as [`argmax`].
pub(crate) fn rank_of(row: &[f32], gold: usize) -> usize {
    let g = row[gold];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > g || (v == g && i < gold))
        .count()
}

fn prompt_of(input: &[usize]) -> &[usize] {
    let end = input.iter().position(|&t| is_sentinel(t)).unwrap_or(input.len());
    &input[..end]
}

fn check_inputs(model: &ModelState, inputs: &[Vec<usize>]) -> Result<()> {
    let arch = model.arch();
    for input in inputs {
        if input.is_empty() || input.len() > arch.max_len {
            return Err(CklError::Config(format!("probe input length {} outside 1..={}", input.len(), arch.max_len)));
        }
        if let Some(&bad) = input.iter().find(|&&t| t >= arch.vocab_size) {
            return Err(CklError::VocabularyMismatch(format!("token id {bad} >= vocabulary size {}", arch.vocab_size)));
        }
    }
    Ok(())
}

struct Decoding {
    answer: Vec<usize>,
    done: bool,
}

impl Decoding {
    fn push(&mut self, token: usize, max_answer: usize) {
        if self.done {
            return;
        }
        if token == EOS {
            self.done = true;
        } else if !is_special(token) {
            self.answer.push(token);
            self.done = self.answer.len() >= max_answer;
        }
    }
}

fn last_rows(logits: &Tensor, batch: usize, len: usize) -> Vec<&[f32]> {
    (0..batch).map(|b| logits.row(b * len + len - 1)).collect()
}

fn decode_seq2seq(model: &ModelState, inputs: &[Vec<usize>], max_answer: usize) -> Result<Vec<Vec<usize>>> {
    let max_steps = (max_answer + 1).min(model.arch().max_len - 1);
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let src = Padded::new(&refs);
        let mut enc = Net::new(model, false);
        enc.encode(&src);
        let mem = enc.forward()?;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![PAD]; chunk.len()];
        let mut states: Vec<Decoding> = (0..chunk.len())
            .map(|_| Decoding {
                answer: Vec::new(),
                done: false,
            })
            .collect();
        for _ in 0..max_steps {
            if states.iter().all(|s| s.done) {
                break;
            }
            let dec_refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            let dec_in = Padded::new(&dec_refs);
            let mut net = Net::new(model, false);
            let m = net.constant(mem.clone());
            net.decode(m, &src, &dec_in);
            let logits = net.forward()?;
            for (b, row) in last_rows(&logits, chunk.len(), dec_in.len).into_iter().enumerate() {
                let t = if states[b].done { PAD } else { argmax(row) };
                states[b].push(t, max_answer);
                prefixes[b].push(t);
            }
        }
        out.extend(states.into_iter().map(|s| s.answer));
    }
    Ok(out)
}

/// Groups indices by prompt length so each causal batch is unpadded.
fn by_prompt_len(inputs: &[Vec<usize>]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, input) in inputs.iter().enumerate() {
        groups.entry(prompt_of(input).len()).or_default().push(i);
    }
    groups
}

fn decode_causal(model: &ModelState, inputs: &[Vec<usize>], max_answer: usize) -> Result<Vec<Vec<usize>>> {
    let max_len = model.arch().max_len;
    let mut out = vec![Vec::new(); inputs.len()];
    for (plen, members) in by_prompt_len(inputs) {
        let max_steps = (max_answer + 1).min(max_len.saturating_sub(plen + 1));
        for chunk in members.chunks(CHUNK) {
            let mut seqs: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| {
                    let mut s = vec![PAD];
                    s.extend_from_slice(prompt_of(&inputs[i]));
                    s
                })
                .collect();
            let mut states: Vec<Decoding> = (0..chunk.len())
                .map(|_| Decoding {
                    answer: Vec::new(),
                    done: false,
                })
                .collect();
            for _ in 0..max_steps {
                if states.iter().all(|s| s.done) {
                    break;
                }
                let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
                let padded = Padded::new(&refs);
                let mut net = Net::new(model, false);
                net.causal(&padded);
                let logits = net.forward()?;
                for (b, row) in last_rows(&logits, chunk.len(), padded.len).into_iter().enumerate() {
                    let t = if states[b].done { PAD } else { argmax(row) };
                    states[b].push(t, max_answer);
                    seqs[b].push(t);
                }
            }
            for (&i, s) in chunk.iter().zip(states) {
                out[i] = s.answer;
            }
        }
    }
    Ok(out)
}

/// Greedy answers for many probe inputs; special tokens are stripped and each
/// answer holds at most `max_answer_tokens` content tokens.
pub fn greedy_decode_batch(model: &ModelState, inputs: &[Vec<usize>], max_answer_tokens: usize) -> Result<Vec<Vec<usize>>> {
    if max_answer_tokens == 0 {
        return Err(CklError::Config("max_answer_tokens must be at least 1".into()));
    }
    check_inputs(model, inputs)?;
    match model.arch().kind {
        ModelKind::EncoderDecoder => decode_seq2seq(model, inputs, max_answer_tokens),
        ModelKind::DecoderOnly => decode_causal(model, inputs, max_answer_tokens),
    }
}

pub fn greedy_decode(model: &ModelState, input: &[usize], max_answer_tokens: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(model, &[input.to_vec()], max_answer_tokens)?.remove(0))
}

/// Rank of each gold first token at the first answer position.
pub fn answer_ranks(model: &ModelState, inputs: &[Vec<usize>], golds: &[usize]) -> Result<Vec<usize>> {
    if inputs.len() != golds.len() {
        return Err(CklError::Config(format!("{} inputs for {} gold tokens", inputs.len(), golds.len())));
    }
    check_inputs(model, inputs)?;
    let vocab = model.arch().vocab_size;
    if let Some(&bad) = golds.iter().find(|&&g| g >= vocab) {
        return Err(CklError::VocabularyMismatch(format!("gold id {bad} >= vocabulary size {vocab}")));
    }
    let mut out = vec![0; inputs.len()];
    match model.arch().kind {
        ModelKind::EncoderDecoder => {
            for (c, chunk) in inputs.chunks(CHUNK).enumerate() {
                let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
                let src = Padded::new(&refs);
                let start = [PAD, sentinel(0)];
                let dec_in = Padded::new(&vec![&start[..]; chunk.len()]);
                let mut net = Net::new(model, false);
                let mem = net.encode(&src);
                net.decode(mem, &src, &dec_in);
                let logits = net.forward()?;
                for (b, row) in last_rows(&logits, chunk.len(), 2).into_iter().enumerate() {
                    let i = c * CHUNK + b;
                    out[i] = rank_of(row, golds[i]);
                }
            }
        }
        ModelKind::DecoderOnly => {
            for (_, members) in by_prompt_len(inputs) {
                for chunk in members.chunks(CHUNK) {
                    let seqs: Vec<Vec<usize>> = chunk
                        .iter()
                        .map(|&i| {
                            let mut s = vec![PAD];
                            s.extend_from_slice(prompt_of(&inputs[i]));
                            s
                        })
                        .collect();
                    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
                    let padded = Padded::new(&refs);
                    let mut net = Net::new(model, false);
                    net.causal(&padded);
                    let logits = net.forward()?;
                    for (b, row) in last_rows(&logits, chunk.len(), padded.len).into_iter().enumerate() {
                        out[chunk[b]] = rank_of(row, golds[chunk[b]]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn rank_answer_token(model: &ModelState, input: &[usize], gold: usize) -> Result<usize> {
    Ok(answer_ranks(model, &[input.to_vec()], &[gold])?[0])
}
