use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::vocab::{is_sentinel, sentinel, EOS};

/// Salient-span-masked training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Replaces `span` with sentinel 0; the target is the sentinel, the span, then `</s>`.
pub fn ssm_mask(sentence: &[usize], span: Range<usize>) -> Result<MaskedExample> {
    if span.start >= span.end || span.end > sentence.len() {
        return Err(CklError::InvalidSpan {
            start: span.start,
            end: span.end,
            len: sentence.len(),
        });
    }
    let mut input = sentence[..span.start].to_vec();
    input.push(sentinel(0));
    input.extend_from_slice(&sentence[span.end..]);
    let mut target = vec![sentinel(0)];
    target.extend_from_slice(&sentence[span.clone()]);
    target.push(EOS);
    Ok(MaskedExample { input, target })
}

/// Puts every sentinel's target segment back into the input.
pub fn unmask(example: &MaskedExample) -> Vec<usize> {
    let segment = |s: usize| -> &[usize] {
        let Some(start) = example.target.iter().position(|&t| t == s) else {
            return &[];
        };
        let rest = &example.target[start + 1..];
        let end = rest.iter().position(|&t| t == EOS || is_sentinel(t)).unwrap_or(rest.len());
        &rest[..end]
    };
    let mut out = Vec::with_capacity(example.input.len() + example.target.len());
    for &t in &example.input {
        if is_sentinel(t) {
            out.extend_from_slice(segment(t));
        } else {
            out.push(t);
        }
    }
    out
}
