//! Token layouts for captions, instructions and image-prefixed sequences.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ids of the reserved tokens. Assigned by the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub bos: usize,
    pub eos: usize,
    pub inst: usize,
    pub inst_end: usize,
    pub img_start: usize,
    pub img_end: usize,
}

/// A sequence of token ids with an optional image span and a per-position
/// loss mask. Image slots hold `pad` ids; their embeddings come from the
/// image, and the positions immediately before and after the span carry the
/// learnable image tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpliceLayout {
    pub ids: Vec<usize>,
    pub image_span: Option<Range<usize>>,
    pub loss_mask: Vec<bool>,
}

impl SpliceLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions whose token is a training target.
    pub fn target_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    /// Number of supervised tokens.
    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// `(row, target)` pairs for next-token prediction: the hidden state at
    /// `p - 1` predicts the token at every masked position `p`.
    pub fn prediction_pairs(&self) -> Vec<(usize, usize)> {
        self.target_positions()
            .filter(|&p| p > 0)
            .map(|p| (p - 1, self.ids[p]))
            .collect()
    }

    fn check_len(self, max_len: usize) -> Result<Self> {
        if self.len() > max_len {
            return Err(Error::shape(format!(
                "sequence of {} tokens exceeds max_seq_len {max_len}",
                self.len()
            )));
        }
        Ok(self)
    }
}

struct Builder {
    ids: Vec<usize>,
    mask: Vec<bool>,
    span: Option<Range<usize>>,
}

impl Builder {
    fn new() -> Self {
        Self {
            ids: Vec::new(),
            mask: Vec::new(),
            span: None,
        }
    }

    fn push(&mut self, ids: &[usize], supervised: bool) {
        self.ids.extend_from_slice(ids);
        self.mask.extend(std::iter::repeat_n(supervised, ids.len()));
    }

    fn image(&mut self, sp: &SpecialIds, n: usize) {
        self.push(&[sp.img_start], false);
        let start = self.ids.len();
        self.push(&vec![sp.pad; n], false);
        self.span = Some(start..start + n);
        self.push(&[sp.img_end], false);
    }

    fn finish(self, max_len: usize) -> Result<SpliceLayout> {
        SpliceLayout {
            ids: self.ids,
            image_span: self.span,
            loss_mask: self.mask,
        }
        .check_len(max_len)
    }
}

/// `[INST] (img_start IMG×n img_end)? prompt [/INST] response`, supervised on
/// the response only. The response should already end with the end token.
pub fn splice_image(
    sp: &SpecialIds,
    prompt: &[usize],
    n_image_tokens: Option<usize>,
    response: &[usize],
    max_len: usize,
) -> Result<SpliceLayout> {
    if response.is_empty() {
        return Err(Error::shape("empty response"));
    }
    let mut b = Builder::new();
    b.push(&[sp.inst], false);
    if let Some(n) = n_image_tokens {
        b.image(sp, n);
    }
    b.push(prompt, false);
    b.push(&[sp.inst_end], false);
    b.push(response, true);
    b.finish(max_len)
}

/// `img_start IMG×n img_end caption`, supervised on the caption.
pub fn caption_layout(sp: &SpecialIds, n_image_tokens: usize, caption: &[usize], max_len: usize) -> Result<SpliceLayout> {
    if caption.is_empty() {
        return Err(Error::shape("empty caption"));
    }
    let mut b = Builder::new();
    b.image(sp, n_image_tokens);
    b.push(caption, true);
    b.finish(max_len)
}

/// `begin text`, unsupervised, for reading out end-token states.
pub fn text_layout(sp: &SpecialIds, text: &[usize], max_len: usize) -> Result<SpliceLayout> {
    let mut b = Builder::new();
    b.push(&[sp.bos], false);
    b.push(text, false);
    b.finish(max_len)
}

/// Prompt-only layout for decoding: `[INST] (image)? prompt [/INST]`.
pub fn prompt_layout(sp: &SpecialIds, prompt: &[usize], n_image_tokens: Option<usize>, max_len: usize) -> Result<SpliceLayout> {
    let mut b = Builder::new();
    b.push(&[sp.inst], false);
    if let Some(n) = n_image_tokens {
        b.image(sp, n);
    }
    b.push(prompt, false);
    b.push(&[sp.inst_end], false);
    b.finish(max_len)
}
