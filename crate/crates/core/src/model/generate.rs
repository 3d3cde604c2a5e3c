use std::cmp::Ordering;

use super::{Mode, Model, ModelInput, SpliceLayout};
use crate::error::Result;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct DecodeRequest<'a> {
    pub prompt: &'a SpliceLayout,
    pub image: Option<&'a Tensor>,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub eos: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated tokens, ending with the end token if one was produced.
    pub tokens: Vec<usize>,
    /// Total log-probability of `tokens` given the prompt.
    pub log_prob: f64,
}

fn extend(prompt: &SpliceLayout, cont: &[usize]) -> SpliceLayout {
    let mut l = prompt.clone();
    l.ids.extend_from_slice(cont);
    l.loss_mask.extend(std::iter::repeat_n(false, cont.len()));
    l
}

/// Next-token log-probabilities after each continuation.
fn next_log_probs(model: &Model, req: &DecodeRequest, conts: &[Vec<usize>], mode: Mode) -> Result<Vec<Vec<f64>>> {
    let layouts: Vec<SpliceLayout> = conts.iter().map(|c| extend(req.prompt, c)).collect();
    let inputs: Vec<ModelInput> = layouts
        .iter()
        .map(|layout| ModelInput { layout, image: req.image })
        .collect();
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &inputs, mode, req.pad)?;
    let rows: Vec<usize> = layouts
        .iter()
        .enumerate()
        .map(|(s, l)| fwd.row(s, l.len() - 1))
        .collect();
    let h = g.gather_rows(fwd.hidden, &rows)?;
    let logits = model.logits(&mut g, h)?;
    let lv = g.value(logits);
    Ok((0..lv.rows()).map(|r| log_softmax(lv.row(r))).collect())
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn greedy(model: &Model, req: &DecodeRequest, mode: Mode) -> Result<Decoded> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < req.max_new_tokens {
        let lp = next_log_probs(model, req, std::slice::from_ref(&tokens), mode)?.remove(0);
        let next = argmax(&lp);
        log_prob += lp[next];
        tokens.push(next);
        if next == req.eos {
            break;
        }
    }
    Ok(Decoded { tokens, log_prob })
}

fn better(a: &Decoded, b: &Decoded) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam(model: &Model, req: &DecodeRequest, mode: Mode) -> Result<Decoded> {
    let mut beams = vec![Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..req.max_new_tokens {
        let conts: Vec<Vec<usize>> = beams.iter().map(|b| b.tokens.clone()).collect();
        let lps = next_log_probs(model, req, &conts, mode)?;
        let mut cands = Vec::with_capacity(beams.len() * lps[0].len());
        for (b, lp) in beams.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.push(tok);
                cands.push(Decoded {
                    tokens,
                    log_prob: b.log_prob + l,
                });
            }
        }
        cands.sort_by(better);
        cands.truncate(req.beam_size);
        beams.clear();
        for c in cands {
            if c.tokens.last() == Some(&req.eos) {
                finished.push(c);
            } else {
                beams.push(c);
            }
        }
        let best_done = finished.iter().map(|f| f.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_open = beams.iter().map(|f| f.log_prob).fold(f64::NEG_INFINITY, f64::max);
        // log-probabilities only decrease as tokens are appended
        if beams.is_empty() || best_done >= best_open {
            break;
        }
    }
    finished.extend(beams);
    finished.sort_by(better);
    Ok(finished.remove(0))
}

/// Greedy decoding for `beam_size == 1`, beam search otherwise. The beam
/// result is never worse than the greedy one in total log-probability.
pub fn generate(model: &Model, req: &DecodeRequest, mode: Mode) -> Result<Decoded> {
    let greedy = greedy(model, req, mode)?;
    if req.beam_size <= 1 || req.max_new_tokens == 0 {
        return Ok(greedy);
    }
    let b = beam(model, req, mode)?;
    Ok(if b.log_prob >= greedy.log_prob { b } else { greedy })
}

/// Total log-probability of `cont` following the prompt.
pub fn sequence_log_prob(model: &Model, req: &DecodeRequest, cont: &[usize], mode: Mode) -> Result<f64> {
    let prefixes: Vec<Vec<usize>> = (0..cont.len()).map(|i| cont[..i].to_vec()).collect();
    if prefixes.is_empty() {
        return Ok(0.0);
    }
    let lps = next_log_probs(model, req, &prefixes, mode)?;
    Ok(lps.iter().zip(cont).map(|(lp, &t)| lp[t]).sum())
}
