//! Probe accuracy, retrieval recall, caption perplexity, image QA and router statistics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{
    answer_slot, gen_eval_captions, gen_mm_eval, gen_probe, gen_train_probe, question_kind, AttrKind, Record, Split, World,
};
use crate::error::{Error, Result};
use crate::model::{prompt_layout, Mode, Model, ModelInput, SpliceLayout};
use crate::objectives::{end_token_states, CaptionExample};
use crate::tensor::{Graph, Tensor};
use crate::training::{distinct_batches, ExampleBuilder};
use crate::visual;

/// Sequences evaluated per forward pass.
pub const EVAL_BATCH: usize = 32;
/// Decoding budget for templated answers.
pub const MAX_ANSWER_TOKENS: usize = 6;

/// Rank of the gold column in each row of a square similarity matrix, 0 = best.
/// Ties go to the lower column index.
pub fn gold_ranks(sims: &Tensor) -> Vec<usize> {
    (0..sims.rows())
        .map(|i| {
            let row = sims.row(i);
            let gold = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| s > gold || (s == gold && j < i))
                .count()
        })
        .collect()
}

/// Text-to-image recall@k over caption batches of `batch` distinct images.
/// A trailing batch smaller than `batch` is dropped.
pub fn retrieval_recall(
    model: &Model,
    builder: &ExampleBuilder,
    records: &[Record],
    batch: usize,
    ks: &[usize],
    mode: Mode,
) -> Result<Vec<f64>> {
    if let Some(&k) = ks.iter().find(|&&k| k > batch || k == 0) {
        return Err(Error::Contract(format!("recall@{k} undefined for batches of {batch}")));
    }
    let examples = records
        .iter()
        .map(|r| builder.caption(r))
        .collect::<Result<Vec<CaptionExample>>>()?;
    let order: Vec<usize> = (0..examples.len()).collect();
    let batches: Vec<Vec<usize>> = distinct_batches(&order, |i| examples[i].global.clone(), batch)
        .into_iter()
        .filter(|b| b.len() == batch)
        .collect();
    if batches.is_empty() {
        return Err(Error::Degenerate(format!("no full batch of {batch} distinct images")));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0;
    for b in &batches {
        let captions: Vec<Vec<usize>> = b.iter().map(|&i| examples[i].caption.clone()).collect();
        let globals: Vec<Vec<f32>> = b.iter().map(|&i| examples[i].global.clone()).collect();
        let mut g = Graph::new();
        let h = end_token_states(&mut g, model, &builder.specials, &captions, mode)?;
        let sims = visual::similarity(&mut g, &model.params, h, &globals)?;
        for r in gold_ranks(g.value(sims)) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                *h += (r < k) as usize;
            }
            total += 1;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / total as f64).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    /// Teacher-forced argmax accuracy over caption tokens (end token included).
    pub token_accuracy: f64,
    pub perplexity: f64,
    pub n_tokens: usize,
}

/// Given-image caption accuracy and perplexity.
pub fn caption_metrics(model: &Model, builder: &ExampleBuilder, records: &[Record], mode: Mode) -> Result<CaptionMetrics> {
    let sp = builder.specials;
    let cfg = &model.config;
    let (mut correct, mut n, mut nll) = (0usize, 0usize, 0.0f64);
    for chunk in records.chunks(EVAL_BATCH) {
        let examples = chunk.iter().map(|r| builder.caption(r)).collect::<Result<Vec<_>>>()?;
        let layouts = examples
            .iter()
            .map(|e| {
                let mut ids = e.caption.clone();
                ids.push(sp.eos);
                crate::model::caption_layout(&sp, cfg.img_token_count, &ids, cfg.max_seq_len)
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<ModelInput> = layouts
            .iter()
            .zip(&examples)
            .map(|(layout, e)| ModelInput {
                layout,
                image: Some(&e.soft_tokens),
            })
            .collect();
        let scored = score_targets(model, &inputs, &layouts, mode, sp.pad)?;
        for (lp, best) in scored {
            nll -= lp;
            correct += best as usize;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no caption tokens to score".into()));
    }
    Ok(CaptionMetrics {
        token_accuracy: correct as f64 / n as f64,
        perplexity: (nll / n as f64).exp(),
        n_tokens: n,
    })
}

/// `(log p(target), target is the argmax)` for every supervised position.
fn score_targets(model: &Model, inputs: &[ModelInput], layouts: &[SpliceLayout], mode: Mode, pad: usize) -> Result<Vec<(f64, bool)>> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, inputs, mode, pad)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, l) in layouts.iter().enumerate() {
        for (p, t) in l.prediction_pairs() {
            rows.push(fwd.row(s, p));
            targets.push(t);
        }
    }
    let h = g.gather_rows(fwd.hidden, &rows)?;
    let logits = model.logits(&mut g, h)?;
    let lv = g.value(logits);
    Ok(targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| (v as f64 - max as f64).exp()).sum::<f64>().ln() + max as f64;
            let best = row.iter().position(|&v| v == max).unwrap_or(0);
            (row[t] as f64 - lse, best == t)
        })
        .collect())
}

/// Greedy continuations of several prompts at once, each stopped at the end
/// token or after `max_new` tokens.
pub fn greedy_batch(
    model: &Model,
    prompts: &[(SpliceLayout, Option<Tensor>)],
    max_new: usize,
    eos: usize,
    pad: usize,
    mode: Mode,
) -> Result<Vec<Vec<usize>>> {
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
    let mut open: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..max_new {
        if open.is_empty() {
            break;
        }
        let layouts: Vec<SpliceLayout> = open
            .iter()
            .map(|&i| {
                let mut l = prompts[i].0.clone();
                l.ids.extend_from_slice(&outs[i]);
                l.loss_mask.extend(std::iter::repeat_n(false, outs[i].len()));
                l
            })
            .collect();
        let inputs: Vec<ModelInput> = layouts
            .iter()
            .zip(&open)
            .map(|(layout, &i)| ModelInput {
                layout,
                image: prompts[i].1.as_ref(),
            })
            .collect();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &inputs, mode, pad)?;
        let rows: Vec<usize> = layouts.iter().enumerate().map(|(s, l)| fwd.row(s, l.len() - 1)).collect();
        let h = g.gather_rows(fwd.hidden, &rows)?;
        let logits = model.logits(&mut g, h)?;
        let lv = g.value(logits);
        let mut still = Vec::new();
        for (r, &i) in open.iter().enumerate() {
            let row = lv.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            outs[i].push(best);
            if best != eos && prompts[i].0.len() + outs[i].len() < model.config.max_seq_len {
                still.push(i);
            }
        }
        open = still;
    }
    Ok(outs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttrScores {
    pub color: f64,
    pub shape: f64,
    pub count: f64,
    pub overall: f64,
    pub n: usize,
}

impl AttrScores {
    pub fn get(&self, kind: AttrKind) -> f64 {
        match kind {
            AttrKind::Color => self.color,
            AttrKind::Shape => self.shape,
            AttrKind::Count => self.count,
        }
    }
}

/// Slot-exact-match scoring of generated answers against gold answers.
pub fn score_answers(records: &[Record], generated: &[String]) -> Result<AttrScores> {
    let mut right = [0usize; 3];
    let mut seen = [0usize; 3];
    for (r, text) in records.iter().zip(generated) {
        let kind = question_kind(&r.prompt)
            .ok_or_else(|| Error::Contract(format!("not an attribute question: {}", r.prompt)))?;
        let k = kind as usize;
        seen[k] += 1;
        let gold = answer_slot(&r.response);
        let got = answer_slot(text);
        right[k] += (gold.is_some() && got == gold) as usize;
    }
    let frac = |k: usize| if seen[k] == 0 { 0.0 } else { right[k] as f64 / seen[k] as f64 };
    let n: usize = seen.iter().sum();
    Ok(AttrScores {
        color: frac(0),
        shape: frac(1),
        count: frac(2),
        overall: if n == 0 { 0.0 } else { right.iter().sum::<usize>() as f64 / n as f64 },
        n,
    })
}

/// Greedy answers to attribute questions, scored by the attribute slot.
/// Image questions (records with an image) see their picture.
pub fn answer_accuracy(model: &Model, builder: &ExampleBuilder, records: &[Record], mode: Mode) -> Result<(AttrScores, Vec<String>)> {
    let sp = builder.specials;
    let tok = &builder.world.tokenizer;
    let mut texts = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let prompts = chunk
            .iter()
            .map(|r| {
                let ids = tok.encode_strict(&r.prompt)?;
                let image = match r.kind {
                    crate::data::Kind::MmInst => builder.image(r)?.map(|i| builder.encoder.encode(&i)).transpose()?,
                    _ => None,
                };
                let n_img = image.as_ref().map(|e| e.soft_tokens.rows());
                let layout = prompt_layout(&sp, &ids, n_img, model.config.max_seq_len)?;
                Ok((layout, image.map(|e| e.soft_tokens)))
            })
            .collect::<Result<Vec<_>>>()?;
        for out in greedy_batch(model, &prompts, MAX_ANSWER_TOKENS, sp.eos, sp.pad, mode)? {
            texts.push(tok.decode(&out));
        }
    }
    Ok((score_answers(records, &texts)?, texts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    ImageSpan,
    EntityName,
    OtherText,
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub mean: f64,
    pub count: usize,
    /// Counts of S₁ in `[i/10, (i+1)/10)`, the last bin closed.
    pub histogram: [usize; HISTOGRAM_BINS],
}

impl WeightSummary {
    fn add(&mut self, s1: f64) {
        self.mean += s1;
        self.count += 1;
        let bin = ((s1 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        self.histogram[bin] += 1;
    }

    fn merge(&mut self, o: &WeightSummary) {
        self.mean += o.mean;
        self.count += o.count;
        for (a, b) in self.histogram.iter_mut().zip(o.histogram) {
            *a += b;
        }
    }

    fn finish(&mut self) {
        if self.count > 0 {
            self.mean /= self.count as f64;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub image_span: WeightSummary,
    pub entity_name: WeightSummary,
    pub other_text: WeightSummary,
    pub all: WeightSummary,
}

impl CategoryStats {
    fn slot(&mut self, c: TokenCategory) -> &mut WeightSummary {
        match c {
            TokenCategory::ImageSpan => &mut self.image_span,
            TokenCategory::EntityName => &mut self.entity_name,
            TokenCategory::OtherText => &mut self.other_text,
        }
    }

    pub fn get(&self, c: TokenCategory) -> &WeightSummary {
        match c {
            TokenCategory::ImageSpan => &self.image_span,
            TokenCategory::EntityName => &self.entity_name,
            TokenCategory::OtherText => &self.other_text,
        }
    }

    fn finish(&mut self) {
        for s in [&mut self.image_span, &mut self.entity_name, &mut self.other_text, &mut self.all] {
            s.finish();
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub per_block: Vec<CategoryStats>,
    pub pooled: CategoryStats,
    /// Largest `|S₁ + S₂ − 1|` over every scored token and block.
    pub max_row_sum_error: f64,
    pub n_tokens: usize,
}

/// Category of every real (non-padding) position of a layout.
pub fn categorize(layout: &SpliceLayout, names: &BTreeSet<usize>) -> Vec<TokenCategory> {
    (0..layout.len())
        .map(|p| {
            if layout.image_span.as_ref().is_some_and(|s| s.contains(&p)) {
                TokenCategory::ImageSpan
            } else if names.contains(&layout.ids[p]) {
                TokenCategory::EntityName
            } else {
                TokenCategory::OtherText
            }
        })
        .collect()
}

/// Visual-expert weight S₁ by token category, per block and pooled, over
/// the given instruction-style records.
pub fn router_stats(model: &Model, builder: &ExampleBuilder, records: &[Record]) -> Result<RouterStats> {
    let names: BTreeSet<usize> = builder
        .world
        .lexicon
        .iter()
        .filter_map(|w| builder.world.tokenizer.id(w))
        .collect();
    let n_blocks = model.config.n_blocks;
    let mut per_block = vec![CategoryStats::default(); n_blocks];
    let mut max_err = 0.0f64;
    let mut n_tokens = 0;
    for chunk in records.chunks(EVAL_BATCH) {
        let examples = chunk.iter().map(|r| builder.instruction(r)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<ModelInput> = examples
            .iter()
            .map(|e| ModelInput {
                layout: &e.layout,
                image: e.image.as_ref(),
            })
            .collect();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &inputs, Mode::Mixture(crate::model::Routing::Learned), builder.specials.pad)?;
        for (s, e) in examples.iter().enumerate() {
            let cats = categorize(&e.layout, &names);
            n_tokens += cats.len();
            for (b, acts) in fwd.blocks.iter().enumerate() {
                let w = g.value(acts.s.ok_or_else(|| Error::Contract("mixture forward without router".into()))?);
                for (p, &c) in cats.iter().enumerate() {
                    let row = w.row(fwd.row(s, p));
                    let (s1, s2) = (row[0] as f64, row[1] as f64);
                    max_err = max_err.max((s1 + s2 - 1.0).abs());
                    per_block[b].slot(c).add(s1);
                    per_block[b].all.add(s1);
                }
            }
        }
    }
    let mut pooled = CategoryStats::default();
    for b in &per_block {
        pooled.image_span.merge(&b.image_span);
        pooled.entity_name.merge(&b.entity_name);
        pooled.other_text.merge(&b.other_text);
        pooled.all.merge(&b.all);
    }
    per_block.iter_mut().for_each(CategoryStats::finish);
    pooled.finish();
    Ok(RouterStats {
        per_block,
        pooled,
        max_row_sum_error: max_err,
        n_tokens,
    })
}


/// Everything `eval` reports about one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Text-only questions about held-out entities.
    pub probe: AttrScores,
    /// The same questions about training entities.
    pub train_probe: AttrScores,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub caption: CaptionMetrics,
    /// Image questions about held-out entities.
    pub mm_qa: AttrScores,
    pub router: RouterStats,
    pub arch_hash: String,
    pub checkpoint: Option<String>,
    pub world_seed: u64,
    pub n_entities: usize,
}

/// Retrieval batch and cut-offs used by [`evaluate`].
pub const RETRIEVAL_BATCH: usize = 16;
const EVAL_CAPTIONS: usize = 256;

pub fn evaluate(model: &Model, world: &World, mode: Mode) -> Result<EvalReport> {
    let builder = ExampleBuilder::new(world, &model.config)?;
    let probe = gen_probe(world);
    let (probe_scores, _) = answer_accuracy(model, &builder, &probe, mode)?;
    let (train_scores, _) = answer_accuracy(model, &builder, &gen_train_probe(world), mode)?;
    let captions = gen_eval_captions(world, EVAL_CAPTIONS, Split::HeldOut);
    let recall = retrieval_recall(model, &builder, &captions, RETRIEVAL_BATCH, &[1, 5], Mode::Stage1)?;
    let caption = caption_metrics(model, &builder, &captions, Mode::Stage1)?;
    let mm = gen_mm_eval(world, Split::HeldOut);
    let (mm_scores, _) = answer_accuracy(model, &builder, &mm, mode)?;
    let mut routed = probe;
    routed.extend(mm);
    let router = router_stats(model, &builder, &routed)?;
    Ok(EvalReport {
        probe: probe_scores,
        train_probe: train_scores,
        recall_at_1: recall[0],
        recall_at_5: recall[1],
        caption,
        mm_qa: mm_scores,
        router,
        arch_hash: format!("{:016x}", model.config.arch_hash()),
        checkpoint: None,
        world_seed: world.seed,
        n_entities: world.entities.len(),
    })
}

#[cfg(test)]
mod tests;
