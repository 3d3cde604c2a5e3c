//! Caption, text-to-image contrastive and instruction losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{caption_layout, text_layout, Forward, Mode, Model, ModelInput, SpecialIds, SpliceLayout};
use crate::tensor::{Graph, Tensor, Var};
use crate::visual;

/// One image with its caption. `caption` excludes the end token.
#[derive(Clone, Debug)]
pub struct CaptionExample {
    pub caption: Vec<usize>,
    /// `img_token_count × d_img`.
    pub soft_tokens: Tensor,
    pub global: Vec<f32>,
}

/// A supervised sequence for the instruction objective.
#[derive(Clone, Debug)]
pub struct InstructionExample {
    pub layout: SpliceLayout,
    pub image: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: Option<f32>,
    pub l_t2i: Option<f32>,
    pub l_stage1: Option<f32>,
    pub l_instruction: Option<f32>,
    pub n_examples: usize,
    pub n_tokens: usize,
}

impl LossReport {
    /// The quantity being optimized.
    pub fn total(&self) -> f32 {
        self.l_stage1.or(self.l_instruction).unwrap_or(0.0)
    }
}

/// Mean next-token cross-entropy over every supervised position of `layouts`.
pub fn masked_token_loss(g: &mut Graph, model: &Model, fwd: &Forward, layouts: &[&SpliceLayout]) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, l) in layouts.iter().enumerate() {
        for (p, t) in l.prediction_pairs() {
            rows.push(fwd.row(s, p));
            targets.push(Some(t));
        }
    }
    if rows.is_empty() {
        return Err(Error::UndefinedLoss("no supervised tokens in batch".into()));
    }
    let h = g.gather_rows(fwd.hidden, &rows)?;
    let logits = model.logits(g, h)?;
    g.cross_entropy(logits, &targets)
}

fn caption_layouts(model: &Model, sp: &SpecialIds, batch: &[CaptionExample]) -> Result<Vec<SpliceLayout>> {
    let cfg = &model.config;
    batch
        .iter()
        .map(|ex| {
            if ex.caption.is_empty() {
                return Err(Error::UndefinedLoss("empty caption".into()));
            }
            let mut ids = ex.caption.clone();
            ids.push(sp.eos);
            caption_layout(sp, cfg.img_token_count, &ids, cfg.max_seq_len)
        })
        .collect()
}

/// Caption generation loss given the spliced image prefix.
pub fn caption_loss(g: &mut Graph, model: &Model, sp: &SpecialIds, batch: &[CaptionExample]) -> Result<Var> {
    let layouts = caption_layouts(model, sp, batch)?;
    let inputs: Vec<ModelInput> = layouts
        .iter()
        .zip(batch)
        .map(|(layout, ex)| ModelInput {
            layout,
            image: Some(&ex.soft_tokens),
        })
        .collect();
    let fwd = model.forward(g, &inputs, Mode::Stage1, sp.pad)?;
    let refs: Vec<&SpliceLayout> = layouts.iter().collect();
    masked_token_loss(g, model, &fwd, &refs)
}

/// Final-block states at the end token of each caption, read without the image.
pub fn end_token_states(g: &mut Graph, model: &Model, sp: &SpecialIds, captions: &[Vec<usize>], mode: Mode) -> Result<Var> {
    let layouts = captions
        .iter()
        .map(|c| {
            let mut ids = c.clone();
            ids.push(sp.eos);
            text_layout(sp, &ids, model.config.max_seq_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ModelInput> = layouts.iter().map(ModelInput::text).collect();
    let fwd = model.forward(g, &inputs, mode, sp.pad)?;
    let rows: Vec<usize> = layouts.iter().enumerate().map(|(s, l)| fwd.row(s, l.len() - 1)).collect();
    g.gather_rows(fwd.hidden, &rows)
}

/// Number of images in the batch whose global vector repeats an earlier one.
pub fn duplicate_images(globals: &[Vec<f32>]) -> usize {
    (0..globals.len())
        .filter(|&j| globals[..j].iter().any(|g| g == &globals[j]))
        .count()
}

/// `−(1/N) Σᵢ log softmax(sims[i,·] / τ)[i]` for an `N × N` similarity matrix.
pub fn infonce_from_similarity(g: &mut Graph, sims: Var, inv_tau: Var) -> Result<Var> {
    let shape = g.value(sims).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("similarity matrix of shape {shape:?} is not square")));
    }
    if shape[0] < 2 {
        return Err(Error::UndefinedLoss(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            shape[0]
        )));
    }
    let logits = g.scale_by(sims, inv_tau)?;
    let targets: Vec<Option<usize>> = (0..shape[0]).map(Some).collect();
    g.cross_entropy(logits, &targets)
}

/// Text-to-image InfoNCE with in-batch negatives.
pub fn infonce_t2i(g: &mut Graph, model: &Model, sp: &SpecialIds, batch: &[CaptionExample]) -> Result<Var> {
    if batch.len() < 2 {
        return Err(Error::UndefinedLoss(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            batch.len()
        )));
    }
    let globals: Vec<Vec<f32>> = batch.iter().map(|e| e.global.clone()).collect();
    let dups = duplicate_images(&globals);
    if dups > 0 {
        log::warn!("{dups} duplicate images in a contrastive batch of {} act as false negatives", batch.len());
    }
    let captions: Vec<Vec<usize>> = batch.iter().map(|e| e.caption.clone()).collect();
    let h_e = end_token_states(g, model, sp, &captions, Mode::Stage1)?;
    let sims = visual::similarity(g, &model.params, h_e, &globals)?;
    let inv_tau = visual::inverse_tau(g, &model.params)?;
    infonce_from_similarity(g, sims, inv_tau)
}

/// `L_c + L_t2i` together with the individual terms.
pub fn stage1_loss(g: &mut Graph, model: &Model, sp: &SpecialIds, batch: &[CaptionExample]) -> Result<(Var, LossReport)> {
    let l_c = caption_loss(g, model, sp, batch)?;
    let l_t2i = infonce_t2i(g, model, sp, batch)?;
    let total = g.add(l_c, l_t2i)?;
    let value = |v: Var| Some(g.value(v).data()[0]);
    let report = LossReport {
        l_c: value(l_c),
        l_t2i: value(l_t2i),
        l_stage1: value(total),
        l_instruction: None,
        n_examples: batch.len(),
        n_tokens: batch.iter().map(|e| e.caption.len() + 1).sum(),
    };
    Ok((total, report))
}

/// Mean response-token cross-entropy; records without an image condition on text alone.
pub fn instruction_loss(g: &mut Graph, model: &Model, sp: &SpecialIds, batch: &[InstructionExample], mode: Mode) -> Result<(Var, LossReport)> {
    if batch.iter().any(|e| e.layout.n_targets() == 0) {
        return Err(Error::UndefinedLoss("empty response".into()));
    }
    let inputs: Vec<ModelInput> = batch
        .iter()
        .map(|e| ModelInput {
            layout: &e.layout,
            image: e.image.as_ref(),
        })
        .collect();
    let fwd = model.forward(g, &inputs, mode, sp.pad)?;
    let refs: Vec<&SpliceLayout> = batch.iter().map(|e| &e.layout).collect();
    let loss = masked_token_loss(g, model, &fwd, &refs)?;
    let report = LossReport {
        l_instruction: Some(g.value(loss).data()[0]),
        n_examples: batch.len(),
        n_tokens: batch.iter().map(|e| e.layout.n_targets()).sum(),
        ..LossReport::default()
    };
    Ok((loss, report))
}
