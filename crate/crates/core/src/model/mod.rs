//! Causal transformer with a per-block visual memory, LoRA-adapted experts
//! and a two-way token-level router.

mod config;
mod count;
mod generate;
pub mod lora;
pub mod params;
mod splice;

pub use config::{Insertion, ModelConfig};
pub use count::{param_count, ParamTable, Selector};
pub use generate::{generate, sequence_log_prob, DecodeRequest, Decoded};
pub use params::{classify, name_trainable_in, param_specs, ParamKind, Stage};
pub use splice::{caption_layout, prompt_layout, splice_image, text_layout, SpecialIds, SpliceLayout};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use params::{block_prefix, expert_matrices, Init};

pub const LN_EPS: f32 = 1e-5;

/// How each block combines its sublayers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// The original transformer; the visual memory is bypassed entirely.
    Reference,
    /// Visual memory inserted per `stage1_insertion`, no LoRA, no router.
    Stage1,
    /// Router-weighted mixture of LoRA-adapted visual and textual experts.
    Mixture(Routing),
    /// LoRA-adapted textual expert alone (mixture disabled).
    TextExpert,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Routing {
    Learned,
    /// Every token gets these weights `(S₁, S₂)` instead of the router output.
    Fixed([f32; 2]),
}

/// One sequence fed to the model.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub layout: &'a SpliceLayout,
    /// `img_token_count × d_img` soft tokens when the layout has an image span.
    pub image: Option<&'a Tensor>,
}

impl<'a> ModelInput<'a> {
    pub fn text(layout: &'a SpliceLayout) -> Self {
        Self { layout, image: None }
    }
}

/// Per-block intermediate states, as graph nodes. Rows cover the whole padded batch.
#[derive(Clone, Debug)]
pub struct BlockActivations {
    pub h_s: Var,
    /// Visual-expert output (absent in reference mode and text-expert mode).
    pub h_ve: Option<Var>,
    pub h_te: Var,
    /// Router weights, `rows × 2` (mixture mode only).
    pub s: Option<Var>,
    pub h_m: Option<Var>,
    pub h_o: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Output of the final block (before the final norm), `(n_seq·seq_len) × d`.
    pub hidden: Var,
    pub blocks: Vec<BlockActivations>,
    pub n_seq: usize,
    pub seq_len: usize,
}

impl Forward {
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        seq * self.seq_len + pos
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Builds every parameter of the architecture, initialized from `config.seed`.
    /// Everything starts frozen; training plans choose what to unfreeze.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.seed).child("init");
        let mut b = ParamStore::builder();
        for spec in param_specs(&config) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::Normal(std) => seeds.normal_vec(&spec.name, 0, n, std),
            };
            b.add(spec.name, Tensor::new(spec.shape, data)?)?;
        }
        Ok(Self {
            config,
            params: b.build(),
        })
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.params.set_trainable(|n| name_trainable_in(n, stage));
    }

    /// Token, position and image embeddings for a right-padded batch.
    pub fn embed(&self, g: &mut Graph, inputs: &[ModelInput], pad: usize) -> Result<(Var, usize)> {
        let cfg = &self.config;
        let t = inputs.iter().map(|i| i.layout.len()).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::shape("empty batch"));
        }
        if t > cfg.max_seq_len {
            return Err(Error::shape(format!(
                "sequence of {t} tokens exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let mut ids = Vec::with_capacity(inputs.len() * t);
        for inp in inputs {
            ids.extend_from_slice(&inp.layout.ids);
            ids.extend(std::iter::repeat_n(pad, t - inp.layout.len()));
        }
        let table = g.param(&self.params, "embed.tokens")?;
        let mut x = g.embedding(table, &ids)?;

        let mut img_rows = Vec::new();
        let mut img_pos = Vec::new();
        let mut start_pos = Vec::new();
        let mut end_pos = Vec::new();
        for (s, inp) in inputs.iter().enumerate() {
            match (&inp.layout.image_span, inp.image) {
                (None, None) => {}
                (Some(span), Some(img)) => {
                    if img.shape() != [span.len(), cfg.d_img] {
                        return Err(Error::shape(format!(
                            "image of shape {:?} for a span of {} slots at width {}",
                            img.shape(),
                            span.len(),
                            cfg.d_img
                        )));
                    }
                    img_rows.extend_from_slice(img.data());
                    img_pos.extend(span.clone().map(|p| s * t + p));
                    start_pos.push(s * t + span.start - 1);
                    end_pos.push(s * t + span.end);
                }
                _ => return Err(Error::shape("image presence does not match the layout")),
            }
        }
        if !img_pos.is_empty() {
            let soft = g.constant(Tensor::new(vec![img_pos.len(), cfg.d_img], img_rows)?);
            let mapped = crate::visual::map_to_lm(g, &self.params, soft)?;
            x = g.overwrite_rows(x, mapped, &img_pos)?;
            for (name, pos) in [("embed.img_start", &start_pos), ("embed.img_end", &end_pos)] {
                let tag = g.param(&self.params, name)?;
                let rows = g.gather_rows(tag, &vec![0; pos.len()])?;
                x = g.overwrite_rows(x, rows, pos)?;
            }
        }
        let positions = g.param(&self.params, "embed.positions")?;
        Ok((g.add_tiled(x, positions, t)?, t))
    }

    pub fn forward(&self, g: &mut Graph, inputs: &[ModelInput], mode: Mode, pad: usize) -> Result<Forward> {
        let (mut x, t) = self.embed(g, inputs, pad)?;
        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for i in 0..self.config.n_blocks {
            let acts = self.block(g, i, x, inputs.len(), t, mode)?;
            x = acts.h_o;
            blocks.push(acts);
        }
        Ok(Forward {
            hidden: x,
            blocks,
            n_seq: inputs.len(),
            seq_len: t,
        })
    }

    /// Final norm and output head applied to the given hidden rows.
    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let gain = g.param(&self.params, "final_ln.gain")?;
        let bias = g.param(&self.params, "final_ln.bias")?;
        let n = g.layernorm(hidden, gain, bias, LN_EPS)?;
        let head = g.param(&self.params, "lm_head")?;
        g.matmul_t(n, head)
    }

    fn layernorm(&self, g: &mut Graph, x: Var, which: &str) -> Result<Var> {
        let gain = g.param(&self.params, &format!("{which}.gain"))?;
        let bias = g.param(&self.params, &format!("{which}.bias"))?;
        g.layernorm(x, gain, bias, LN_EPS)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str, lora: bool) -> Result<Var> {
        let w = g.param(&self.params, name)?;
        let y = g.matmul_t(x, w)?;
        if !lora {
            return Ok(y);
        }
        let a = g.param(&self.params, &format!("{name}.lora_a"))?;
        let b = g.param(&self.params, &format!("{name}.lora_b"))?;
        let xa = g.matmul_t(x, a)?;
        let delta = g.matmul_t(xa, b)?;
        let delta = g.scale(delta, self.config.lora_scale())?;
        g.add(y, delta)
    }

    /// `down(silu(gate·x) ⊙ up·x)`, or `down(silu(up·x))` for the plain form.
    fn expert(&self, g: &mut Graph, x: Var, block: usize, expert: &str, lora: bool) -> Result<Var> {
        let p = format!("{}.{expert}", block_prefix(block));
        let mats = expert_matrices(&self.config, expert);
        let hidden = if mats.len() == 3 {
            let gate = self.linear(g, x, &format!("{p}.gate"), lora)?;
            let gate = g.silu(gate)?;
            let up = self.linear(g, x, &format!("{p}.up"), lora)?;
            g.mul(gate, up)?
        } else {
            let up = self.linear(g, x, &format!("{p}.up"), lora)?;
            g.silu(up)?
        };
        self.linear(g, hidden, &format!("{p}.down"), lora)
    }

    fn attention(&self, g: &mut Graph, x: Var, block: usize, n_seq: usize, t: usize) -> Result<Var> {
        let p = block_prefix(block);
        let n = self.layernorm(g, x, &format!("{p}.ln1"))?;
        let q = self.linear(g, n, &format!("{p}.attn.q"), false)?;
        let k = self.linear(g, n, &format!("{p}.attn.k"), false)?;
        let v = self.linear(g, n, &format!("{p}.attn.v"), false)?;
        let a = g.causal_attention(q, k, v, n_seq, t, self.config.n_heads)?;
        let o = self.linear(g, a, &format!("{p}.attn.o"), false)?;
        g.add(x, o)
    }

    fn block(&self, g: &mut Graph, i: usize, x: Var, n_seq: usize, t: usize, mode: Mode) -> Result<BlockActivations> {
        let ln2 = format!("{}.ln2", block_prefix(i));
        let h_s = self.attention(g, x, i, n_seq, t)?;
        let acts = match mode {
            Mode::Reference => {
                let n = self.layernorm(g, h_s, &ln2)?;
                let h_te = self.expert(g, n, i, "mlp", false)?;
                let h_o = g.add(h_s, h_te)?;
                BlockActivations { h_s, h_ve: None, h_te, s: None, h_m: None, h_o }
            }
            Mode::Stage1 => match self.config.stage1_insertion {
                Insertion::Sequential => {
                    let n = self.layernorm(g, h_s, &ln2)?;
                    let h_ve = self.expert(g, n, i, "mvm", false)?;
                    let h1 = g.add(h_s, h_ve)?;
                    let n1 = self.layernorm(g, h1, &ln2)?;
                    let h_te = self.expert(g, n1, i, "mlp", false)?;
                    let h_o = g.add(h1, h_te)?;
                    BlockActivations { h_s, h_ve: Some(h_ve), h_te, s: None, h_m: None, h_o }
                }
                Insertion::Parallel => {
                    let n = self.layernorm(g, h_s, &ln2)?;
                    let h_ve = self.expert(g, n, i, "mvm", false)?;
                    let h_te = self.expert(g, n, i, "mlp", false)?;
                    let both = g.add(h_ve, h_te)?;
                    let h_o = g.add(h_s, both)?;
                    BlockActivations { h_s, h_ve: Some(h_ve), h_te, s: None, h_m: Some(both), h_o }
                }
            },
            Mode::Mixture(routing) => {
                let n = self.layernorm(g, h_s, &ln2)?;
                let h_ve = self.expert(g, n, i, "mvm", true)?;
                let h_te = self.expert(g, n, i, "mlp", true)?;
                let s = match routing {
                    Routing::Learned => self.router(g, h_s, i)?,
                    Routing::Fixed(w) => {
                        let rows = g.value(h_s).rows();
                        g.constant(Tensor::new(vec![rows, 2], w.repeat(rows))?)
                    }
                };
                let ve = g.col_scale(h_ve, s, 0)?;
                let te = g.col_scale(h_te, s, 1)?;
                let h_m = g.add(ve, te)?;
                let h_o = g.add(h_s, h_m)?;
                BlockActivations { h_s, h_ve: Some(h_ve), h_te, s: Some(s), h_m: Some(h_m), h_o }
            }
            Mode::TextExpert => {
                let n = self.layernorm(g, h_s, &ln2)?;
                let h_te = self.expert(g, n, i, "mlp", true)?;
                let h_o = g.add(h_s, h_te)?;
                BlockActivations { h_s, h_ve: None, h_te, s: None, h_m: Some(h_te), h_o }
            }
        };
        Ok(acts)
    }

    /// `softmax(h_s·w_s + b_s)` per token.
    fn router(&self, g: &mut Graph, h_s: Var, block: usize) -> Result<Var> {
        let p = block_prefix(block);
        let w = g.param(&self.params, &format!("{p}.router.weight"))?;
        let b = g.param(&self.params, &format!("{p}.router.bias"))?;
        let z = g.matmul(h_s, w)?;
        let z = g.add_row(z, b)?;
        g.softmax(z)
    }
}

#[cfg(test)]
mod tests;
