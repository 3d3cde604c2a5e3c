//! Parameter naming, shapes, initialization and stage membership.

use super::ModelConfig;

/// Which training phase a trainability question refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    /// One extra epoch that only updates the visual mapping network.
    VmnFinetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    ImageTag,
    Attention,
    Norm,
    Mlp,
    Mvm,
    Lora,
    Router,
    VisualMapping,
    Retrieval,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f32),
    Const(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const TAU_INIT: f32 = 0.07;

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

/// Names of the weight matrices of one expert, with their `[out, in]` shapes.
pub fn expert_matrices(cfg: &ModelConfig, expert: &str) -> Vec<(&'static str, [usize; 2])> {
    let d = cfg.d_model;
    let (hidden, gated) = match expert {
        "mlp" => (cfg.ffn_dim, true),
        "mvm" => (cfg.mvm_dim(), cfg.mvm_gated),
        other => panic!("unknown expert {other}"),
    };
    let mut out = Vec::with_capacity(3);
    if gated {
        out.push(("gate", [hidden, d]));
    }
    out.push(("up", [hidden, d]));
    out.push(("down", [d, hidden]));
    out
}

/// The full, ordered parameter table of a model built from `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let inv = |n: usize| 1.0 / (n as f32).sqrt();
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind, init: Init| {
        specs.push(ParamSpec {
            name,
            shape,
            kind,
            init,
        })
    };

    push("embed.tokens".into(), vec![cfg.vocab_size, d], ParamKind::TokenEmbedding, Init::Normal(1.0));
    push("embed.positions".into(), vec![cfg.max_seq_len, d], ParamKind::PositionEmbedding, Init::Normal(0.5));
    push("embed.img_start".into(), vec![1, d], ParamKind::ImageTag, Init::Normal(1.0));
    push("embed.img_end".into(), vec![1, d], ParamKind::ImageTag, Init::Normal(1.0));

    for i in 0..cfg.n_blocks {
        let p = block_prefix(i);
        for ln in ["ln1", "ln2"] {
            push(format!("{p}.{ln}.gain"), vec![d], ParamKind::Norm, Init::Ones);
            push(format!("{p}.{ln}.bias"), vec![d], ParamKind::Norm, Init::Zeros);
        }
        for (w, std) in [("q", 0.02), ("k", 0.02), ("v", inv(d)), ("o", inv(d))] {
            push(format!("{p}.attn.{w}"), vec![d, d], ParamKind::Attention, Init::Normal(std));
        }
        for expert in ["mlp", "mvm"] {
            let kind = if expert == "mlp" { ParamKind::Mlp } else { ParamKind::Mvm };
            for (w, [o, n]) in expert_matrices(cfg, expert) {
                let init = match (expert, w) {
                    ("mvm", "down") => Init::Zeros,
                    ("mvm", _) => Init::Normal(0.02),
                    _ => Init::Normal(inv(n)),
                };
                let base = format!("{p}.{expert}.{w}");
                push(format!("{base}.lora_a"), vec![cfg.lora_rank, n], ParamKind::Lora, Init::Normal(inv(n)));
                push(format!("{base}.lora_b"), vec![o, cfg.lora_rank], ParamKind::Lora, Init::Zeros);
                push(base, vec![o, n], kind, init);
            }
        }
        push(format!("{p}.router.weight"), vec![d, 2], ParamKind::Router, Init::Zeros);
        push(format!("{p}.router.bias"), vec![2], ParamKind::Router, Init::Zeros);
    }

    push("final_ln.gain".into(), vec![d], ParamKind::Norm, Init::Ones);
    push("final_ln.bias".into(), vec![d], ParamKind::Norm, Init::Zeros);
    push("lm_head".into(), vec![cfg.vocab_size, d], ParamKind::Head, Init::Normal(0.55 * inv(d)));
    push("visual.mapping".into(), vec![cfg.d_img, d], ParamKind::VisualMapping, Init::Normal(inv(cfg.d_img)));
    push("retrieval.proj".into(), vec![d, cfg.d_img], ParamKind::Retrieval, Init::Normal(inv(d)));
    push("retrieval.log_tau".into(), vec![1], ParamKind::Retrieval, Init::Const(TAU_INIT.ln()));
    specs
}

/// Kind of a parameter from its name alone.
pub fn classify(name: &str) -> Option<ParamKind> {
    use ParamKind::*;
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        return Some(Lora);
    }
    let kind = match name {
        "embed.tokens" => TokenEmbedding,
        "embed.positions" => PositionEmbedding,
        "embed.img_start" | "embed.img_end" => ImageTag,
        "final_ln.gain" | "final_ln.bias" => Norm,
        "lm_head" => Head,
        "visual.mapping" => VisualMapping,
        "retrieval.proj" | "retrieval.log_tau" => Retrieval,
        _ => {
            let rest = name.strip_prefix("blocks.")?;
            let (_, tail) = rest.split_once('.')?;
            match tail.split('.').next()? {
                "ln1" | "ln2" => Norm,
                "attn" => Attention,
                "mlp" => Mlp,
                "mvm" => Mvm,
                "router" => Router,
                _ => return None,
            }
        }
    };
    Some(kind)
}

/// Whether a parameter of this kind is updated in `stage`.
pub fn trainable_in(kind: ParamKind, stage: Stage) -> bool {
    use ParamKind::*;
    match stage {
        Stage::Stage1 => matches!(kind, Mvm | VisualMapping | Retrieval | ImageTag),
        Stage::Stage2 => matches!(kind, Lora | Router),
        Stage::VmnFinetune => kind == VisualMapping,
    }
}

pub fn name_trainable_in(name: &str, stage: Stage) -> bool {
    classify(name).is_some_and(|k| trainable_in(k, stage))
}
