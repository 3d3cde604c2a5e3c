use serde::Serialize;

use super::params::{param_specs, trainable_in, ParamKind, Stage};
use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    Mvm,
    Lora,
    Router,
    /// The pretrained language model: embeddings, attention, norms, MLP, head.
    Base,
    All,
    TrainableIn(Stage),
}

impl Selector {
    fn matches(self, kind: ParamKind) -> bool {
        use ParamKind::*;
        match self {
            Selector::Mvm => kind == Mvm,
            Selector::Lora => kind == Lora,
            Selector::Router => kind == Router,
            Selector::Base => matches!(
                kind,
                TokenEmbedding | PositionEmbedding | Attention | Norm | Mlp | Head
            ),
            Selector::All => true,
            Selector::TrainableIn(stage) => trainable_in(kind, stage),
        }
    }
}

/// Exact number of scalars selected by `selector` in a model built from `cfg`.
pub fn param_count(cfg: &ModelConfig, selector: Selector) -> u64 {
    param_specs(cfg)
        .iter()
        .filter(|s| selector.matches(s.kind))
        .map(|s| s.numel() as u64)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamTable {
    pub total: u64,
    pub base: u64,
    pub mvm: u64,
    pub lora: u64,
    pub router: u64,
    pub stage1_trainable: u64,
    pub stage2_trainable: u64,
}

impl ParamTable {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            total: param_count(cfg, Selector::All),
            base: param_count(cfg, Selector::Base),
            mvm: param_count(cfg, Selector::Mvm),
            lora: param_count(cfg, Selector::Lora),
            router: param_count(cfg, Selector::Router),
            stage1_trainable: param_count(cfg, Selector::TrainableIn(Stage::Stage1)),
            stage2_trainable: param_count(cfg, Selector::TrainableIn(Stage::Stage2)),
        }
    }

    pub fn stage2_fraction(&self) -> f64 {
        self.stage2_trainable as f64 / self.total as f64
    }
}
