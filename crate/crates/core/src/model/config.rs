use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where the visual memory sits relative to the original MLP during stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// attention → +MVM → +MLP
    #[default]
    Sequential,
    /// attention → +(MVM + MLP) on the same normalized state
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Hidden width of the original (textual-expert) gated MLP.
    pub ffn_dim: usize,
    /// Visual-memory middle width as a fraction of `d_model`.
    pub mvm_ratio: f64,
    pub mvm_gated: bool,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub img_token_count: usize,
    pub d_img: usize,
    pub stage1_insertion: Insertion,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(600)
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_blocks: 4,
            n_heads: 4,
            vocab_size,
            max_seq_len: 64,
            ffn_dim: 256,
            mvm_ratio: 0.25,
            mvm_gated: true,
            lora_rank: 8,
            lora_alpha: 16.0,
            img_token_count: 32,
            d_img: 64,
            stage1_insertion: Insertion::Sequential,
            seed: 0,
        }
    }

    /// Llama-2-7b dimensions, for parameter accounting only.
    pub fn llama2_7b() -> Self {
        Self {
            d_model: 4096,
            n_blocks: 32,
            n_heads: 32,
            vocab_size: 32_000,
            max_seq_len: 1024,
            ffn_dim: 11_008,
            mvm_ratio: 0.25,
            mvm_gated: true,
            lora_rank: 8,
            lora_alpha: 16.0,
            img_token_count: 32,
            d_img: 768,
            stage1_insertion: Insertion::Sequential,
            seed: 0,
        }
    }

    pub fn llama2_13b() -> Self {
        Self {
            d_model: 5120,
            n_blocks: 40,
            n_heads: 40,
            ffn_dim: 13_824,
            ..Self::llama2_7b()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::default()),
            "llama2-7b" => Some(Self::llama2_7b()),
            "llama2-13b" => Some(Self::llama2_13b()),
            _ => None,
        }
    }

    pub fn mvm_dim(&self) -> usize {
        (self.mvm_ratio * self.d_model as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_blocks == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("d_model, n_blocks, vocab_size and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        let mid = self.mvm_ratio * self.d_model as f64;
        if mid < 1.0 || (mid - mid.round()).abs() > 1e-9 {
            return fail(format!(
                "mvm_ratio {} · d_model {} is not a positive integer",
                self.mvm_ratio, self.d_model
            ));
        }
        if self.img_token_count == 0 {
            return fail("img_token_count must be at least 1".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.d_img == 0 {
            return fail("ffn_dim and d_img must be positive".into());
        }
        Ok(())
    }

    /// Hash of the architecture (everything except the init seed). Stored in
    /// checkpoints to refuse loading into an incompatible model.
    pub fn arch_hash(&self) -> u64 {
        let canonical = ModelConfig { seed: 0, ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
