//! Direction-conditioned decoder transformer.
//!
//! One parameter set serves both factorizations. The left-to-right pass
//! prepends BOS and predicts `x_t` from `x_{<t}`. The right-to-left pass
//! reverses the sequence, starts it with EOS, adds the `backward` direction
//! embedding at every position and runs the same causal stack; its output rows
//! are reversed back so that row `t` always predicts token `t`.

mod cache;
mod forward;
mod params;

pub use cache::{generate, reward_forward_cached, sample, Decoder, Generation};
pub use forward::{
    bind, forward, forward_on_tape, hidden_on_tape, reward_forward, reward_on_tape,
    token_logprobs_on_tape, Bound,
};
pub use params::{LayerParams, Params};

use serde::{Deserialize, Serialize};

use crate::data::{TokenSeq, VOCAB_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Byte-level config with `d_head = d_model / n_heads`.
    pub fn new(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        n_layers: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model,
            n_heads,
            d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
            d_ff,
            n_layers,
            max_seq_len,
        }
    }

    /// `n_layers` may be 0 (embeddings, final norm and unembedding only).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!("vocab_size must be {VOCAB_SIZE}")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Which model a parameter set currently realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Instruct,
    RlPolicy,
    Reward,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Instruct => 1,
            Stage::RlPolicy => 2,
            Stage::Reward => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Stage> {
        Some(match tag {
            0 => Stage::Pretrain,
            1 => Stage::Instruct,
            2 => Stage::RlPolicy,
            3 => Stage::Reward,
            _ => return None,
        })
    }

    /// Policy stages only move forward; a reward model can branch off any policy stage.
    pub fn can_become(self, next: Stage) -> bool {
        match (self, next) {
            (a, b) if a == b => true,
            (Stage::Reward, _) => false,
            (_, Stage::Reward) => true,
            (a, b) => a.tag() < b.tag(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];

    pub(crate) fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &TokenSeq, max: usize) -> Result<()> {
    if tokens.len() > max {
        return Err(Error::Length {
            len: tokens.len(),
            max,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocab {
            id: bad as usize,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}
