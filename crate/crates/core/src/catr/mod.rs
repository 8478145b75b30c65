//! Channel-adaptive trigger routing model: a shared encoder with target
//! attention over the behavior sequence, and per channel a value head, a
//! bounded calibrator and a uniqueness head. Gradients are derived by hand
//! (see [`net`]) and verified by [`gradient_check`].

mod features;
mod gradcheck;
mod net;
mod train;

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelId;
use crate::error::{Error, Result};
use crate::math::{sigmoid, tanh};

pub use features::{
    age_bucket, daypart_bucket, encode_request, engagement_bucket, rank_bucket, CandidateFeatures, RequestFeatures, Token, Vocab,
    AGE_BUCKETS, AGE_EDGES_S, COMPLETION_EDGES, DAYPART_BUCKETS, ENGAGEMENT_BUCKETS, RANK_BUCKETS, RANK_EDGES,
};
pub use gradcheck::{gradient_check, gradient_check_with, BlockCheck, GradientReport};
pub use net::{Example, LossBreakdown, LossWeights, Target, PROB_CLAMP};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

/// Architecture and vocabulary of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention projection width.
    pub d_a: usize,
    /// Hidden width of every head.
    pub d_h: usize,
    /// Behavior sequence length.
    pub seq_len: usize,
    /// Calibrator correction magnitude.
    pub beta: f64,
    /// When false the calibrator is bypassed and the calibrated value equals
    /// the base value.
    pub calibrator: bool,
    pub vocab: Vocab,
    pub channels: Vec<ChannelId>,
}

impl ModelConfig {
    pub fn new(vocab: Vocab, channels: Vec<ChannelId>) -> Self {
        ModelConfig { d: 32, d_a: 32, d_h: 64, seq_len: 50, beta: 0.1, calibrator: true, vocab, channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_a == 0 || self.d_h == 0 || self.seq_len == 0 {
            return Err(Error::Config("model widths and sequence length must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one channel".into()));
        }
        let mut sorted = self.channels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.channels.len() {
            return Err(Error::Config("duplicate channel in model roster".into()));
        }
        if self.vocab.item_rows == 0 || self.vocab.tag_rows == 0 || self.vocab.user_rows == 0 {
            return Err(Error::Config("vocabulary tables need at least the OOV row".into()));
        }
        Ok(())
    }

    /// Width of the head input `[attention summary; trigger; user]`.
    pub fn head_input(&self) -> usize {
        self.d_a + 2 * self.d
    }
}

/// A named, row-major parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Two-layer perceptron offsets: `tanh(w1 x + b1)` then `w2 . h + b2`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Heads {
    pub value: Mlp,
    pub calib: Mlp,
    pub uniq: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct Offsets {
    pub item: usize,
    pub tag: usize,
    pub user: usize,
    pub age: usize,
    pub engagement: usize,
    pub rank: usize,
    pub daypart: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub heads: Vec<Heads>,
}

fn layout(cfg: &ModelConfig) -> (Vec<Block>, Offsets) {
    let mut blocks = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize| {
        let offset = blocks.last().map_or(0, |b: &Block| b.offset + b.len());
        blocks.push(Block { name, offset, rows, cols });
        offset
    };
    let d = cfg.d;
    let item = push("embed.item".into(), cfg.vocab.item_rows, d);
    let tag = push("embed.tag".into(), cfg.vocab.tag_rows, d);
    let user = push("embed.user".into(), cfg.vocab.user_rows, d);
    let age = push("embed.age".into(), AGE_BUCKETS, d);
    let engagement = push("embed.engagement".into(), ENGAGEMENT_BUCKETS, d);
    let rank = push("embed.rank".into(), RANK_BUCKETS, d);
    let daypart = push("embed.daypart".into(), DAYPART_BUCKETS, d);
    let wq = push("attention.query".into(), cfg.d_a, d);
    let wk = push("attention.key".into(), cfg.d_a, d);
    let wv = push("attention.value".into(), cfg.d_a, d);
    let mut heads = Vec::new();
    for c in &cfg.channels {
        let mut mlp = |head: &str, input: usize| Mlp {
            w1: push(format!("{head}.{c}.w1"), cfg.d_h, input),
            b1: push(format!("{head}.{c}.b1"), 1, cfg.d_h),
            w2: push(format!("{head}.{c}.w2"), 1, cfg.d_h),
            b2: push(format!("{head}.{c}.b2"), 1, 1),
            input,
            hidden: cfg.d_h,
        };
        let value = mlp("value", cfg.head_input());
        let calib = mlp("calibrator", cfg.head_input() + 1);
        let uniq = mlp("uniqueness", cfg.head_input());
        heads.push(Heads { value, calib, uniq });
    }
    (blocks, Offsets { item, tag, user, age, engagement, rank, daypart, wq, wk, wv, heads })
}

/// Per-channel model outputs for one candidate trigger.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Base value probability, in (0, 1).
    pub base: f64,
    /// Calibrated value, in [0, 1] and within `beta` of `base`.
    pub calibrated: f64,
    /// Predicted uniqueness, in (0, 1).
    pub uniqueness: f64,
}

pub fn base_value(head_output: f64) -> f64 {
    sigmoid(head_output)
}

pub fn calibrated_value(base: f64, calibrator_output: f64, beta: f64) -> f64 {
    (base + beta * tanh(calibrator_output)).clamp(0.0, 1.0)
}

pub fn uniqueness_estimate(head_output: f64) -> f64 {
    sigmoid(head_output)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    blocks: Vec<Block>,
    pub(crate) off: Offsets,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Zero-initialized model; mostly useful as a container for loaded weights.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (blocks, off) = layout(&config);
        let n = blocks.last().map_or(0, |b| b.offset + b.len());
        Ok(Model { config, params: vec![0.0; n], blocks, off })
    }

    /// Embeddings uniform in +-0.1, dense weights Glorot-uniform, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &m.blocks {
            let limit = if b.name.starts_with("embed.") {
                0.1
            } else if b.name.ends_with(".b1") || b.name.ends_with(".b2") {
                0.0
            } else {
                libm::sqrt(6.0 / (b.rows + b.cols) as f64)
            };
            for p in &mut m.params[b.range()] {
                *p = if limit > 0.0 { rng.random_range(-limit..limit) } else { 0.0 };
            }
        }
        Ok(m)
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        if params.len() != m.params.len() {
            return Err(Error::Invalid(format!("expected {} parameters, got {}", m.params.len(), params.len())));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!("parameter {i} is not finite")));
        }
        m.params = params;
        Ok(m)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn channel_index(&self, c: ChannelId) -> Option<usize> {
        self.config.channels.iter().position(|&x| x == c)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        self.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
    }

    /// Predictions indexed `[candidate][channel]` in roster order.
    pub fn predict(&self, features: &RequestFeatures) -> Vec<Vec<Prediction>> {
        let cache = self.forward(features);
        cache
            .candidates
            .iter()
            .map(|c| {
                c.channels
                    .iter()
                    .map(|h| Prediction { base: h.base, calibrated: h.calibrated, uniqueness: h.uniqueness })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
