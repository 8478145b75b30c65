//! Embedding channel: item vectors trained with skip-gram and negative
//! sampling over per-user effective-view sequences, then exact cosine search.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_cosine_top_k, Channel, ChannelId, IndexSnapshot, LogView, DEFAULT_K_RET};
use crate::corpus::{ItemId, Timestamp};
use crate::error::{Error, Result};
use crate::math::normalize_f32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f32,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig { dim: 32, window: 5, negatives: 5, epochs: 2, learning_rate: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingChannel {
    pub config: SkipGramConfig,
    pub seed: u64,
    pub k_ret: usize,
}

impl EmbeddingChannel {
    pub fn new(config: SkipGramConfig, seed: u64) -> Self {
        EmbeddingChannel { config, seed, k_ret: DEFAULT_K_RET }
    }
}

#[inline]
fn sigmoid_f32(x: f32) -> f32 {
    if x > 8.0 {
        1.0
    } else if x < -8.0 {
        0.0
    } else {
        1.0 / (1.0 + libm::expf(-x))
    }
}

/// Negative-sampling table: item slots proportional to `count^0.75`.
fn unigram_table(counts: &[u64]) -> Vec<u32> {
    let size = (counts.len() * 64).clamp(1 << 16, 1 << 24);
    let weights: Vec<f64> = counts.iter().map(|&c| libm::pow(c as f64, 0.75)).collect();
    let total: f64 = weights.iter().sum();
    let mut table = Vec::with_capacity(size);
    let mut item = 0usize;
    let mut cumulative = weights[0] / total;
    for slot in 0..size {
        table.push(item as u32);
        if (slot + 1) as f64 / size as f64 > cumulative && item + 1 < counts.len() {
            item += 1;
            cumulative += weights[item] / total;
        }
    }
    table
}

/// Trains unit-normalized item vectors. Returns the sorted vocabulary and
/// its vectors, row-major.
pub fn train_item_vectors(sequences: &[Vec<ItemId>], cfg: &SkipGramConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<ItemId>, Vec<f32>)> {
    if cfg.dim < 4 {
        return Err(Error::Config(alloc::format!("embedding dim must be >= 4, got {}", cfg.dim)));
    }
    if cfg.window == 0 || cfg.epochs == 0 {
        return Err(Error::Config("skip-gram window and epochs must be positive".into()));
    }
    let mut vocab: Vec<ItemId> = sequences.iter().flatten().copied().collect();
    vocab.sort_unstable();
    vocab.dedup();
    if vocab.len() < 2 {
        return Err(Error::Config("embedding channel needs at least two distinct items".into()));
    }
    let seqs: Vec<Vec<u32>> = sequences
        .iter()
        .map(|s| s.iter().map(|i| vocab.binary_search(i).unwrap() as u32).collect())
        .collect();

    let mut counts = vec![0u64; vocab.len()];
    seqs.iter().flatten().for_each(|&i| counts[i as usize] += 1);
    let noise = unigram_table(&counts);

    let dim = cfg.dim;
    let mut w_in: Vec<f32> = (0..vocab.len() * dim)
        .map(|_| (rng.random::<f32>() - 0.5) / dim as f32)
        .collect();
    let mut w_out = vec![0.0f32; vocab.len() * dim];
    let mut grad = vec![0.0f32; dim];

    let total_steps = (cfg.epochs * seqs.iter().map(Vec::len).sum::<usize>()).max(1) as f32;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        for seq in &seqs {
            for (p, &center) in seq.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - step as f32 / total_steps).max(1e-4);
                step += 1;
                // effective window drawn from 1..=window, as in word2vec
                let reach = rng.random_range(1..=cfg.window);
                let lo = p.saturating_sub(reach);
                let hi = (p + reach + 1).min(seq.len());
                for q in lo..hi {
                    if q == p {
                        continue;
                    }
                    let context = seq[q];
                    let c_row = center as usize * dim;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for n in 0..=cfg.negatives {
                        let (target, label) = if n == 0 {
                            (context, 1.0f32)
                        } else {
                            let t = noise[rng.random_range(0..noise.len())];
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let t_row = target as usize * dim;
                        let f = crate::math::dot_f32(&w_in[c_row..c_row + dim], &w_out[t_row..t_row + dim]);
                        let g = (label - sigmoid_f32(f)) * lr;
                        for k in 0..dim {
                            grad[k] += g * w_out[t_row + k];
                            w_out[t_row + k] += g * w_in[c_row + k];
                        }
                    }
                    for k in 0..dim {
                        w_in[c_row + k] += grad[k];
                    }
                }
            }
        }
    }
    for row in w_in.chunks_mut(dim) {
        normalize_f32(row);
    }
    Ok((vocab, w_in))
}

impl Channel for EmbeddingChannel {
    fn id(&self) -> ChannelId {
        ChannelId::Embedding
    }

    fn build(&self, log: LogView<'_>, as_of: Timestamp) -> Result<IndexSnapshot> {
        let sequences = log.effective_sequences(as_of);
        // the stream is tied to as_of so any snapshot can be rebuilt alone
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(as_of as u64);
        let (vocab, vectors) = train_item_vectors(&sequences, &self.config, &mut rng)?;
        let neighbors = exact_cosine_top_k(&vocab, &vectors, self.config.dim, self.k_ret);
        IndexSnapshot::new(ChannelId::Embedding, as_of, self.k_ret, neighbors)
    }
}
