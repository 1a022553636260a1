//! Closed-form operation counts for [`model_forward`](super::model_forward).
//!
//! One scalar multiply, add, subtract, divide, `exp`, `tanh` or `sqrt` each
//! count as one operation. Max/compare and negation are free. The linear
//! algebra buckets (`attention`, `projections`, `ffn`, `fusion`, `experts`,
//! `residual`) hold only multiplies and adds; softmax, layer norm and
//! pointwise nonlinearities are reported in their own buckets.
//!
//! Per primitive:
//! * `m×k · k×n` product: `m·n·(2k−1)`; a bias add `m·n` on top.
//! * attention logit for one visible pair: `head_dim` multiplies,
//!   `head_dim−1` adds and one scaling multiply; the weighted value sum adds
//!   `2·head_dim` per visible pair.
//! * softmax over `r` visible keys: `r` subtractions, `r` exps, `r−1` adds,
//!   `r` divisions.
//! * layer norm over width `d`: `8d + 2`.
//! * GELU (tanh form): 9 per element; logistic: 3 per element.

use serde::Serialize;

use super::{ModelConfig, SumiMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub attention: u64,
    pub projections: u64,
    pub ffn: u64,
    pub fusion: u64,
    pub experts: u64,
    pub softmax: u64,
    pub norm: u64,
    pub activation: u64,
    pub residual: u64,
}

impl FlopsBreakdown {
    pub fn sum(&self) -> u64 {
        self.attention
            + self.projections
            + self.ffn
            + self.fusion
            + self.experts
            + self.softmax
            + self.norm
            + self.activation
            + self.residual
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsEstimate {
    pub total: u64,
    pub breakdown: FlopsBreakdown,
}

/// Cost of `m×k · k×n`.
pub(crate) fn matmul_flops(m: u64, k: u64, n: u64) -> u64 {
    if k == 0 {
        0
    } else {
        m * n * (2 * k - 1)
    }
}

/// Counts for one forward pass over `hist_len` history items (split evenly
/// across blocks, any remainder ignored) and `cand_count` candidates.
pub fn estimate_flops(config: &ModelConfig, hist_len: usize, cand_count: usize) -> FlopsEstimate {
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim as u64;
    let tasks = config.num_tasks as u64;
    let heads = config.num_heads() as u64;
    let blocks = config.num_blocks as u64;
    let layers = config.layers_per_block as u64;
    let c = cand_count as u64;
    let h = (hist_len / config.num_blocks) as u64;
    let tokens = h + c;
    let pairs = SumiMask::new(h as usize, cand_count).allowed_pairs() as u64;

    let mut b = FlopsBreakdown::default();
    let per_layer = FlopsBreakdown {
        projections: 4 * matmul_flops(tokens, d, d),
        attention: 4 * d * pairs,
        softmax: heads * (4 * pairs - tokens),
        ffn: matmul_flops(tokens, d, f) + tokens * f + matmul_flops(tokens, f, d) + tokens * d,
        activation: 9 * tokens * f,
        norm: 2 * tokens * (8 * d + 2),
        residual: 2 * tokens * d,
        ..Default::default()
    };
    let scale = blocks * layers;
    b.projections = scale * per_layer.projections;
    b.attention = scale * per_layer.attention;
    b.softmax = scale * per_layer.softmax;
    b.ffn = scale * per_layer.ffn;
    b.norm = scale * per_layer.norm;
    b.residual = scale * per_layer.residual;
    b.activation = scale * per_layer.activation;

    b.fusion = 4 * blocks * c * d;
    b.activation += 3 * blocks * c * d;

    b.experts = matmul_flops(c, d, f) + c * f + matmul_flops(c, f, tasks) + c * tasks;
    b.activation += 9 * c * f + 3 * c * tasks;

    FlopsEstimate { total: b.sum(), breakdown: b }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(blocks: usize, hist: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            head_dim: 4,
            num_blocks: blocks,
            layers_per_block: 2,
            ffn_dim: 32,
            num_tasks: 2,
            max_history_len: hist,
            max_candidates: 8,
            seed: 0,
        }
    }

    #[test]
    fn matmul_count_convention() {
        // (4×2)·(2×4): 16 outputs, each 2 multiplies and 1 add.
        assert_eq!(matmul_flops(4, 2, 4), 48);
    }

    #[test]
    fn total_is_sum_of_buckets() {
        let e = estimate_flops(&config(2, 64), 64, 5);
        assert_eq!(e.total, e.breakdown.sum());
    }

    #[test]
    fn attention_quadratic_term_scales_inversely_with_blocks() {
        // With C=0 the attention bucket is a·n²/N_b + b·n for constants a, b
        // independent of N_b, so 2·A(2N_b) − A(N_b) is the same for every N_b.
        let n = 256;
        let a1 = estimate_flops(&config(1, n), n, 0).breakdown.attention;
        let a2 = estimate_flops(&config(2, n), n, 0).breakdown.attention;
        let a4 = estimate_flops(&config(4, n), n, 0).breakdown.attention;
        assert_eq!(2 * a2 - a1, 2 * a4 - a2);
        let ratio = a1 as f64 / a2 as f64;
        assert!((ratio - 2.0).abs() < 0.01, "ratio {ratio}");
    }
}
