//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::VecDeque;

use flame_core::model::{ModelConfig, ModelParams};
use flame_core::tensor::Matrix;
use rand::Rng;

/// Scalar operations performed by [`instrumented_forward`], by category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
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

impl OpCounts {
    pub fn total(&self) -> u64 {
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

type Rows = Vec<Vec<f64>>;

fn matmul(x: &Rows, w: &Matrix, ops: &mut u64) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut s = row[0] * w.get(0, j);
                    *ops += 1;
                    for (t, x) in row.iter().enumerate().skip(1) {
                        s += x * w.get(t, j);
                        *ops += 2;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn add_bias(x: &mut Rows, b: &[f64], ops: &mut u64) {
    for row in x.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
            *ops += 1;
        }
    }
}

fn add_rows(x: &mut Rows, y: &Rows, ops: &mut u64) {
    for (a, b) in x.iter_mut().zip(y) {
        for (u, v) in a.iter_mut().zip(b) {
            *u += v;
            *ops += 1;
        }
    }
}

fn layer_norm(x: &Rows, scale: &[f64], shift: &[f64], ops: &mut u64) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mut sum = row[0];
            for v in &row[1..] {
                sum += v;
                *ops += 1;
            }
            let mean = sum / d;
            *ops += 1;
            let mut sq = 0.0;
            for (i, v) in row.iter().enumerate() {
                let c = v - mean;
                let c2 = c * c;
                *ops += 2;
                if i == 0 {
                    sq = c2;
                } else {
                    sq += c2;
                    *ops += 1;
                }
            }
            let var = sq / d;
            let denom = (var + 1e-5).sqrt();
            *ops += 3;
            row.iter()
                .zip(scale)
                .zip(shift)
                .map(|((v, g), b)| {
                    *ops += 4;
                    (v - mean) / denom * g + b
                })
                .collect()
        })
        .collect()
}

fn gelu(x: f64, ops: &mut u64) -> f64 {
    *ops += 9;
    let inner = 0.797_884_560_802_865_4 * (x + 0.044_715 * (x * x * x));
    0.5 * x * (1.0 + inner.tanh())
}

fn logistic(x: f64, ops: &mut u64) -> f64 {
    *ops += 3;
    1.0 / (1.0 + (-x).exp())
}

/// Straightforward transcription of the block-split forward pass that counts
/// every scalar operation it performs.
///
/// Within a block of `h` history rows and `c` candidates, history row `i`
/// sees rows `0..=i`; candidate row `h+k` sees all history and itself.
pub fn instrumented_forward(params: &ModelParams, history: &[Vec<f64>], candidates: &[Vec<f64>]) -> (Rows, OpCounts) {
    let cfg = *params.config();
    assert_eq!(history.len() % cfg.num_blocks, 0);
    let h = history.len() / cfg.num_blocks;
    let c = candidates.len();
    let hd = cfg.head_dim;
    let mut ops = OpCounts::default();

    let mut block_outputs = Vec::new();
    for (b, block) in params.blocks.iter().enumerate() {
        let mut x: Rows = history[b * h..(b + 1) * h].iter().chain(candidates).cloned().collect();
        let visible = |i: usize, j: usize| if i < h { j <= i } else { j < h || j == i };
        let scale = 1.0 / (block.temperature * (hd as f64).sqrt());
        for layer in &block.layers {
            let n1 = layer_norm(&x, &layer.attn_norm_scale, &layer.attn_norm_shift, &mut ops.norm);
            let q = matmul(&n1, &layer.w_q, &mut ops.projections);
            let k = matmul(&n1, &layer.w_k, &mut ops.projections);
            let v = matmul(&n1, &layer.w_v, &mut ops.projections);
            let mut attn = vec![vec![0.0; cfg.hidden_dim]; x.len()];
            for head in 0..cfg.num_heads() {
                let cols = head * hd..(head + 1) * hd;
                for i in 0..x.len() {
                    let keys: Vec<usize> = (0..x.len()).filter(|&j| visible(i, j)).collect();
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|&j| {
                            let mut s = q[i][cols.start] * k[j][cols.start];
                            for t in cols.start + 1..cols.end {
                                s += q[i][t] * k[j][t];
                            }
                            ops.attention += 2 * hd as u64;
                            s * scale
                        })
                        .collect();
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    ops.softmax += 2 * keys.len() as u64 + keys.len() as u64 - 1;
                    for (e, &j) in exps.iter().zip(&keys) {
                        let p = e / sum;
                        ops.softmax += 1;
                        for t in cols.clone() {
                            attn[i][t] += p * v[j][t];
                        }
                        ops.attention += 2 * hd as u64;
                    }
                }
            }
            let o = matmul(&attn, &layer.w_o, &mut ops.projections);
            add_rows(&mut x, &o, &mut ops.residual);

            let n2 = layer_norm(&x, &layer.ffn_norm_scale, &layer.ffn_norm_shift, &mut ops.norm);
            let mut hidden = matmul(&n2, &layer.w_1, &mut ops.ffn);
            add_bias(&mut hidden, &layer.b_1, &mut ops.ffn);
            hidden.iter_mut().flatten().for_each(|v| *v = gelu(*v, &mut ops.activation));
            let mut out = matmul(&hidden, &layer.w_2, &mut ops.ffn);
            add_bias(&mut out, &layer.b_2, &mut ops.ffn);
            add_rows(&mut x, &out, &mut ops.residual);
        }
        block_outputs.push(x.split_off(h));
    }

    let mut fused = vec![vec![0.0; cfg.hidden_dim]; c];
    for (block, out) in params.blocks.iter().zip(&block_outputs) {
        for (f_row, h_row) in fused.iter_mut().zip(out) {
            for e in 0..cfg.hidden_dim {
                let z = block.gate_weight[e] * h_row[e] + block.gate_bias[e];
                let g = logistic(z, &mut ops.activation);
                f_row[e] += g * h_row[e];
                ops.fusion += 4;
            }
        }
    }

    let ex = &params.experts;
    let mut hidden = matmul(&fused, &ex.w_1, &mut ops.experts);
    add_bias(&mut hidden, &ex.b_1, &mut ops.experts);
    hidden.iter_mut().flatten().for_each(|v| *v = gelu(*v, &mut ops.activation));
    let mut scores = matmul(&hidden, &ex.w_2, &mut ops.experts);
    add_bias(&mut scores, &ex.b_2, &mut ops.experts);
    scores.iter_mut().flatten().for_each(|v| *v = logistic(*v, &mut ops.activation));
    (scores, ops)
}

/// Least-recently-used map as a plain list, most recent first.
#[derive(Clone, Debug)]
pub struct ReferenceLru<K, V> {
    capacity: usize,
    entries: VecDeque<(K, V)>,
}

impl<K: PartialEq + Clone, V: Clone> ReferenceLru<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::new() }
    }

    pub fn get(&mut self, key: &K) -> Option<V> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        let entry = self.entries.remove(pos).expect("position is valid");
        let value = entry.1.clone();
        self.entries.push_front(entry);
        Some(value)
    }

    /// Inserts as most recent; returns the evicted key, if any.
    pub fn put(&mut self, key: K, value: V) -> Option<K> {
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            self.entries.remove(pos);
        }
        self.entries.push_front((key, value));
        if self.entries.len() > self.capacity {
            self.entries.pop_back().map(|(k, _)| k)
        } else {
            None
        }
    }

    pub fn keys(&self) -> Vec<K> {
        self.entries.iter().map(|(k, _)| k.clone()).collect()
    }
}

/// Nearest-rank percentile at the exact rational rank `num/den`, using
/// integer arithmetic for the rank.
pub fn percentile_reference(values: &[f64], num: u64, den: u64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = sorted.len() as u64;
    let rank = (num * n).div_ceil(den).max(1);
    sorted[(rank - 1) as usize]
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn config(
    hidden_dim: usize,
    head_dim: usize,
    num_blocks: usize,
    layers_per_block: usize,
    ffn_dim: usize,
    max_history_len: usize,
    max_candidates: usize,
) -> ModelConfig {
    ModelConfig {
        hidden_dim,
        head_dim,
        num_blocks,
        layers_per_block,
        ffn_dim,
        num_tasks: 2,
        max_history_len,
        max_candidates,
        seed: 17,
    }
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
