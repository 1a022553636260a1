//! Block forward, gated fusion, expert heads and the full model pass.
//!
//! Everything runs in `f64`. The hot path writes into a [`Workspace`] so a
//! caller that keeps one around performs no allocation per request.

use super::attention::{logit_scale, naive_kernel, tiled_kernel, HeadOut, HeadView};
use super::{AttentionKernel, BlockParams, LayerParams, ModelConfig, ModelError, ModelParams, SumiMask, TokenSequence};
use crate::tensor::{add_row_bias, matmul_into, Matrix};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `num_candidates × num_tasks` probabilities, rows in candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix(Matrix);

impl ScoreMatrix {
    pub fn new(scores: Matrix) -> Self {
        Self(scores)
    }

    pub fn num_candidates(&self) -> usize {
        self.0.rows()
    }

    pub fn num_tasks(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.to_rows()
    }

    pub fn max_abs_diff(&self, other: &ScoreMatrix) -> Option<f64> {
        self.0.max_abs_diff(&other.0)
    }
}

/// Preallocated activations for one forward pass at a bounded shape.
pub struct Workspace {
    kernel: AttentionKernel,
    hidden_dim: usize,
    ffn_dim: usize,
    num_blocks: usize,
    max_block_history: usize,
    max_candidates: usize,
    x: Vec<f64>,
    normed: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    delta: Vec<f64>,
    ffn_hidden: Vec<f64>,
    scratch: Vec<f64>,
    block_out: Vec<f64>,
    fused: Vec<f64>,
    expert_hidden: Vec<f64>,
}

impl Workspace {
    /// Sized for sub-sequences of up to `max_block_history` items and up to
    /// `max_candidates` candidates.
    pub fn new(config: &ModelConfig, max_block_history: usize, max_candidates: usize, kernel: AttentionKernel) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let tokens = max_block_history + max_candidates;
        Self {
            kernel,
            hidden_dim: d,
            ffn_dim: f,
            num_blocks: config.num_blocks,
            max_block_history,
            max_candidates,
            x: vec![0.0; tokens * d],
            normed: vec![0.0; tokens * d],
            q: vec![0.0; tokens * d],
            k: vec![0.0; tokens * d],
            v: vec![0.0; tokens * d],
            attn: vec![0.0; tokens * d],
            delta: vec![0.0; tokens * d],
            ffn_hidden: vec![0.0; tokens * f],
            scratch: vec![0.0; kernel.scratch_len(tokens)],
            block_out: vec![0.0; config.num_blocks * max_candidates * d],
            fused: vec![0.0; max_candidates * d],
            expert_hidden: vec![0.0; max_candidates * f],
        }
    }

    /// Sized for the largest request `config` admits.
    pub fn for_config(config: &ModelConfig, kernel: AttentionKernel) -> Self {
        Self::new(config, config.block_len(), config.max_candidates, kernel)
    }

    pub fn kernel(&self) -> AttentionKernel {
        self.kernel
    }

    pub fn max_candidates(&self) -> usize {
        self.max_candidates
    }

    pub fn max_block_history(&self) -> usize {
        self.max_block_history
    }

    fn fits(&self, config: &ModelConfig) -> bool {
        self.hidden_dim == config.hidden_dim && self.ffn_dim == config.ffn_dim && self.num_blocks == config.num_blocks
    }
}

fn layer_norm(x: &[f64], out: &mut [f64], width: usize, scale: &[f64], shift: &[f64]) {
    for (row, out_row) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let n = width as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        for (((o, &v), &g), &b) in out_row.iter_mut().zip(row).zip(scale).zip(shift) {
            *o = (v - mean) / denom * g + b;
        }
    }
}

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(x: &mut [f64], delta: &[f64]) {
    x.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
}

/// Runs one layer over `ws.x[..len*d]` in place.
fn run_layer(ws: &mut Workspace, layer: &LayerParams, mask: &SumiMask, temperature: f64, head_dim: usize) {
    let d = ws.hidden_dim;
    let f = ws.ffn_dim;
    let len = mask.hist_len() + mask.cand_count();
    let n = len * d;

    layer_norm(&ws.x[..n], &mut ws.normed[..n], d, &layer.attn_norm_scale, &layer.attn_norm_shift);
    matmul_into(&ws.normed, layer.w_q.as_slice(), len, d, d, &mut ws.q);
    matmul_into(&ws.normed, layer.w_k.as_slice(), len, d, d, &mut ws.k);
    matmul_into(&ws.normed, layer.w_v.as_slice(), len, d, d, &mut ws.v);

    let scale = logit_scale(temperature, head_dim);
    for head in 0..d / head_dim {
        fn view(data: &[f64], stride: usize, offset: usize, width: usize) -> HeadView<'_, f64> {
            HeadView { data, stride, offset, width }
        }
        let (o, w) = (head * head_dim, head_dim);
        let out = HeadOut { data: &mut ws.attn[..n], stride: d, offset: head * head_dim, width: head_dim };
        match ws.kernel {
            AttentionKernel::Naive => naive_kernel(
                view(&ws.q, d, o, w),
                view(&ws.k, d, o, w),
                view(&ws.v, d, o, w),
                len,
                mask,
                scale,
                &mut ws.scratch,
                out,
            ),
            AttentionKernel::Tiled { tile } => tiled_kernel(
                view(&ws.q, d, o, w),
                view(&ws.k, d, o, w),
                view(&ws.v, d, o, w),
                len,
                mask,
                scale,
                tile,
                &mut ws.scratch,
                out,
            ),
        }
    }
    matmul_into(&ws.attn, layer.w_o.as_slice(), len, d, d, &mut ws.delta);
    add_into(&mut ws.x[..n], &ws.delta[..n]);

    layer_norm(&ws.x[..n], &mut ws.normed[..n], d, &layer.ffn_norm_scale, &layer.ffn_norm_shift);
    matmul_into(&ws.normed, layer.w_1.as_slice(), len, d, f, &mut ws.ffn_hidden);
    add_row_bias(&mut ws.ffn_hidden, len, &layer.b_1);
    ws.ffn_hidden[..len * f].iter_mut().for_each(|h| *h = gelu(*h));
    matmul_into(&ws.ffn_hidden, layer.w_2.as_slice(), len, f, d, &mut ws.delta);
    add_row_bias(&mut ws.delta, len, &layer.b_2);
    add_into(&mut ws.x[..n], &ws.delta[..n]);
}

/// Runs block `b` over `[sub_seq ‖ candidates]` and stores the candidate rows
/// in the workspace's block output slot.
fn run_block(
    ws: &mut Workspace,
    block_index: usize,
    block: &BlockParams,
    config: &ModelConfig,
    sub_seq: &[f64],
    candidates: &[f64],
) {
    let d = config.hidden_dim;
    let h = sub_seq.len() / d;
    let c = candidates.len() / d;
    ws.x[..h * d].copy_from_slice(sub_seq);
    ws.x[h * d..(h + c) * d].copy_from_slice(candidates);
    let mask = SumiMask::new(h, c);
    for layer in &block.layers {
        run_layer(ws, layer, &mask, block.temperature, config.head_dim);
    }
    let slot = block_index * ws.max_candidates * d;
    ws.block_out[slot..slot + c * d].copy_from_slice(&ws.x[h * d..(h + c) * d]);
}

/// `out += σ(w ⊙ h + c) ⊙ h` for every row of `h`.
fn accumulate_gate(h: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let d = weight.len();
    for (row, out_row) in h.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for (((o, &x), &w), &b) in out_row.iter_mut().zip(row).zip(weight).zip(bias) {
            *o += sigmoid(w * x + b) * x;
        }
    }
}

/// Two-layer MLP with GELU in between and a logistic output.
fn run_experts(params: &ModelParams, fused: &[f64], rows: usize, hidden: &mut [f64], out: &mut [f64]) {
    let c = params.config();
    let e = &params.experts;
    matmul_into(fused, e.w_1.as_slice(), rows, c.hidden_dim, c.ffn_dim, hidden);
    add_row_bias(hidden, rows, &e.b_1);
    hidden[..rows * c.ffn_dim].iter_mut().for_each(|h| *h = gelu(*h));
    matmul_into(hidden, e.w_2.as_slice(), rows, c.ffn_dim, c.num_tasks, out);
    add_row_bias(out, rows, &e.b_2);
    out[..rows * c.num_tasks].iter_mut().for_each(|s| *s = sigmoid(*s));
}

/// Allocation-free forward pass.
///
/// `history` and `candidates` are row-major embeddings; `out` receives
/// `candidates × num_tasks` probabilities.
pub(crate) fn forward_into(
    ws: &mut Workspace,
    params: &ModelParams,
    history: &[f64],
    candidates: &[f64],
    out: &mut [f64],
) -> Result<(), ModelError> {
    let config = params.config();
    let d = config.hidden_dim;
    if !ws.fits(config) {
        return Err(ModelError::Shape("workspace built for a different model".into()));
    }
    if !history.len().is_multiple_of(d) || !candidates.len().is_multiple_of(d) {
        return Err(ModelError::Shape(format!("embeddings must be {d} wide")));
    }
    let hist_len = history.len() / d;
    let cand_count = candidates.len() / d;
    if hist_len > config.max_history_len {
        return Err(ModelError::Shape(format!(
            "history of {hist_len} exceeds max_history_len {}",
            config.max_history_len
        )));
    }
    if cand_count == 0 || cand_count > config.max_candidates {
        return Err(ModelError::Shape(format!("{cand_count} candidates outside 1..={}", config.max_candidates)));
    }
    if !hist_len.is_multiple_of(config.num_blocks) {
        return Err(ModelError::Indivisible { len: hist_len, blocks: config.num_blocks });
    }
    let block_hist = hist_len / config.num_blocks;
    if block_hist > ws.max_block_history || cand_count > ws.max_candidates {
        return Err(ModelError::Shape(format!(
            "request ({block_hist} per block, {cand_count} candidates) exceeds workspace ({}, {})",
            ws.max_block_history, ws.max_candidates
        )));
    }
    if out.len() < cand_count * config.num_tasks {
        return Err(ModelError::Shape("output buffer too small".into()));
    }

    let part = block_hist * d;
    for (b, block) in params.blocks.iter().enumerate() {
        run_block(ws, b, block, config, &history[b * part..(b + 1) * part], candidates);
    }

    let rows = cand_count * d;
    ws.fused[..rows].fill(0.0);
    for (b, block) in params.blocks.iter().enumerate() {
        let slot = b * ws.max_candidates * d;
        accumulate_gate(&ws.block_out[slot..slot + rows], &block.gate_weight, &block.gate_bias, &mut ws.fused[..rows]);
    }
    run_experts(params, &ws.fused, cand_count, &mut ws.expert_hidden, out);
    Ok(())
}

fn check_dims(params: &ModelParams, seqs: &[&TokenSequence]) -> Result<(), ModelError> {
    let d = params.config().hidden_dim;
    match seqs.iter().find(|s| s.dim() != d) {
        Some(s) => Err(ModelError::Shape(format!("{}-wide embeddings for a {d}-wide model", s.dim()))),
        None => Ok(()),
    }
}

/// Final hidden states of the candidate positions after one block's layers.
pub fn block_forward(
    sub_seq: &TokenSequence,
    candidates: &TokenSequence,
    block: &BlockParams,
    config: &ModelConfig,
) -> Result<Matrix, ModelError> {
    config.validate()?;
    let d = config.hidden_dim;
    if sub_seq.dim() != d || candidates.dim() != d {
        return Err(ModelError::Shape(format!("embeddings must be {d} wide")));
    }
    if sub_seq.len() > config.block_len() {
        return Err(ModelError::Shape(format!(
            "sub-sequence of {} exceeds block length {}",
            sub_seq.len(),
            config.block_len()
        )));
    }
    if candidates.is_empty() {
        return Err(ModelError::Shape("no candidates".into()));
    }
    if block.layers.len() != config.layers_per_block {
        return Err(ModelError::Shape("block layer count differs from config".into()));
    }
    let mut ws = Workspace::new(config, sub_seq.len(), candidates.len(), AttentionKernel::default());
    run_block(&mut ws, 0, block, config, sub_seq.as_slice(), candidates.as_slice());
    let c = candidates.len();
    Matrix::from_vec(c, d, ws.block_out[..c * d].to_vec())
}

/// Elementwise-gated sum of block outputs: `Σ_b σ(w_b ⊙ h_b + c_b) ⊙ h_b`.
pub fn gated_fusion(block_outputs: &[Matrix], params: &ModelParams) -> Result<Matrix, ModelError> {
    let d = params.config().hidden_dim;
    if block_outputs.len() != params.blocks.len() {
        return Err(ModelError::Shape(format!(
            "{} block outputs for {} blocks",
            block_outputs.len(),
            params.blocks.len()
        )));
    }
    let rows = block_outputs.first().map_or(0, Matrix::rows);
    if block_outputs.iter().any(|m| m.rows() != rows || m.cols() != d) {
        return Err(ModelError::Shape("block outputs differ in shape".into()));
    }
    let mut fused = Matrix::zeros(rows, d);
    for (h, block) in block_outputs.iter().zip(&params.blocks) {
        accumulate_gate(h.as_slice(), &block.gate_weight, &block.gate_bias, fused.as_mut_slice());
    }
    Ok(fused)
}

/// Per-candidate multi-task probabilities from fused representations.
pub fn expert_heads(fused: &Matrix, params: &ModelParams) -> Result<ScoreMatrix, ModelError> {
    let c = params.config();
    if fused.cols() != c.hidden_dim {
        return Err(ModelError::Shape(format!(
            "fused width {} differs from hidden_dim {}",
            fused.cols(),
            c.hidden_dim
        )));
    }
    let rows = fused.rows();
    let mut hidden = vec![0.0; rows * c.ffn_dim];
    let mut out = Matrix::zeros(rows, c.num_tasks);
    run_experts(params, fused.as_slice(), rows, &mut hidden, out.as_mut_slice());
    Ok(ScoreMatrix(out))
}

/// Scores every candidate in a single pass per block.
pub fn model_forward(
    history: &TokenSequence,
    candidates: &TokenSequence,
    params: &ModelParams,
) -> Result<ScoreMatrix, ModelError> {
    model_forward_with(history, candidates, params, AttentionKernel::default())
}

pub fn model_forward_with(
    history: &TokenSequence,
    candidates: &TokenSequence,
    params: &ModelParams,
    kernel: AttentionKernel,
) -> Result<ScoreMatrix, ModelError> {
    check_dims(params, &[history, candidates])?;
    let config = params.config();
    let block_hist = history.len() / config.num_blocks;
    let mut ws = Workspace::new(config, block_hist, candidates.len(), kernel);
    let mut out = Matrix::zeros(candidates.len(), config.num_tasks);
    forward_into(&mut ws, params, history.as_slice(), candidates.as_slice(), out.as_mut_slice())?;
    Ok(ScoreMatrix(out))
}

/// Scores candidates one at a time. The reference for [`model_forward`].
pub fn model_forward_sequential(
    history: &TokenSequence,
    candidates: &TokenSequence,
    params: &ModelParams,
) -> Result<ScoreMatrix, ModelError> {
    check_dims(params, &[history, candidates])?;
    let config = params.config();
    if candidates.is_empty() || candidates.len() > config.max_candidates {
        return Err(ModelError::Shape(format!(
            "{} candidates outside 1..={}",
            candidates.len(),
            config.max_candidates
        )));
    }
    let mut ws = Workspace::new(config, history.len() / config.num_blocks, 1, AttentionKernel::default());
    let mut out = Matrix::zeros(candidates.len(), config.num_tasks);
    for (i, cand) in candidates.items().enumerate() {
        forward_into(&mut ws, params, history.as_slice(), cand, out.row_mut(i))?;
    }
    Ok(ScoreMatrix(out))
}
