use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::tensor::Matrix;

const INIT_RANGE: f64 = 0.1;

/// One pre-norm Transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub attn_norm_scale: Vec<f64>,
    pub attn_norm_shift: Vec<f64>,
    pub ffn_norm_scale: Vec<f64>,
    pub ffn_norm_shift: Vec<f64>,
    /// `hidden_dim × ffn_dim`
    pub w_1: Matrix,
    pub b_1: Vec<f64>,
    /// `ffn_dim × hidden_dim`
    pub w_2: Matrix,
    pub b_2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub layers: Vec<LayerParams>,
    /// Divides attention logits of every layer in this block. Always positive.
    pub temperature: f64,
    pub gate_weight: Vec<f64>,
    pub gate_bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w_1: Matrix,
    pub b_1: Vec<f64>,
    /// `ffn_dim × num_tasks`
    pub w_2: Matrix,
    pub b_2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub blocks: Vec<BlockParams>,
    pub experts: ExpertParams,
}

/// What a flat parameter slice is, for walkers that treat some kinds specially.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TensorKind {
    Weight,
    Temperature,
}

impl ModelParams {
    /// All weights uniform in `[-0.1, 0.1]` from a ChaCha8 stream seeded by
    /// `config.seed`, drawn in declaration order; temperatures start at 1.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE).expect("finite range");
        params.for_each_tensor_mut(|kind, values| match kind {
            TensorKind::Weight => values.iter_mut().for_each(|v| *v = dist.sample(&mut rng)),
            TensorKind::Temperature => values.fill(1.0),
        });
        Ok(params)
    }

    /// Every weight and bias zero, temperatures 1.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let layer = LayerParams {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            attn_norm_scale: vec![0.0; d],
            attn_norm_shift: vec![0.0; d],
            ffn_norm_scale: vec![0.0; d],
            ffn_norm_shift: vec![0.0; d],
            w_1: Matrix::zeros(d, f),
            b_1: vec![0.0; f],
            w_2: Matrix::zeros(f, d),
            b_2: vec![0.0; d],
        };
        let block = BlockParams {
            layers: vec![layer; config.layers_per_block],
            temperature: 1.0,
            gate_weight: vec![0.0; d],
            gate_bias: vec![0.0; d],
        };
        Ok(Self {
            config,
            blocks: vec![block; config.num_blocks],
            experts: ExpertParams {
                w_1: Matrix::zeros(d, f),
                b_1: vec![0.0; f],
                w_2: Matrix::zeros(f, config.num_tasks),
                b_2: vec![0.0; config.num_tasks],
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Checks temperatures and every tensor shape against the config.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let reference = Self::zeros(self.config)?;
        let mut shapes = Vec::new();
        reference.for_each_tensor(|_, v| shapes.push(v.len()));
        let mut i = 0;
        let mut ok = self.blocks.len() == reference.blocks.len()
            && self.blocks.iter().all(|b| b.layers.len() == self.config.layers_per_block);
        if ok {
            self.for_each_tensor(|_, v| {
                ok &= shapes.get(i) == Some(&v.len());
                i += 1;
            });
            ok &= i == shapes.len();
        }
        let matrices_ok = self.blocks.iter().flat_map(|b| &b.layers).all(|l| {
            let d = self.config.hidden_dim;
            let f = self.config.ffn_dim;
            [&l.w_q, &l.w_k, &l.w_v, &l.w_o].iter().all(|m| m.rows() == d && m.cols() == d)
                && l.w_1.rows() == d
                && l.w_2.cols() == d
                && l.w_1.cols() == f
        });
        if !ok || !matrices_ok {
            return Err(ModelError::Shape("parameters do not match model config".into()));
        }
        if let Some(b) = self.blocks.iter().position(|b| !(b.temperature > 0.0)) {
            return Err(ModelError::InvalidConfig(format!("block {b} temperature must be positive")));
        }
        Ok(())
    }

    /// Visits every tensor in declaration order: per block, per layer
    /// `w_q w_k w_v w_o attn_norm_{scale,shift} ffn_norm_{scale,shift} w_1 b_1 w_2 b_2`,
    /// then the block's temperature, gate weight and gate bias; finally the
    /// expert `w_1 b_1 w_2 b_2`.
    pub(crate) fn for_each_tensor(&self, mut f: impl FnMut(TensorKind, &[f64])) {
        use TensorKind::*;
        for block in &self.blocks {
            for l in &block.layers {
                f(Weight, l.w_q.as_slice());
                f(Weight, l.w_k.as_slice());
                f(Weight, l.w_v.as_slice());
                f(Weight, l.w_o.as_slice());
                f(Weight, &l.attn_norm_scale);
                f(Weight, &l.attn_norm_shift);
                f(Weight, &l.ffn_norm_scale);
                f(Weight, &l.ffn_norm_shift);
                f(Weight, l.w_1.as_slice());
                f(Weight, &l.b_1);
                f(Weight, l.w_2.as_slice());
                f(Weight, &l.b_2);
            }
            f(Temperature, std::slice::from_ref(&block.temperature));
            f(Weight, &block.gate_weight);
            f(Weight, &block.gate_bias);
        }
        let e = &self.experts;
        f(Weight, e.w_1.as_slice());
        f(Weight, &e.b_1);
        f(Weight, e.w_2.as_slice());
        f(Weight, &e.b_2);
    }

    pub(crate) fn for_each_tensor_mut(&mut self, mut f: impl FnMut(TensorKind, &mut [f64])) {
        use TensorKind::*;
        for block in &mut self.blocks {
            for l in &mut block.layers {
                f(Weight, l.w_q.as_mut_slice());
                f(Weight, l.w_k.as_mut_slice());
                f(Weight, l.w_v.as_mut_slice());
                f(Weight, l.w_o.as_mut_slice());
                f(Weight, &mut l.attn_norm_scale);
                f(Weight, &mut l.attn_norm_shift);
                f(Weight, &mut l.ffn_norm_scale);
                f(Weight, &mut l.ffn_norm_shift);
                f(Weight, l.w_1.as_mut_slice());
                f(Weight, &mut l.b_1);
                f(Weight, l.w_2.as_mut_slice());
                f(Weight, &mut l.b_2);
            }
            f(Temperature, std::slice::from_mut(&mut block.temperature));
            f(Weight, &mut block.gate_weight);
            f(Weight, &mut block.gate_bias);
        }
        let e = &mut self.experts;
        f(Weight, e.w_1.as_mut_slice());
        f(Weight, &mut e.b_1);
        f(Weight, e.w_2.as_mut_slice());
        f(Weight, &mut e.b_2);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, v| n += v.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::tiny_config;

    fn flat(p: &ModelParams) -> Vec<u64> {
        let mut out = Vec::new();
        p.for_each_tensor(|_, v| out.extend(v.iter().map(|x| x.to_bits())));
        out
    }

    #[test]
    fn same_seed_gives_identical_bits() {
        let a = ModelParams::init(tiny_config()).unwrap();
        let b = ModelParams::init(tiny_config()).unwrap();
        assert_eq!(flat(&a), flat(&b));
        let c = ModelParams::init(ModelConfig { seed: 8, ..tiny_config() }).unwrap();
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn temperatures_start_at_one_and_weights_in_range() {
        let p = ModelParams::init(tiny_config()).unwrap();
        assert!(p.blocks.iter().all(|b| b.temperature == 1.0));
        p.for_each_tensor(|kind, v| {
            if kind == TensorKind::Weight {
                assert!(v.iter().all(|x| (-0.1..=0.1).contains(x)));
            }
        });
        p.validate().unwrap();
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig { hidden_dim: 4, head_dim: 3, ..tiny_config() };
        assert!(ModelParams::init(cfg).is_err());
    }

    #[test]
    fn validate_catches_bad_temperature() {
        let mut p = ModelParams::init(tiny_config()).unwrap();
        p.blocks[1].temperature = 0.0;
        assert!(p.validate().is_err());
    }
}
