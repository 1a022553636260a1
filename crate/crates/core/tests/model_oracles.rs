mod support;

use flame_core::model::{
    attention_naive, attention_tiled, estimate_flops, model_forward, model_forward_sequential, model_forward_with,
    AttentionKernel, ModelParams, SumiMask, TokenSequence,
};
use flame_core::tensor::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{config, instrumented_forward, max_abs_diff, random_rows};

fn seq(rows: &[Vec<f64>], d: usize) -> TokenSequence {
    TokenSequence::from_items(d, rows).unwrap()
}

#[test]
fn instrumented_counts_equal_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(d, hd) in &[(4, 2), (8, 4), (16, 8)] {
        for &blocks in &[1, 2, 4] {
            for &layers in &[0, 1, 2] {
                for &ffn in &[1, 7, 16] {
                    let hist = blocks * rng.random_range(0..=16 / blocks);
                    let cands = rng.random_range(1..=16);
                    let cfg = config(d, hd, blocks, layers, ffn, 16, 16);
                    let params = ModelParams::init(cfg).unwrap();
                    let h = random_rows(&mut rng, hist, d);
                    let c = random_rows(&mut rng, cands, d);
                    let (scores, ops) = instrumented_forward(&params, &h, &c);
                    let est = estimate_flops(&cfg, hist, cands);
                    let b = est.breakdown;
                    assert_eq!(
                        [
                            b.attention,
                            b.projections,
                            b.ffn,
                            b.fusion,
                            b.experts,
                            b.softmax,
                            b.norm,
                            b.activation,
                            b.residual
                        ],
                        [
                            ops.attention,
                            ops.projections,
                            ops.ffn,
                            ops.fusion,
                            ops.experts,
                            ops.softmax,
                            ops.norm,
                            ops.activation,
                            ops.residual
                        ],
                        "{cfg:?} H={hist} C={cands}"
                    );
                    assert_eq!(est.total, ops.total());
                    let fast = model_forward(&seq(&h, d), &seq(&c, d), &params).unwrap();
                    assert!(max_abs_diff(&fast.to_rows(), &scores) <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn attention_term_halves_with_doubled_blocks_up_to_linear_term() {
    let n = 512;
    let a = |blocks| estimate_flops(&config(16, 4, blocks, 1, 16, n, 8), n, 0).breakdown.attention as f64;
    // a(N_b) = α·n²/N_b + β·n, so removing the linear part gives exact halving.
    let beta = 2.0 * a(2) - a(1);
    for blocks in [1, 2, 4, 8] {
        let quad = a(blocks) - beta;
        let quad2 = a(2 * blocks) - beta;
        assert!((quad / quad2 - 2.0).abs() < 1e-12);
    }
}

#[test]
fn tiled_matches_naive_double_and_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let h = rng.random_range(0..=48);
        let c = rng.random_range(1..=16);
        let t = h + c;
        let hd = rng.random_range(1..=32);
        let mask = SumiMask::new(h, c);
        let q = Matrix::from_fn(t, hd, |_, _| rng.random_range(-2.0..2.0));
        let k = Matrix::from_fn(t, hd, |_, _| rng.random_range(-2.0..2.0));
        let v = Matrix::from_fn(t, hd, |_, _| rng.random_range(-2.0..2.0));
        let tau = rng.random_range(0.5..2.0);
        let naive = attention_naive(&q, &k, &v, &mask, tau).unwrap();
        let to32 = |m: &Matrix| Matrix::<f32>::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f32);
        let naive32 = attention_naive(&to32(&q), &to32(&k), &to32(&v), &mask, tau as f32).unwrap();
        for tile in [1, 2, (t / 2).max(1), t] {
            let tiled = attention_tiled(&q, &k, &v, &mask, tau, tile).unwrap();
            assert!(tiled.max_abs_diff(&naive).unwrap() <= 1e-10);
            let tiled32 = attention_tiled(&to32(&q), &to32(&k), &to32(&v), &mask, tau as f32, tile).unwrap();
            assert!(tiled32.max_abs_diff(&naive32).unwrap() <= 1e-5);
        }
    }
}

#[test]
fn kernels_agree_through_full_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = config(8, 4, 2, 2, 8, 40, 8);
    let params = ModelParams::init(cfg).unwrap();
    let h = seq(&random_rows(&mut rng, 40, 8), 8);
    let c = seq(&random_rows(&mut rng, 8, 8), 8);
    let naive = model_forward_with(&h, &c, &params, AttentionKernel::Naive).unwrap();
    for tile in [1, 3, 64] {
        let tiled = model_forward_with(&h, &c, &params, AttentionKernel::Tiled { tile }).unwrap();
        assert!(tiled.max_abs_diff(&naive).unwrap() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn parallel_scoring_equals_sequential(
        d_idx in 0usize..3,
        blocks_idx in 0usize..3,
        layers in 1usize..=2,
        per_block in 2usize..=16,
        cands in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let d = [8, 16, 32][d_idx];
        let blocks = [1, 2, 4][blocks_idx];
        let hist = per_block * blocks;
        let mut cfg = config(d, 4, blocks, layers, 2 * d, hist, 8);
        cfg.seed = seed;
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = seq(&random_rows(&mut rng, hist, d), d);
        let c = seq(&random_rows(&mut rng, cands, d), d);
        let par = model_forward(&h, &c, &params).unwrap();
        let one = model_forward_sequential(&h, &c, &params).unwrap();
        prop_assert!(par.max_abs_diff(&one).unwrap() <= 1e-10);
    }

    #[test]
    fn scores_are_probabilities_and_order_equivariant(seed in any::<u64>(), cands in 2usize..=6) {
        let mut cfg = config(8, 4, 2, 1, 8, 8, 8);
        cfg.seed = seed;
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h = seq(&random_rows(&mut rng, 8, 8), 8);
        let rows = random_rows(&mut rng, cands, 8);
        let fwd = model_forward(&h, &seq(&rows, 8), &params).unwrap();
        let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let back = model_forward(&h, &seq(&reversed, 8), &params).unwrap();
        for i in 0..cands {
            prop_assert!(fwd.row(i).iter().all(|p| (0.0..=1.0).contains(p)));
            let diff = fwd.row(i).iter().zip(back.row(cands - 1 - i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-10);
        }
    }
}
