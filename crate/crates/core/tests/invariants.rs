//! Cross-module properties: kernels, the host transformer and the fusion
//! module's attention.

use std::collections::BTreeSet;

use dssp_core::dssp::{cross_attention, dssp_forward, shared_similarity, DsspParams, Triple};
use dssp_core::model::{ForwardOptions, Model, ModelConfig};
use dssp_core::numeric::{layer_norm, matmul, softmax_rows};
use dssp_core::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_row_stochastic(m: &Matrix) -> Result<(), TestCaseError> {
    for r in 0..m.rows() {
        let row = m.row(r);
        prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.01f64..10.0,
        spread in 0.1f64..200.0,
        seed in any::<u64>(),
    ) {
        let m = randn(rows, cols, seed).scaled(spread);
        assert_row_stochastic(&softmax_rows(&m, scale).unwrap())?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_is_associative(a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let x = randn(a, b, seed);
        let y = randn(b, c, seed.wrapping_add(1));
        let z = randn(c, d, seed.wrapping_add(2));
        let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm().max(1e-300);
        prop_assert!(rel <= 1e-9, "relative error {rel}");
    }

    #[test]
    fn kernels_are_bit_deterministic(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let m = randn(rows, cols, seed);
        let w = randn(cols, cols, seed ^ 1);
        prop_assert_eq!(matmul(&m, &w).unwrap(), matmul(&m.clone(), &w.clone()).unwrap());
        prop_assert_eq!(softmax_rows(&m, 0.7).unwrap(), softmax_rows(&m, 0.7).unwrap());
        let g = vec![1.3; cols];
        let b = vec![-0.2; cols];
        prop_assert_eq!(layer_norm(m.row(0), &g, &b, 1e-5).unwrap(), layer_norm(m.row(0), &g, &b, 1e-5).unwrap());
    }
}

fn host(seed: u64) -> Model {
    Model::random(ModelConfig { n_layers: 3, n_heads: 2, d_model: 8, d_ff: 12, vocab_size: 13, max_seq: 12, seed })
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn host_attention_is_stochastic_and_skips_keep_shapes(
        seed in any::<u64>(),
        tokens in prop::collection::vec(0usize..13, 1..12),
        skip in prop::collection::btree_set(0usize..3, 0..4),
    ) {
        let m = host(seed);
        let full = m.forward(&tokens, &ForwardOptions::default()).unwrap();
        let opts = ForwardOptions { skip_layers: skip.clone(), dssp_hook: None };
        let skipped = m.forward(&tokens, &opts).unwrap();
        for t in [&full, &skipped] {
            prop_assert_eq!(t.hidden.len(), 3);
            for h in &t.hidden {
                prop_assert_eq!(h.shape(), (tokens.len(), 8));
            }
            for heads in &t.attention {
                for a in heads {
                    assert_row_stochastic(a)?;
                }
            }
            prop_assert_eq!(t.logits.shape(), (tokens.len(), 13));
        }
        prop_assert_eq!(full.hidden[2].clone(), m.forward(&tokens, &ForwardOptions { skip_layers: BTreeSet::new(), dssp_hook: None }).unwrap().hidden[2].clone());
    }

    #[test]
    fn fusion_module_attention_is_row_stochastic(
        seed in any::<u64>(),
        n_x in 1usize..6,
        n_y in 1usize..6,
    ) {
        // With values that read one-hot key rows, cross-attention exposes its
        // attention matrix in the first |Y| output columns.
        let d = 8;
        let x = randn(n_x, d, seed);
        let mut y = randn(n_y, d, seed ^ 7);
        for r in 0..n_y {
            for c in 0..n_y {
                y.set(r, c, if r == c { 1.0 } else { 0.0 }).unwrap();
            }
        }
        let mut wv = Matrix::zeros(d, d);
        for c in 0..n_y {
            wv.set(c, c, 1.0).unwrap();
        }
        let wq = randn(d, d, seed ^ 3);
        let wk = randn(d, d, seed ^ 5);
        let out = cross_attention(&x, &y, Triple { wq: &wq, wk: &wk, wv: &wv }).unwrap();
        let cols: Vec<usize> = (0..n_y).collect();
        let probs = out.transpose().select_rows(&cols).unwrap().transpose();
        assert_row_stochastic(&probs)?;

        let sim = shared_similarity(&x, &y, &randn(d, d, seed ^ 9)).unwrap();
        assert_row_stochastic(&sim)?;
    }
}

#[test]
fn fusion_output_keeps_the_internal_shape_over_the_sweep_grid() {
    let mut n = 0u64;
    for n_i in [1usize, 2, 5, 16] {
        for n_d in [1usize, 3, 10] {
            for d in [2usize, 8, 32] {
                for t in [1usize, 10] {
                    n += 1;
                    let p = DsspParams::init(d, 2 * d, t, n).unwrap();
                    let i = randn(n_i, d, n);
                    let ext = randn(n_d, d, n + 100);
                    assert_eq!(dssp_forward(&i, &ext, &p).unwrap().shape(), (n_i, d));
                }
            }
        }
    }
}
