//! MnM block behaviour against independently coded dense oracles.

use mnm_core::mnm::{MatchKind, MnmBlock, MnmConfig};
use mnm_core::numerics::{
    gradient_check, gradient_check_params, random_matrix, Graph, MaskBits, Matrix,
    ParamStore, Vector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::*;

fn seeded_block(config: MnmConfig, seed: u64) -> (ParamStore, MnmBlock, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = MnmBlock::new(&mut store, "blk", config, &mut rng).unwrap();
    // Move norms and identity-initialised weights off their defaults so the
    // oracles exercise every parameter.
    let ids: Vec<_> = (0..store.len()).map(mnm_core::numerics::ParamId).collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    (store, block, rng)
}

fn random_mask<R: Rng>(rng: &mut R, n: usize) -> MaskBits {
    let mut m = MaskBits((0..n).map(|_| rng.random_bool(0.7)).collect());
    m.0[rng.random_range(0..n)] = true;
    m
}

fn max_diff_valid(a: &Matrix, b: &Matrix, mask: &MaskBits) -> f64 {
    let mut worst: f64 = 0.0;
    for r in mask.valid_indices() {
        for c in 0..a.cols() {
            worst = worst.max((a.get(r, c) - b.get(r, c)).abs());
        }
    }
    worst
}

fn pool_configs() -> Vec<MnmConfig> {
    let mut out = Vec::new();
    for heads in [1, 2] {
        for matching in [MatchKind::Concat, MatchKind::Product] {
            out.push(MnmConfig {
                matching,
                query: false,
                d_ff: 12,
                ..MnmConfig::feature_extractor(4, heads)
            });
        }
    }
    out
}

#[test]
fn basic_block_with_zero_weights_is_identity() {
    for config in pool_configs() {
        let (mut store, block, mut rng) = seeded_block(config, 1);
        for &w in &block.match_proj {
            let shape = store.value(w).shape();
            store.get_mut(w).value = Matrix::zeros(shape.0, shape.1);
        }
        let shape = store.value(block.w2).shape();
        store.get_mut(block.w2).value = Matrix::zeros(shape.0, shape.1);
        let x = random_matrix(&mut rng, 5, 4, 3.0);
        let mask = MaskBits::all_valid(5);
        let out = block.forward_basic(&store, &x, &mask).unwrap();
        assert_eq!(out, x, "{config:?}");
    }
}

#[test]
fn basic_pool_concat_single_token_matches_hand_chain() {
    let (store, block, mut rng) = seeded_block(pool_configs()[0], 2);
    let x = random_matrix(&mut rng, 1, 4, 2.0);
    let mask = MaskBits::all_valid(1);
    let out = block.forward_basic(&store, &x, &mask).unwrap();
    let expected = oracle_basic_pool(&block, &store, &x, &mask);
    assert!(max_diff_valid(&out, &expected, &mask) < 1e-12);
}

#[test]
fn basic_pool_blocks_match_oracle() {
    for (i, config) in pool_configs().into_iter().enumerate() {
        let (store, block, mut rng) = seeded_block(config, 10 + i as u64);
        let x = random_matrix(&mut rng, 6, 4, 2.0);
        let mask = random_mask(&mut rng, 6);
        let out = block.forward_basic(&store, &x, &mask).unwrap();
        let expected = oracle_basic_pool(&block, &store, &x, &mask);
        assert!(max_diff_valid(&out, &expected, &mask) < 1e-12, "{config:?}");
    }
}

#[test]
fn attention_mix_matches_direct_softmax() {
    let (store, block, mut rng) = seeded_block(MnmConfig::attention(4, 1), 3);
    let x = random_matrix(&mut rng, 4, 4, 1.0);
    // mix runs on Norm(x); feed the oracle the same normalized tokens
    let xn = ln(&x, &store, block.norm_mix);
    let a = &block.mix_value(&store, &x, &MaskBits::all_valid(4)).unwrap()[0];
    let scores = mm(&xn, &xn.transpose()).scale(0.5);
    for i in 0..4 {
        let z: f64 = scores.row(i).iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            assert!((a.get(i, j) - scores.get(i, j).exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_instantiation_is_a_transformer_layer() {
    for heads in [1, 2] {
        for seed in 0..50 {
            let (store, block, mut rng) = seeded_block(MnmConfig::attention(4, heads), 100 + seed);
            let n = rng.random_range(1..7);
            let x = random_matrix(&mut rng, n, 4, 2.0);
            let mask = random_mask(&mut rng, n);
            let out = block.forward_basic(&store, &x, &mask).unwrap();
            let expected = transformer_layer(&block, &store, &x, &mask);
            assert!(max_diff_valid(&out, &expected, &mask) < 1e-10, "heads {heads} seed {seed}");
        }
    }
}

#[test]
fn query_block_with_zero_weights() {
    for matching in [MatchKind::Concat, MatchKind::Product] {
        let config = MnmConfig {
            matching,
            d_ff: 8,
            ..MnmConfig::feature_extractor(4, 2)
        };
        let (mut store, block, mut rng) = seeded_block(config, 4);
        let q = block.query.unwrap();
        for id in block.match_proj.iter().copied().chain([block.w2, q.w4]) {
            let shape = store.value(id).shape();
            store.get_mut(id).value = Matrix::zeros(shape.0, shape.1);
        }
        let x = random_matrix(&mut rng, 5, 4, 2.0);
        let c = Vector(vec![0.3, -1.0, 2.0, 0.5]);
        let mask = MaskBits(vec![true, true, false, true, false]);
        let (xo, co) = block.forward_query(&store, &x, &c, &mask).unwrap();
        assert_eq!(xo, x);
        let mixed = block.mix_value(&store, &x, &mask).unwrap();
        assert_eq!(co.as_slice(), mixed[0].as_slice());
    }
}

#[test]
fn product_match_with_ones_doubles_tokens() {
    let config = MnmConfig {
        d_ff: 8,
        ..MnmConfig::interaction(4, 1)
    };
    let mut store = ParamStore::new();
    let block = MnmBlock::new(&mut store, "q", config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    store.get_mut(block.w2).value = Matrix::zeros(8, 4);
    let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(6), 3, 4, 1.0);
    let (xo, _) = block
        .forward_query(&store, &x, &Vector(vec![1.0; 4]), &MaskBits::all_valid(3))
        .unwrap();
    assert_eq!(xo, x.scale(2.0));
}

#[test]
fn query_blocks_match_oracle() {
    for (i, base) in pool_configs().into_iter().enumerate() {
        let config = MnmConfig { query: true, ..base };
        let (store, block, mut rng) = seeded_block(config, 20 + i as u64);
        let x = random_matrix(&mut rng, 7, 4, 2.0);
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = random_mask(&mut rng, 7);
        let (xo, co) = block.forward_query(&store, &x, &Vector(c.clone()), &mask).unwrap();
        let (ex, ec) = oracle_query(&block, &store, &x, &c, &mask);
        assert!(max_diff_valid(&xo, &ex, &mask) < 1e-12, "{config:?}");
        for (a, b) in co.as_slice().iter().zip(&ec) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn two_head_pooling_mixes_like_one_head() {
    let mut s1 = ParamStore::new();
    let b1 = MnmBlock::new(&mut s1, "a", MnmConfig::feature_extractor(4, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut s2 = ParamStore::new();
    let b2 = MnmBlock::new(&mut s2, "a", MnmConfig::feature_extractor(4, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(9), 5, 4, 1.0);
    let mask = MaskBits(vec![true, false, true, true, true]);
    assert_eq!(b1.mix_value(&s1, &x, &mask).unwrap(), b2.mix_value(&s2, &x, &mask).unwrap());
}

fn permute_rows(x: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(p));
    }
    out
}

fn shuffled<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[test]
fn basic_blocks_are_permutation_equivariant() {
    let configs = pool_configs()
        .into_iter()
        .chain([MnmConfig::attention(4, 1), MnmConfig::attention(4, 2)]);
    for (i, config) in configs.enumerate() {
        let (store, block, mut rng) = seeded_block(config, 30 + i as u64);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 6, 4, 2.0);
            let mask = random_mask(&mut rng, 6);
            let perm = shuffled(&mut rng, 6);
            let px = permute_rows(&x, &perm);
            let pm = MaskBits(perm.iter().map(|&p| mask.0[p]).collect());
            let out = block.forward_basic(&store, &x, &mask).unwrap();
            let pout = block.forward_basic(&store, &px, &pm).unwrap();
            let expected = permute_rows(&out, &perm);
            assert!(max_diff_valid(&pout, &expected, &pm) < 1e-12, "{config:?}");
        }
    }
}

#[test]
fn invalid_rows_never_leak_into_valid_outputs() {
    let mut configs: Vec<MnmConfig> = pool_configs();
    configs.extend(pool_configs().into_iter().map(|c| MnmConfig { query: true, ..c }));
    configs.push(MnmConfig::attention(4, 1));
    configs.push(MnmConfig {
        learned_qk: true,
        ..MnmConfig::attention(4, 2)
    });
    for (i, config) in configs.into_iter().enumerate() {
        let (store, block, mut rng) = seeded_block(config, 40 + i as u64);
        let x = random_matrix(&mut rng, 6, 4, 2.0);
        let mask = MaskBits(vec![true, false, true, false, false, true]);
        let mut noisy = x.clone();
        for r in [1, 3, 4] {
            for v in noisy.row_mut(r) {
                *v = rng.random_range(-1e3..1e3);
            }
        }
        if config.query {
            let c = Vector(vec![0.5, -0.5, 1.0, 0.0]);
            let (a, ca) = block.forward_query(&store, &x, &c, &mask).unwrap();
            let (b, cb) = block.forward_query(&store, &noisy, &c, &mask).unwrap();
            assert_eq!(max_diff_valid(&a, &b, &mask), 0.0);
            assert_eq!(ca, cb);
        } else {
            let a = block.forward_basic(&store, &x, &mask).unwrap();
            let b = block.forward_basic(&store, &noisy, &mask).unwrap();
            assert_eq!(max_diff_valid(&a, &b, &mask), 0.0, "{config:?}");
        }
    }
}

#[test]
fn full_blocks_pass_gradient_check() {
    let mut configs: Vec<MnmConfig> = pool_configs();
    configs.extend(pool_configs().into_iter().map(|c| MnmConfig { query: true, ..c }));
    for heads in [1, 2] {
        configs.push(MnmConfig {
            d_ff: 12,
            ..MnmConfig::attention(4, heads)
        });
        configs.push(MnmConfig {
            d_ff: 12,
            learned_qk: true,
            ..MnmConfig::attention(4, heads)
        });
    }
    for (i, config) in configs.into_iter().enumerate() {
        let (store, block, mut rng) = seeded_block(config, 50 + i as u64);
        let x = random_matrix(&mut rng, 5, 4, 1.5);
        let c = random_matrix(&mut rng, 1, 4, 1.0);
        let mask = MaskBits(vec![true, true, false, true, true]);
        let r = random_matrix(&mut rng, 5, 4, 1.0);

        let wrt_inputs = gradient_check(
            |g, v| {
                if config.query {
                    let (xo, co) = block.query(g, &store, v[0], v[1], &mask)?;
                    g.mul_row(xo, co)
                } else {
                    block.basic(g, &store, v[0], &mask)
                }
            },
            &[x.clone(), c.clone()],
            i as u64,
        )
        .unwrap();
        assert!(wrt_inputs.max_rel_error < 1e-4, "{config:?}: {wrt_inputs:?}");

        let objective = |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let rv = g.constant(r.clone());
            let out = if config.query {
                let cv = g.constant(c.clone());
                let (xo, co) = block.query(g, s, xv, cv, &mask)?;
                g.mul_row(xo, co)?
            } else {
                block.basic(g, s, xv, &mask)?
            };
            let prod = g.transpose(out)?;
            let prod = g.matmul(prod, rv)?;
            let ones = g.constant(Matrix::filled(1, 4, 1.0));
            let t = g.matmul(ones, prod)?;
            let ones_col = g.constant(Matrix::filled(4, 1, 0.25));
            g.matmul(t, ones_col)
        };
        let wrt_params = gradient_check_params(objective, &store, 7, None).unwrap();
        assert!(wrt_params.max_rel_error < 1e-4, "{config:?}: {wrt_params:?}");
    }
}
