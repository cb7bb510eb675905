mod common;

use std::rc::Rc;

use maskdepth::encoder::{encode, encode_subsets_oracle, AttnScale, Encoder, EncoderConfig, MaskFill};
use maskdepth::masking::{build_attention_mask, reassemble, sample_partition, shuffle, AttentionMask};
use maskdepth::metrics::depth_metrics;
use maskdepth::nn::ParamStore;
use maskdepth::tensor::Tensor;
use maskdepth::tokens::{patchify, unpatchify, Grid, ImageTensor, TokenSequence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoder(d: usize, depth: usize, rng: &mut ChaCha8Rng) -> (Encoder, ParamStore<f64>) {
    let cfg = EncoderConfig {
        depth,
        d_model: d,
        heads: 2,
        mlp_ratio: 2.0,
        skip_blocks: (0..depth).collect(),
        mask_fill: MaskFill::Exact,
        attn_scale: AttnScale::Standard,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg, rng).unwrap();
    (enc, store)
}

fn random_tokens(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn([n, d], |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips(rows in 1usize..4, cols in 1usize..4, p in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::new(Tensor::from_fn([3, rows * p, cols * p], |_| rng.random::<f64>())).unwrap();
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[rows * cols, 3 * p * p][..]);
        let back = unpatchify(&patches, Grid { rows, cols }, p).unwrap();
        prop_assert_eq!(back.tensor(), img.tensor());
    }

    #[test]
    fn partitions_are_disjoint_covers(n in 1usize..200, k in 1usize..100, seed in any::<u64>()) {
        let p = sample_partition(n, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(p.k(), k);
        let mut all: Vec<usize> = p.subsets.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for i in 0..n {
            prop_assert_eq!(p.perm[p.inv_perm[i]], i);
        }
        let t = Tensor::<f64>::from_fn([n, 2], |i| i as f64);
        prop_assert_eq!(reassemble(&shuffle(&t, &p).unwrap(), &p).unwrap(), t);
    }

    #[test]
    fn mask_is_symmetric_block_diagonal(n in 1usize..80, k in 1usize..20, seed in any::<u64>()) {
        let p = sample_partition(n, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let m = build_attention_mask(&p);
        let labels = p.labels();
        for a in 0..n {
            prop_assert!(m.allowed(a, a));
            for b in 0..n {
                prop_assert_eq!(m.allowed(a, b), m.allowed(b, a));
                prop_assert_eq!(m.allowed(a, b), labels[p.perm[a]] == labels[p.perm[b]]);
            }
        }
        let expected: usize = p.sizes().iter().map(|s| s * s).sum();
        prop_assert_eq!(m.count_allowed(), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn joint_masked_encoding_matches_per_subset(n in 2usize..40, k in 1usize..8, depth in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, store) = encoder(16, depth, &mut rng);
        let seq = TokenSequence::new(random_tokens(n, 16, &mut rng), Grid { rows: 1, cols: n }, 1).unwrap();
        let part = sample_partition(n, k, &mut rng).unwrap();
        let mut shuffled = seq.clone();
        shuffled.tokens = shuffle(&seq.tokens, &part).unwrap();
        shuffled.perm = Some(Rc::clone(&part.perm));
        let joint = encode(&shuffled, Some(&build_attention_mask(&part)), &enc, &store).unwrap();
        let oracle = encode_subsets_oracle(&seq, &part, &enc, &store).unwrap();
        prop_assert!(reassemble(&joint.final_tokens, &part).unwrap().max_abs_diff(&oracle.final_tokens) <= 1e-10);
    }

    #[test]
    fn encoder_is_permutation_equivariant(n in 2usize..24, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, store) = encoder(16, 2, &mut rng);
        let x = random_tokens(n, 16, &mut rng);
        let mask = build_attention_mask(&sample_partition(n, k, &mut rng).unwrap());
        let part = sample_partition(n, 1, &mut rng).unwrap();
        let perm: Vec<usize> = part.perm.as_ref().clone();
        let grid = Grid { rows: 1, cols: n };
        let base = encode(&TokenSequence::new(x.clone(), grid, 1).unwrap(), Some(&mask), &enc, &store).unwrap();
        let moved = encode(
            &TokenSequence::new(x.gather_rows(&perm), grid, 1).unwrap(),
            Some(&mask.permuted(&perm)),
            &enc,
            &store,
        )
        .unwrap();
        prop_assert!(moved.final_tokens.max_abs_diff(&base.final_tokens.gather_rows(&perm)) <= 1e-10);
    }
}

#[test]
fn k1_mask_is_all_true_and_neutral() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (enc, store) = encoder(32, 2, &mut rng);
    let part = sample_partition(16, 1, &mut rng).unwrap();
    let mask = build_attention_mask(&part);
    assert!(mask.is_all());
    let seq = TokenSequence::new(random_tokens(16, 32, &mut rng), Grid { rows: 4, cols: 4 }, 1).unwrap();
    let plain = encode(&seq, None, &enc, &store).unwrap();
    let masked = encode(&seq, Some(&AttentionMask::all(16)), &enc, &store).unwrap();
    assert!(plain.final_tokens.max_abs_diff(&masked.final_tokens) <= 1e-12);
}

/// Mean mask density falls as K grows: Spearman ρ between K and density < 0.
#[test]
fn mask_density_decreases_with_k() {
    let ks = [1usize, 2, 4, 8, 16, 32, 64];
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let density: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let total: usize = (0..1000)
                .map(|_| build_attention_mask(&sample_partition(n, k, &mut rng).unwrap()).count_allowed())
                .sum();
            total as f64 / (1000 * n * n) as f64
        })
        .collect();
    assert_eq!(density[0], 1.0);
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let rk = rank(&ks.map(|k| k as f64));
    let rd = rank(&density);
    let m = (ks.len() - 1) as f64 / 2.0;
    let cov: f64 = rk.iter().zip(&rd).map(|(a, b)| (a - m) * (b - m)).sum();
    let var: f64 = rk.iter().map(|a| (a - m).powi(2)).sum();
    assert!(cov / var < 0.0, "densities {density:?}");
}

#[test]
fn metrics_match_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let gt: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.5..100.0)).collect();
        let pred: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..120.0)).collect();
        let mut valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let cap = if rng.random_bool(0.5) { 80.0 } else { 50.0 };
        let got = depth_metrics(&Tensor::new([h, w], pred.clone()), &Tensor::new([h, w], gt.clone()), &valid, cap).unwrap();
        let want = common::naive_metrics(&pred, &gt, &valid, cap);
        let pairs = [
            (got.abs_rel, want.abs_rel),
            (got.sq_rel, want.sq_rel),
            (got.rmse, want.rmse),
            (got.rmse_log, want.rmse_log),
            (got.log10, want.log10),
            (got.delta1, want.delta1),
            (got.delta2, want.delta2),
            (got.delta3, want.delta3),
        ];
        for (a, b) in pairs {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
