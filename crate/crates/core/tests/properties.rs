use proptest::prelude::*;
use vidlang_core::data::generate_synthetic_corpus;
use vidlang_core::eval::{eval_retrieval, metrics_from_ranks, text_to_video_ranks, two_stage_ranks};
use vidlang_core::pooling::{mean_pools, text_dependent_reweight};
use vidlang_core::video::temporal_scale;
use vidlang_core::{Graph, Mode, ModelConfig, Tensor, Vocabulary};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

fn square(max: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max).prop_flat_map(|n| matrix(n, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in sized_matrix(5, 6), temp in 0.05..5.0f64) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, 1, temp).unwrap();
        let out = g.value(s);
        for r in 0..out.rows() {
            let sum: f64 = out.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(out.row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(x in sized_matrix(5, 6)) {
        prop_assume!((0..x.rows()).all(|r| x.row(r).iter().any(|v| v.abs() > 1e-3)));
        let mut g = Graph::new();
        let v = g.constant(x);
        let n = g.l2_normalize_rows(v).unwrap();
        let out = g.value(n);
        for r in 0..out.rows() {
            let norm: f64 = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_roundtrips(a in matrix(3, 4), b in matrix(2, 4)) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat_rows(&[va, vb]).unwrap();
        let ra = g.slice_rows(c, 0, 3).unwrap();
        let rb = g.slice_rows(c, 3, 5).unwrap();
        prop_assert_eq!(g.value(ra), &a);
        prop_assert_eq!(g.value(rb), &b);
    }

    #[test]
    fn temporal_scale_stays_in_range(gamma in -50.0..50.0f64, delta in 0.01..1.0f64) {
        let a = temporal_scale(gamma);
        prop_assert!((0.0..=2.0).contains(&a));
        prop_assert!(temporal_scale(gamma + delta) >= a);
    }

    #[test]
    fn pooling_conserves_mass(t in 1usize..5, s in 1usize..5, tau in 0.01..10.0f64, seed in any::<u64>()) {
        let d = 4;
        let v_l = random_tensor(1 + t * s, d, seed);
        let text = random_tensor(1, d, seed ^ 1);
        let mut g = Graph::new();
        let (vl, tc) = (g.constant(v_l), g.constant(text));
        let (ft, fs) = mean_pools(&mut g, vl, t, s).unwrap();
        let r = text_dependent_reweight(&mut g, ft, fs, tc, tau).unwrap();
        let gt: f64 = g.value(r.g_t).data().iter().sum();
        let gs: f64 = g.value(r.g_s).data().iter().sum();
        prop_assert!((t as f64 * gt - t as f64).abs() < 1e-9);
        prop_assert!((s as f64 * gs - s as f64).abs() < 1e-9);
    }

    #[test]
    fn frame_weights_follow_frame_permutation(seed in any::<u64>(), shift in 1usize..4) {
        let (t, s, d) = (4, 3, 5);
        let v_l = random_tensor(1 + t * s, d, seed);
        let text = random_tensor(1, d, seed ^ 7);
        let perm: Vec<usize> = (0..t).map(|i| (i + shift) % t).collect();
        let mut rows = vec![v_l.row(0).to_vec()];
        for &src in &perm {
            for p in 0..s {
                rows.push(v_l.row(1 + src * s + p).to_vec());
            }
        }
        let permuted = Tensor::from_rows(&rows).unwrap();
        let weights = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let (vl, tc) = (g.constant(x), g.constant(text.clone()));
            let (ft, fs) = mean_pools(&mut g, vl, t, s).unwrap();
            let r = text_dependent_reweight(&mut g, ft, fs, tc, 0.5).unwrap();
            (g.value(r.g_t).data().to_vec(), g.value(r.g_s).data().to_vec())
        };
        let (gt, gs) = weights(v_l.clone());
        let (pt, ps) = weights(permuted);
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((pt[i] - gt[src]).abs() < 1e-12);
        }
        for (a, b) in gs.iter().zip(&ps) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_ordered(s in square(12)) {
        let m = eval_retrieval(&s).unwrap();
        prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);
        prop_assert!(m.mdr >= 1.0 && m.mdr <= m.queries as f64);
    }

    #[test]
    fn raising_the_target_never_hurts(s in square(8), j in 0usize..8, bump in 0.0..5.0f64) {
        let n = s.rows();
        let j = j % n;
        let before = text_to_video_ranks(&s).unwrap();
        let mut raised = s.clone();
        raised.row_mut(j)[j] += bump;
        let after = text_to_video_ranks(&raised).unwrap();
        prop_assert!(after[j] <= before[j]);
        let (mb, ma) = (metrics_from_ranks(&before), metrics_from_ranks(&after));
        prop_assert!(ma.r1 >= mb.r1 && ma.r10 >= mb.r10 && ma.mdr <= mb.mdr);
    }

    #[test]
    fn full_rerank_equals_reranker_ranks(vtc in matrix(6, 6), vtm in matrix(6, 6)) {
        let (ranks, calls) = two_stage_ranks(&vtc, 6, |i, j| Ok(vtm.at(i, j))).unwrap();
        prop_assert_eq!(ranks, text_to_video_ranks(&vtm).unwrap());
        prop_assert_eq!(calls, 36);
    }

    #[test]
    fn tokenization_roundtrips(ids in prop::collection::vec(2usize..64, 0..8)) {
        let vocab = Vocabulary::synthetic(64);
        let text: Vec<&str> = ids.iter().map(|&i| vocab.word(i).unwrap()).collect();
        let text = text.join(" ");
        let seq = vocab.tokenize(&text, Mode::Cls).unwrap();
        prop_assert_eq!(seq.words(), &ids[..]);
        prop_assert_eq!(vocab.detokenize(&seq), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn corpus_generation_is_deterministic(seed in any::<u64>(), n in 2usize..12) {
        let cfg = ModelConfig::toy();
        let a = generate_synthetic_corpus(seed, n, &cfg, true).unwrap();
        let b = generate_synthetic_corpus(seed, n, &cfg, true).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}
