use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toxscope::attribution::{integrate_path, rank_scores, GraphField};
use toxscope::autodiff::Graph;
use toxscope::{
    init_model, integrated_gradients, normalize_attributions, AttributionError, Classifier,
    ModelConfig, Tensor, Vocabulary,
};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn linear_model_attributions_are_input_times_weight_for_any_step_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (n, d) = (rng.random_range(1..=6), rng.random_range(1..=5));
        let target = rng.random_range(0..3);
        let weights = uniform(&mut rng, &[d, 3]);
        let x = uniform(&mut rng, &[n, d]);

        // depth-0 model: mean-pool, then a linear head
        let mut g = Graph::new();
        let input = g.leaf("x", &[n, d]);
        let pooled = g.masked_mean_pool(input.node(), vec![true; n]);
        let w = g.constant(weights.clone());
        let logits = g.matmul(pooled, w);
        let out = g.select(logits, target);
        g.set_output(out);
        let field = GraphField::new(&g, input, Vec::new());

        for steps in [1, 4, 64] {
            let path = integrate_path(&field, &x, &Tensor::zeros(&[n, d]), steps).unwrap();
            for r in 0..n {
                for j in 0..d {
                    let expected = x.row(r)[j] * weights.row(j)[target] / n as f64;
                    let got = path.coordinates.row(r)[j];
                    assert!(
                        (got - expected).abs() <= 1e-12,
                        "m={steps}: {got} vs {expected}"
                    );
                }
            }
            assert!(path.completeness_gap() <= 1e-12);
        }
    }
}

/// Small random-weight encoder over a five-word vocabulary.
fn toy_model() -> (Classifier, Vocabulary) {
    let vocab =
        Vocabulary::from_tokens(["alpha", "beta", "gamma", "delta", "blank"].map(String::from));
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_len: 8,
        n_classes: 3,
        seed: 3,
    };
    let mut model = init_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in model.params.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    // "blank" shares the PAD row, so its embedding equals the baseline's
    let blank = vocab.id("blank").unwrap();
    let table = &mut model.params.tensors_mut()[0];
    let d = table.shape()[1];
    let pad_row = table.row(0).to_vec();
    table.data_mut()[blank * d..(blank + 1) * d].copy_from_slice(&pad_row);
    (model, vocab)
}

#[test]
fn tokens_identical_to_the_baseline_get_zero() {
    let (model, vocab) = toy_model();
    for text in ["alpha blank beta", "blank gamma blank delta", "blank"] {
        for target in 0..3 {
            let r = integrated_gradients(&model, &vocab, text, target, 32).unwrap();
            for (t, s) in r.tokens.iter().zip(&r.raw_scores) {
                if t == "blank" {
                    assert!(s.abs() <= 1e-12, "{text}: {s}");
                }
            }
        }
    }
    let r = integrated_gradients(&model, &vocab, "blank blank", 0, 16).unwrap();
    assert!(r.raw_scores.iter().all(|&s| s == 0.0));
    assert_eq!(r.completeness_gap, 0.0);
    assert_eq!(r.output_delta, 0.0);
}

#[test]
fn completeness_gap_shrinks_with_more_steps() {
    let (model, vocab) = toy_model();
    for text in ["alpha beta gamma", "delta delta alpha beta", "gamma"] {
        let coarse = integrated_gradients(&model, &vocab, text, 1, 4).unwrap();
        let fine = integrated_gradients(&model, &vocab, text, 1, 128).unwrap();
        assert!(
            fine.completeness_gap <= coarse.completeness_gap + 1e-15,
            "{text}"
        );
        assert!(fine.completeness_gap <= 1e-3_f64.max(0.01 * fine.output_delta.abs()));
        assert_eq!(fine.output_delta, coarse.output_delta);
    }
}

#[test]
fn attribution_rejects_bad_requests() {
    let (model, vocab) = toy_model();
    assert!(matches!(
        integrated_gradients(&model, &vocab, "alpha", 0, 0),
        Err(AttributionError::BadSteps(0))
    ));
    assert!(matches!(
        integrated_gradients(&model, &vocab, "alpha", 3, 8),
        Err(AttributionError::BadTarget(3))
    ));
    assert!(matches!(
        integrated_gradients(&model, &vocab, "  ###  ", 0, 8),
        Err(AttributionError::EmptyInput)
    ));
}

#[test]
fn attribution_is_repeatable_bit_for_bit() {
    let (model, vocab) = toy_model();
    let a = integrated_gradients(&model, &vocab, "alpha beta gamma delta", 2, 64).unwrap();
    let b = integrated_gradients(&model, &vocab, "alpha beta gamma delta", 2, 64).unwrap();
    assert_eq!(a, b);
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // a small value pool makes ties common
    prop::collection::vec(
        prop_oneof![(-4i32..=4).prop_map(|v| v as f64 / 4.0), -10.0f64..10.0],
        0..12,
    )
}

proptest! {
    #[test]
    fn normalization_keeps_sign_zeros_and_peak(raw in scores()) {
        let norm = normalize_attributions(&raw);
        prop_assert_eq!(norm.len(), raw.len());
        let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (r, n) in raw.iter().zip(&norm) {
            prop_assert!((-1.0..=1.0).contains(n));
            prop_assert_eq!(r.partial_cmp(&0.0), n.partial_cmp(&0.0));
            if peak > 0.0 {
                prop_assert_eq!(r.abs() == peak, n.abs() == 1.0);
            }
        }
    }

    #[test]
    fn ranking_sorts_positive_scores_with_position_ties(raw in scores()) {
        let tokens: Vec<String> = (0..raw.len()).map(|i| format!("t{i}")).collect();
        let ranked = rank_scores(&tokens, &raw);
        prop_assert_eq!(ranked.len(), raw.iter().filter(|&&s| s > 0.0).count());
        for pair in ranked.windows(2) {
            prop_assert!(pair[0].score > pair[1].score
                || (pair[0].score == pair[1].score && pair[0].position < pair[1].position));
        }
        for r in &ranked {
            prop_assert_eq!(&tokens[r.position], &r.token);
            prop_assert_eq!(raw[r.position], r.score);
        }
    }

    #[test]
    fn swapping_equal_scores_keeps_the_score_sequence(raw in scores(), seed in any::<u64>()) {
        let tokens: Vec<String> = (0..raw.len()).map(|i| format!("t{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..raw.len()).collect();
        // only positions holding equal scores trade places
        for i in 0..order.len() {
            let j = rng.random_range(0..order.len());
            if raw[order[i]] == raw[order[j]] {
                order.swap(i, j);
            }
        }
        let moved_tokens: Vec<&String> = order.iter().map(|&i| &tokens[i]).collect();
        let moved_scores: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
        let a: Vec<f64> = rank_scores(&tokens, &raw).iter().map(|r| r.score).collect();
        let b: Vec<f64> = rank_scores(&moved_tokens, &moved_scores).iter().map(|r| r.score).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn ranking_examples() {
    let ranked = rank_scores(&["a", "b", "c"], &[0.9, -0.2, 0.4]);
    let pairs: Vec<(&str, f64)> = ranked.iter().map(|r| (r.token.as_str(), r.score)).collect();
    assert_eq!(pairs, [("a", 0.9), ("c", 0.4)]);
    let ranked = rank_scores(&["a", "b"], &[0.5, 0.5]);
    assert_eq!(
        ranked.iter().map(|r| r.position).collect::<Vec<_>>(),
        [0, 1]
    );
    assert!(rank_scores(&["a", "b"], &[0.0, -1.0]).is_empty());
}
