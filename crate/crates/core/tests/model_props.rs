use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toxscope::text::{encode, EncodedExample, PAD_ID, UNK_ID};
use toxscope::{init_model, Classifier, ModelConfig, Tensor, Vocabulary};

fn config(max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len,
        n_classes: 3,
        seed: 9,
    }
}

/// Init-scale model with a random head, so the logits actually vary.
fn model(max_len: usize) -> Classifier {
    let mut m = init_model(&config(max_len)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = m.params.tensors().len();
    for t in &mut m.params.tensors_mut()[n - 2..] {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(1..20)).collect()
}

fn example(ids: &[usize], total: usize) -> EncodedExample {
    let mut padded = ids.to_vec();
    padded.resize(total, PAD_ID);
    let mut mask = vec![true; ids.len()];
    mask.resize(total, false);
    EncodedExample {
        ids: padded,
        mask,
        label_index: None,
    }
}

fn close(a: &[f64; 3], b: &[f64; 3], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn trailing_padding_does_not_move_the_logits() {
    let m = model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let k = rng.random_range(1..12);
        let ids = random_ids(&mut rng, k);
        let bare = m.forward(&example(&ids, k)).unwrap();
        for total in k + 1..=12 {
            let padded = m.forward(&example(&ids, total)).unwrap();
            assert!(close(&bare, &padded, 1e-10), "k={k} total={total}");
        }
        // whatever sits under the mask is irrelevant
        let mut noisy = example(&ids, 12);
        for id in &mut noisy.ids[k..] {
            *id = rng.random_range(0..20);
        }
        assert!(close(&bare, &m.forward(&noisy).unwrap(), 1e-10));
    }
}

#[test]
fn permuting_vocabulary_ids_with_embedding_rows_changes_nothing() {
    let m = model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut perm: Vec<usize> = (0..20).collect();
    perm.shuffle(&mut rng);

    let mut permuted = m.clone();
    let table = m.params.token_embedding();
    let d = table.shape()[1];
    let mut rows = vec![0.0; table.len()];
    for (old, &new) in perm.iter().enumerate() {
        rows[new * d..(new + 1) * d].copy_from_slice(table.row(old));
    }
    permuted.params.tensors_mut()[0] = Tensor::new(table.shape().to_vec(), rows).unwrap();

    for _ in 0..30 {
        let k = rng.random_range(1..=8);
        let ids = random_ids(&mut rng, k);
        let moved: Vec<usize> = ids.iter().map(|&i| perm[i]).collect();
        let a = m.forward(&example(&ids, 8)).unwrap();
        let b = permuted.forward(&example(&moved, 8)).unwrap();
        assert!(close(&a, &b, 1e-10));
    }
}

#[test]
fn forward_is_repeatable_bit_for_bit() {
    let m = model(8);
    let ex = example(&[3, 4, 5, 6], 8);
    let first = m.forward(&ex).unwrap();
    for _ in 0..5 {
        let again = m.forward(&ex).unwrap();
        assert!(first
            .iter()
            .zip(&again)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(
        init_model(&config(8)).unwrap(),
        init_model(&config(8)).unwrap()
    );
}

#[test]
fn predicted_probabilities_form_a_distribution() {
    let m = model(8);
    let vocab = Vocabulary::from_tokens((2..20).map(|i| format!("t{i}")));
    for text in [
        "t2 t3 t4",
        "t9",
        "unknown words only",
        "t5 t5 t5 t5 t5 t5 t5 t5 t5 t5",
    ] {
        let p = m.predict(&vocab, text).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = p.probabilities[p.label.index()];
        assert!(p.probabilities.iter().all(|&q| q <= best));
        assert_eq!(p.confidence, best);
    }
}

#[test]
fn unknown_tokens_map_to_unk_not_pad() {
    let vocab = Vocabulary::from_tokens(["known".to_string()]);
    let ex = encode(&["known", "mystery"], &vocab, 4);
    assert_eq!(ex.ids, vec![2, UNK_ID, PAD_ID, PAD_ID]);
}
