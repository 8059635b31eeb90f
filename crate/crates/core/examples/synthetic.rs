//! Trains on the synthetic corpus and prints test metrics plus a few
//! attributions.
//!
//! cargo run --release -p toxscope-core --example synthetic

use std::time::Instant;

use toxscope::attribution::{explain, rank_tokens};
use toxscope::metrics::{format_table, ReportRow};
use toxscope::synthetic::{generate, is_lexicon, SyntheticSpec};
use toxscope::text::{build_vocab, split_corpus, Label, SplitSpec};
use toxscope::{evaluate, init_model, train, Hyperparams, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = |k: &str| std::env::var(k).ok();
    let seed: u64 = env("SEED").map_or(Ok(1), |v| v.parse())?;
    let corpus = generate(&SyntheticSpec::default());
    let (train_set, dev_set, test_set) = split_corpus(&corpus, &SplitSpec::thirds(seed))?;
    let vocab = build_vocab(&train_set, 1);
    let config = ModelConfig {
        max_len: 24,
        n_layers: env("LAYERS").map_or(Ok(1), |v| v.parse())?,
        seed,
        ..ModelConfig::desk_scale(vocab.len())
    };
    let hp = Hyperparams {
        learning_rate: env("LR").map_or(Ok(1e-3), |v| v.parse())?,
        batch_size: env("BATCH").map_or(Ok(2), |v| v.parse())?,
        epochs: env("EPOCHS").map_or(Ok(5), |v| v.parse())?,
        seed,
    };

    let started = Instant::now();
    let (model, history) = train(init_model(&config)?, &vocab, &train_set, &dev_set, &hp)?;
    println!(
        "trained in {:.1}s, epoch losses {:?}",
        started.elapsed().as_secs_f64(),
        history.epoch_loss
    );
    println!("first batch loss {:.12}", history.first_batch_loss);

    let report = evaluate(&model, &vocab, &test_set)?;
    print!(
        "{}",
        format_table(&[ReportRow::new("encoder-d32", &report)])
    );

    let started = Instant::now();
    let (mut hits, mut total, mut worst_gap) = (0, 0, 0.0f64);
    for r in test_set
        .records
        .iter()
        .filter(|r| r.label == Label::Explicit)
    {
        let (pred, attr) = explain(&model, &vocab, &r.text, 64)?;
        worst_gap = worst_gap.max(attr.completeness_gap);
        if pred.label != Label::Explicit {
            continue;
        }
        total += 1;
        let top = rank_tokens(&attr);
        if top.first().is_some_and(|t| is_lexicon(&t.token)) {
            hits += 1;
        }
    }
    println!(
        "lexicon top-attributed in {hits}/{total} explicit items ({:.1}s), worst gap {worst_gap:.2e}",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
