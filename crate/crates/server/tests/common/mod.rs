use std::path::PathBuf;
use std::sync::OnceLock;

use toxscope::checkpoint::save_checkpoint;
use toxscope::synthetic::{generate, SyntheticSpec};
use toxscope::text::{build_vocab, split_corpus, SplitSpec};
use toxscope::{init_model, train, Hyperparams, ModelConfig};
use toxscope_server::{ModelSource, Registry};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub ckpt: PathBuf,
}

/// A small model trained once per test binary on the synthetic corpus.
pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = generate(&SyntheticSpec {
            per_label: 60,
            seed: 2,
        });
        let (train_set, dev_set, _) = split_corpus(&corpus, &SplitSpec::thirds(0)).unwrap();
        let vocab = build_vocab(&train_set, 1);
        let config = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_len: 24,
            ..ModelConfig::desk_scale(vocab.len())
        };
        let hp = Hyperparams {
            epochs: 3,
            ..Hyperparams::default()
        };
        let (model, _) = train(
            init_model(&config).unwrap(),
            &vocab,
            &train_set,
            &dev_set,
            &hp,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("small.ckpt");
        save_checkpoint(&model, &vocab, &ckpt).unwrap();
        Fixture { dir, ckpt }
    })
}

/// `small` (loaded) and `broken` (missing file), in that order.
pub fn registry() -> Registry {
    let f = fixture();
    Registry::load(&[
        ModelSource {
            model_id: Some("small".into()),
            path: f.ckpt.clone(),
        },
        ModelSource {
            model_id: Some("broken".into()),
            path: f.dir.path().join("absent.ckpt"),
        },
    ])
}
