use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use toxscope::attribution::{integrated_gradients, rank_tokens, DEFAULT_STEPS};
use toxscope::checkpoint::{load_checkpoint, save_checkpoint};
use toxscope::metrics::{format_table, ReportRow};
use toxscope::synthetic::{generate, SyntheticSpec};
use toxscope::text::{build_vocab, load_corpus, split_corpus, write_corpus, SplitSpec};
use toxscope::{
    evaluate, grid_search, init_model, train, GridSpec, Hyperparams, Label, ModelConfig,
};
use toxscope_server::ranker::DEFAULT_PROMPT;
use toxscope_server::{
    bind, check_ready, run_server, AppState, ModelSource, Ranker, RankerConfig, RankerMode,
    Registry,
};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "toxscope",
    version,
    about = "Explainable three-way toxicity classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the templated synthetic corpus as JSON lines.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        per_label: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Split a corpus 33:33:33, train on the first part and save a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on every record of a corpus.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write the report row as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print token attributions for one text.
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        /// explicit, implicit or none; defaults to the predicted label.
        #[arg(long)]
        target: Option<Label>,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Hyperparams::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = Hyperparams::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = Hyperparams::default().epochs)]
    epochs: usize,
    /// Seeds the split, the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Search the 27-point learning-rate / batch / epoch grid on the dev split.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Checkpoints as PATH or ID=PATH, comma separated.
    #[arg(long, value_delimiter = ',')]
    ckpt: Vec<ModelSource>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, value_enum, default_value_t = RankerMode::Stub)]
    ranker: RankerMode,
    #[arg(long)]
    ranker_endpoint: Option<String>,
    /// Name of the environment variable that holds the ranker token.
    #[arg(long)]
    ranker_token_env: Option<String>,
    #[arg(long, default_value_t = 5000)]
    ranker_timeout_ms: u64,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    prompt_template: String,
    /// Start even if no checkpoint loaded.
    #[arg(long)]
    allow_empty: bool,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Synth {
            out,
            per_label,
            seed,
        } => {
            let corpus = generate(&SyntheticSpec { per_label, seed });
            write_corpus(&corpus, BufWriter::new(File::create(&out)?))?;
            println!("wrote {} records to {}", corpus.len(), out.display());
        }
        Command::Train(args) => run_train(args)?,
        Command::Evaluate {
            corpus,
            ckpt,
            report,
        } => {
            let (model, vocab) = load_checkpoint(&ckpt)?;
            let (corpus, _) = load_corpus(&corpus)?;
            let metrics = evaluate(&model, &vocab, &corpus)?;
            let name = ckpt
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy());
            let row = ReportRow::new(name, &metrics);
            print!("{}", format_table(std::slice::from_ref(&row)));
            if let Some(path) = report {
                serde_json::to_writer_pretty(File::create(&path)?, &row)?;
            }
        }
        Command::Attribute {
            ckpt,
            text,
            steps,
            target,
        } => {
            let (model, vocab) = load_checkpoint(&ckpt)?;
            let prediction = model.predict(&vocab, &text)?;
            let target = target.unwrap_or(prediction.label);
            let result = integrated_gradients(&model, &vocab, &text, target.index(), steps)?;
            let out = serde_json::json!({
                "prediction": prediction,
                "attribution": result,
                "ranked_tokens": rank_tokens(&result),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Serve(args) => run_serve(args)?,
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (corpus, stats) = load_corpus(&args.corpus)?;
    eprintln!(
        "read {} records, dropped {} empty and {} duplicate",
        stats.read, stats.dropped_empty, stats.dropped_duplicate
    );
    let (train_set, dev_set, test_set) = split_corpus(&corpus, &SplitSpec::thirds(args.seed))?;
    if dev_set.is_empty() || test_set.is_empty() {
        bail!(
            "corpus of {} records is too small to split three ways",
            corpus.len()
        );
    }
    let vocab = build_vocab(&train_set, args.min_freq);
    let config = ModelConfig {
        n_layers: args.layers,
        max_len: args.max_len,
        seed: args.seed,
        ..ModelConfig::desk_scale(vocab.len())
    };
    let hp = Hyperparams {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
    };

    let model = if args.grid {
        let outcome = grid_search(
            || init_model(&config),
            &vocab,
            &train_set,
            &dev_set,
            &GridSpec::full(args.seed),
        )?;
        for run in &outcome.runs {
            let h = run.hyperparams;
            eprintln!(
                "lr {:e} batch {} epochs {}: dev macro F1 {:.3}",
                h.learning_rate, h.batch_size, h.epochs, run.dev.f1
            );
        }
        eprintln!("selected {:?}", outcome.best);
        outcome.best_model
    } else {
        let (model, history) = train(init_model(&config)?, &vocab, &train_set, &dev_set, &hp)?;
        eprintln!(
            "trained {} epochs in {:.1}s, epoch losses {:?}",
            hp.epochs, history.seconds, history.epoch_loss
        );
        model
    };

    save_checkpoint(&model, &vocab, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let rows = [
        ReportRow::new("dev", &evaluate(&model, &vocab, &dev_set)?),
        ReportRow::new("test", &evaluate(&model, &vocab, &test_set)?),
    ];
    print!("{}", format_table(&rows));
    println!("saved {}", args.out.display());
    Ok(())
}

#[tokio::main]
async fn run_serve(args: ServeArgs) -> Result<()> {
    let ranker = Ranker::new(RankerConfig {
        mode: args.ranker,
        endpoint: args.ranker_endpoint,
        token_env: args.ranker_token_env,
        timeout_ms: args.ranker_timeout_ms,
        prompt_template: args.prompt_template,
    })?;
    let sources = args.ckpt;
    let registry = tokio::task::spawn_blocking(move || Registry::load(&sources)).await?;
    check_ready(&registry, args.allow_empty)?;
    let listener = bind(&args.host, args.port).await?;
    run_server(listener, AppState::new(registry, ranker), shutdown_signal()).await?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}
