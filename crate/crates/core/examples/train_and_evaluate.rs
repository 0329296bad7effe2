//! Generates the default corpus, trains SA+Contrast and reports test metrics.
//!
//! cargo run --example train_and_evaluate -- [epochs]

use groupcap::datagen::{generate_corpus, GenConfig, Split};
use groupcap::decoder::DecodeConfig;
use groupcap::model::{Model, ModelConfig};
use groupcap::trainer::{evaluate, train_with_progress, TrainConfig};

fn main() -> groupcap::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let corpus = generate_corpus(&GenConfig::default())?;
    let (train, val, test) = (corpus.split(Split::Train), corpus.split(Split::Val), corpus.split(Split::Test));
    println!("train {} / val {} / test {}, vocab {}", train.len(), val.len(), test.len(), corpus.vocab.len());

    let mut model = Model::build(ModelConfig::new(corpus.vocab.clone(), 32))?;
    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    train_with_progress(&mut model, &train, &val, &config, |e| {
        println!(
            "epoch {:>3}  loss {:.4}  val WordAcc {:>6.2}  {:>6} ms",
            e.epoch,
            e.mean_loss,
            e.val_wordacc.unwrap_or(f64::NAN),
            e.wall_ms
        );
    })?;
    let report = evaluate(&model, &test, &DecodeConfig::default())?;
    println!("{report}");
    Ok(())
}
