//! Trains briefly, then compares greedy and beam search and round-trips the
//! checkpoint through a file.

use groupcap::datagen::{generate_corpus, GenConfig, Split};
use groupcap::decoder::DecodeConfig;
use groupcap::model::{Model, ModelConfig};
use groupcap::trainer::{train, TrainConfig};

fn main() -> groupcap::Result<()> {
    let corpus = generate_corpus(&GenConfig::default())?;
    let (tr, val, test) = (corpus.split(Split::Train), corpus.split(Split::Val), corpus.split(Split::Test));
    let mut model = Model::build(ModelConfig::new(corpus.vocab.clone(), 32))?;
    train(&mut model, &tr, &val, &TrainConfig { epochs: 10, ..TrainConfig::default() })?;

    let greedy = DecodeConfig::greedy(8);
    let beam = DecodeConfig { beam_width: 5, ..greedy };
    for s in test.iter().take(6) {
        let g = model.generate(&s.target_features, &s.reference_features, &greedy)?;
        let b = model.generate(&s.target_features, &s.reference_features, &beam)?;
        println!("gold   {}", s.caption_text());
        println!("greedy {:<32} log p {:.3}", corpus.vocab.decode(&g.tokens).join(" "), g.logprob);
        println!("beam 5 {:<32} log p {:.3}\n", corpus.vocab.decode(&b.tokens).join(" "), b.logprob);
    }

    let path = std::env::temp_dir().join("decoding_example.ckpt");
    model.save(&path)?;
    let loaded = Model::load(&path)?;
    let s = &test[0];
    let same = loaded.caption(&s.target_features, &s.reference_features, &beam)?
        == model.caption(&s.target_features, &s.reference_features, &beam)?;
    println!("checkpoint {} reloads to the same captions: {same}", path.display());
    Ok(())
}
