//! Builds one untrained model per aggregation variant and prints the
//! attention maps for a single group, showing the CA/NCA masks.

use groupcap::attention::AggregationVariant;
use groupcap::datagen::{generate_corpus, GenConfig};
use groupcap::model::{Model, ModelConfig};

fn main() -> groupcap::Result<()> {
    let corpus = generate_corpus(&GenConfig {
        n_samples: 20,
        n_t: 2,
        n_r: 3,
        ..GenConfig::default()
    })?;
    let sample = &corpus.samples[0];
    println!("caption: {}\n", sample.caption_text());
    for agg in AggregationVariant::ALL.into_iter().filter(|&a| a != AggregationVariant::Average) {
        let model = Model::build(ModelConfig {
            agg,
            n_t: 2,
            n_r: 3,
            ..ModelConfig::new(corpus.vocab.clone(), 32)
        })?;
        println!("== {agg}");
        for record in model.dump_attention(sample)? {
            println!("  {}", record.name);
            for row in record.weights.to_rows() {
                let cells: Vec<String> = row.iter().map(|w| format!("{w:.3}")).collect();
                println!("    [{}]  sum {:.12}", cells.join(" "), row.iter().sum::<f64>());
            }
        }
    }
    Ok(())
}
