//! Generates a corpus, writes it as JSONL and prints one sample with its
//! scene graphs.
//!
//! cargo run --example generate_dataset -- [out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use groupcap::datagen::{generate_corpus, read_jsonl, write_jsonl, GenConfig};

fn main() -> groupcap::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let corpus = generate_corpus(&GenConfig::default())?;

    let mut splits = BTreeMap::new();
    let mut templates = BTreeMap::new();
    for s in &corpus.samples {
        *splits.entry(s.split.as_str()).or_insert(0) += 1;
        *templates.entry(s.template.name()).or_insert(0) += 1;
    }
    println!("{} samples, vocab {}", corpus.samples.len(), corpus.vocab.len());
    println!("splits    {splits:?}");
    println!("templates {templates:?}");

    let s = &corpus.samples[0];
    println!("\nsample {} ({}): \"{}\"", s.id, s.template, s.caption_text());
    println!("  target graph  {}", s.graph);
    for (i, g) in s.reference_graphs.iter().take(5).enumerate() {
        println!("  reference {i}   {g}");
    }

    let path = out.join("groupcap_samples.jsonl");
    write_jsonl(&corpus.samples, &path)?;
    let back = read_jsonl(&path)?;
    println!("\nwrote {} (round trip equal: {})", path.display(), back == corpus.samples);
    Ok(())
}
