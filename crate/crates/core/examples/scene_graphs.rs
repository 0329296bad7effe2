//! Parses captions of every template into scene graphs and flattens them
//! back; checks full and partial matching.

use groupcap::scenegraph::{flatten, matches_fully, matches_partially, parse_str, Lexicon};

fn main() -> groupcap::Result<()> {
    let lex = Lexicon::default();
    let captions = [
        "woman with hat",
        "young woman",
        "business team",
        "happy girl on beach",
        "dog holding red globe",
        "old cowboy near green chair",
        "woman with cowboy hat",
    ];
    for c in captions {
        let (graph, template) = parse_str(c, &lex)?;
        println!("{c:<30} {template:<20} {graph:<40} -> {}", flatten(&graph).join(" "));
    }
    let target = parse_str("woman with cowboy hat", &lex)?.0;
    let context = parse_str("woman with hat", &lex)?.0;
    println!(
        "\n\"woman with hat\" vs \"woman with cowboy hat\": full {} partial {}",
        matches_fully(&context, &target),
        matches_partially(&context, &target)
    );
    if let Err(e) = parse_str("hat with", &lex) {
        println!("rejected: {e}");
    }
    Ok(())
}
