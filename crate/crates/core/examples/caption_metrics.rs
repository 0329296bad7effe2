//! Scores a few predictions with every caption metric.

use groupcap::metrics::{bleu_n, cider, evaluate_corpus, meteor_lite, rouge_l, tokenize, wer, word_acc, TokenizedPair};

fn main() -> groupcap::Result<()> {
    let gold = "woman with cowboy hat";
    for pred in ["woman with cowboy hat", "woman with straw hat", "woman with hat", "hat"] {
        let (p, r) = (tokenize(pred), tokenize(gold));
        println!(
            "{pred:<24} WordAcc {:.2}  WER {:.2}  ROUGE-L {:.3}  METEOR {:.3}",
            word_acc(&p, &r),
            wer(&p, &r),
            rouge_l(&p, &r),
            meteor_lite(&p, &r)
        );
    }

    let pairs = [
        ("woman with straw hat", "woman with cowboy hat"),
        ("business team", "business team"),
        ("girl in red", "girl in white"),
        ("dog on beach", "happy dog on beach"),
    ]
    .iter()
    .map(|(p, r)| TokenizedPair::from_text(p, r))
    .collect::<groupcap::Result<Vec<_>>>()?;
    println!("\ncorpus BLEU1 {:.4} BLEU2 {:.4} CIDEr {:.4}", bleu_n(&pairs, 1)?, bleu_n(&pairs, 2)?, cider(&pairs));
    println!("{}", evaluate_corpus(&pairs)?);
    Ok(())
}
