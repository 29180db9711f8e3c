//! Generates the synthetic corpus and shows one record of each task.
//!
//! `cargo run --release --example generate_corpus -- [out_dir]`

use asu::datagen::{generate_corpus, CorpusSpec, Split, Task};

fn main() -> asu::Result<()> {
    let corpus = generate_corpus(&CorpusSpec::default())?;
    for split in [Split::Forget, Split::Retain, Split::Holdout] {
        println!("{split:?}: {} records", corpus.split(split).len());
    }
    println!("vocabulary: {} tokens", corpus.vocab.len());
    let r = corpus.select(Split::Forget, Task::Qa)[0];
    println!("question:   {}", r.question);
    println!("answer:     {}", r.answer);
    println!("factual:    {:?}", r.factual_token_indices);
    println!("paraphrase: {}", r.paraphrase);
    println!("perturbed:  {}", r.perturbed_answers[0]);
    let p = corpus.select(Split::Forget, Task::Completion)[0];
    println!("passage:    {}", p.answer);
    if let Some(dir) = std::env::args().nth(1) {
        corpus.write(dir.as_ref())?;
        println!("written to {dir}");
    }
    Ok(())
}
