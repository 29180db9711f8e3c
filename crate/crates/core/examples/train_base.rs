//! Trains a base model to the memorization gate and prints the curve.
//!
//! `cargo run --release --example train_base -- [config.json]`

use std::time::Instant;

use asu::runner::{train_base, train_csv, RunConfig};

fn main() -> asu::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::from_json(include_str!("../configs/smoke.json"))?,
    };
    let corpus = cfg.corpus()?;
    println!("records {} vocab {}", corpus.records.len(), corpus.vocab.len());
    let t = Instant::now();
    let out = train_base(&cfg, &corpus)?;
    print!("{}", train_csv(&out.curve));
    println!(
        "epochs {} gate {} seq_prob {:.4} in {:.1}s",
        out.epochs_run,
        out.gate_passed,
        out.final_seq_prob,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
