//! Token-role curves, margin scan, layer sweep and attention entropy on a freshly trained small model.

use asu::analysis::{
    attention_entropy_csv, attention_entropy_curve, factual_function_curves, layer_sweep, layer_sweep_csv, margin_flip_scan,
    margin_csv, role_curve_csv, summarize_role_curves,
};
use asu::datagen::{Split, Task};
use asu::runner::{train_base, RunConfig};

fn main() -> asu::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../configs/smoke.json"))?;
    let corpus = cfg.corpus()?;
    let base = train_base(&cfg, &corpus)?;
    println!("base: {} epochs, gate {}", base.epochs_run, base.gate_passed);
    let recs = corpus.select(Split::Forget, Task::Qa);
    let grid = [1.0, 1.5, 2.0, 2.3, 3.0, 4.0];
    let curves = factual_function_curves(&base.params, &corpus, &recs, &grid)?;
    print!("{}", role_curve_csv(&curves));
    println!("{:?}", summarize_role_curves(&curves)?);
    print!("{}", margin_csv(&margin_flip_scan(&base.params, &corpus, &recs, &grid)?));
    print!("{}", layer_sweep_csv(&layer_sweep(&base.params, &corpus, &recs, 2.3, &[0, 1, 2])?));
    let ex = corpus.example(recs[0])?;
    print!("{}", attention_entropy_csv(&attention_entropy_curve(&base.params, ex.input(), &[1.0, 2.0, 4.0, 8.0])?));
    Ok(())
}
