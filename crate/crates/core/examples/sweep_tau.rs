//! MU and FE across teacher temperatures, then the three-point refinement.

use asu::runner::{refine_tau, sweep_csv, sweep_tau, train_base, RunConfig};

fn main() -> asu::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../configs/smoke.json"))?;
    let corpus = cfg.corpus()?;
    let base = train_base(&cfg, &corpus)?.params;
    print!("{}", sweep_csv(&sweep_tau(&cfg, &base, &corpus, &[1.0, 2.0, 2.3, 3.0, 4.0])?));
    let (best, rows) = refine_tau(&cfg, &base, &corpus, 2.3)?;
    print!("{}", sweep_csv(&rows));
    println!("refined tau {best}");
    Ok(())
}
