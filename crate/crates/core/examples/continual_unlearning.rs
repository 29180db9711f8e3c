//! Sequential unlearning of disjoint entity groups with ASU and gradient ascent.

use asu::runner::{continual_csv, continual_unlearn, train_base, Method, RunConfig};

fn main() -> asu::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../configs/smoke.json"))?;
    let corpus = cfg.corpus()?;
    let base = train_base(&cfg, &corpus)?.params;
    for method in [Method::AsuGd, Method::GaGd] {
        let run = RunConfig { method, ..cfg.clone() };
        let (_, steps) = continual_unlearn(&run, &base, &corpus, 3, 0.2)?;
        println!("{method}");
        print!("{}", continual_csv(&steps));
    }
    Ok(())
}
