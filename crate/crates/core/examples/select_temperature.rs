//! Temperature search for the forget-teacher on a small trained model.

use asu::datagen::{Split, Task};
use asu::runner::{train_base, RunConfig};
use asu::teacher::{select_temperature, DEFAULT_FLUENCY_THRESHOLD};

fn main() -> asu::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../configs/smoke.json"))?;
    let corpus = cfg.corpus()?;
    let base = train_base(&cfg, &corpus)?.params;
    let forget = corpus.select(Split::Forget, Task::Qa);
    let examples = forget.iter().map(|r| corpus.example(r)).collect::<asu::Result<Vec<_>>>()?;
    let prompts = forget.iter().map(|r| corpus.prompt_ids(r)).collect::<asu::Result<Vec<_>>>()?;
    let r = select_temperature(&base, &examples, &prompts, None, DEFAULT_FLUENCY_THRESHOLD, 12)?;
    for p in &r.probes {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!("tau {:.4}: nll {} fluency {}", p.tau, show(p.nll), show(p.fluency));
    }
    println!("target NLL {:.3} (base {:.3}), selected tau {:.3}, saturated {}", r.target_nll, r.base_nll, r.selected, r.saturated);
    Ok(())
}
