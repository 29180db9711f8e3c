//! One attention-smoothing unlearning run with reports before and after.

use asu::runner::{loss_csv, train_base, RunConfig};

fn main() -> asu::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../configs/smoke.json"))?;
    let corpus = cfg.corpus()?;
    let base = train_base(&cfg, &corpus)?.params;
    let out = asu::runner::unlearn(&cfg, &base, &corpus)?;
    print!("{}", loss_csv(&out.losses));
    for (label, r) in [("before", out.pre.as_ref().map(|p| &p.report)), ("after", Some(&out.post.report))] {
        if let Some(r) = r {
            println!(
                "{label}: forget ROUGE {:.3}, retain ROUGE {:.3}, forget TE {:.3}, MU {:.3}, FE {:.3}",
                r.forget.rouge, r.retain.rouge, r.forget.te, r.mu, r.fe
            );
        }
    }
    if let Some((a, b)) = out.teacher_checksum {
        println!("teacher unchanged: {}", a == b);
    }
    Ok(())
}
