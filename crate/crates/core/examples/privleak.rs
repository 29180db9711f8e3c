//! Membership-inference AUC of a base model and a retain-only reference.

use asu::datagen::Split;
use asu::metrics::{membership_auc, privleak, DEFAULT_MIN_K};
use asu::runner::{train_base, train_retain_only, RunConfig};

fn main() -> asu::Result<()> {
    let cfg = RunConfig::from_json(include_str!("../configs/smoke.json"))?;
    let corpus = cfg.corpus()?;
    let base = train_base(&cfg, &corpus)?.params;
    let retrain = train_retain_only(&cfg, &corpus)?.params;
    let members = corpus.split(Split::Forget);
    let non = corpus.split(Split::Holdout);
    let auc = membership_auc(&base, &corpus, &members, &non, DEFAULT_MIN_K)?;
    let auc_r = membership_auc(&retrain, &corpus, &members, &non, DEFAULT_MIN_K)?;
    println!("AUC base {auc:.3}, retrain {auc_r:.3}, privleak {:.3}", privleak(auc, auc_r)?);
    Ok(())
}
