//! Finite-difference check of every forget and retain loss on a tiny model.

use asu::datagen::{generate_corpus, CorpusSpec, Split, Task};
use asu::losses::{check_term_gradient, prepare_forget, prepare_retain, ForgetLoss, Frozen, LossConfig, RetainLoss};
use asu::model::{ModelConfig, ModelParams, SmoothingSpec};
use asu::teacher::make_teacher;

fn main() -> asu::Result<()> {
    let corpus = generate_corpus(&CorpusSpec { n_entities: 4, qa_per_entity: 2, forget_fraction: 0.25, holdout_entities: 0, ..CorpusSpec::default() })?;
    let cfg = ModelConfig { vocab_size: corpus.vocab.len(), d_model: 8, n_heads: 2, n_layers: 2, d_ff: 12, max_seq_len: 40, ln_eps: 1e-5 };
    let params = ModelParams::init(cfg.clone(), 0)?;
    let base = ModelParams::init(cfg.clone(), 1)?;
    let teacher = make_teacher(&base, SmoothingSpec::all_layers(2, 2.3))?;
    let frozen = Frozen { teacher: Some(&teacher), base: Some(&base) };
    let lc = LossConfig { steering_layer: 1, ..LossConfig::default() };
    let batch = &corpus.select(Split::Forget, Task::Qa)[..1];
    let wq = params.names().iter().position(|n| n == "layers.0.attn.wq").expect("wq");
    for k in [ForgetLoss::Asu, ForgetLoss::AsuHidden, ForgetLoss::Ga, ForgetLoss::Npo, ForgetLoss::Me, ForgetLoss::Idk, ForgetLoss::Dpo, ForgetLoss::SimNpo, ForgetLoss::Rmu] {
        let term = &prepare_forget(k, &corpus, batch, frozen, &lc, &cfg)?[0];
        println!("{k:?}: max relative error {:.2e}", check_term_gradient(&params, term, wq, 1e-6)?.max_rel_error);
    }
    for k in [RetainLoss::Gd, RetainLoss::Kl, RetainLoss::Ap, RetainLoss::Mse] {
        let term = &prepare_retain(k, &corpus, batch, frozen, &lc, &cfg)?[0];
        println!("{k:?}: max relative error {:.2e}", check_term_gradient(&params, term, wq, 1e-6)?.max_rel_error);
    }
    Ok(())
}
