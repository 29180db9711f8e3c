//! Forget and retain losses.
//!
//! A loss is built in two phases. [`prepare_forget`] / [`prepare_retain`]
//! turn records into [`Term`]s, evaluating every frozen model (teacher or
//! base) up front so their outputs enter the tape as constants and can never
//! receive gradient. [`record_term`] then records one term on a tape against
//! the current parameters. Batch losses are means over terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::datagen::{Corpus, Example, QARecord, IDK_POOL};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{forward_tape, logits_tape, ModelConfig, ModelParams, ParamVars, SmoothingSpec};
use crate::teacher::TeacherHandle;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetLoss {
    Asu,
    AsuHidden,
    Ga,
    Npo,
    Me,
    Idk,
    Dpo,
    SimNpo,
    Rmu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainLoss {
    Gd,
    Kl,
    Ap,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rmu_c: f64,
    pub rmu_seed: u64,
    pub steering_layer: usize,
    pub idk_pool: Vec<String>,
    /// Seed of the per-record rejection-string choice.
    pub idk_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta: 0.1,
            gamma: 0.0,
            rmu_c: 5.0,
            rmu_seed: 0,
            steering_layer: 1,
            idk_pool: IDK_POOL.iter().map(|s| s.to_string()).collect(),
            idk_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Spec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Spec(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Spec(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.rmu_c > 0.0) {
            return Err(Error::Spec(format!("rmu_c must be > 0, got {}", self.rmu_c)));
        }
        if self.steering_layer >= model.n_layers {
            return Err(Error::Spec(format!(
                "steering_layer {} out of range for {} layers",
                self.steering_layer, model.n_layers
            )));
        }
        Ok(())
    }

    /// Rejection string assigned to `record_id`; stable across batches.
    pub fn idk_for(&self, record_id: &str) -> Result<&str> {
        if self.idk_pool.is_empty() {
            return Err(Error::Spec("idk_pool is empty".into()));
        }
        let mut h = Sha256::new();
        h.update(self.idk_seed.to_le_bytes());
        h.update(record_id.as_bytes());
        let d = h.finalize();
        let k = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        Ok(&self.idk_pool[(k % self.idk_pool.len() as u64) as usize])
    }
}

/// Seeded unit vector of width `d`, uniform entries before normalization.
pub fn rmu_direction(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// One example's contribution to a loss, with frozen-model outputs baked in.
#[derive(Clone, Debug, PartialEq)]
pub enum Term {
    /// `sign * (-mean log p)`: GD (+1), GA (-1), IDK (+1 on relabeled data).
    Nll { ex: Example, sign: f64 },
    /// Mean over rows of `KL(target || p)`; ASU and KL retain.
    Kl { ex: Example, target: Tensor, neg_entropy: f64 },
    /// Mean over rows of `KL(uniform || p)`.
    Uniform { ex: Example },
    Npo { ex: Example, ref_logp: f64, beta: f64 },
    SimNpo { ex: Example, beta: f64, gamma: f64 },
    /// Preferred `win`, dispreferred `lose`, both against frozen references.
    Dpo { win: Example, lose: Example, ref_win: f64, ref_lose: f64, beta: f64 },
    /// `-(1/beta) log sigmoid(-beta (mean log p(reject) - mean log p(answer)))`.
    Ap { answer: Example, reject: Example, beta: f64 },
    /// Mean over answer rows of the squared distance of `H^layer` to `target`.
    Hidden { ex: Example, layer: usize, target: Tensor },
}

fn log_softmax_rows(tape: &mut Tape<'_>, pv: &ParamVars, cfg: &ModelConfig, ex: &Example) -> Result<Var> {
    let fwd = forward_tape(tape, pv, cfg, ex.input(), &SmoothingSpec::identity(), false)?;
    let logits = logits_tape(tape, pv, &fwd, Some(&ex.target_rows()))?;
    tape.log_softmax(logits, 1)
}

/// Mean target log-probability, i.e. the log of the geometric-mean
/// sequence probability.
fn mean_logp_var(tape: &mut Tape<'_>, pv: &ParamVars, cfg: &ModelConfig, ex: &Example) -> Result<Var> {
    let ls = log_softmax_rows(tape, pv, cfg, ex)?;
    let picked = tape.pick(ls, ex.targets())?;
    tape.mean(picked)
}

fn add_const(tape: &mut Tape<'_>, a: Var, c: f64) -> Result<Var> {
    let k = tape.constant(Tensor::scalar(c));
    tape.add(a, k)
}

/// `-(scale_out) * log sigmoid(z)`.
fn neg_log_sigmoid(tape: &mut Tape<'_>, z: Var, scale_out: f64) -> Result<Var> {
    let l = tape.log_sigmoid(z)?;
    tape.scale(l, -scale_out)
}

/// Records `term` against the parameters in `pv`; returns a scalar.
pub fn record_term(tape: &mut Tape<'_>, pv: &ParamVars, cfg: &ModelConfig, term: &Term) -> Result<Var> {
    match term {
        Term::Nll { ex, sign } => {
            let m = mean_logp_var(tape, pv, cfg, ex)?;
            tape.scale(m, -sign)
        }
        Term::Kl { ex, target, neg_entropy } => {
            let ls = log_softmax_rows(tape, pv, cfg, ex)?;
            let t = tape.constant(target.clone());
            let cross = tape.mul(t, ls)?;
            let cross = tape.sum(cross)?;
            let rows = target.rows() as f64;
            let cross = tape.scale(cross, -1.0 / rows)?;
            add_const(tape, cross, neg_entropy / rows)
        }
        Term::Uniform { ex } => {
            let ls = log_softmax_rows(tape, pv, cfg, ex)?;
            let k = tape.shape(ls)[1] as f64;
            let rows = tape.shape(ls)[0] as f64;
            let s = tape.sum(ls)?;
            let s = tape.scale(s, -1.0 / (k * rows))?;
            add_const(tape, s, -k.ln())
        }
        Term::Npo { ex, ref_logp, beta } => {
            let m = mean_logp_var(tape, pv, cfg, ex)?;
            let d = add_const(tape, m, -ref_logp)?;
            let z = tape.scale(d, -beta)?;
            neg_log_sigmoid(tape, z, 2.0 / beta)
        }
        Term::SimNpo { ex, beta, gamma } => {
            let m = mean_logp_var(tape, pv, cfg, ex)?;
            let z = tape.scale(m, -beta)?;
            let z = add_const(tape, z, -gamma)?;
            neg_log_sigmoid(tape, z, 2.0 / beta)
        }
        Term::Dpo { win, lose, ref_win, ref_lose, beta } => {
            let w = mean_logp_var(tape, pv, cfg, win)?;
            let l = mean_logp_var(tape, pv, cfg, lose)?;
            let d = tape.sub(w, l)?;
            let d = add_const(tape, d, ref_lose - ref_win)?;
            let z = tape.scale(d, *beta)?;
            neg_log_sigmoid(tape, z, 1.0 / beta)
        }
        Term::Ap { answer, reject, beta } => {
            let r = mean_logp_var(tape, pv, cfg, reject)?;
            let a = mean_logp_var(tape, pv, cfg, answer)?;
            let d = tape.sub(r, a)?;
            let z = tape.scale(d, -beta)?;
            neg_log_sigmoid(tape, z, 1.0 / beta)
        }
        Term::Hidden { ex, layer, target } => {
            let h = hidden_rows(tape, pv, cfg, ex, *layer)?;
            let t = tape.constant(target.clone());
            let d = tape.sub(h, t)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            tape.scale(s, 1.0 / target.rows() as f64)
        }
    }
}

fn hidden_rows(tape: &mut Tape<'_>, pv: &ParamVars, cfg: &ModelConfig, ex: &Example, layer: usize) -> Result<Var> {
    let fwd = forward_tape(tape, pv, cfg, ex.input(), &SmoothingSpec::identity(), false)?;
    let h = *fwd
        .hidden
        .get(layer)
        .ok_or_else(|| Error::Spec(format!("layer {layer} out of range")))?;
    tape.gather(h, &ex.target_rows())
}

/// Frozen-model quantities, computed with the same tape code as the
/// trainable side so identical parameters give bit-identical values.
fn frozen_mean_logp(params: &ModelParams, ex: &Example) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let v = mean_logp_var(&mut tape, &pv, params.config(), ex)?;
    Ok(tape.value(v).item())
}

fn frozen_hidden(params: &ModelParams, ex: &Example, layer: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let h = hidden_rows(&mut tape, &pv, params.config(), ex, layer)?;
    Ok(tape.value(h).clone())
}

fn frozen_probs(params: &ModelParams, spec: &SmoothingSpec, ex: &Example) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let fwd = forward_tape(&mut tape, &pv, params.config(), ex.input(), spec, false)?;
    let logits = logits_tape(&mut tape, &pv, &fwd, Some(&ex.target_rows()))?;
    let ls = tape.log_softmax(logits, 1)?;
    let logp = tape.value(ls);
    let probs: Vec<f64> = logp.data().iter().map(|l| l.exp()).collect();
    let neg_entropy = probs.iter().zip(logp.data()).map(|(p, l)| p * l).sum();
    Ok((Tensor::new(logp.shape().to_vec(), probs)?, neg_entropy))
}

/// Frozen models a loss may consult.
#[derive(Clone, Copy, Default)]
pub struct Frozen<'a> {
    pub teacher: Option<&'a TeacherHandle>,
    pub base: Option<&'a ModelParams>,
}

impl<'a> Frozen<'a> {
    fn teacher(&self, what: &str) -> Result<&'a TeacherHandle> {
        self.teacher
            .ok_or_else(|| Error::Contract(format!("{what} needs a forget-teacher")))
    }
    fn base(&self, what: &str) -> Result<&'a ModelParams> {
        self.base
            .ok_or_else(|| Error::Contract(format!("{what} needs the frozen base model")))
    }
}

fn check_vocab(params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    if params.config().vocab_size != cfg.vocab_size {
        return Err(Error::Contract(format!(
            "frozen model vocab {} differs from trained model vocab {}",
            params.config().vocab_size,
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn prepare_forget(
    kind: ForgetLoss,
    corpus: &Corpus,
    records: &[&QARecord],
    frozen: Frozen<'_>,
    lc: &LossConfig,
    model: &ModelConfig,
) -> Result<Vec<Term>> {
    if let Some(t) = frozen.teacher {
        check_vocab(t.params(), model)?;
    }
    if let Some(b) = frozen.base {
        check_vocab(b, model)?;
    }
    let u: Vec<f64> = rmu_direction(lc.rmu_seed, model.d_model)
        .into_iter()
        .map(|x| x * lc.rmu_c)
        .collect();
    records
        .iter()
        .map(|r| {
            let ex = corpus.example(r)?;
            Ok(match kind {
                ForgetLoss::Asu => {
                    let t = frozen.teacher("ASU")?;
                    let (target, neg_entropy) = frozen_probs(t.params(), t.spec(), &ex)?;
                    Term::Kl { ex, target, neg_entropy }
                }
                ForgetLoss::AsuHidden => {
                    let t = frozen.teacher("ASU hidden")?;
                    let mut tape = Tape::new();
                    let pv = t.params().register(&mut tape, false);
                    let fwd = forward_tape(&mut tape, &pv, model, ex.input(), t.spec(), false)?;
                    let h = tape.gather(fwd.hidden[lc.steering_layer], &ex.target_rows())?;
                    let target = tape.value(h).clone();
                    Term::Hidden { ex, layer: lc.steering_layer, target }
                }
                ForgetLoss::Ga => Term::Nll { ex, sign: -1.0 },
                ForgetLoss::Npo => {
                    let ref_logp = frozen_mean_logp(frozen.base("NPO")?, &ex)?;
                    Term::Npo { ex, ref_logp, beta: lc.beta }
                }
                ForgetLoss::Me => Term::Uniform { ex },
                ForgetLoss::Idk => Term::Nll { ex: corpus.example_with(r, lc.idk_for(&r.id)?)?, sign: 1.0 },
                ForgetLoss::Dpo => {
                    let base = frozen.base("DPO")?;
                    let win = corpus.example_with(r, lc.idk_for(&r.id)?)?;
                    Term::Dpo {
                        ref_win: frozen_mean_logp(base, &win)?,
                        ref_lose: frozen_mean_logp(base, &ex)?,
                        win,
                        lose: ex,
                        beta: lc.beta,
                    }
                }
                ForgetLoss::SimNpo => Term::SimNpo { ex, beta: lc.beta, gamma: lc.gamma },
                ForgetLoss::Rmu => {
                    let rows = ex.target_rows().len();
                    let data = (0..rows).flat_map(|_| u.iter().copied()).collect();
                    Term::Hidden {
                        ex,
                        layer: lc.steering_layer,
                        target: Tensor::new(vec![rows, model.d_model], data)?,
                    }
                }
            })
        })
        .collect()
}

pub fn prepare_retain(
    kind: RetainLoss,
    corpus: &Corpus,
    records: &[&QARecord],
    frozen: Frozen<'_>,
    lc: &LossConfig,
    model: &ModelConfig,
) -> Result<Vec<Term>> {
    if let Some(b) = frozen.base {
        check_vocab(b, model)?;
    }
    records
        .iter()
        .map(|r| {
            let ex = corpus.example(r)?;
            Ok(match kind {
                RetainLoss::Gd => Term::Nll { ex, sign: 1.0 },
                RetainLoss::Kl => {
                    let (target, neg_entropy) =
                        frozen_probs(frozen.base("KL retain")?, &SmoothingSpec::identity(), &ex)?;
                    Term::Kl { ex, target, neg_entropy }
                }
                RetainLoss::Ap => Term::Ap {
                    reject: corpus.example_with(r, lc.idk_for(&r.id)?)?,
                    answer: ex,
                    beta: lc.beta,
                },
                RetainLoss::Mse => {
                    let target = frozen_hidden(frozen.base("MSE retain")?, &ex, lc.steering_layer)?;
                    Term::Hidden { ex, layer: lc.steering_layer, target }
                }
            })
        })
        .collect()
}

/// Registers `params`, tracking gradients only where `trainable` is set.
pub fn register_masked<'a>(params: &'a ModelParams, tape: &mut Tape<'a>, trainable: &[bool]) -> ParamVars {
    let vars = params
        .tensors()
        .iter()
        .zip(trainable)
        .map(|(t, &on)| if on { tape.param(t) } else { tape.constant_ref(t) })
        .collect();
    ParamVars { vars }
}

/// Mean of the terms' values.
pub fn evaluate(params: &ModelParams, terms: &[Term]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Input("loss over an empty batch".into()));
    }
    let vals = terms
        .par_iter()
        .map(|term| {
            let mut tape = Tape::new();
            let pv = params.register(&mut tape, false);
            let v = record_term(&mut tape, &pv, params.config(), term)?;
            Ok(tape.value(v).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Adds `weight * grad(mean of terms)` into `grads` for trainable tensors and
/// returns the mean value. Per-term gradients are reduced in term order.
pub fn accumulate(
    params: &ModelParams,
    terms: &[Term],
    weight: f64,
    trainable: &[bool],
    grads: &mut [Tensor],
) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Input("loss over an empty batch".into()));
    }
    let scale = weight / terms.len() as f64;
    let parts = terms
        .par_iter()
        .map(|term| {
            let mut tape = Tape::new();
            let pv = register_masked(params, &mut tape, trainable);
            let v = record_term(&mut tape, &pv, params.config(), term)?;
            let value = tape.value(v).item();
            tape.backward(v)?;
            let g: Vec<Option<Tensor>> = pv
                .vars
                .iter()
                .zip(trainable)
                .map(|(&var, &on)| if on { tape.grad(var) } else { None })
                .collect();
            Ok((value, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (value, g) in parts {
        total += value;
        for (acc, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += scale * b;
                }
            }
        }
    }
    Ok(total / terms.len() as f64)
}

/// `lambda * forget + retain`.
pub fn combined_objective(forget: f64, retain: f64, lambda: f64) -> f64 {
    lambda * forget + retain
}

fn corpus_loss(
    params: &ModelParams,
    corpus: &Corpus,
    records: &[&QARecord],
    build: impl FnOnce(&Corpus, &[&QARecord]) -> Result<Vec<Term>>,
) -> Result<f64> {
    let terms = build(corpus, records)?;
    evaluate(params, &terms)
}

pub fn loss_asu(params: &ModelParams, teacher: &TeacherHandle, corpus: &Corpus, batch: &[&QARecord]) -> Result<f64> {
    let f = Frozen { teacher: Some(teacher), base: None };
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::Asu, c, r, f, &LossConfig::default(), params.config())
    })
}

pub fn loss_gd(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord]) -> Result<f64> {
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_retain(RetainLoss::Gd, c, r, Frozen::default(), &LossConfig::default(), params.config())
    })
}

pub fn loss_ga(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord]) -> Result<f64> {
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::Ga, c, r, Frozen::default(), &LossConfig::default(), params.config())
    })
}

pub fn loss_kl_retain(params: &ModelParams, base: &ModelParams, corpus: &Corpus, batch: &[&QARecord]) -> Result<f64> {
    let f = Frozen { teacher: None, base: Some(base) };
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_retain(RetainLoss::Kl, c, r, f, &LossConfig::default(), params.config())
    })
}

pub fn loss_npo(params: &ModelParams, base: &ModelParams, corpus: &Corpus, batch: &[&QARecord], beta: f64) -> Result<f64> {
    let f = Frozen { teacher: None, base: Some(base) };
    let lc = LossConfig { beta, ..LossConfig::default() };
    corpus_loss(params, corpus, batch, |c, r| prepare_forget(ForgetLoss::Npo, c, r, f, &lc, params.config()))
}

pub fn loss_me(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord]) -> Result<f64> {
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::Me, c, r, Frozen::default(), &LossConfig::default(), params.config())
    })
}

pub fn loss_idk(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord], lc: &LossConfig) -> Result<f64> {
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::Idk, c, r, Frozen::default(), lc, params.config())
    })
}

pub fn loss_dpo(params: &ModelParams, base: &ModelParams, corpus: &Corpus, batch: &[&QARecord], lc: &LossConfig) -> Result<f64> {
    let f = Frozen { teacher: None, base: Some(base) };
    corpus_loss(params, corpus, batch, |c, r| prepare_forget(ForgetLoss::Dpo, c, r, f, lc, params.config()))
}

pub fn loss_simnpo(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord], beta: f64, gamma: f64) -> Result<f64> {
    let lc = LossConfig { beta, gamma, ..LossConfig::default() };
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::SimNpo, c, r, Frozen::default(), &lc, params.config())
    })
}

pub fn loss_ap(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord], lc: &LossConfig) -> Result<f64> {
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_retain(RetainLoss::Ap, c, r, Frozen::default(), lc, params.config())
    })
}

pub fn loss_mse_retain(params: &ModelParams, base: &ModelParams, corpus: &Corpus, batch: &[&QARecord], layer: usize) -> Result<f64> {
    let f = Frozen { teacher: None, base: Some(base) };
    let lc = LossConfig { steering_layer: layer, ..LossConfig::default() };
    corpus_loss(params, corpus, batch, |c, r| prepare_retain(RetainLoss::Mse, c, r, f, &lc, params.config()))
}

pub fn loss_asu_hidden(params: &ModelParams, teacher: &TeacherHandle, corpus: &Corpus, batch: &[&QARecord], layer: usize) -> Result<f64> {
    let f = Frozen { teacher: Some(teacher), base: None };
    let lc = LossConfig { steering_layer: layer, ..LossConfig::default() };
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::AsuHidden, c, r, f, &lc, params.config())
    })
}

pub fn loss_rmu(params: &ModelParams, corpus: &Corpus, batch: &[&QARecord], lc: &LossConfig) -> Result<f64> {
    corpus_loss(params, corpus, batch, |c, r| {
        prepare_forget(ForgetLoss::Rmu, c, r, Frozen::default(), lc, params.config())
    })
}

/// Central-difference check of one term's gradient with respect to one
/// parameter tensor, every other tensor held constant.
pub fn check_term_gradient(params: &ModelParams, term: &Term, tensor: usize, step: f64) -> Result<GradCheckReport> {
    if tensor >= params.len() {
        return Err(Error::Input(format!("tensor index {tensor} out of range")));
    }
    let f = |tape: &mut Tape<'_>, x: Var| {
        let mut vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        vars[tensor] = x;
        record_term(tape, &ParamVars { vars }, params.config(), term)
    };
    grad_check(f, &params.tensors()[tensor], step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec, Split};
    use crate::teacher::make_teacher;

    fn setup(seed: u64) -> (Corpus, ModelParams) {
        let corpus = generate_corpus(&CorpusSpec {
            n_entities: 4,
            qa_per_entity: 2,
            forget_fraction: 0.25,
            holdout_entities: 0,
            seed: 1,
            ..CorpusSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            vocab_size: corpus.vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 40,
            ln_eps: 1e-5,
        };
        (corpus, ModelParams::init(cfg, seed).unwrap())
    }

    fn qa(c: &Corpus, s: Split) -> Vec<&QARecord> {
        c.select(s, crate::datagen::Task::Qa)
    }

    #[test]
    fn ga_plus_gd_is_zero() {
        let (c, p) = setup(0);
        let b = qa(&c, Split::Forget);
        assert!((loss_ga(&p, &c, &b).unwrap() + loss_gd(&p, &c, &b).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn anchors_at_base() {
        let (c, p) = setup(0);
        let b = qa(&c, Split::Forget);
        let beta = 0.1;
        let npo = loss_npo(&p, &p, &c, &b, beta).unwrap();
        assert!((npo - 2.0 / beta * 2f64.ln()).abs() <= 1e-10, "{npo}");
        let dpo = loss_dpo(&p, &p, &c, &b, &LossConfig::default()).unwrap();
        assert!((dpo - 2f64.ln() / beta).abs() <= 1e-10, "{dpo}");
        assert!(loss_kl_retain(&p, &p, &c, &b).unwrap().abs() <= 1e-12);
        let t = make_teacher(&p, SmoothingSpec::identity()).unwrap();
        assert!(loss_asu(&p, &t, &c, &b).unwrap().abs() <= 1e-12);
        assert!(loss_asu_hidden(&p, &t, &c, &b, 1).unwrap().abs() <= 1e-12);
        assert!(loss_mse_retain(&p, &p, &c, &b, 0).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kl_losses_nonnegative() {
        let (c, p) = setup(0);
        let (_, other) = setup(9);
        let b = qa(&c, Split::Retain);
        assert!(loss_kl_retain(&p, &other, &c, &b).unwrap() > 0.0);
        let t = make_teacher(&other, SmoothingSpec::all_layers(2, 2.3)).unwrap();
        assert!(loss_asu(&p, &t, &c, &b).unwrap() > 0.0);
        assert!(loss_me(&p, &c, &b).unwrap() >= 0.0);
    }

    #[test]
    fn uniform_predictor_losses() {
        let (c, mut p) = setup(0);
        // zero head gives uniform next-token distributions
        let i = p.names().iter().position(|n| n == "lm_head").unwrap();
        let shape = p.tensors()[i].shape().to_vec();
        *p.tensor_mut(i) = Tensor::zeros(&shape);
        let b = qa(&c, Split::Forget);
        let k = c.vocab.len() as f64;
        assert!((loss_gd(&p, &c, &b).unwrap() - k.ln()).abs() < 1e-12);
        assert!(loss_me(&p, &c, &b).unwrap().abs() < 1e-12);
        // equal sequence probabilities: AP at its anchor
        let ap = loss_ap(&p, &c, &b, &LossConfig::default()).unwrap();
        assert!((ap - 2f64.ln() / 0.1).abs() < 1e-10);
    }

    #[test]
    fn simnpo_matches_closed_form() {
        let (c, p) = setup(0);
        let b = qa(&c, Split::Forget);
        let (beta, gamma) = (0.1, 0.3);
        let expect: f64 = b
            .iter()
            .map(|r| {
                let m = frozen_mean_logp(&p, &c.example(r).unwrap()).unwrap();
                -(2.0 / beta) * log_sig(-beta * m - gamma)
            })
            .sum::<f64>()
            / b.len() as f64;
        let got = loss_simnpo(&p, &c, &b, beta, gamma).unwrap();
        assert!((got - expect).abs() < 1e-12);
        // gamma = 0 and P = 1 would sit at (2/beta) ln 2; the curve rises with P
        let f = |m: f64| -(2.0 / beta) * log_sig(-beta * m);
        assert!((f(0.0) - 2.0 / beta * 2f64.ln()).abs() < 1e-12);
        assert!(f(-1.0) < f(-0.5) && f(-0.5) < f(0.0));
    }

    fn log_sig(x: f64) -> f64 {
        -(1.0 + (-x).exp()).ln()
    }

    #[test]
    fn idk_choice_is_seeded() {
        let lc = LossConfig::default();
        assert_eq!(lc.idk_for("e001-q02").unwrap(), lc.idk_for("e001-q02").unwrap());
        let one = LossConfig { idk_pool: vec!["i do not know".into()], ..LossConfig::default() };
        assert_eq!(one.idk_for("x").unwrap(), "i do not know");
        let none = LossConfig { idk_pool: vec![], ..LossConfig::default() };
        assert!(none.idk_for("x").is_err());
    }

    #[test]
    fn rmu_direction_is_unit_and_seeded() {
        let u = rmu_direction(3, 16);
        assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(u, rmu_direction(3, 16));
    }

    #[test]
    fn combined_is_affine() {
        assert_eq!(combined_objective(2.0, 3.0, 0.0), 3.0);
        assert_eq!(combined_objective(2.0, 3.0, 1.0), 5.0);
        let f = |l| combined_objective(2.0, 3.0, l);
        assert!((f(0.5) - 0.5 * (f(0.0) + f(1.0))).abs() < 1e-15);
    }

    #[test]
    fn frozen_terms_get_no_gradient() {
        let (c, p) = setup(0);
        let (_, base) = setup(5);
        let b = qa(&c, Split::Forget);
        let lc = LossConfig::default();
        let terms = prepare_retain(
            RetainLoss::Kl,
            &c,
            &b,
            Frozen { teacher: None, base: Some(&base) },
            &lc,
            p.config(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape, true);
        let bv = base.register(&mut tape, false);
        let v = record_term(&mut tape, &pv, p.config(), &terms[0]).unwrap();
        tape.backward(v).unwrap();
        assert!(bv.vars.iter().all(|&x| tape.grad(x).is_none()));
        assert!(pv.vars.iter().any(|&x| tape.grad(x).is_some()));
    }

    #[test]
    fn ga_gradient_is_negated_gd() {
        let (c, p) = setup(0);
        let b = qa(&c, Split::Forget);
        let lc = LossConfig::default();
        let on = vec![true; p.len()];
        let grads = |kind: Option<ForgetLoss>| {
            let terms = match kind {
                Some(k) => prepare_forget(k, &c, &b, Frozen::default(), &lc, p.config()).unwrap(),
                None => prepare_retain(RetainLoss::Gd, &c, &b, Frozen::default(), &lc, p.config()).unwrap(),
            };
            let mut g: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            accumulate(&p, &terms, 1.0, &on, &mut g).unwrap();
            g
        };
        let ga = grads(Some(ForgetLoss::Ga));
        let gd = grads(None);
        for (a, b) in ga.iter().zip(&gd) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, -*y);
            }
        }
    }

    fn check_term(p: &ModelParams, term: &Term, tensor: usize) -> f64 {
        check_term_gradient(p, term, tensor, 1e-6).unwrap().max_rel_error
    }

    #[test]
    fn every_term_passes_grad_check() {
        let wq = 2; // layers.0.attn.wq
        for seed in 0..3 {
            let (c, p) = setup(seed);
            let (_, base) = setup(seed + 100);
            let teacher = make_teacher(&base, SmoothingSpec::all_layers(2, 2.3)).unwrap();
            let frozen = Frozen { teacher: Some(&teacher), base: Some(&base) };
            let lc = LossConfig::default();
            let b = &qa(&c, Split::Forget)[..1];
            let mut terms = Vec::new();
            for k in [
                ForgetLoss::Asu,
                ForgetLoss::AsuHidden,
                ForgetLoss::Ga,
                ForgetLoss::Npo,
                ForgetLoss::Me,
                ForgetLoss::Idk,
                ForgetLoss::Dpo,
                ForgetLoss::SimNpo,
                ForgetLoss::Rmu,
            ] {
                terms.extend(prepare_forget(k, &c, b, frozen, &lc, p.config()).unwrap());
            }
            for k in [RetainLoss::Gd, RetainLoss::Kl, RetainLoss::Ap, RetainLoss::Mse] {
                terms.extend(prepare_retain(k, &c, b, frozen, &lc, p.config()).unwrap());
            }
            for t in &terms {
                let e = check_term(&p, t, wq);
                assert!(e <= 1e-5, "seed {seed}: {t:?} err {e}");
            }
        }
    }
}
