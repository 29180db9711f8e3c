//! Training, unlearning, continual sequences, sweeps, and run manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{continual_splits, Corpus, CorpusSpec, QARecord, Split, Task};
use crate::error::{Error, Result};
use crate::losses::{accumulate, prepare_forget, prepare_retain, ForgetLoss, Frozen, LossConfig, RetainLoss};
use crate::metrics::{
    answer_logprobs, evaluate_records, forget_efficacy, knowmem_from_rows, mean_logp, model_utility,
    reference_generations, verbmem, MetricsReport, RecordMetrics, DEFAULT_MIN_K,
};
use crate::model::{ModelConfig, ModelParams, SmoothingSpec};
use crate::teacher::make_teacher;
use crate::tensor::Tensor;

/// Forget/retain pairing of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ASU_GD")]
    AsuGd,
    #[serde(rename = "ASU_KL")]
    AsuKl,
    #[serde(rename = "GA_GD")]
    GaGd,
    #[serde(rename = "GA_KL")]
    GaKl,
    #[serde(rename = "NPO_GD")]
    NpoGd,
    #[serde(rename = "NPO_KL")]
    NpoKl,
    #[serde(rename = "DPO_GD")]
    DpoGd,
    #[serde(rename = "DPO_KL")]
    DpoKl,
    #[serde(rename = "IDK_GD")]
    IdkGd,
    #[serde(rename = "IDK_KL")]
    IdkKl,
    #[serde(rename = "IDK_AP")]
    IdkAp,
    #[serde(rename = "ME_GD")]
    MeGd,
    #[serde(rename = "ME_KL")]
    MeKl,
    #[serde(rename = "SimNPO_GD")]
    SimNpoGd,
    #[serde(rename = "SimNPO_KL")]
    SimNpoKl,
    #[serde(rename = "RMU")]
    Rmu,
    #[serde(rename = "ASU_hidden")]
    AsuHidden,
}

impl Method {
    pub const ALL: [Method; 17] = [
        Method::AsuGd,
        Method::AsuKl,
        Method::GaGd,
        Method::GaKl,
        Method::NpoGd,
        Method::NpoKl,
        Method::DpoGd,
        Method::DpoKl,
        Method::IdkGd,
        Method::IdkKl,
        Method::IdkAp,
        Method::MeGd,
        Method::MeKl,
        Method::SimNpoGd,
        Method::SimNpoKl,
        Method::Rmu,
        Method::AsuHidden,
    ];

    pub fn pairing(self) -> (ForgetLoss, RetainLoss) {
        use ForgetLoss as F;
        use RetainLoss as R;
        match self {
            Method::AsuGd => (F::Asu, R::Gd),
            Method::AsuKl => (F::Asu, R::Kl),
            Method::GaGd => (F::Ga, R::Gd),
            Method::GaKl => (F::Ga, R::Kl),
            Method::NpoGd => (F::Npo, R::Gd),
            Method::NpoKl => (F::Npo, R::Kl),
            Method::DpoGd => (F::Dpo, R::Gd),
            Method::DpoKl => (F::Dpo, R::Kl),
            Method::IdkGd => (F::Idk, R::Gd),
            Method::IdkKl => (F::Idk, R::Kl),
            Method::IdkAp => (F::Idk, R::Ap),
            Method::MeGd => (F::Me, R::Gd),
            Method::MeKl => (F::Me, R::Kl),
            Method::SimNpoGd => (F::SimNpo, R::Gd),
            Method::SimNpoKl => (F::SimNpo, R::Kl),
            Method::Rmu => (F::Rmu, R::Mse),
            Method::AsuHidden => (F::AsuHidden, R::Mse),
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self.pairing().0, ForgetLoss::Asu | ForgetLoss::AsuHidden)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(s.trim_matches('"'))
    }
}

/// AdamW settings for unlearning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Base (and retain-only) training; constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop once the mean sequence probability of the training set reaches this.
    pub gate: f64,
    pub check_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 200,
            batch_size: 16,
            gate: 0.9,
            check_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cap on QA records per evaluated set; 0 means all.
    pub max_records: usize,
    pub verbmem_prefix: usize,
    pub min_k: f64,
    /// Also evaluate the model before unlearning.
    pub pre_eval: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_records: 0,
            verbmem_prefix: 3,
            min_k: DEFAULT_MIN_K,
            pre_eval: true,
        }
    }
}

/// One JSON file drives every command; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    /// Existing corpus directory; overrides `corpus` when set.
    pub corpus_path: Option<PathBuf>,
    pub optimizer: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub method: Method,
    pub loss: LossConfig,
    pub smoothing: SmoothingSpec,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub base_training: BaseTrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            smoothing: SmoothingSpec::all_layers(model.n_layers, 2.3),
            model,
            corpus: CorpusSpec::default(),
            corpus_path: None,
            optimizer: OptimConfig::default(),
            epochs: 5,
            batch_size: 4,
            method: Method::AsuKl,
            loss: LossConfig::default(),
            seed: 0,
            output_dir: None,
            base_training: BaseTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate(&self.model)?;
        self.smoothing.validate(self.model.n_layers)?;
        if self.batch_size == 0 || self.base_training.batch_size == 0 {
            return Err(Error::Spec("batch sizes must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.base_training.lr > 0.0) {
            return Err(Error::Spec("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Corpus named by the config: loaded from `corpus_path` or generated.
    pub fn corpus(&self) -> Result<Corpus> {
        match &self.corpus_path {
            Some(p) => Corpus::load(p),
            None => crate::datagen::generate_corpus(&self.corpus),
        }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash in the style of a git blob id, over both corpus files.
pub fn corpus_hash(corpus: &Corpus) -> Result<String> {
    let mut h = Sha256::new();
    for bytes in [corpus.jsonl_bytes()?, corpus.vocab_bytes()] {
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn check_vocab(model: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if corpus.vocab.len() > model.vocab_size {
        return Err(Error::Spec(format!(
            "corpus vocabulary of {} exceeds model vocab_size {}",
            corpus.vocab.len(),
            model.vocab_size
        )));
    }
    Ok(())
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: OptimConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], trainable: &[bool], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..grads.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[k]);
            }
        }
    }
}

/// Scales `grads` to global L2 norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Linear warmup over the first epoch, then linear decay to zero.
pub fn lr_at(step: usize, steps_per_epoch: usize, total_steps: usize, peak: f64) -> f64 {
    let warm = steps_per_epoch.max(1).min(total_steps);
    if step < warm {
        peak * (step + 1) as f64 / warm as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warm + 1) as f64
    }
}

fn epoch_rng(seed: u64, salt: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn zero_grads(params: &ModelParams) -> Vec<Tensor> {
    params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Overflow(d) => Error::Diverged { step, detail: d },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    /// Mean training-set sequence probability, on checked epochs only.
    pub seq_prob: Option<f64>,
}

pub const TRAIN_CSV_HEADER: &str = "epoch,loss,seq_prob";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs_run: usize,
    pub gate_passed: bool,
    pub final_seq_prob: f64,
    pub curve: Vec<EpochRow>,
    /// Entities whose records the data loader handed out.
    pub seen_entities: BTreeSet<String>,
}

/// Mean geometric-mean sequence probability over `records`.
pub fn mean_seq_prob(params: &ModelParams, corpus: &Corpus, records: &[&QARecord]) -> Result<f64> {
    use rayon::prelude::*;
    let id = SmoothingSpec::identity();
    let ps = records
        .par_iter()
        .map(|r| Ok(mean_logp(&answer_logprobs(params, &id, &corpus.example(r)?)?)?.exp()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ps.iter().sum::<f64>() / ps.len().max(1) as f64)
}

fn train_on(cfg: &RunConfig, corpus: &Corpus, records: &[&QARecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_vocab(&cfg.model, corpus)?;
    if records.is_empty() {
        return Err(Error::Input("no training records".into()));
    }
    let bt = &cfg.base_training;
    let mut params = ModelParams::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&params, OptimConfig { lr: bt.lr, ..cfg.optimizer.clone() });
    let trainable = vec![true; params.len()];
    let lc = LossConfig::default();
    let terms = prepare_retain(RetainLoss::Gd, corpus, records, Frozen::default(), &lc, &cfg.model)?;
    let seen_entities = records.iter().map(|r| r.entity.clone()).collect();

    let mut order: Vec<usize> = (0..terms.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    let mut gate_passed = false;
    let mut final_seq_prob = 0.0;
    let mut epochs_run = 0;
    for epoch in 0..bt.max_epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, 1, epoch));
        let mut total = 0.0;
        for chunk in order.chunks(bt.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| terms[i].clone()).collect();
            let mut grads = zero_grads(&params);
            let loss = accumulate(&params, &batch, 1.0, &trainable, &mut grads).map_err(|e| diverged(step, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: "training loss".into() });
            }
            clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
            opt.step(&mut params, &grads, &trainable, bt.lr);
            total += loss * chunk.len() as f64;
            step += 1;
        }
        epochs_run = epoch + 1;
        let last = epoch + 1 == bt.max_epochs;
        let seq_prob = if (epoch + 1) % bt.check_every.max(1) == 0 || last {
            Some(mean_seq_prob(&params, corpus, records)?)
        } else {
            None
        };
        curve.push(EpochRow { epoch, loss: total / terms.len() as f64, seq_prob });
        if let Some(p) = seq_prob {
            final_seq_prob = p;
            if p >= bt.gate {
                gate_passed = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { params, epochs_run, gate_passed, final_seq_prob, curve, seen_entities })
}

/// Records of the forget and retain splits: the full training corpus.
pub fn training_records(corpus: &Corpus) -> Vec<&QARecord> {
    corpus.records.iter().filter(|r| r.split != Split::Holdout).collect()
}

/// Fine-tunes a fresh model on forget + retain until the memorization gate.
pub fn train_base(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_on(cfg, corpus, &training_records(corpus))
}

/// Same procedure on the retain split only: the PrivLeak reference.
pub fn train_retain_only(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_on(cfg, corpus, &corpus.split(Split::Retain))
}

/// Evenly spaced subsample of at most `cap` items (all when `cap == 0`).
pub fn subsample<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if cap == 0 || items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap].clone()).collect()
}

/// Record sets one unlearning run touches.
#[derive(Clone, Debug)]
pub struct UnlearnPlan<'c> {
    pub forget: Vec<&'c QARecord>,
    pub retain: Vec<&'c QARecord>,
    pub eval_forget: Vec<&'c QARecord>,
    pub eval_retain: Vec<&'c QARecord>,
    pub eval_holdout: Vec<&'c QARecord>,
    pub verbmem: Vec<&'c QARecord>,
}

impl<'c> UnlearnPlan<'c> {
    /// Plan from the corpus split tags.
    pub fn from_splits(corpus: &'c Corpus, eval: &EvalConfig) -> Self {
        let qa = |s| subsample(&corpus.select(s, Task::Qa), eval.max_records);
        Self {
            forget: corpus.split(Split::Forget),
            retain: corpus.split(Split::Retain),
            eval_forget: qa(Split::Forget),
            eval_retain: qa(Split::Retain),
            eval_holdout: qa(Split::Holdout),
            verbmem: corpus.select(Split::Forget, Task::Completion),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub objective: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,forget_loss,retain_loss,objective";

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub forget_rows: Vec<RecordMetrics>,
    pub retain_rows: Vec<RecordMetrics>,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub params: ModelParams,
    pub pre: Option<Evaluation>,
    pub post: Evaluation,
    pub losses: Vec<LossRow>,
    pub teacher_checksum: Option<(String, String)>,
}

/// MetricsReport of `params` on the plan's evaluation sets. CS compares
/// against `reference` generations (the model before unlearning).
pub fn evaluate_plan(
    params: &ModelParams,
    corpus: &Corpus,
    plan: &UnlearnPlan<'_>,
    eval: &EvalConfig,
    reference: Option<&ModelParams>,
) -> Result<Evaluation> {
    let refs = |set: &[&QARecord]| -> Result<Option<_>> {
        reference.map(|m| reference_generations(m, corpus, set)).transpose()
    };
    let ref_f = refs(&plan.eval_forget)?;
    let ref_r = refs(&plan.eval_retain)?;
    let (forget, forget_rows) = evaluate_records(params, corpus, &plan.eval_forget, ref_f.as_ref())?;
    let (retain, retain_rows) = evaluate_records(params, corpus, &plan.eval_retain, ref_r.as_ref())?;
    let holdout = if plan.eval_holdout.is_empty() {
        None
    } else {
        Some(evaluate_records(params, corpus, &plan.eval_holdout, None)?.0)
    };
    let vm = if plan.verbmem.is_empty() {
        None
    } else {
        Some(verbmem(params, corpus, &plan.verbmem, eval.verbmem_prefix)?)
    };
    let report = MetricsReport {
        mu: model_utility(&[&retain]),
        fe: forget_efficacy(&forget),
        knowmem_forget: knowmem_from_rows(&forget_rows),
        knowmem_retain: knowmem_from_rows(&retain_rows),
        verbmem: vm,
        forget,
        retain,
        holdout,
        ..MetricsReport::default()
    };
    Ok(Evaluation { report, forget_rows, retain_rows })
}

/// Runs `cfg.method` on the corpus split tags.
pub fn unlearn(cfg: &RunConfig, base: &ModelParams, corpus: &Corpus) -> Result<UnlearnOutcome> {
    let plan = UnlearnPlan::from_splits(corpus, &cfg.eval);
    unlearn_plan(cfg, base, corpus, &plan)
}

/// Optimizes `lambda * L_F + L_R` from `base` over the plan's forget set,
/// pairing each forget batch with an equally sized retain batch.
pub fn unlearn_plan(cfg: &RunConfig, base: &ModelParams, corpus: &Corpus, plan: &UnlearnPlan<'_>) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if plan.forget.is_empty() || plan.retain.is_empty() {
        return Err(Error::Input("unlearning needs nonempty forget and retain sets".into()));
    }
    if base.config() != &cfg.model {
        return Err(Error::Contract("base checkpoint config differs from run config".into()));
    }
    let (fl, rl) = cfg.method.pairing();
    let teacher = if cfg.method.uses_teacher() {
        Some(make_teacher(base, cfg.smoothing.clone())?)
    } else {
        None
    };
    let frozen = Frozen { teacher: teacher.as_ref(), base: Some(base) };
    let lc = &cfg.loss;

    let pre = if cfg.eval.pre_eval {
        Some(evaluate_plan(base, corpus, plan, &cfg.eval, Some(base))?)
    } else {
        None
    };

    let forget_terms = prepare_forget(fl, corpus, &plan.forget, frozen, lc, &cfg.model)?;
    let mut params = base.clone();
    let trainable: Vec<bool> = match cfg.method {
        Method::Rmu => {
            let l = lc.steering_layer;
            let keep: BTreeSet<usize> = (l.saturating_sub(2)..=l).flat_map(|x| params.ffn_indices(x)).collect();
            (0..params.len()).map(|i| keep.contains(&i)).collect()
        }
        _ => vec![true; params.len()],
    };
    let mut opt = AdamW::new(&params, cfg.optimizer.clone());
    let bs = cfg.batch_size;
    let steps_per_epoch = plan.forget.len().div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut retain_order: Vec<usize> = Vec::new();
    let mut retain_pos = 0;
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..forget_terms.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, 2, epoch));
        let (mut fsum, mut rsum) = (0.0, 0.0);
        for chunk in order.chunks(bs) {
            let fb: Vec<_> = chunk.iter().map(|&i| forget_terms[i].clone()).collect();
            let mut rb = Vec::with_capacity(chunk.len());
            while rb.len() < chunk.len() {
                if retain_pos == retain_order.len() {
                    retain_order = (0..plan.retain.len()).collect();
                    retain_order.shuffle(&mut epoch_rng(cfg.seed, 3, step));
                    retain_pos = 0;
                }
                rb.push(plan.retain[retain_order[retain_pos]]);
                retain_pos += 1;
            }
            let retain_terms = prepare_retain(rl, corpus, &rb, frozen, lc, &cfg.model)?;
            let mut grads = zero_grads(&params);
            let f = accumulate(&params, &fb, lc.lambda, &trainable, &mut grads).map_err(|e| diverged(step, e))?;
            let r = accumulate(&params, &retain_terms, 1.0, &trainable, &mut grads).map_err(|e| diverged(step, e))?;
            if !(f.is_finite() && r.is_finite()) {
                return Err(Error::Diverged { step, detail: format!("forget {f}, retain {r}") });
            }
            clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
            let lr = lr_at(step, steps_per_epoch, total_steps, cfg.optimizer.lr);
            opt.step(&mut params, &grads, &trainable, lr);
            fsum += f * chunk.len() as f64;
            rsum += r * chunk.len() as f64;
            step += 1;
        }
        let n = forget_terms.len() as f64;
        let (f, r) = (fsum / n, rsum / n);
        losses.push(LossRow { epoch, forget_loss: f, retain_loss: r, objective: lc.lambda * f + r });
    }

    let teacher_checksum = match &teacher {
        Some(t) => {
            t.verify_frozen()?;
            Some((t.checksum().to_string(), t.params().checksum()))
        }
        None => None,
    };
    let post = evaluate_plan(&params, corpus, plan, &cfg.eval, Some(base))?;
    Ok(UnlearnOutcome { params, pre, post, losses, teacher_checksum })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualStep {
    pub step: usize,
    pub forget_entities: Vec<String>,
    pub report: MetricsReport,
}

pub const CONTINUAL_CSV_HEADER: &str = "step,n_forgotten,mu,fe,balance,forget_rouge,retain_rouge,forget_te";

/// Sequential unlearning on disjoint entity subsets. Each step starts from the
/// previous step's model, rebuilds the teacher from it, trains on the
/// remaining entities as the retain pool, and is evaluated on everything
/// forgotten so far.
pub fn continual_unlearn(
    cfg: &RunConfig,
    base: &ModelParams,
    corpus: &Corpus,
    steps: usize,
    per_step_fraction: f64,
) -> Result<(ModelParams, Vec<ContinualStep>)> {
    let splits = continual_splits(corpus, steps, per_step_fraction)?;
    let mut params = base.clone();
    let mut forgotten: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    let step_cfg = RunConfig { eval: EvalConfig { pre_eval: false, ..cfg.eval.clone() }, ..cfg.clone() };
    for (i, subset) in splits.iter().enumerate() {
        let now: BTreeSet<&String> = subset.iter().collect();
        forgotten.extend(subset.iter().cloned());
        let of = |pred: &dyn Fn(&QARecord) -> bool| -> Vec<&QARecord> {
            corpus.records.iter().filter(|r| pred(r)).collect()
        };
        let training = |r: &QARecord| r.split != Split::Holdout;
        let forget = of(&|r| training(r) && now.contains(&r.entity));
        let retain = of(&|r| training(r) && !forgotten.contains(&r.entity));
        let cap = cfg.eval.max_records;
        let cumulative = of(&|r| training(r) && forgotten.contains(&r.entity));
        let plan = UnlearnPlan {
            eval_forget: qa_subset(&cumulative, cap),
            eval_retain: qa_subset(&retain, cap),
            eval_holdout: subsample(&corpus.select(Split::Holdout, Task::Qa), cfg.eval.max_records),
            verbmem: cumulative.iter().copied().filter(|r| r.task == Task::Completion).collect(),
            forget,
            retain,
        };
        let o = unlearn_plan(&step_cfg, &params, corpus, &plan)?;
        params = o.params;
        out.push(ContinualStep { step: i + 1, forget_entities: subset.clone(), report: o.post.report });
    }
    Ok((params, out))
}

fn qa_subset<'c>(set: &[&'c QARecord], cap: usize) -> Vec<&'c QARecord> {
    let v: Vec<&QARecord> = set.iter().copied().filter(|r| r.task == Task::Qa).collect();
    subsample(&v, cap)
}

pub fn continual_csv(steps: &[ContinualStep]) -> String {
    let mut s = format!("{CONTINUAL_CSV_HEADER}\n");
    let mut n = 0;
    for st in steps {
        n += st.forget_entities.len();
        let r = &st.report;
        s += &format!(
            "{},{},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}\n",
            st.step, n, r.mu, r.fe, r.balance(), r.forget.rouge, r.retain.rouge, r.forget.te
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mu: f64,
    pub fe: f64,
}

pub const SWEEP_CSV_HEADER: &str = "tau,mu,fe";

/// Full unlearning run per grid temperature, sorted by tau.
pub fn sweep_tau(cfg: &RunConfig, base: &ModelParams, corpus: &Corpus, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    let mut rows = Vec::new();
    let c = RunConfig { eval: EvalConfig { pre_eval: false, ..cfg.eval.clone() }, ..cfg.clone() };
    for tau in g {
        let mut run = c.clone();
        run.smoothing.tau = tau;
        let o = unlearn(&run, base, corpus)?;
        rows.push(SweepRow { tau, mu: o.post.report.mu, fe: o.post.report.fe });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s += &format!("{},{:.12},{:.12}\n", r.tau, r.mu, r.fe);
    }
    s
}

/// Final step of the temperature search: the best of
/// `{selected - 0.2, selected, selected + 0.2}` by the mean of MU and FE.
pub fn refine_tau(cfg: &RunConfig, base: &ModelParams, corpus: &Corpus, selected: f64) -> Result<(f64, Vec<SweepRow>)> {
    let grid: Vec<f64> = [selected - 0.2, selected, selected + 0.2]
        .iter()
        .map(|t| (t * 1e6).round() / 1e6)
        .map(|t| t.clamp(1.0, crate::teacher::TAU_CAP))
        .collect();
    let rows = sweep_tau(cfg, base, corpus, &grid)?;
    let best = rows
        .iter()
        .fold(None::<&SweepRow>, |b, r| match b {
            Some(b) if b.mu + b.fe >= r.mu + r.fe => Some(b),
            _ => Some(r),
        })
        .map(|r| r.tau)
        .unwrap_or(selected);
    Ok((best, rows))
}

pub fn train_csv(curve: &[EpochRow]) -> String {
    let mut s = format!("{TRAIN_CSV_HEADER}\n");
    for r in curve {
        let p = r.seq_prob.map(|p| format!("{p:.12}")).unwrap_or_default();
        s += &format!("{},{:.12},{}\n", r.epoch, r.loss, p);
    }
    s
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        s += &format!("{},{:.12},{:.12},{:.12}\n", r.epoch, r.forget_loss, r.retain_loss, r.objective);
    }
    s
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub corpus_hash: Option<String>,
    pub outputs: Vec<String>,
    pub detail: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            status: "ok".into(),
            seed: None,
            config_hash: None,
            corpus_hash: None,
            outputs: Vec::new(),
            detail: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_corpus;

    pub(crate) fn toy_config() -> RunConfig {
        let corpus = CorpusSpec {
            n_entities: 6,
            qa_per_entity: 2,
            forget_fraction: 0.34,
            holdout_entities: 2,
            seed: 4,
            ..CorpusSpec::default()
        };
        let model = ModelConfig {
            vocab_size: 512,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 40,
            ln_eps: 1e-5,
        };
        RunConfig {
            smoothing: SmoothingSpec::all_layers(2, 2.3),
            model,
            corpus,
            epochs: 2,
            batch_size: 2,
            optimizer: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            base_training: BaseTrainConfig { max_epochs: 3, batch_size: 8, check_every: 1, ..BaseTrainConfig::default() },
            eval: EvalConfig { max_records: 3, ..EvalConfig::default() },
            loss: LossConfig { steering_layer: 1, ..LossConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert!(RunConfig::from_json(r#"{"epochz": 3}"#).is_err());
        let m: Method = serde_json::from_str("\"SimNPO_KL\"").unwrap();
        assert_eq!(m, Method::SimNpoKl);
        assert_eq!(Method::AsuHidden.to_string(), "ASU_hidden");
    }

    #[test]
    fn every_method_maps_to_one_pairing() {
        let pairs: BTreeSet<String> = Method::ALL.iter().map(|m| format!("{:?}", m.pairing())).collect();
        assert_eq!(pairs.len(), Method::ALL.len());
    }

    #[test]
    fn schedule_shape() {
        let lrs: Vec<f64> = (0..10).map(|s| lr_at(s, 2, 10, 1.0)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] < w[0]));
        assert!(lrs[9] > 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![Tensor::vector(vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut p = ModelParams::init(toy_config().model, 0).unwrap();
        let before = p.tensors()[2].clone();
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), 0.5)).collect();
        let mut trainable = vec![false; p.len()];
        trainable[2] = true;
        let mut opt = AdamW::new(&p, OptimConfig { weight_decay: 0.0, ..OptimConfig::default() });
        opt.step(&mut p, &grads, &trainable, 0.01);
        for (a, b) in p.tensors()[2].data().iter().zip(before.data()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert_eq!(p.tensors()[3], ModelParams::init(toy_config().model, 0).unwrap().tensors()[3]);
    }

    #[test]
    fn training_is_deterministic_and_retain_only_never_sees_forget() {
        let cfg = toy_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let a = train_base(&cfg, &corpus).unwrap();
        let b = train_base(&cfg, &corpus).unwrap();
        assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
        assert_eq!(train_csv(&a.curve), train_csv(&b.curve));
        // three tiny epochs cannot memorize
        assert!(!a.gate_passed);
        let r = train_retain_only(&cfg, &corpus).unwrap();
        let forget: BTreeSet<String> = corpus.split(Split::Forget).iter().map(|r| r.entity.clone()).collect();
        assert!(r.seen_entities.is_disjoint(&forget));
    }

    #[test]
    fn unlearn_runs_every_method_and_keeps_teacher_frozen() {
        let cfg = toy_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let base = ModelParams::init(cfg.model.clone(), 1).unwrap();
        for m in Method::ALL {
            let run = RunConfig { method: m, epochs: 1, eval: EvalConfig { pre_eval: false, max_records: 1, ..cfg.eval.clone() }, ..cfg.clone() };
            let o = unlearn(&run, &base, &corpus).unwrap();
            assert_eq!(o.losses.len(), 1);
            if let Some((a, b)) = o.teacher_checksum {
                assert_eq!(a, b);
            }
            if m == Method::Rmu {
                // only FFN tensors of layers 0 and 1 may move
                let ffn: BTreeSet<usize> = (0..2).flat_map(|l| base.ffn_indices(l)).collect();
                for i in 0..base.len() {
                    if !ffn.contains(&i) {
                        assert_eq!(o.params.tensors()[i], base.tensors()[i], "{}", base.names()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_hashes_are_stable() {
        let cfg = toy_config();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        assert_eq!(corpus_hash(&corpus).unwrap(), corpus_hash(&corpus).unwrap());
        assert_eq!(cfg.hash().unwrap(), cfg.clone().hash().unwrap());
        let other = RunConfig { seed: 9, ..cfg.clone() };
        assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
    }
}
