//! Frozen forget-teacher and the temperature search.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::{Example, EOS_ID};
use crate::error::{Error, Result};
use crate::metrics::{answer_logprobs, token_entropy};
use crate::model::{forward, generate_greedy, logits_at, ForwardTrace, ModelParams, SmoothingSpec};
use crate::tensor::Tensor;
use crate::autodiff::softmax_tau_slice;

/// Read-only view of the base model with attention smoothing applied.
///
/// The parameters sit behind an `Arc` with no mutable accessor; the checksum
/// taken at construction lets callers prove nothing changed.
#[derive(Clone, Debug)]
pub struct TeacherHandle {
    params: Arc<ModelParams>,
    spec: SmoothingSpec,
    checksum: String,
}

pub fn make_teacher(base: &ModelParams, spec: SmoothingSpec) -> Result<TeacherHandle> {
    spec.validate(base.config().n_layers)?;
    let params = Arc::new(base.clone());
    let checksum = params.checksum();
    Ok(TeacherHandle { params, spec, checksum })
}

impl TeacherHandle {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn spec(&self) -> &SmoothingSpec {
        &self.spec
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the parameter checksum and compares it to the one taken at
    /// construction.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.params.checksum();
        if now != self.checksum {
            return Err(Error::Contract(format!(
                "teacher parameters changed: {} -> {now}",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        forward(&self.params, tokens, &self.spec)
    }

    /// Next-token distributions at the example's target rows, `T x V`.
    pub fn target_probs(&self, ex: &Example) -> Result<Tensor> {
        let logits = logits_at(&self.params, ex.input(), &self.spec, &ex.target_rows())?;
        let v = logits.cols();
        let mut data = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            data.extend(softmax_tau_slice(&logits.data()[r * v..(r + 1) * v], 1.0)?);
        }
        Tensor::new(logits.shape().to_vec(), data)
    }
}

/// Mean over examples of the per-token answer NLL under `params` and `spec`.
pub fn mean_nll(params: &ModelParams, spec: &SmoothingSpec, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("NLL of an empty dataset".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let lp = answer_logprobs(params, spec, ex)?;
        total += -lp.iter().sum::<f64>() / lp.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

pub fn teacher_nll(handle: &TeacherHandle, examples: &[Example]) -> Result<f64> {
    mean_nll(handle.params(), handle.spec(), examples)
}

/// Mean token entropy of greedy generations from `prompts`.
pub fn fluency_score(params: &ModelParams, spec: &SmoothingSpec, prompts: &[Vec<usize>], max_new: usize) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Input("fluency score needs prompts".into()));
    }
    let mut total = 0.0;
    for p in prompts {
        let budget = max_new.min(params.config().max_seq_len.saturating_sub(p.len()));
        total += token_entropy(&generate_greedy(params, p, spec, budget, EOS_ID)?);
    }
    Ok(total / prompts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub tau: f64,
    pub nll: Option<f64>,
    pub fluency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSearchReport {
    pub tau_low: f64,
    pub tau_high: f64,
    /// Largest probed temperature that was still fluent.
    pub tau_fluent: f64,
    pub target_nll: f64,
    pub base_nll: f64,
    pub probes: Vec<Probe>,
    pub saturated: bool,
    pub selected: f64,
}

pub const TAU_CAP: f64 = 4.0;
pub const BISECT_ITERS: usize = 12;
pub const BISECT_WIDTH: f64 = 0.01;
pub const DEFAULT_FLUENCY_THRESHOLD: f64 = 0.4;
pub const FLUENCY_PROMPTS: usize = 16;

/// The search on arbitrary NLL and fluency curves.
///
/// 1. Double `tau` from 1 until fluency drops below the threshold or the
///    cap is hit; that point is `tau_high`.
/// 2. Bisect `[1, tau_high]` for the smallest `tau` with `nll >= target`.
/// 3. Clip to the largest fluent probe.
pub fn search_temperature(
    mut nll: impl FnMut(f64) -> Result<f64>,
    mut fluency: impl FnMut(f64) -> Result<f64>,
    target_nll: f64,
    fluency_threshold: f64,
) -> Result<TemperatureSearchReport> {
    let mut probes = Vec::new();
    let base_nll = nll(1.0)?;
    probes.push(Probe { tau: 1.0, nll: Some(base_nll), fluency: None });

    let mut tau_fluent = 1.0;
    let mut tau_high = 1.0;
    while tau_high < TAU_CAP {
        tau_high = (tau_high * 2.0).min(TAU_CAP);
        let f = fluency(tau_high)?;
        probes.push(Probe { tau: tau_high, nll: None, fluency: Some(f) });
        if f < fluency_threshold {
            break;
        }
        tau_fluent = tau_high;
    }

    let mut saturated = false;
    let selected = if base_nll >= target_nll {
        1.0
    } else {
        let top = nll(tau_high)?;
        probes.push(Probe { tau: tau_high, nll: Some(top), fluency: None });
        if top < target_nll {
            saturated = true;
            tau_high
        } else {
            let (mut lo, mut hi) = (1.0, tau_high);
            for _ in 0..BISECT_ITERS {
                if hi - lo < BISECT_WIDTH {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let v = nll(mid)?;
                probes.push(Probe { tau: mid, nll: Some(v), fluency: None });
                if v >= target_nll {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    };
    Ok(TemperatureSearchReport {
        tau_low: 1.0,
        tau_high,
        tau_fluent,
        target_nll,
        base_nll,
        probes,
        saturated,
        selected: selected.min(tau_fluent).max(1.0),
    })
}

/// Temperature search against a real base model. Smoothing is applied to all
/// layers; `target_nll` defaults to base NLL + ln 4 when `None`.
pub fn select_temperature(
    base: &ModelParams,
    forget: &[Example],
    fluency_prompts: &[Vec<usize>],
    target_nll: Option<f64>,
    fluency_threshold: f64,
    max_new: usize,
) -> Result<TemperatureSearchReport> {
    if forget.is_empty() {
        return Err(Error::Input("temperature search needs a forget set".into()));
    }
    let layers = base.config().n_layers;
    let spec = |tau: f64| SmoothingSpec::all_layers(layers, tau);
    let target = match target_nll {
        Some(t) => t,
        None => mean_nll(base, &SmoothingSpec::identity(), forget)? + 4f64.ln(),
    };
    search_temperature(
        |tau| mean_nll(base, &spec(tau), forget),
        |tau| fluency_score(base, &spec(tau), fluency_prompts, max_new),
        target,
        fluency_threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 13,
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                d_ff: 12,
                max_seq_len: 12,
                ln_eps: 1e-5,
            },
            3,
        )
        .unwrap()
    }

    fn examples() -> Vec<Example> {
        vec![Example::new(vec![1, 5, 6], &[7, 8]), Example::new(vec![1, 9], &[10])]
    }

    #[test]
    fn identity_teacher_matches_base() {
        let base = tiny();
        let t = make_teacher(&base, SmoothingSpec::identity()).unwrap();
        let ex = examples();
        assert_eq!(teacher_nll(&t, &ex).unwrap(), mean_nll(&base, &SmoothingSpec::identity(), &ex).unwrap());
        let a = t.forward(&[1, 4, 5]).unwrap();
        let b = forward(&base, &[1, 4, 5], &SmoothingSpec::identity()).unwrap();
        assert_eq!(a.logits, b.logits);
        t.verify_frozen().unwrap();
    }

    #[test]
    fn two_handles_agree() {
        let base = tiny();
        let s = SmoothingSpec::all_layers(2, 2.3);
        let a = make_teacher(&base, s.clone()).unwrap();
        let b = make_teacher(&base, s).unwrap();
        let ex = &examples()[0];
        assert_eq!(a.target_probs(ex).unwrap(), b.target_probs(ex).unwrap());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(make_teacher(&tiny(), SmoothingSpec::new(0.5, [0])).is_err());
        assert!(make_teacher(&tiny(), SmoothingSpec::new(2.0, [5])).is_err());
    }

    #[test]
    fn single_token_nll() {
        let base = tiny();
        let ex = Example::new(vec![1, 4], &[]);
        // answer is just <eos>
        let p = crate::model::next_token_dist(&base, &[1, 4], &SmoothingSpec::identity()).unwrap();
        let nll = mean_nll(&base, &SmoothingSpec::identity(), &[ex]).unwrap();
        assert!((nll + p[EOS_ID].ln()).abs() < 1e-12);
        assert!(mean_nll(&base, &SmoothingSpec::identity(), &[]).is_err());
    }

    #[test]
    fn bisection_on_linear_curve() {
        let r = search_temperature(|t| Ok(t), |_| Ok(1.0), 2.5, 0.4).unwrap();
        assert!((r.selected - 2.5).abs() <= 0.01, "{r:?}");
        assert!(!r.saturated);
        assert!(r.tau_low <= r.selected && r.selected <= r.tau_high && r.tau_high <= TAU_CAP);
    }

    #[test]
    fn target_at_base_returns_one() {
        let r = search_temperature(|t| Ok(t), |_| Ok(1.0), 1.0, 0.4).unwrap();
        assert_eq!(r.selected, 1.0);
    }

    #[test]
    fn saturation_and_fluency_clip() {
        let r = search_temperature(|t| Ok(t), |_| Ok(1.0), 9.0, 0.4).unwrap();
        assert!(r.saturated);
        assert_eq!(r.selected, TAU_CAP);
        // gibberish from tau 4 on: fluent range ends at 2
        let r = search_temperature(|t| Ok(t), |t| Ok(if t >= 4.0 { 0.1 } else { 1.0 }), 3.0, 0.4).unwrap();
        assert_eq!(r.tau_fluent, 2.0);
        assert_eq!(r.selected, 2.0);
    }

    #[test]
    fn monotone_bisection_property() {
        for k in 1..20 {
            let target = 1.0 + 0.15 * k as f64;
            let f = |t: f64| Ok(t * t);
            let r = search_temperature(f, |_| Ok(1.0), target, 0.4).unwrap();
            assert!((r.selected - target.sqrt()).abs() <= 0.01, "{target}: {r:?}");
        }
    }
}
