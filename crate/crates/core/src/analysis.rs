//! Numeric checks of the temperature calculus and token-role diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_tau_slice;
use crate::datagen::{Corpus, QARecord};
use crate::error::{Error, Result};
use crate::model::{argmax, entropy, forward, logits_at, ModelParams, SmoothingSpec};

pub const FD_STEP: f64 = 1e-5;
pub const LEMMA_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TAU_GRID: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 4.0];
pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_DIM: usize = 8;

/// Seeded logit vectors with standard-normal entries scaled by `scale`.
pub fn random_logits(n: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    (0..n).map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect()).collect()
}

fn check_inputs(logits: &[Vec<f64>], grid: &[f64]) -> Result<()> {
    if logits.iter().any(|a| a.is_empty() || a.iter().any(|x| !x.is_finite())) {
        return Err(Error::Input("logit vectors must be nonempty and finite".into()));
    }
    if grid.iter().any(|&t| !(t.is_finite() && t > FD_STEP)) {
        return Err(Error::Domain(format!("temperature grid {grid:?} must be finite and positive")));
    }
    Ok(())
}

/// Attention mean `sum_j alpha_j a_j` at temperature `tau`.
fn attention_mean(a: &[f64], alpha: &[f64]) -> f64 {
    a.iter().zip(alpha).map(|(x, p)| x * p).sum()
}

/// Closed form of `d alpha_i / d tau`: `alpha_i (abar - a_i) / tau^2`.
pub fn dalpha_dtau(a: &[f64], tau: f64) -> Result<Vec<f64>> {
    let alpha = softmax_tau_slice(a, tau)?;
    let abar = attention_mean(a, &alpha);
    Ok(alpha.iter().zip(a).map(|(p, x)| p * (abar - x) / (tau * tau)).collect())
}

/// Closed form of `dH/dtau`: the attention-weighted variance of the logits over `tau^3`.
pub fn dentropy_dtau(a: &[f64], tau: f64) -> Result<f64> {
    let alpha = softmax_tau_slice(a, tau)?;
    let abar = attention_mean(a, &alpha);
    let var: f64 = a.iter().zip(&alpha).map(|(x, p)| p * (x - abar) * (x - abar)).sum();
    Ok(var / (tau * tau * tau))
}

pub fn attention_entropy(a: &[f64], tau: f64) -> Result<f64> {
    Ok(entropy(&softmax_tau_slice(a, tau)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub samples: usize,
    pub grid: Vec<f64>,
    pub max_abs_deviation: f64,
    /// Sign violations of the weight derivative, or entropy decreasing along the grid.
    pub violations: usize,
    pub passed: bool,
}

/// Central differences of `alpha(tau)` against the closed form, worst case over
/// every vector, temperature and coordinate. Also counts coordinates whose
/// derivative sign disagrees with `a_i` versus the mean.
pub fn verify_weight_derivative(logits: &[Vec<f64>], grid: &[f64]) -> Result<LemmaCheck> {
    check_inputs(logits, grid)?;
    let per: Vec<(f64, usize)> = logits
        .par_iter()
        .map(|a| {
            let mut worst = 0.0f64;
            let mut bad = 0;
            for &tau in grid {
                let up = softmax_tau_slice(a, tau + FD_STEP)?;
                let dn = softmax_tau_slice(a, tau - FD_STEP)?;
                let exact = dalpha_dtau(a, tau)?;
                let abar = attention_mean(a, &softmax_tau_slice(a, tau)?);
                for i in 0..a.len() {
                    let fd = (up[i] - dn[i]) / (2.0 * FD_STEP);
                    worst = worst.max((fd - exact[i]).abs());
                    if (a[i] > abar && exact[i] > 0.0) || (a[i] < abar && exact[i] < 0.0) {
                        bad += 1;
                    }
                }
            }
            Ok((worst, bad))
        })
        .collect::<Result<_>>()?;
    Ok(summarize(logits.len(), grid, &per))
}

/// Central differences of `H(tau)` against `Var/tau^3`, plus monotonicity of
/// `H` along the sorted grid.
pub fn verify_entropy_derivative(logits: &[Vec<f64>], grid: &[f64]) -> Result<LemmaCheck> {
    check_inputs(logits, grid)?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let per: Vec<(f64, usize)> = logits
        .par_iter()
        .map(|a| {
            let mut worst = 0.0f64;
            for &tau in grid {
                let fd = (attention_entropy(a, tau + FD_STEP)? - attention_entropy(a, tau - FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max((fd - dentropy_dtau(a, tau)?).abs());
            }
            let hs = sorted.iter().map(|&t| attention_entropy(a, t)).collect::<Result<Vec<_>>>()?;
            let bad = hs.windows(2).filter(|w| w[1] < w[0]).count();
            Ok((worst, bad))
        })
        .collect::<Result<_>>()?;
    Ok(summarize(logits.len(), grid, &per))
}

fn summarize(samples: usize, grid: &[f64], per: &[(f64, usize)]) -> LemmaCheck {
    let max_abs_deviation = per.iter().map(|p| p.0).fold(0.0, f64::max);
    let violations = per.iter().map(|p| p.1).sum();
    LemmaCheck {
        samples,
        grid: grid.to_vec(),
        max_abs_deviation,
        violations,
        passed: max_abs_deviation <= LEMMA_TOLERANCE && violations == 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub samples: usize,
    pub etas: Vec<f64>,
    /// Largest observed `|delta NLL| / eta`.
    pub max_ratio: f64,
    pub bound: f64,
    pub passed: bool,
}

/// Perturbs each logit by `+-eta` and measures the change in the NLL of every
/// token; the change must stay within `2 eta`.
pub fn verify_nll_lipschitz(logits: &[Vec<f64>], etas: &[f64]) -> Result<LipschitzCheck> {
    check_inputs(logits, &[1.0])?;
    if etas.iter().any(|&e| !(e > 0.0 && e <= 0.1)) {
        return Err(Error::Domain("perturbations must lie in (0, 0.1]".into()));
    }
    let nll = |a: &[f64], t: usize| -> Result<f64> { Ok(-softmax_tau_slice(a, 1.0)?[t].ln()) };
    let ratios: Vec<f64> = logits
        .par_iter()
        .map(|a| {
            let mut worst = 0.0f64;
            for &eta in etas {
                for j in 0..a.len() {
                    for sign in [1.0, -1.0] {
                        let mut b = a.clone();
                        b[j] += sign * eta;
                        for t in 0..a.len() {
                            worst = worst.max((nll(&b, t)? - nll(a, t)?).abs() / eta);
                        }
                    }
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(LipschitzCheck { samples: logits.len(), etas: etas.to_vec(), max_ratio, bound: 2.0, passed: max_ratio <= 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub weight_derivative: LemmaCheck,
    pub entropy_derivative: LemmaCheck,
    pub lipschitz: LipschitzCheck,
    pub passed: bool,
}

/// All scalar checks on `samples` seeded vectors of width 8.
pub fn verify_lemmas(samples: usize, grid: &[f64], seed: u64) -> Result<LemmaSummary> {
    let logits = random_logits(samples, DEFAULT_DIM, 2.0, seed);
    let weight_derivative = verify_weight_derivative(&logits, grid)?;
    let entropy_derivative = verify_entropy_derivative(&logits, grid)?;
    let lipschitz = verify_nll_lipschitz(&logits, &[0.1, 0.01, 0.001])?;
    let passed = weight_derivative.passed && entropy_derivative.passed && lipschitz.passed;
    Ok(LemmaSummary { weight_derivative, entropy_derivative, lipschitz, passed })
}

/// Per-record next-token distributions at answer positions, tagged by role.
struct RoleStats {
    nll: [f64; 2],
    ent: [f64; 2],
    count: [usize; 2],
    flipped: usize,
}

const FACTUAL: usize = 0;
const FUNCTION: usize = 1;

fn role_stats(params: &ModelParams, corpus: &Corpus, records: &[&QARecord], spec: &SmoothingSpec) -> Result<RoleStats> {
    let per: Vec<RoleStats> = records
        .par_iter()
        .map(|r| {
            let ex = corpus.example(r)?;
            let logits = logits_at(params, ex.input(), spec, &ex.target_rows())?;
            let v = logits.cols();
            let targets = ex.targets();
            let mut s = RoleStats { nll: [0.0; 2], ent: [0.0; 2], count: [0; 2], flipped: 0 };
            let mut role = vec![FUNCTION; r.answer_tokens.len()];
            for &i in &r.factual_token_indices {
                role[i] = FACTUAL;
            }
            // the closing <eos> row carries neither role
            for (i, &k) in role.iter().enumerate() {
                let p = softmax_tau_slice(&logits.data()[i * v..(i + 1) * v], 1.0)?;
                s.nll[k] -= p[targets[i]].ln();
                s.ent[k] += entropy(&p);
                s.count[k] += 1;
                if k == FACTUAL && argmax(&p) != targets[i] {
                    s.flipped += 1;
                }
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().fold(RoleStats { nll: [0.0; 2], ent: [0.0; 2], count: [0; 2], flipped: 0 }, |mut a, b| {
        for k in 0..2 {
            a.nll[k] += b.nll[k];
            a.ent[k] += b.ent[k];
            a.count[k] += b.count[k];
        }
        a.flipped += b.flipped;
        a
    }))
}

fn check_records(records: &[&QARecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("analysis needs at least one record".into()));
    }
    if records.iter().all(|r| r.factual_token_indices.is_empty()) || records.iter().all(|r| r.function_token_indices().is_empty()) {
        return Err(Error::Input("records carry no factual or no function tokens".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleCurveRow {
    pub tau: f64,
    pub nll_factual: f64,
    pub nll_function: f64,
    /// Mean prediction (output-distribution) entropy, not attention entropy.
    pub pred_entropy_factual: f64,
    pub pred_entropy_function: f64,
}

pub const ROLE_CURVE_CSV_HEADER: &str = "tau,nll_factual,nll_function,pred_entropy_factual,pred_entropy_function";

/// Mean NLL and prediction entropy by token role with every layer smoothed at each grid temperature.
pub fn factual_function_curves(params: &ModelParams, corpus: &Corpus, records: &[&QARecord], grid: &[f64]) -> Result<Vec<RoleCurveRow>> {
    check_records(records)?;
    let l = params.config().n_layers;
    grid.iter()
        .map(|&tau| {
            let s = role_stats(params, corpus, records, &SmoothingSpec::all_layers(l, tau))?;
            Ok(RoleCurveRow {
                tau,
                nll_factual: s.nll[FACTUAL] / s.count[FACTUAL] as f64,
                nll_function: s.nll[FUNCTION] / s.count[FUNCTION] as f64,
                pred_entropy_factual: s.ent[FACTUAL] / s.count[FACTUAL] as f64,
                pred_entropy_function: s.ent[FUNCTION] / s.count[FUNCTION] as f64,
            })
        })
        .collect()
}

pub fn role_curve_csv(rows: &[RoleCurveRow]) -> String {
    let mut s = format!("{ROLE_CURVE_CSV_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{:.12},{:.12},{:.12},{:.12}\n",
            r.tau, r.nll_factual, r.nll_function, r.pred_entropy_factual, r.pred_entropy_function
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleCurveSummary {
    pub base_tau: f64,
    /// `NLL_factual(tau) - NLL_factual(base)` minus the same for function tokens, per grid point.
    pub delta_gap: Vec<(f64, f64)>,
    pub factual_rises_faster: bool,
    pub entropy_nondecreasing: bool,
}

/// Directional reading of the curves: factual NLL must rise more than function
/// NLL at every smoothed temperature and both entropy columns must not fall.
pub fn summarize_role_curves(rows: &[RoleCurveRow]) -> Result<RoleCurveSummary> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let base = sorted.first().ok_or_else(|| Error::Input("empty curve".into()))?.clone();
    let delta_gap: Vec<(f64, f64)> = sorted[1..]
        .iter()
        .map(|r| (r.tau, (r.nll_factual - base.nll_factual) - (r.nll_function - base.nll_function)))
        .collect();
    let mono = |f: fn(&RoleCurveRow) -> f64| sorted.windows(2).all(|w| f(&w[1]) >= f(&w[0]));
    Ok(RoleCurveSummary {
        base_tau: base.tau,
        factual_rises_faster: delta_gap.iter().all(|d| d.1 > 0.0),
        entropy_nondecreasing: mono(|r| r.pred_entropy_factual) && mono(|r| r.pred_entropy_function),
        delta_gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginScan {
    /// `(tau, fraction of factual positions whose target is no longer the argmax)`.
    pub rows: Vec<(f64, f64)>,
    /// Smallest scanned temperature where the fraction reaches one half.
    pub tau_half: Option<f64>,
    pub nondecreasing: bool,
}

pub const MARGIN_CSV_HEADER: &str = "tau,flipped_fraction";

/// Fraction of factual answer positions that lose their argmax under all-layer smoothing.
pub fn margin_flip_scan(params: &ModelParams, corpus: &Corpus, records: &[&QARecord], grid: &[f64]) -> Result<MarginScan> {
    check_records(records)?;
    if grid.iter().any(|&t| !(1.0..=crate::teacher::TAU_CAP).contains(&t)) {
        return Err(Error::Domain(format!("margin scan grid {grid:?} must lie in [1, {}]", crate::teacher::TAU_CAP)));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    let l = params.config().n_layers;
    let rows = g
        .iter()
        .map(|&tau| {
            let s = role_stats(params, corpus, records, &SmoothingSpec::all_layers(l, tau))?;
            Ok((tau, s.flipped as f64 / s.count[FACTUAL] as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginScan {
        tau_half: rows.iter().find(|r| r.1 >= 0.5).map(|r| r.0),
        nondecreasing: rows.windows(2).all(|w| w[1].1 >= w[0].1),
        rows,
    })
}

pub fn margin_csv(scan: &MarginScan) -> String {
    let mut s = format!("{MARGIN_CSV_HEADER}\n");
    for (t, f) in &scan.rows {
        s += &format!("{t},{f:.12}\n");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub anchor: usize,
    pub window: usize,
    pub nll_factual: f64,
    pub nll_function: f64,
}

pub const LAYER_SWEEP_CSV_HEADER: &str = "anchor,window,nll_factual,nll_function";

/// Layers `anchor, anchor-1, ..` of a window, clipped at the input layer.
pub fn window_layers(anchor: usize, window: usize) -> Vec<usize> {
    (0..window.min(anchor + 1)).map(|k| anchor - k).collect()
}

/// Smooths each window of consecutive layers ending at each anchor; window 0 is the unsmoothed model.
pub fn layer_sweep(params: &ModelParams, corpus: &Corpus, records: &[&QARecord], tau: f64, windows: &[usize]) -> Result<Vec<LayerSweepRow>> {
    check_records(records)?;
    let l = params.config().n_layers;
    let mut rows = Vec::new();
    for anchor in 0..l {
        for &window in windows {
            let spec = SmoothingSpec::new(tau, window_layers(anchor, window));
            spec.validate(l)?;
            let s = role_stats(params, corpus, records, &spec)?;
            rows.push(LayerSweepRow {
                anchor,
                window,
                nll_factual: s.nll[FACTUAL] / s.count[FACTUAL] as f64,
                nll_function: s.nll[FUNCTION] / s.count[FUNCTION] as f64,
            });
        }
    }
    Ok(rows)
}

pub fn layer_sweep_csv(rows: &[LayerSweepRow]) -> String {
    let mut s = format!("{LAYER_SWEEP_CSV_HEADER}\n");
    for r in rows {
        s += &format!("{},{},{:.12},{:.12}\n", r.anchor, r.window, r.nll_factual, r.nll_function);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntropyRow {
    pub layer: usize,
    pub tau: f64,
    pub mean_entropy: f64,
}

pub const ATTENTION_ENTROPY_CSV_HEADER: &str = "layer,tau,mean_attention_entropy";

/// Mean attention-row entropy of each layer when that layer alone is
/// smoothed, so its attention logits are fixed across the grid.
pub fn attention_entropy_curve(params: &ModelParams, tokens: &[usize], grid: &[f64]) -> Result<Vec<AttentionEntropyRow>> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for layer in 0..params.config().n_layers {
        for &tau in &g {
            let tr = forward(params, tokens, &SmoothingSpec::new(tau, [layer]))?;
            let (mut sum, mut n) = (0.0, 0usize);
            for head in &tr.attention[layer] {
                let t = head.rows();
                for i in 0..t {
                    // causal rows: only the visible prefix carries mass
                    sum += entropy(&head.data()[i * t..i * t + i + 1]);
                    n += 1;
                }
            }
            rows.push(AttentionEntropyRow { layer, tau, mean_entropy: sum / n as f64 });
        }
    }
    Ok(rows)
}

/// Count of adjacent grid pairs where a layer's attention entropy fell.
pub fn attention_entropy_violations(rows: &[AttentionEntropyRow]) -> usize {
    rows.windows(2).filter(|w| w[0].layer == w[1].layer && w[1].mean_entropy < w[0].mean_entropy - 1e-12).count()
}

pub fn attention_entropy_csv(rows: &[AttentionEntropyRow]) -> String {
    let mut s = format!("{ATTENTION_ENTROPY_CSV_HEADER}\n");
    for r in rows {
        s += &format!("{},{},{:.12}\n", r.layer, r.tau, r.mean_entropy);
    }
    s
}
