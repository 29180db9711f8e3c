//! Evaluation metrics: ROUGE-L, sequence probability, truth ratio, token
//! entropy, the CS/ES proxies, MU/FE harmonic means, and the
//! VerbMem/KnowMem/PrivLeak suite.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp;
use crate::datagen::{Corpus, Example, QARecord, Task, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, logits_at, ModelParams, SmoothingSpec};

/// Lowercase, split on whitespace, strip ASCII punctuation.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level LCS length over reference length.
pub fn rouge_l_recall<T: PartialEq>(generated: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("ROUGE-L needs a nonempty reference".into()));
    }
    Ok(lcs_len(generated, reference) as f64 / reference.len() as f64)
}

/// ROUGE-L F1, used by the memorization metrics.
pub fn rouge_l_f1<T: PartialEq>(generated: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("ROUGE-L needs a nonempty reference".into()));
    }
    let l = lcs_len(generated, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / generated.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Geometric-mean probability `exp(mean log p)`.
pub fn seq_probability(logps: &[f64]) -> Result<f64> {
    Ok(mean_logp(logps)?.exp())
}

pub fn mean_logp(logps: &[f64]) -> Result<f64> {
    if logps.is_empty() {
        return Err(Error::Input("sequence probability of an empty answer".into()));
    }
    if let Some(bad) = logps.iter().find(|&&l| !(l <= 0.0)) {
        return Err(Error::Domain(format!("log-probability {bad} is not <= 0")));
    }
    Ok(logps.iter().sum::<f64>() / logps.len() as f64)
}

/// Floor on token-mean log-probabilities inside the truth ratio.
pub const LOGP_FLOOR: f64 = -700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRatio {
    pub raw: f64,
    pub retain: f64,
    pub forget: f64,
}

impl TruthRatio {
    pub fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            retain: (1.0 - raw).max(0.0),
            forget: 1.0 - raw.min(1.0 / raw),
        }
    }
}

/// Truth ratio from token-mean log-probabilities of the perturbed answers and
/// the paraphrase. Computed in log space.
pub fn truth_ratio(perturbed_mean_logps: &[f64], paraphrase_mean_logp: f64) -> Result<TruthRatio> {
    if perturbed_mean_logps.is_empty() {
        return Err(Error::Input("truth ratio needs at least one perturbed answer".into()));
    }
    let floored: Vec<f64> = perturbed_mean_logps.iter().map(|l| l.max(LOGP_FLOOR)).collect();
    let log_mean = logsumexp(&floored) - (floored.len() as f64).ln();
    let raw = (log_mean - paraphrase_mean_logp.max(LOGP_FLOOR)).exp();
    if !raw.is_finite() {
        return Err(Error::Overflow("truth ratio".into()));
    }
    Ok(TruthRatio::from_raw(raw))
}

/// Normalized token entropy; 0 for outputs of length <= 1.
pub fn token_entropy<T: Ord>(tokens: &[T]) -> f64 {
    let n = tokens.len();
    if n <= 1 {
        return 0.0;
    }
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let h: f64 = counts
        .values()
        .map(|&c| {
            let f = c as f64 / n as f64;
            -f * f.log2()
        })
        .sum();
    h / (n as f64).log2()
}

/// Cosine of token-frequency vectors, clamped at 0. Empty inputs give 0
/// unless both are empty.
pub fn cosine_similarity_proxy<T: Ord>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut fa: BTreeMap<&T, f64> = BTreeMap::new();
    let mut fb: BTreeMap<&T, f64> = BTreeMap::new();
    for t in a {
        *fa.entry(t).or_default() += 1.0;
    }
    for t in b {
        *fb.entry(t).or_default() += 1.0;
    }
    let dot: f64 = fa.iter().filter_map(|(k, x)| fb.get(k).map(|y| x * y)).sum();
    let na = fa.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = fb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// 1 iff every factual token of the answer occurs in the generation.
pub fn entailment_proxy<T: PartialEq>(generated: &[T], answer: &[T], factual: &[usize]) -> Result<f64> {
    if let Some(&bad) = factual.iter().find(|&&i| i >= answer.len()) {
        return Err(Error::Input(format!("factual index {bad} outside answer of {}", answer.len())));
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    let all = factual.iter().all(|&i| generated.contains(&answer[i]));
    Ok(if all { 1.0 } else { 0.0 })
}

/// Harmonic mean; any component <= 0 makes it 0.
pub fn harmonic_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() || xs.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    xs.len() as f64 / xs.iter().map(|x| 1.0 / x).sum::<f64>()
}

/// Mean of the lowest `ceil(k% * T)` token log-probabilities.
pub fn min_k_prob(logps: &[f64], k_percent: f64) -> Result<f64> {
    if logps.is_empty() {
        return Err(Error::Input("min-k of an empty sequence".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Domain(format!("k must lie in (0, 100], got {k_percent}")));
    }
    let mut v = logps.to_vec();
    v.sort_by(f64::total_cmp);
    let m = ((k_percent / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[..m].iter().sum::<f64>() / m as f64)
}

/// AUC of `pos` scoring above `neg`, via the rank statistic with mid-ranks
/// for ties.
pub fn auc_rank(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Domain("non-finite AUC score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // doubled ranks keep tied mid-ranks integral, so the result is exact
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_sum += mid2 * all[i..=j].iter().filter(|x| x.1).count() as u64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as u64, neg.len() as u64);
    let u2 = rank2_sum - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// AUC by counting every (pos, neg) pair, ties counted half.
pub fn auc_pairwise(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    let mut twice = 0u64;
    for p in pos {
        for n in neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

pub fn privleak(auc: f64, auc_retrain: f64) -> Result<f64> {
    if auc_retrain == 0.0 {
        return Err(Error::Domain("retrain AUC is 0, PrivLeak undefined".into()));
    }
    Ok((auc - auc_retrain) / auc_retrain)
}

/// Log-probabilities of the example's target tokens (answer plus `<eos>`).
pub fn answer_logprobs(params: &ModelParams, spec: &SmoothingSpec, ex: &Example) -> Result<Vec<f64>> {
    let rows = ex.target_rows();
    let logits = logits_at(params, ex.input(), spec, &rows)?;
    let v = logits.cols();
    Ok(ex
        .targets()
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logits.data()[r * v..(r + 1) * v];
            row[y] - logsumexp(row)
        })
        .collect())
}

/// Everything the metrics need about one record under one model.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub prompt: Vec<usize>,
    pub answer: Vec<String>,
    pub generated: Vec<String>,
    pub answer_logps: Vec<f64>,
    pub perturbed_mean_logps: Vec<f64>,
    pub paraphrase_mean_logp: f64,
    pub factual_token_indices: Vec<usize>,
}

pub const GEN_SLACK: usize = 4;

fn generation_budget(params: &ModelParams, prompt_len: usize, want: usize) -> usize {
    want.min(params.config().max_seq_len.saturating_sub(prompt_len))
}

pub fn generate_answer(params: &ModelParams, corpus: &Corpus, record: &QARecord) -> Result<Vec<String>> {
    let prompt = corpus.prompt_ids(record)?;
    let budget = generation_budget(params, prompt.len(), record.answer_tokens.len() + GEN_SLACK);
    let out = generate_greedy(params, &prompt, &SmoothingSpec::identity(), budget, EOS_ID)?;
    Ok(out.iter().map(|&t| corpus.vocab.token(t).to_string()).collect())
}

pub fn generation_record(params: &ModelParams, corpus: &Corpus, record: &QARecord) -> Result<GenerationRecord> {
    let id = SmoothingSpec::identity();
    let ex = corpus.example(record)?;
    let answer_logps = answer_logprobs(params, &id, &ex)?;
    let perturbed_mean_logps = record
        .perturbed_answers
        .iter()
        .map(|p| mean_logp(&answer_logprobs(params, &id, &corpus.example_with(record, p)?)?))
        .collect::<Result<Vec<_>>>()?;
    let paraphrase_mean_logp =
        mean_logp(&answer_logprobs(params, &id, &corpus.example_with(record, &record.paraphrase)?)?)?;
    Ok(GenerationRecord {
        prompt: ex.prompt().to_vec(),
        answer: normalize_tokens(&record.answer),
        generated: generate_answer(params, corpus, record)?,
        answer_logps,
        perturbed_mean_logps,
        paraphrase_mean_logp,
        factual_token_indices: record.factual_token_indices.clone(),
    })
}

/// Per-record metric values; one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub rouge: f64,
    pub rouge_f1: f64,
    pub prob: f64,
    pub tr_raw: f64,
    pub te: f64,
    pub cs: f64,
    pub es: f64,
    pub generated: String,
}

pub const RECORD_CSV_HEADER: &str = "id,rouge,rouge_f1,prob,tr_raw,te,cs,es,generated";

/// Aggregates over one evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub n: usize,
    pub rouge: f64,
    pub prob: f64,
    pub tr_raw: f64,
    pub tr_retain: f64,
    pub tr_forget: f64,
    pub te: f64,
    pub cs_proxy: f64,
    pub es_proxy: f64,
}

impl SetMetrics {
    pub fn utility_components(&self) -> [f64; 6] {
        [self.rouge, self.prob, self.tr_retain, self.cs_proxy, self.es_proxy, self.te]
    }

    pub fn forget_components(&self) -> [f64; 5] {
        [1.0 - self.rouge, 1.0 - self.prob, self.tr_forget, 1.0 - self.es_proxy, self.te]
    }

    pub fn model_utility(&self) -> f64 {
        harmonic_mean(&self.utility_components())
    }

    pub fn forget_efficacy(&self) -> f64 {
        harmonic_mean(&self.forget_components())
    }
}

/// Mean of per-set harmonic means.
pub fn model_utility(sets: &[&SetMetrics]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(|s| s.model_utility()).sum::<f64>() / sets.len() as f64
}

pub fn forget_efficacy(set: &SetMetrics) -> f64 {
    set.forget_efficacy()
}

/// Evaluates QA records. `reference` holds generations of the model before
/// unlearning, keyed by record id, for the CS proxy; without it CS compares
/// each generation to itself.
pub fn evaluate_records(
    params: &ModelParams,
    corpus: &Corpus,
    records: &[&QARecord],
    reference: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<(SetMetrics, Vec<RecordMetrics>)> {
    let rows: Vec<RecordMetrics> = records
        .par_iter()
        .map(|r| {
            let g = generation_record(params, corpus, r)?;
            let tr = truth_ratio(&g.perturbed_mean_logps, g.paraphrase_mean_logp)?;
            let cs = match reference.and_then(|m| m.get(&r.id)) {
                Some(base) => cosine_similarity_proxy(&g.generated, base),
                None => cosine_similarity_proxy(&g.generated, &g.generated),
            };
            Ok(RecordMetrics {
                id: r.id.clone(),
                rouge: rouge_l_recall(&g.generated, &g.answer)?,
                rouge_f1: rouge_l_f1(&g.generated, &g.answer)?,
                prob: seq_probability(&g.answer_logps)?,
                tr_raw: tr.raw,
                te: token_entropy(&g.generated),
                cs,
                es: entailment_proxy(&g.generated, &g.answer, &g.factual_token_indices)?,
                generated: g.generated.join(" "),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&rows), rows))
}

fn aggregate(rows: &[RecordMetrics]) -> SetMetrics {
    let n = rows.len();
    if n == 0 {
        return SetMetrics::default();
    }
    let mean = |f: &dyn Fn(&RecordMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
    SetMetrics {
        n,
        rouge: mean(&|r| r.rouge),
        prob: mean(&|r| r.prob),
        tr_raw: mean(&|r| r.tr_raw),
        tr_retain: mean(&|r| TruthRatio::from_raw(r.tr_raw).retain),
        tr_forget: mean(&|r| TruthRatio::from_raw(r.tr_raw).forget),
        te: mean(&|r| r.te),
        cs_proxy: mean(&|r| r.cs),
        es_proxy: mean(&|r| r.es),
    }
}

pub fn write_record_csv(path: &std::path::Path, rows: &[RecordMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{RECORD_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{}",
            r.id, r.rouge, r.rouge_f1, r.prob, r.tr_raw, r.te, r.cs, r.es, r.generated
        )?;
    }
    Ok(())
}

/// Mean ROUGE-L F1 over already evaluated records, i.e. KnowMem.
pub fn knowmem_from_rows(rows: &[RecordMetrics]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|r| r.rouge_f1).sum::<f64>() / rows.len() as f64)
}

/// Greedy generations keyed by record id, for the CS proxy.
pub fn reference_generations(
    params: &ModelParams,
    corpus: &Corpus,
    records: &[&QARecord],
) -> Result<BTreeMap<String, Vec<String>>> {
    let gens = records
        .par_iter()
        .map(|r| Ok((r.id.clone(), generate_answer(params, corpus, r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(gens.into_iter().collect())
}

/// Mean ROUGE-L F1 between greedy continuations of the first `prefix_len`
/// passage tokens and the true remainder.
pub fn verbmem(params: &ModelParams, corpus: &Corpus, records: &[&QARecord], prefix_len: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("verbmem needs completion records".into()));
    }
    let scores = records
        .par_iter()
        .map(|r| {
            if r.task != Task::Completion {
                return Err(Error::Input(format!("record {} is not a completion record", r.id)));
            }
            let ids = corpus.vocab.encode(&r.answer)?;
            if prefix_len >= ids.len() {
                return Err(Error::Input(format!(
                    "prefix length {prefix_len} >= passage length {}",
                    ids.len()
                )));
            }
            let mut prompt = vec![BOS_ID];
            prompt.extend_from_slice(&ids[..prefix_len]);
            let want = ids.len() - prefix_len;
            let budget = generation_budget(params, prompt.len(), want + GEN_SLACK);
            let out = generate_greedy(params, &prompt, &SmoothingSpec::identity(), budget, EOS_ID)?;
            rouge_l_f1(&out, &ids[prefix_len..])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean ROUGE-L F1 of greedy answers against the ground truth.
pub fn knowmem(params: &ModelParams, corpus: &Corpus, records: &[&QARecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("knowmem needs QA records".into()));
    }
    let scores = records
        .par_iter()
        .map(|r| rouge_l_f1(&generate_answer(params, corpus, r)?, &normalize_tokens(&r.answer)))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub const DEFAULT_MIN_K: f64 = 40.0;

/// Min-K% membership scores, one per record.
pub fn min_k_scores(params: &ModelParams, corpus: &Corpus, records: &[&QARecord], k: f64) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| {
            let ex = corpus.example(r)?;
            min_k_prob(&answer_logprobs(params, &SmoothingSpec::identity(), &ex)?, k)
        })
        .collect()
}

/// Min-K% AUC separating `members` from `non_members` under `params`.
pub fn membership_auc(
    params: &ModelParams,
    corpus: &Corpus,
    members: &[&QARecord],
    non_members: &[&QARecord],
    k: f64,
) -> Result<f64> {
    auc_rank(
        &min_k_scores(params, corpus, members, k)?,
        &min_k_scores(params, corpus, non_members, k)?,
    )
}

/// Full report for one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forget: SetMetrics,
    pub retain: SetMetrics,
    pub holdout: Option<SetMetrics>,
    pub mu: f64,
    pub fe: f64,
    pub verbmem: Option<f64>,
    pub knowmem_forget: Option<f64>,
    pub knowmem_retain: Option<f64>,
    pub auc: Option<f64>,
    pub auc_retrain: Option<f64>,
    pub privleak: Option<f64>,
}

impl MetricsReport {
    /// Mean of MU and FE, the single-number summary used for comparisons.
    pub fn balance(&self) -> f64 {
        0.5 * (self.mu + self.fe)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        normalize_tokens(s)
    }

    #[test]
    fn rouge_oracles() {
        assert_eq!(rouge_l_recall(&toks("a b c"), &toks("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_l_recall(&toks("x y"), &toks("a b c")).unwrap(), 0.0);
        let r = rouge_l_recall(&toks("x a y c"), &toks("a b c")).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!(rouge_l_recall(&toks("a"), &toks("")).is_err());
        assert_eq!(toks("Hello, World!"), vec!["hello", "world"]);
    }

    #[test]
    fn seq_probability_oracles() {
        assert_eq!(seq_probability(&[0.0, 0.0]).unwrap(), 1.0);
        assert!((seq_probability(&[0.25f64.ln()]).unwrap() - 0.25).abs() < 1e-15);
        let p = seq_probability(&[0.5f64.ln(), 0.125f64.ln()]).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
    }

    #[test]
    fn truth_ratio_oracles() {
        let l = 0.3f64.ln();
        let t = truth_ratio(&[l, l, l], l).unwrap();
        assert!((t.raw - 1.0).abs() < 1e-12 && t.retain.abs() < 1e-12 && t.forget.abs() < 1e-12);
        let t = truth_ratio(&[0.2f64.ln()], 0.4f64.ln()).unwrap();
        assert!((t.raw - 0.5).abs() < 1e-12);
        assert!((t.retain - 0.5).abs() < 1e-12);
        assert!((t.forget - 0.5).abs() < 1e-12);
        // deep underflow stays finite
        let t = truth_ratio(&[-800.0], -900.0).unwrap();
        assert!((t.raw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_entropy_oracles() {
        assert_eq!(token_entropy(&toks("a a a a")), 0.0);
        assert_eq!(token_entropy(&toks("a b")), 1.0);
        assert!((token_entropy(&toks("a a b b")) - 0.5).abs() < 1e-15);
        assert_eq!(token_entropy(&toks("a")), 0.0);
    }

    #[test]
    fn proxies() {
        assert!((cosine_similarity_proxy(&toks("a b"), &toks("a b")) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity_proxy(&toks("a b"), &toks("c d")), 0.0);
        assert!((cosine_similarity_proxy(&toks("a b"), &toks("a c")) - 0.5).abs() < 1e-15);
        let ans = toks("5 may 1960 in drelford");
        assert_eq!(entailment_proxy(&toks("drelford 1960 may 5"), &ans, &[0, 1, 2, 4]).unwrap(), 1.0);
        assert_eq!(entailment_proxy(&Vec::<String>::new(), &ans, &[0]).unwrap(), 0.0);
        assert_eq!(entailment_proxy(&toks("5 june"), &ans, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn harmonic_means() {
        assert_eq!(harmonic_mean(&[1.0; 6]), 1.0);
        assert_eq!(harmonic_mean(&[1.0, 0.0, 1.0]), 0.0);
        assert!((harmonic_mean(&[0.5, 1.0]) - 2.0 / 3.0).abs() < 1e-15);
        let s = SetMetrics {
            rouge: 0.0,
            prob: 0.0,
            tr_forget: 1.0,
            es_proxy: 0.0,
            te: 1.0,
            ..SetMetrics::default()
        };
        assert_eq!(s.forget_efficacy(), 1.0);
    }

    #[test]
    fn min_k_oracles() {
        let l = [-1.0, -2.0, -3.0, -4.0, -5.0];
        assert_eq!(min_k_prob(&l, 40.0).unwrap(), -4.5);
        assert_eq!(min_k_prob(&l, 100.0).unwrap(), -3.0);
        assert_eq!(min_k_prob(&[-0.7; 7], 13.0).unwrap(), -0.7);
    }

    #[test]
    fn auc_oracles() {
        assert_eq!(auc_rank(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auc_rank(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(privleak(0.7, 0.7).unwrap(), 0.0);
        assert!(privleak(0.7, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pairwise(
            pos in prop::collection::vec(-5i32..5, 1..100),
            neg in prop::collection::vec(-5i32..5, 1..100),
        ) {
            // small integer support forces many ties
            let p: Vec<f64> = pos.iter().map(|&x| x as f64 * 0.5).collect();
            let n: Vec<f64> = neg.iter().map(|&x| x as f64 * 0.5).collect();
            prop_assert_eq!(auc_rank(&p, &n).unwrap(), auc_pairwise(&p, &n).unwrap());
        }

        #[test]
        fn unit_metrics_stay_in_range(
            a in prop::collection::vec(0u8..6, 0..12),
            b in prop::collection::vec(0u8..6, 1..12),
            r in 1e-3f64..1e3,
        ) {
            let rl = rouge_l_recall(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&rl));
            let f1 = rouge_l_f1(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&f1));
            let te = token_entropy(&a);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&te));
            let cs = cosine_similarity_proxy(&a, &b);
            prop_assert!((0.0..=1.0).contains(&cs));
            let t = TruthRatio::from_raw(r);
            prop_assert!((0.0..=1.0).contains(&t.retain) && (0.0..=1.0).contains(&t.forget));
            prop_assert!((t.forget - TruthRatio::from_raw(1.0 / r).forget).abs() < 1e-12);
        }

        #[test]
        fn harmonic_below_arithmetic(xs in prop::collection::vec(1e-3f64..1.0, 1..8)) {
            let h = harmonic_mean(&xs);
            let a = xs.iter().sum::<f64>() / xs.len() as f64;
            prop_assert!(h >= 0.0 && h <= a + 1e-12);
        }
    }
}
