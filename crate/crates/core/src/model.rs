//! Decoder-only causal transformer with per-layer attention temperature.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))` followed by `x + FFN(LN(x))`.
//! Attention in a smoothed layer computes
//! `softmax(Q_h K_h^T / (tau * sqrt(d_k))) V_h` for every head; all other
//! components are untouched by the temperature.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_tau_slice, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            max_seq_len: 64,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.max_seq_len,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Input(format!("model config has a zero count: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Input(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

/// Temperature recipe for the forget-teacher: `tau` applies to the attention
/// of every layer in `layers`, all others run at temperature 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    pub tau: f64,
    pub layers: BTreeSet<usize>,
}

impl SmoothingSpec {
    pub fn identity() -> Self {
        Self {
            tau: 1.0,
            layers: BTreeSet::new(),
        }
    }

    pub fn all_layers(n_layers: usize, tau: f64) -> Self {
        Self {
            tau,
            layers: (0..n_layers).collect(),
        }
    }

    pub fn new(tau: f64, layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            tau,
            layers: layers.into_iter().collect(),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(Error::Domain(format!("smoothing tau must be >= 1, got {}", self.tau)));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Domain(format!("smoothed layer {l} outside 0..{n_layers}")));
        }
        Ok(())
    }

    pub fn tau_for_layer(&self, layer: usize) -> f64 {
        if self.layers.contains(&layer) {
            self.tau
        } else {
            1.0
        }
    }
}

const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

const LAYER_PARTS: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

/// Index of a per-layer tensor in the canonical parameter order.
fn layer_index(layer: usize, part: usize) -> usize {
    2 + layer * PER_LAYER + part
}

/// Full parameter set in canonical order (also the checkpoint order).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn canonical_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d]),
        ("pos_emb".to_string(), vec![c.max_seq_len, d]),
    ];
    for l in 0..c.n_layers {
        for (p, part) in LAYER_PARTS.iter().enumerate() {
            let shape = match p {
                LN1_G | LN1_B | LN2_G | LN2_B | B2 => vec![d],
                WQ | WK | WV | WO => vec![d, d],
                W1 => vec![d, c.d_ff],
                B1 => vec![c.d_ff],
                W2 => vec![c.d_ff, d],
                _ => unreachable!(),
            };
            out.push((format!("layers.{l}.{part}"), shape));
        }
    }
    out.push(("ln_f.gain".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    out.push(("lm_head".into(), vec![d, c.vocab_size]));
    out
}

impl ModelParams {
    /// Seeded initialization: N(0, 0.02) matrices, residual output
    /// projections scaled by `1/sqrt(2 n_layers)`, unit gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in canonical_layout(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name.ends_with("attn.wo") || name.ends_with("ffn.w2") {
                Tensor::randn(&shape, resid_std, &mut rng)
            } else {
                Tensor::randn(&shape, 0.02, &mut rng)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = canonical_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Indices of the feed-forward tensors of `layer`.
    pub fn ffn_indices(&self, layer: usize) -> Vec<usize> {
        [W1, B1, W2, B2].iter().map(|&p| layer_index(layer, p)).collect()
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if requires_grad {
                    tape.param(t)
                } else {
                    tape.constant_ref(t)
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Little-endian checkpoint encoding: magic, manifest length, manifest,
    /// then the raw f64 payloads in manifest order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let entry = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                };
                offset += 8 * t.len() as u64;
                entry
            })
            .collect();
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::Format("manifest exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing ASUCKPT1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(json)?;
        let payload = &bytes[12 + len..];
        let mut named = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let raw = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Format(format!("payload for {} out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            named.push((e.name, Tensor::new(e.shape, data)?));
        }
        Self::from_named(manifest.config, named)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes().expect("in-memory params always serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASUCKPT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

/// Tape handles for a registered [`ModelParams`], same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn layer(&self, l: usize, part: usize) -> Var {
        self.vars[layer_index(l, part)]
    }
    fn tail(&self, back: usize) -> Var {
        self.vars[self.vars.len() - back]
    }
}

/// Tape-level result of a forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    /// Residual stream after each block, `T x d_model`.
    pub hidden: Vec<Var>,
    /// Attention weights per layer and head, `T x T` (empty unless requested).
    pub attention: Vec<Vec<Var>>,
    /// Final layer-normed stream, the input of the output head.
    pub final_norm: Var,
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Records a full forward pass on `tape`. Attention weights are kept only
/// when `keep_attention` is set.
pub fn forward_tape(
    tape: &mut Tape<'_>,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    spec: &SmoothingSpec,
    keep_attention: bool,
) -> Result<TapeForward> {
    check_tokens(config, tokens)?;
    spec.validate(config.n_layers)?;
    let t = tokens.len();
    let dk = config.d_k();
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let positions: Vec<usize> = (0..t).collect();

    let tok = tape.gather(pv.vars[0], tokens)?;
    let pos = tape.gather(pv.vars[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut hidden = Vec::with_capacity(config.n_layers);
    let mut attention = Vec::new();

    for l in 0..config.n_layers {
        let tau = spec.tau_for_layer(l);
        let h = tape.layer_norm(x, pv.layer(l, LN1_G), pv.layer(l, LN1_B), config.ln_eps)?;
        let q = tape.matmul(h, pv.layer(l, WQ))?;
        let k = tape.matmul(h, pv.layer(l, WK))?;
        let v = tape.matmul(h, pv.layer(l, WV))?;
        let mut heads = Vec::with_capacity(config.n_heads);
        let mut weights = Vec::new();
        for hd in 0..config.n_heads {
            let qh = tape.slice(q, 1, hd * dk, dk)?;
            let kh = tape.slice(k, 1, hd * dk, dk)?;
            let vh = tape.slice(v, 1, hd * dk, dk)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt_dk)?;
            let a = tape.causal_softmax_tau(scores, tau)?;
            if keep_attention {
                weights.push(a);
            }
            heads.push(tape.matmul(a, vh)?);
        }
        if keep_attention {
            attention.push(weights);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let o = tape.matmul(cat, pv.layer(l, WO))?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, pv.layer(l, LN2_G), pv.layer(l, LN2_B), config.ln_eps)?;
        let f = tape.matmul(h, pv.layer(l, W1))?;
        let f = tape.add_row(f, pv.layer(l, B1))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, pv.layer(l, W2))?;
        let f = tape.add_row(f, pv.layer(l, B2))?;
        x = tape.add(x, f)?;
        hidden.push(x);
    }
    let final_norm = tape.layer_norm(x, pv.tail(3), pv.tail(2), config.ln_eps)?;
    Ok(TapeForward {
        hidden,
        attention,
        final_norm,
    })
}

/// Output-head logits for the given positions (all positions when `None`).
pub fn logits_tape(
    tape: &mut Tape<'_>,
    pv: &ParamVars,
    fwd: &TapeForward,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let src = match rows {
        Some(r) => tape.gather(fwd.final_norm, r)?,
        None => fwd.final_norm,
    };
    tape.matmul(src, pv.tail(1))
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `T x vocab_size`.
    pub logits: Tensor,
    /// `[layer][head]`, each `T x T`, zero above the diagonal.
    pub attention: Vec<Vec<Tensor>>,
    /// Residual stream after each block, `T x d_model`.
    pub hidden: Vec<Tensor>,
}

pub fn forward(params: &ModelParams, tokens: &[usize], spec: &SmoothingSpec) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let fwd = forward_tape(&mut tape, &pv, params.config(), tokens, spec, true)?;
    let logits = logits_tape(&mut tape, &pv, &fwd, None)?;
    Ok(ForwardTrace {
        logits: tape.value(logits).clone(),
        attention: fwd
            .attention
            .iter()
            .map(|hs| hs.iter().map(|&a| tape.value(a).clone()).collect())
            .collect(),
        hidden: fwd.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
    })
}

/// Logits at selected positions only; cheaper than a full [`forward`].
pub fn logits_at(
    params: &ModelParams,
    tokens: &[usize],
    spec: &SmoothingSpec,
    rows: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let fwd = forward_tape(&mut tape, &pv, params.config(), tokens, spec, false)?;
    let logits = logits_tape(&mut tape, &pv, &fwd, Some(rows))?;
    Ok(tape.value(logits).clone())
}

/// Next-token distribution after `context`. The output softmax always runs
/// at temperature 1; smoothing only acts inside attention.
pub fn next_token_dist(params: &ModelParams, context: &[usize], spec: &SmoothingSpec) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::Input("next_token_dist needs a nonempty context".into()));
    }
    let logits = logits_at(params, context, spec, &[context.len() - 1])?;
    softmax_tau_slice(logits.data(), 1.0)
}

/// Greedy decoding; stops after emitting `eos` (not included) or `max_new`
/// tokens. Ties go to the lowest token id.
pub fn generate_greedy(
    params: &ModelParams,
    prompt: &[usize],
    spec: &SmoothingSpec,
    max_new: usize,
    eos: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if prompt.len() + max_new > params.config().max_seq_len {
        return Err(Error::Capacity(format!(
            "prompt {} + max_new {max_new} exceeds max_seq_len {}",
            prompt.len(),
            params.config().max_seq_len
        )));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = logits_at(params, &seq, spec, &[seq.len() - 1])?;
        let next = argmax(logits.data());
        if next == eos {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 10,
            ln_eps: 1e-5,
        }
    }

    /// Parameters with larger weights so attention is far from uniform.
    fn sharp_params(seed: u64) -> ModelParams {
        let mut p = ModelParams::init(tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for i in 0..p.len() {
            let shape = p.tensors[i].shape().to_vec();
            if shape.len() == 2 {
                p.tensors[i] = Tensor::randn(&shape, 0.8, &mut rng);
            }
        }
        p
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.ln_eps = 0.0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(SmoothingSpec::new(0.5, [0]).validate(2).is_err());
        assert!(SmoothingSpec::new(2.0, [2]).validate(2).is_err());
        assert!(SmoothingSpec::new(2.0, [1]).validate(2).is_ok());
    }

    #[test]
    fn identity_spec_bit_exact() {
        let p = sharp_params(1);
        let toks = [1, 4, 2, 7, 3];
        let a = forward(&p, &toks, &SmoothingSpec::all_layers(2, 1.0)).unwrap();
        let b = forward(&p, &toks, &SmoothingSpec::new(7.0, [])).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn huge_tau_gives_uniform_attention() {
        let p = sharp_params(2);
        let toks = [1, 4, 2, 7, 3, 9];
        let tr = forward(&p, &toks, &SmoothingSpec::all_layers(2, 1e6)).unwrap();
        for layer in &tr.attention {
            for a in layer {
                for i in 0..toks.len() {
                    let u = 1.0 / (i + 1) as f64;
                    for j in 0..=i {
                        assert!((a.at(i, j) - u).abs() <= 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn causality_under_suffix() {
        let p = sharp_params(3);
        let s = SmoothingSpec::all_layers(2, 2.3);
        let short = forward(&p, &[1, 5, 6], &s).unwrap();
        let long = forward(&p, &[1, 5, 6, 9, 2], &s).unwrap();
        for i in 0..3 {
            assert_eq!(short.logits.row(i), long.logits.row(i));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = sharp_params(4);
        let tr = forward(&p, &[3, 3, 1, 0, 8], &SmoothingSpec::new(1.7, [1])).unwrap();
        for layer in &tr.attention {
            for a in layer {
                for i in 0..5 {
                    let row = a.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                    assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn next_token_dist_sums_to_one() {
        let p = sharp_params(5);
        let d = next_token_dist(&p, &[1, 2, 3], &SmoothingSpec::identity()).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let tr = forward(&p, &[1, 2, 3], &SmoothingSpec::identity()).unwrap();
        let row = tr.logits.row(2);
        let lse = crate::autodiff::logsumexp(row);
        for (q, l) in d.iter().zip(row) {
            assert!((q - (l - lse).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn input_errors() {
        let p = sharp_params(6);
        let s = SmoothingSpec::identity();
        assert!(matches!(forward(&p, &[1, 11], &s), Err(Error::Input(_))));
        assert!(matches!(forward(&p, &[1; 11], &s), Err(Error::Capacity(_))));
        assert!(matches!(generate_greedy(&p, &[1; 6], &s, 5, 2), Err(Error::Capacity(_))));
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = sharp_params(7);
        let s = SmoothingSpec::identity();
        assert!(generate_greedy(&p, &[1, 2], &s, 0, 2).unwrap().is_empty());
        let a = generate_greedy(&p, &[1, 2], &s, 6, 99).unwrap();
        let b = generate_greedy(&p, &[1, 2], &s, 6, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = sharp_params(8);
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"ASUCKPT1");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(manifest["tensors"][1]["name"], "pos_emb");
        assert_eq!(manifest["tensors"][1]["byte_offset"], 11 * 8 * 8);
        let q = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert!(ModelParams::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn attention_entropy_grows_with_tau() {
        let p = sharp_params(9);
        let toks = [1, 4, 2, 7, 3, 9, 5];
        let grid = [1.0, 1.5, 2.0, 3.0, 4.0, 8.0];
        let mean_entropy = |tau: f64| {
            let tr = forward(&p, &toks, &SmoothingSpec::all_layers(2, tau)).unwrap();
            // layer 0 sees identical inputs for every tau
            let a = &tr.attention[0];
            let mut h = 0.0;
            for head in a {
                for i in 0..toks.len() {
                    h += entropy(&head.row(i)[..=i]);
                }
            }
            h
        };
        let hs: Vec<f64> = grid.iter().map(|&t| mean_entropy(t)).collect();
        for w in hs.windows(2) {
            assert!(w[1] > w[0], "{hs:?}");
        }
    }
}
