//! Cross-module properties.

use asu::autodiff::softmax_tau_slice;
use asu::metrics::{auc_pairwise, auc_rank, rouge_l_f1, rouge_l_recall, token_entropy};
use asu::model::{forward, ModelConfig, ModelParams, SmoothingSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rouge_scores_are_bounded(a in prop::collection::vec(0u8..6, 0..12), b in prop::collection::vec(0u8..6, 1..12)) {
        let r = rouge_l_recall(&a, &b).unwrap();
        let f = rouge_l_f1(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(rouge_l_recall(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn rank_auc_is_pair_counting(pos in prop::collection::vec(0u8..8, 1..60), neg in prop::collection::vec(0u8..8, 1..60)) {
        let p: Vec<f64> = pos.iter().map(|&x| x as f64).collect();
        let n: Vec<f64> = neg.iter().map(|&x| x as f64).collect();
        prop_assert_eq!(auc_rank(&p, &n).unwrap(), auc_pairwise(&p, &n).unwrap());
    }

    #[test]
    fn token_entropy_in_unit_interval(t in prop::collection::vec(0u8..5, 0..20)) {
        let h = token_entropy(&t);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
    }

    #[test]
    fn softmax_flattens_with_temperature(a in prop::collection::vec(-5.0f64..5.0, 2..10)) {
        let hot = softmax_tau_slice(&a, 1e6).unwrap();
        let u = 1.0 / a.len() as f64;
        prop_assert!(hot.iter().all(|p| (p - u).abs() < 1e-4));
        let s: f64 = softmax_tau_slice(&a, 2.3).unwrap().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, heads in 1usize..3, layers in 1usize..3) {
        let cfg = ModelConfig { vocab_size: 11, d_model: 4 * heads, n_heads: heads, n_layers: layers, d_ff: 6, max_seq_len: 9, ln_eps: 1e-5 };
        let p = ModelParams::init(cfg, seed).unwrap();
        let q = ModelParams::from_bytes(&p.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(q.to_bytes().unwrap(), p.to_bytes().unwrap());
    }

    #[test]
    fn unit_temperature_is_the_identity(seed in 0u64..50, toks in prop::collection::vec(0usize..11, 1..9)) {
        let cfg = ModelConfig { vocab_size: 11, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 6, max_seq_len: 9, ln_eps: 1e-5 };
        let p = ModelParams::init(cfg, seed).unwrap();
        let a = forward(&p, &toks, &SmoothingSpec::identity()).unwrap();
        let b = forward(&p, &toks, &SmoothingSpec::all_layers(2, 1.0)).unwrap();
        prop_assert_eq!(a.logits, b.logits);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let p = ModelParams::init(ModelConfig::default(), 0).unwrap();
    let mut bytes = p.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(ModelParams::from_bytes(&bytes).is_err());
    let bytes = p.to_bytes().unwrap();
    assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}
