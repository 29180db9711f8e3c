//! The scalar metrics on hand-made inputs.

use asu::metrics::{auc_pairwise, auc_rank, harmonic_mean, min_k_prob, privleak, rouge_l_recall, token_entropy, truth_ratio};

fn main() -> asu::Result<()> {
    let reference = ["born", "in", "oslo", "in", "1950"];
    let generated = ["born", "in", "1950"];
    println!("ROUGE-L recall {:.3}", rouge_l_recall(&generated, &reference)?);
    println!("token entropy, fluent {:.3}", token_entropy(&["the", "cat", "sat", "on", "a", "mat"]));
    println!("token entropy, gibberish {:.3}", token_entropy(&["x", "x", "x", "x", "x", "y"]));
    let tr = truth_ratio(&[-2.0, -2.5, -3.0], -0.2)?;
    println!("truth ratio raw {:.4}, retain form {:.4}, forget form {:.4}", tr.raw, tr.retain, tr.forget);
    println!("harmonic mean {:.3}", harmonic_mean(&[0.9, 0.5, 0.8]));
    println!("min-40% prob {:.3}", min_k_prob(&[-0.1, -0.2, -3.0, -0.05, -1.0], 40.0)?);
    let (pos, neg) = ([0.9, 0.8, 0.8, 0.3], [0.8, 0.2, 0.1]);
    println!("AUC rank {:.4} pairwise {:.4}", auc_rank(&pos, &neg)?, auc_pairwise(&pos, &neg)?);
    println!("privleak {:.3}", privleak(0.75, 0.5)?);
    Ok(())
}
