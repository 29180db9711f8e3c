//! Unlearns one base model with several methods and prints a comparison.
//!
//! `cargo run --release --example compare_methods -- [config.json] [key=value ...]`
//!
//! Keys: `methods` (comma list), `epochs`, `lr`, `tau`, `lambda`. The base
//! checkpoint is cached in the system temp directory, keyed by the model,
//! corpus and base-training settings.

use std::time::Instant;

use asu::model::{ModelParams, SmoothingSpec};
use asu::runner::{sha256_hex, train_base, unlearn, Method, RunConfig};

fn main() -> asu::Result<()> {
    let mut args = std::env::args().skip(1).peekable();
    let mut cfg = match args.peek() {
        Some(p) if !p.contains('=') => RunConfig::load(args.next().expect("peeked").as_ref())?,
        _ => RunConfig::from_json(include_str!("../configs/tofu.json"))?,
    };
    let mut methods = vec![Method::AsuGd, Method::AsuKl, Method::GaGd, Method::NpoGd];
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or_else(|| asu::Error::Input(format!("expected key=value, got {kv}")))?;
        let num = || v.parse::<f64>().map_err(|_| asu::Error::Input(format!("bad number {v}")));
        match k {
            "methods" => {
                methods = v.split(',').map(|m| serde_json::from_str(&format!("\"{m}\""))).collect::<Result<_, _>>()?;
            }
            "epochs" => cfg.epochs = num()? as usize,
            "lr" => cfg.optimizer.lr = num()?,
            "tau" => cfg.smoothing = SmoothingSpec::all_layers(cfg.model.n_layers, num()?),
            "lambda" => cfg.loss.lambda = num()?,
            _ => return Err(asu::Error::Input(format!("unknown key {k}"))),
        }
    }
    cfg.eval.pre_eval = false;
    let corpus = cfg.corpus()?;
    let key = sha256_hex(serde_json::to_string(&(&cfg.model, &cfg.corpus, &cfg.base_training, cfg.seed))?.as_bytes());
    let cache = std::env::temp_dir().join(format!("asu-base-{}.ckpt", &key[..12]));
    let base = match ModelParams::load(&cache) {
        Ok(p) => p,
        Err(_) => {
            let out = train_base(&cfg, &corpus)?;
            println!("base: {} epochs, seq_prob {:.3}, gate {}", out.epochs_run, out.final_seq_prob, out.gate_passed);
            out.params.save(&cache)?;
            out.params
        }
    };
    println!("method,forget_rouge,retain_rouge,forget_te,mu,fe,secs");
    for m in methods {
        let t = Instant::now();
        let o = unlearn(&RunConfig { method: m, ..cfg.clone() }, &base, &corpus)?;
        let r = &o.post.report;
        println!(
            "{m},{:.3},{:.3},{:.3},{:.3},{:.3},{:.1}",
            r.forget.rouge, r.retain.rouge, r.forget.te, r.mu, r.fe, t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
