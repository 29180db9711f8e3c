//! Checks the temperature derivatives of softmax attention against finite differences.

use asu::analysis::{dalpha_dtau, dentropy_dtau, verify_lemmas, DEFAULT_TAU_GRID};

fn main() -> asu::Result<()> {
    let a = [2.0, 0.5, -1.0, 0.0];
    println!("logits {a:?}");
    for tau in DEFAULT_TAU_GRID {
        let d = dalpha_dtau(&a, tau)?;
        println!("tau {tau}: d alpha/d tau {d:+.4?}, dH/d tau {:.4}", dentropy_dtau(&a, tau)?);
    }
    let s = verify_lemmas(100, &DEFAULT_TAU_GRID, 0)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}
