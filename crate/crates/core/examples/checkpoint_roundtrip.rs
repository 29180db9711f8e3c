//! Saves a checkpoint, reloads it and shows the header layout.

use asu::model::{ModelConfig, ModelParams};

fn main() -> asu::Result<()> {
    let p = ModelParams::init(ModelConfig::default(), 0)?;
    let bytes = p.to_bytes()?;
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    println!("magic {:?}, manifest {n} bytes, total {} bytes", std::str::from_utf8(&bytes[..8]).unwrap_or("?"), bytes.len());
    println!("{} tensors, {} scalars", p.len(), p.num_scalars());
    let path = std::env::temp_dir().join("asu-example.ckpt");
    p.save(&path)?;
    let q = ModelParams::load(&path)?;
    println!("round trip identical: {}", q.to_bytes()? == bytes);
    println!("checksum {}", q.checksum());
    Ok(())
}
