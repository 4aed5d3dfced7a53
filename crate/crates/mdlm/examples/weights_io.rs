//! Weight file round trip: seeded initialization, binary save, reload, and
//! byte-for-byte comparison.
//!
//! Run with: cargo run --example weights_io

use mdlm::model::{init_weights, ModelConfig, ModelWeights, ResidualMode};

fn main() -> mdlm::Result<()> {
    let config = ModelConfig {
        n_kv_heads: 2,
        residual_mode: ResidualMode::Residual,
        ..ModelConfig::toy_default()
    };
    let weights = init_weights(&config, 1234)?;

    let dir = std::env::temp_dir().join("mdlm_weights_io");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("toy.dylm");
    weights.save(&path)?;
    let size = std::fs::metadata(&path)?.len();
    println!("saved {} ({} bytes)", path.display(), size);

    let loaded = ModelWeights::load(&path)?;
    println!("reloaded config: {:?}", loaded.config);
    println!("weights equal after round trip: {}", loaded == weights);

    let mut a = Vec::new();
    let mut b = Vec::new();
    weights.write_to(&mut a)?;
    loaded.write_to(&mut b)?;
    println!("serializations byte-identical: {}", a == b);
    Ok(())
}
