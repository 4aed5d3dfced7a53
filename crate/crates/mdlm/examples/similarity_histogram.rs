//! Distribution of temporal cosine similarity per layer: run an
//! instrumented session and print a compact histogram. Mass concentrates
//! near 1, which is what makes threshold-based selection effective.
//!
//! Run with: cargo run --example similarity_histogram

use mdlm::analysis::similarity_histogram;
use mdlm::engine::{generate, synthetic_prompt, EngineConfig};
use mdlm::model::{init_weights, ModelConfig};
use mdlm::sampler::SamplerConfig;

fn main() -> mdlm::Result<()> {
    let config = ModelConfig::toy_default();
    let weights = init_weights(&config, 0)?;
    let prompt = synthetic_prompt(&config, 32, 11);
    let engine_cfg = EngineConfig {
        tau: 0.999999, // recompute aggressively so drift keeps evolving
        ..EngineConfig::default()
    };
    let run = generate(
        &weights,
        &prompt,
        32,
        &engine_cfg,
        &SamplerConfig::default(),
    )?;

    // Ten coarse bins over [0.9, 1.0] plus the underflow bin below 0.9.
    for layer in 0..config.n_layers {
        let hist = similarity_histogram(&run.report, layer, 10)?;
        let total: usize = hist.iter().map(|b| b.count).sum();
        print!("layer {layer}: ");
        for bin in &hist {
            let share = if total == 0 {
                0.0
            } else {
                bin.count as f64 / total as f64
            };
            print!("{}", bar_char(share));
        }
        let top = hist.last().unwrap();
        println!(
            "  (top bin [{:.2}, {:.2}] holds {:.1}%)",
            top.lo,
            top.hi,
            100.0 * top.count as f64 / total.max(1) as f64
        );
    }
    println!("bins: [-1.0,0.9) then ten of width 0.01; each glyph is one bin");
    Ok(())
}

fn bar_char(share: f64) -> char {
    match (share * 8.0).ceil() as usize {
        0 => '.',
        1 => '\u{2581}',
        2 => '\u{2582}',
        3 => '\u{2583}',
        4 => '\u{2584}',
        5 => '\u{2585}',
        6 => '\u{2586}',
        7 => '\u{2587}',
        _ => '\u{2588}',
    }
}
