//! End-to-end generation session: seed a toy model, decode a response with
//! the sparse engine, and print per-step instrumentation.
//!
//! Run with: cargo run --example generate

use mdlm::engine::{generate, synthetic_prompt, EngineConfig};
use mdlm::model::{init_weights, ModelConfig};
use mdlm::sampler::SamplerConfig;

fn main() -> mdlm::Result<()> {
    let config = ModelConfig::toy_default();
    let weights = init_weights(&config, 0)?;
    let prompt = synthetic_prompt(&config, 32, 1);

    let engine_cfg = EngineConfig::default(); // tau 0.99, 4 warmup steps
    let sampler_cfg = SamplerConfig::default(); // n_u 1, semi-AR blocks of 32
    let result = generate(&weights, &prompt, 32, &engine_cfg, &sampler_cfg)?;

    println!(
        "decoded {} tokens: {:?}...",
        result.tokens.len(),
        &result.tokens[..8]
    );
    println!("step mode          decoded  salient/layer             MFLOPs");
    for step in &result.report.steps {
        let salient: Vec<usize> = step.layers.iter().map(|l| l.n_salient).collect();
        println!(
            "{:>4} {:<14} {:>6}  {:<24} {:>7.1}",
            step.step,
            step.mode.as_str(),
            step.decoded,
            format!("{salient:?}"),
            step.total_flops().total() as f64 / 1e6,
        );
    }
    println!(
        "total: {} MFLOPs, avg salient fraction {:.4}, {:.2}s",
        result.report.totals.total() / 1_000_000,
        result.report.avg_salient_fraction(),
        result.report.duration_secs,
    );
    Ok(())
}
