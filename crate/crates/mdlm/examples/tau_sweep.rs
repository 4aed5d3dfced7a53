//! Threshold sweep: how the salient fraction and the FLOP ratio move with
//! tau, against a fixed oracle run.
//!
//! Run with: cargo run --example tau_sweep

use mdlm::engine::{generate, generate_oracle, synthetic_prompt, EngineConfig};
use mdlm::model::{init_weights, ModelConfig};
use mdlm::sampler::SamplerConfig;

fn main() -> mdlm::Result<()> {
    let config = ModelConfig::toy_default();
    let weights = init_weights(&config, 0)?;
    let prompt = synthetic_prompt(&config, 32, 3);
    let sampler = SamplerConfig {
        n_u: 2,
        ..SamplerConfig::default()
    };

    let oracle = generate_oracle(&weights, &prompt, 32, &sampler, false)?;
    let oracle_flops = oracle.report.totals.total() as f64;

    println!("tau        salient_fraction  flop_ratio  tokens_match");
    for tau in [-2.0, 0.9, 0.99, 0.999, 0.999999, 2.0] {
        let engine_cfg = EngineConfig {
            tau,
            ..EngineConfig::default()
        };
        let run = generate(&weights, &prompt, 32, &engine_cfg, &sampler)?;
        println!(
            "{:<9}  {:<16.4}  {:<10.4}  {}",
            tau,
            run.report.avg_salient_fraction(),
            run.report.totals.total() as f64 / oracle_flops,
            run.tokens == oracle.tokens,
        );
    }
    Ok(())
}
