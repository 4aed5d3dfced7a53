//! Sparse engine vs the exact full-step reference on the same seed:
//! token agreement, logit deviation, and the FLOP split.
//!
//! Run with: cargo run --example oracle_compare

use mdlm::engine::{generate, generate_oracle, synthetic_prompt, EngineConfig, ForceMode};
use mdlm::model::{init_weights, ModelConfig};
use mdlm::sampler::SamplerConfig;

fn main() -> mdlm::Result<()> {
    let config = ModelConfig::toy_default();
    let weights = init_weights(&config, 0)?;
    let prompt = synthetic_prompt(&config, 64, 7);
    let sampler = SamplerConfig {
        n_u: 2,
        ..SamplerConfig::default()
    };

    let oracle = generate_oracle(&weights, &prompt, 64, &sampler, true)?;

    for (name, engine_cfg) in [
        (
            "all-salient (must match exactly)",
            EngineConfig {
                force_mode: ForceMode::AllSalient,
                response_only: false,
                record_logits: true,
                ..EngineConfig::default()
            },
        ),
        (
            "tau 0.99 + response-only",
            EngineConfig {
                record_logits: true,
                ..EngineConfig::default()
            },
        ),
    ] {
        let run = generate(&weights, &prompt, 64, &engine_cfg, &sampler)?;
        let mut max_dev: f64 = 0.0;
        for (a, b) in oracle
            .report
            .step_logits
            .iter()
            .zip(&run.report.step_logits)
        {
            max_dev = max_dev.max(a.max_abs_diff(b));
        }
        println!("{name}:");
        println!("  tokens identical:    {}", run.tokens == oracle.tokens);
        println!("  max logit deviation: {max_dev:e}");
        println!(
            "  flops: {} vs oracle {} (ratio {:.4})",
            run.report.totals.total(),
            oracle.report.totals.total(),
            run.report.totals.total() as f64 / oracle.report.totals.total() as f64,
        );
    }
    Ok(())
}
