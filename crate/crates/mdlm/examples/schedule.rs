//! The step scheduler: warmup full steps, then sparse steps whose input
//! alternates between the full sequence and the response rows alone.
//!
//! Run with: cargo run --example schedule

use mdlm::engine::{generate, synthetic_prompt, EngineConfig};
use mdlm::model::{init_weights, ModelConfig};
use mdlm::sampler::SamplerConfig;

fn main() -> mdlm::Result<()> {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        n_kv_heads: 4,
        d_ff: 64,
        vocab_size: 64,
        mask_token_id: 63,
        rope_theta: 10000.0,
        residual_mode: mdlm::ResidualMode::Replace,
    };
    let weights = init_weights(&config, 0)?;
    let prompt = synthetic_prompt(&config, 8, 1);
    let sampler = SamplerConfig {
        block_size: 16,
        ..SamplerConfig::default()
    };

    for (label, engine_cfg) in [
        ("default (warmup 4, period 4)", EngineConfig::default()),
        (
            "response-only disabled",
            EngineConfig {
                response_only: false,
                ..EngineConfig::default()
            },
        ),
        (
            "warmup 2, period 3",
            EngineConfig {
                t_full: 2,
                full_input_period: 3,
                ..EngineConfig::default()
            },
        ),
    ] {
        let run = generate(&weights, &prompt, 16, &engine_cfg, &sampler)?;
        let schedule: String = run
            .report
            .steps
            .iter()
            .map(|s| if s.mode.full_input() { 'F' } else { 'R' })
            .collect();
        println!("{label:<30} {schedule}");
    }
    println!("F = full-sequence input, R = response-only input");
    Ok(())
}
