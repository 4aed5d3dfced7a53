//! Analytic computed-tokens-per-step model for block-cached decoding with
//! periodic full refresh, across parallel decoding degrees.
//!
//! Run with: cargo run --example cost_model

use mdlm::analysis::{cost_model_avg_tokens, CostModelInput};

fn main() -> mdlm::Result<()> {
    println!("policy  n_u  tokens/step  tokens/refresh  avg computed tokens/step");
    for (policy, tokens_per_step) in [("prefix", 144), ("dual", 32)] {
        for n_u in [1, 2, 4, 8] {
            let input = CostModelInput {
                l_p: 1024,
                l_r: 256,
                block_size: 32,
                n_u,
                tokens_per_step,
                tokens_per_refresh: 1280,
            };
            let avg = cost_model_avg_tokens(&input)?;
            println!(
                "{policy:<7} {n_u:<4} {tokens_per_step:<12} {:<15} {avg}",
                input.tokens_per_refresh
            );
        }
    }
    println!();
    println!("refresh steps dominate as n_u grows: the refresh cost is amortized");
    println!("over B/n_u steps, so fewer steps per block raise the average.");
    Ok(())
}
