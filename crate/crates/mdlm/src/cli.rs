//! Command-line front end: generation runs, oracle comparisons, threshold
//! sweeps, verification, and the analytic cost model, all emitting the CSV
//! reports described in the module docs.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 usage/config/IO error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    self, check_alignment_bound, check_delta_decomposition, check_scale_invariance,
    cost_model_avg_tokens, verify_equivalence, CostModelInput, CostModelRow, RunReport,
    DEFAULT_HIST_BINS,
};
use crate::cache::dump_matrix_csv;
use crate::engine::{self, EngineConfig, ForceMode};
use crate::error::Result;
use crate::model::{init_weights, ModelConfig, ModelWeights, ResidualMode};
use crate::sampler::{Confidence, SamplerConfig};

/// Mixed into `--seed` for synthetic prompt draws so prompts and weights
/// come from distinct streams.
const PROMPT_SEED_SALT: u64 = 0x7072_6F6D_7074;

#[derive(Debug, Parser)]
#[command(
    name = "mdlm",
    version,
    about = "Masked-diffusion LM engine with saliency-aware sparse decoding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one generation session and write token + metric reports.
    Generate(GenerateArgs),
    /// Run the exact oracle and the sparse engine on the same seed and compare.
    Compare(CompareArgs),
    /// Sweep the salient threshold and report fractions and FLOP ratios.
    SweepTau(SweepTauArgs),
    /// Run the mathematical identity checks and the oracle-equivalence harness.
    Verify(VerifyArgs),
    /// Evaluate the analytic computed-tokens cost model.
    CostModel(CostModelArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ResidualModeArg {
    Replace,
    Residual,
}

impl From<ResidualModeArg> for ResidualMode {
    fn from(v: ResidualModeArg) -> Self {
        match v {
            ResidualModeArg::Replace => ResidualMode::Replace,
            ResidualModeArg::Residual => ResidualMode::Residual,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ForceModeArg {
    Normal,
    AllSalient,
    NoneSalient,
}

impl From<ForceModeArg> for ForceMode {
    fn from(v: ForceModeArg) -> Self {
        match v {
            ForceModeArg::Normal => ForceMode::Normal,
            ForceModeArg::AllSalient => ForceMode::AllSalient,
            ForceModeArg::NoneSalient => ForceMode::NoneSalient,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 8)]
    pub n_kv_heads: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    /// Defaults to the last vocabulary id.
    #[arg(long)]
    pub mask_token_id: Option<u32>,
    #[arg(long, default_value_t = 10000.0)]
    pub rope_theta: f64,
    #[arg(long, value_enum, default_value_t = ResidualModeArg::Replace)]
    pub residual_mode: ResidualModeArg,
    /// Load weights from file instead of seeding them; excludes the shape flags.
    #[arg(
        long,
        conflicts_with_all = [
            "n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff",
            "vocab_size", "mask_token_id", "rope_theta", "residual_mode",
        ]
    )]
    pub weights: Option<PathBuf>,
}

impl ModelArgs {
    fn build(&self, seed: u64) -> Result<ModelWeights> {
        match &self.weights {
            Some(path) => ModelWeights::load(path),
            None => {
                let config = ModelConfig {
                    n_layers: self.n_layers,
                    d_model: self.d_model,
                    n_heads: self.n_heads,
                    n_kv_heads: self.n_kv_heads,
                    d_ff: self.d_ff,
                    vocab_size: self.vocab_size,
                    mask_token_id: self
                        .mask_token_id
                        .unwrap_or(self.vocab_size.saturating_sub(1) as u32),
                    rope_theta: self.rope_theta,
                    residual_mode: self.residual_mode.into(),
                };
                init_weights(&config, seed)
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct EngineArgs {
    /// Salient threshold on temporal cosine similarity.
    #[arg(long, default_value_t = 0.99)]
    pub tau: f64,
    /// Exact warmup steps before the sparse phase.
    #[arg(long, default_value_t = 4)]
    pub t_full: usize,
    /// Present the full sequence every N sparse steps.
    #[arg(long, default_value_t = 4)]
    pub full_input_period: usize,
    /// Feed the full sequence at every step instead of response-only inputs.
    #[arg(long)]
    pub no_response_only: bool,
    #[arg(long, value_enum, default_value_t = ForceModeArg::Normal)]
    pub force_mode: ForceModeArg,
    /// Select with `s <= tau` instead of strict `s < tau`.
    #[arg(long)]
    pub inclusive_tau: bool,
}

impl EngineArgs {
    fn build(&self, record_logits: bool) -> EngineConfig {
        EngineConfig {
            tau: self.tau,
            t_full: self.t_full,
            full_input_period: self.full_input_period,
            response_only: !self.no_response_only,
            force_mode: self.force_mode.into(),
            inclusive_tau: self.inclusive_tau,
            record_logits,
            fault_inject_scatter: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// Tokens unmasked per denoising step.
    #[arg(long, default_value_t = 1)]
    pub n_u: usize,
    #[arg(long, default_value_t = 32)]
    pub block_size: usize,
    /// Disable semi-autoregressive block ordering.
    #[arg(long)]
    pub no_semi_ar: bool,
}

impl SamplerArgs {
    fn build(&self) -> SamplerConfig {
        SamplerConfig {
            n_u: self.n_u,
            block_size: self.block_size,
            semi_ar: !self.no_semi_ar,
            confidence: Confidence::MaxProb,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Synthetic prompt length (ignored when --prompt-file is given).
    #[arg(long, default_value_t = 64)]
    pub l_p: usize,
    /// Optional whitespace-separated token-id file used as the prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub l_r: usize,
}

impl RunArgs {
    fn prompt(&self, config: &ModelConfig) -> Result<Vec<u32>> {
        match &self.prompt_file {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                let mut tokens = Vec::new();
                for item in text.split_whitespace() {
                    let id: u32 = item.parse().map_err(|_| {
                        crate::error::Error::InvalidStepInput(format!(
                            "prompt file holds a non-integer token {item:?}"
                        ))
                    })?;
                    tokens.push(id);
                }
                Ok(tokens)
            }
            None => Ok(engine::synthetic_prompt(
                config,
                self.l_p,
                self.seed ^ PROMPT_SEED_SALT,
            )),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, env = "MDLM_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
    /// Also dump every cache matrix to CSV for trace diffing.
    #[arg(long)]
    pub dump_caches: bool,
    /// Run the exact full-step reference instead of the sparse engine.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepTauArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated threshold values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub taus: Vec<f64>,
    #[arg(long, env = "MDLM_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trials for the scale-invariance and alignment checks.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Prompt/response lengths for the equivalence runs.
    #[arg(long, default_value_t = 32)]
    pub l_p: usize,
    #[arg(long, default_value_t = 32)]
    pub l_r: usize,
    /// Corrupt a cache scatter to prove the harness detects it.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostPolicy {
    /// Prompt and decoded blocks cached; 144 computed tokens per step.
    Prefix,
    /// Suffix cached as well; 32 computed tokens per step.
    Dual,
}

impl CostPolicy {
    fn name(&self) -> &'static str {
        match self {
            CostPolicy::Prefix => "prefix",
            CostPolicy::Dual => "dual",
        }
    }

    fn default_tokens_per_step(&self) -> usize {
        match self {
            CostPolicy::Prefix => 144,
            CostPolicy::Dual => 32,
        }
    }
}

#[derive(Debug, Args)]
pub struct CostModelArgs {
    #[arg(long, default_value_t = 1024)]
    pub l_p: usize,
    #[arg(long, default_value_t = 256)]
    pub l_r: usize,
    #[arg(long, default_value_t = 32)]
    pub block_size: usize,
    #[arg(long = "n-u-list", value_delimiter = ',', default_value = "1")]
    pub n_u_list: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "prefix,dual")]
    pub policies: Vec<CostPolicy>,
    /// Override the per-step computed tokens for every policy.
    #[arg(long)]
    pub tokens_per_step: Option<usize>,
    #[arg(long, default_value_t = 1280)]
    pub tokens_per_refresh: usize,
    #[arg(long, env = "MDLM_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> ExitCode {
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::SweepTau(args) => cmd_sweep_tau(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::CostModel(args) => cmd_cost_model(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn write_reports(out_dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut tokens = String::new();
    for t in &report.tokens {
        tokens.push_str(&t.to_string());
        tokens.push('\n');
    }
    fs::write(out_dir.join("tokens.txt"), tokens)?;
    write_file(&out_dir.join("step_metrics.csv"), |w| {
        analysis::write_step_metrics_csv(report, w)
    })?;
    write_file(&out_dir.join("salient_counts.csv"), |w| {
        analysis::write_salient_counts_csv(report, w)
    })?;
    write_file(&out_dir.join("similarity_hist.csv"), |w| {
        analysis::write_similarity_hist_csv(report, DEFAULT_HIST_BINS, w)
    })?;
    fs::write(out_dir.join("run_report.json"), report.to_json())?;
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<u8> {
    let weights = args.model.build(args.run.seed)?;
    let prompt = args.run.prompt(&weights.config)?;
    let engine_cfg = if args.oracle {
        EngineConfig {
            t_full: usize::MAX,
            response_only: false,
            ..args.engine.build(false)
        }
    } else {
        args.engine.build(false)
    };
    let sampler_cfg = args.sampler.build();
    let (result, caches) =
        engine::generate_session(&weights, &prompt, args.run.l_r, &engine_cfg, &sampler_cfg)?;
    let mut report = result.report;
    report.seed = Some(args.run.seed);

    write_reports(&args.out_dir, &report)?;
    if args.dump_caches {
        for l in 0..caches.n_layers() {
            let layer = caches.layer(l);
            for (name, matrix) in [
                ("k", &layer.k),
                ("v", &layer.v),
                ("c", &layer.c),
                ("ffn_out", &layer.ffn_out),
            ] {
                write_file(
                    &args.out_dir.join(format!("cache_layer{l}_{name}.csv")),
                    |w| dump_matrix_csv(matrix, w),
                )?;
            }
        }
    }

    println!(
        "generated {} tokens in {} steps ({} total MFLOPs, avg salient fraction {:.4})",
        result.tokens.len(),
        report.steps.len(),
        report.totals.total() / 1_000_000,
        report.avg_salient_fraction(),
    );
    println!("reports written to {}", args.out_dir.display());
    Ok(0)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<u8> {
    let weights = args.model.build(args.run.seed)?;
    let prompt = args.run.prompt(&weights.config)?;
    let sampler_cfg = args.sampler.build();

    let oracle = engine::generate_oracle(&weights, &prompt, args.run.l_r, &sampler_cfg, true)?;
    let engine_cfg = args.engine.build(true);
    let sparse = engine::generate(&weights, &prompt, args.run.l_r, &engine_cfg, &sampler_cfg)?;

    let mut max_dev: f64 = 0.0;
    for (a, b) in oracle
        .report
        .step_logits
        .iter()
        .zip(&sparse.report.step_logits)
    {
        max_dev = max_dev.max(a.max_abs_diff(b));
    }
    let oracle_flops = oracle.report.totals.total();
    let sparse_flops = sparse.report.totals.total();
    let identical = oracle.tokens == sparse.tokens;

    println!("metric,value");
    println!("tokens_identical,{identical}");
    println!("max_logit_deviation,{max_dev:e}");
    println!("oracle_flops,{oracle_flops}");
    println!("engine_flops,{sparse_flops}");
    println!("flop_ratio,{}", sparse_flops as f64 / oracle_flops as f64);
    Ok(0)
}

pub fn cmd_sweep_tau(args: &SweepTauArgs) -> Result<u8> {
    let weights = args.model.build(args.run.seed)?;
    let prompt = args.run.prompt(&weights.config)?;
    let sampler_cfg = args.sampler.build();
    let oracle = engine::generate_oracle(&weights, &prompt, args.run.l_r, &sampler_cfg, false)?;
    let oracle_flops = oracle.report.totals.total() as f64;

    let mut taus = args.taus.clone();
    taus.sort_by(f64::total_cmp);

    fs::create_dir_all(&args.out_dir)?;
    let mut rows = String::from("tau,avg_salient_fraction,flop_ratio,tokens_match_oracle\n");
    for &tau in &taus {
        let mut engine_cfg = args.engine.build(false);
        engine_cfg.tau = tau;
        let run = engine::generate(&weights, &prompt, args.run.l_r, &engine_cfg, &sampler_cfg)?;
        let fraction = run.report.avg_salient_fraction();
        let ratio = run.report.totals.total() as f64 / oracle_flops;
        let matches = run.tokens == oracle.tokens;
        rows.push_str(&format!("{tau},{fraction},{ratio},{matches}\n"));
    }
    fs::write(args.out_dir.join("tau_sweep.csv"), &rows)?;
    print!("{rows}");
    Ok(0)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    let mut all_pass = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("{}: {name} ({detail})", if pass { "PASS" } else { "FAIL" });
        all_pass &= pass;
    };

    let mut max_err: f64 = 0.0;
    for i in 0..100 {
        max_err = max_err.max(check_delta_decomposition(8, 8, 8, args.seed ^ i));
    }
    check(
        "context-delta decomposition",
        max_err < 1e-10,
        format!("max_err={max_err:e} over 100 instances"),
    );

    let dev = check_scale_invariance(32, args.trials, args.seed.wrapping_add(1));
    check(
        "scale invariance of projected norm",
        dev < 1e-9,
        format!("max_dev={dev:e} over {} trials", args.trials),
    );

    let bound = check_alignment_bound(16, args.trials, args.seed.wrapping_add(2));
    check(
        "unit-distance identity",
        bound.max_exact_error < 1e-10,
        format!(
            "max_err={:e} over {} trials",
            bound.max_exact_error, bound.trials
        ),
    );
    println!(
        "REPORT: alignment bound (not gated): violation_rate={:.4}, max_ratio={:.4}",
        bound.violation_rate, bound.max_ratio
    );

    // Keep at least twice as many steps as the warmup so the sparse path
    // really runs, while larger responses stay within a few seconds.
    let sampler = SamplerConfig {
        n_u: (args.l_r / 16).max(1),
        block_size: 16.min(args.l_r.max(1)),
        semi_ar: true,
        confidence: Confidence::MaxProb,
    };
    for residual_mode in [ResidualMode::Replace, ResidualMode::Residual] {
        for n_kv_heads in [8usize, 2] {
            let config = ModelConfig {
                n_kv_heads,
                residual_mode,
                ..ModelConfig::toy_default()
            };
            let report = if args.inject_fault {
                verify_equivalence_faulted(&config, args.seed, args.l_p, args.l_r, &sampler)?
            } else {
                verify_equivalence(&config, args.seed, args.l_p, args.l_r, &sampler)?
            };
            check(
                &format!(
                    "oracle equivalence [{:?}, kv_heads={}]",
                    residual_mode, n_kv_heads
                ),
                report.passed(),
                format!(
                    "tokens_identical={}, max_logit_dev={:e}",
                    report.tokens_identical, report.max_logit_deviation
                ),
            );
        }
    }

    Ok(if all_pass { 0 } else { 1 })
}

/// Equivalence run with the scatter fault injected into the sparse side.
fn verify_equivalence_faulted(
    config: &ModelConfig,
    seed: u64,
    l_p: usize,
    l_r: usize,
    sampler: &SamplerConfig,
) -> Result<analysis::EquivalenceReport> {
    let weights = init_weights(config, seed)?;
    let prompt = engine::synthetic_prompt(config, l_p, seed);
    let oracle = engine::generate_oracle(&weights, &prompt, l_r, sampler, true)?;
    let engine_cfg = EngineConfig {
        force_mode: ForceMode::AllSalient,
        response_only: false,
        record_logits: true,
        fault_inject_scatter: true,
        ..EngineConfig::default()
    };
    let sparse = engine::generate(&weights, &prompt, l_r, &engine_cfg, sampler)?;
    let mut max_dev: f64 = 0.0;
    for (a, b) in oracle
        .report
        .step_logits
        .iter()
        .zip(&sparse.report.step_logits)
    {
        max_dev = max_dev.max(a.max_abs_diff(b));
    }
    Ok(analysis::EquivalenceReport {
        tokens_identical: oracle.tokens == sparse.tokens,
        max_logit_deviation: max_dev,
        oracle_flops: oracle.report.totals.total(),
        sparse_flops: sparse.report.totals.total(),
    })
}

pub fn cmd_cost_model(args: &CostModelArgs) -> Result<u8> {
    let mut rows = Vec::new();
    for policy in &args.policies {
        for &n_u in &args.n_u_list {
            let input = CostModelInput {
                l_p: args.l_p,
                l_r: args.l_r,
                block_size: args.block_size,
                n_u,
                tokens_per_step: args
                    .tokens_per_step
                    .unwrap_or_else(|| policy.default_tokens_per_step()),
                tokens_per_refresh: args.tokens_per_refresh,
            };
            let avg_tokens = cost_model_avg_tokens(&input)?;
            rows.push(CostModelRow {
                policy: policy.name().to_string(),
                input,
                avg_tokens,
            });
        }
    }
    fs::create_dir_all(&args.out_dir)?;
    write_file(&args.out_dir.join("cost_model.csv"), |w| {
        analysis::write_cost_model_csv(&rows, w)
    })?;
    let mut stdout = Vec::new();
    analysis::write_cost_model_csv(&rows, &mut stdout)?;
    std::io::stdout().write_all(&stdout)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn weights_flag_conflicts_with_shape_flags() {
        let err =
            Cli::try_parse_from(["mdlm", "generate", "--weights", "w.bin", "--d-model", "64"])
                .unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::ArgumentConflict);
    }

    #[test]
    fn cost_model_defaults_reproduce_reference_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let args = CostModelArgs {
            l_p: 1024,
            l_r: 256,
            block_size: 32,
            n_u_list: vec![1],
            policies: vec![CostPolicy::Prefix, CostPolicy::Dual],
            tokens_per_step: None,
            tokens_per_refresh: 1280,
            out_dir: dir.path().to_path_buf(),
        };
        assert_eq!(cmd_cost_model(&args).unwrap(), 0);
        let csv = std::fs::read_to_string(dir.path().join("cost_model.csv")).unwrap();
        assert!(csv.contains("prefix,1024,256,32,1,144,1280,179.5"));
        assert!(csv.contains("dual,1024,256,32,1,32,1280,71"));
    }

    #[test]
    fn cost_model_divisibility_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let args = CostModelArgs {
            l_p: 1024,
            l_r: 256,
            block_size: 32,
            n_u_list: vec![5],
            policies: vec![CostPolicy::Dual],
            tokens_per_step: None,
            tokens_per_refresh: 1280,
            out_dir: dir.path().to_path_buf(),
        };
        assert!(cmd_cost_model(&args).is_err());
    }
}
