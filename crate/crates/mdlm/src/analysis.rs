//! Instrumentation and verification: FLOP accounting, per-step metrics, the
//! analytic computed-tokens cost model, checks for the decomposition and
//! normalization identities, and CSV report emission.

use std::io::Write;

use serde::Serialize;

use crate::cache::SaliencyIndex;
use crate::engine::{self, EngineConfig, ForceMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{
    condition_number, cosine_similarity_rows, matmul, rms_norm_with_eps, rng_normal_fill, Matrix,
    Rng,
};
use crate::sampler::SamplerConfig;

/// Matmul FLOPs by category; one multiply-add counts as 2.
///
/// Norms, softmax exponentials and similarity computations are excluded:
/// cost is attributed to the dense products the way runtime breakdowns
/// attribute it to attention vs FFN.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub attn_scores: u64,
    pub attn_context: u64,
    pub ffn: u64,
    pub proj: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.attn_scores + self.attn_context + self.ffn + self.proj
    }
}

impl std::ops::AddAssign for FlopCounts {
    fn add_assign(&mut self, rhs: FlopCounts) {
        self.attn_scores += rhs.attn_scores;
        self.attn_context += rhs.attn_context;
        self.ffn += rhs.ffn;
        self.proj += rhs.proj;
    }
}

/// What a step computed and what it saw as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Warmup step: exact computation over the full sequence.
    Full,
    /// Sparse step with the full sequence as input.
    SparseFull,
    /// Sparse step seeing only the response tokens.
    SparseResponse,
}

impl StepMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepMode::Full => "full",
            StepMode::SparseFull => "sparse_full",
            StepMode::SparseResponse => "sparse_response",
        }
    }

    pub fn is_sparse(&self) -> bool {
        !matches!(self, StepMode::Full)
    }

    /// Whether the model input covered the full sequence.
    pub fn full_input(&self) -> bool {
        !matches!(self, StepMode::SparseResponse)
    }
}

/// Per-layer instrumentation for one step. `sims` holds the raw temporal
/// cosine similarities of the input rows (sparse steps only); the summary
/// fields survive serialization, the raw values stay in memory.
#[derive(Debug, Clone, Serialize)]
pub struct LayerMetrics {
    pub n_salient: usize,
    pub flops: FlopCounts,
    pub sim_min: Option<f64>,
    pub sim_mean: Option<f64>,
    /// Fraction of rows with similarity >= 0.99.
    pub sim_frac_stable: Option<f64>,
    #[serde(skip)]
    pub sims: Vec<f64>,
}

impl LayerMetrics {
    pub fn from_sims(n_salient: usize, flops: FlopCounts, sims: Vec<f64>) -> Self {
        let (min, mean, frac) = if sims.is_empty() {
            (None, None, None)
        } else {
            let min = sims.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            let stable = sims.iter().filter(|s| **s >= 0.99).count();
            (
                Some(min),
                Some(mean),
                Some(stable as f64 / sims.len() as f64),
            )
        };
        LayerMetrics {
            n_salient,
            flops,
            sim_min: min,
            sim_mean: mean,
            sim_frac_stable: frac,
            sims,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: StepMode,
    pub input_len: usize,
    /// Tokens unmasked by this step.
    pub decoded: usize,
    pub layers: Vec<LayerMetrics>,
    /// Final-projection FLOPs, not attributable to any layer.
    pub lm_head: FlopCounts,
}

impl StepMetrics {
    pub fn total_flops(&self) -> FlopCounts {
        let mut total = self.lm_head;
        for layer in &self.layers {
            total += layer.flops;
        }
        total
    }
}

pub const REPORT_VERSION: u32 = 1;

/// Full record of one generation session. Serializable as JSON; all position
/// indices in this report and in the CSV files are 0-based.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: u32,
    /// Index convention for every position field and CSV column.
    pub index_base: u32,
    pub model: ModelConfig,
    pub engine: EngineConfig,
    pub sampler: SamplerConfig,
    pub seed: Option<u64>,
    pub l_p: usize,
    pub l_r: usize,
    pub steps: Vec<StepMetrics>,
    pub totals: FlopCounts,
    pub tokens: Vec<u32>,
    pub duration_secs: f64,
    /// Response-row logits per step, kept only when the engine was asked to
    /// record them.
    #[serde(skip)]
    pub step_logits: Vec<Matrix>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Mean salient fraction over all sparse steps and layers.
    pub fn avg_salient_fraction(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for step in self.steps.iter().filter(|s| s.mode.is_sparse()) {
            for layer in &step.layers {
                num += layer.n_salient as f64 / step.input_len as f64;
                den += 1.0;
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

// ---------------------------------------------------------------------------
// Analytic cost model
// ---------------------------------------------------------------------------

/// Inputs to the computed-tokens-per-step model of block-cached decoding
/// with periodic full refresh.
#[derive(Debug, Clone, Serialize)]
pub struct CostModelInput {
    pub l_p: usize,
    pub l_r: usize,
    pub block_size: usize,
    pub n_u: usize,
    pub tokens_per_step: usize,
    pub tokens_per_refresh: usize,
}

/// Average computed tokens per step over one block:
/// `(tokens_per_step * (B/n_u - 1) + tokens_per_refresh) / (B/n_u)`.
pub fn cost_model_avg_tokens(input: &CostModelInput) -> Result<f64> {
    if input.n_u == 0 || !input.block_size.is_multiple_of(input.n_u) {
        return Err(Error::Divisibility {
            block: input.block_size,
            n_u: input.n_u,
        });
    }
    let steps_per_block = (input.block_size / input.n_u) as f64;
    Ok(
        (input.tokens_per_step as f64 * (steps_per_block - 1.0) + input.tokens_per_refresh as f64)
            / steps_per_block,
    )
}

// ---------------------------------------------------------------------------
// Identity checks
// ---------------------------------------------------------------------------

/// Verifies the context-delta expansion
/// `C_t - C_{t-1} = (S_{t-1} + dS) dV + dS V_{t-1}` on one random instance.
/// Returns the maximum absolute discrepancy between the two routes.
pub fn check_delta_decomposition(rows: usize, inner: usize, d: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let s_prev = rng_normal_fill(&mut rng, rows, inner, 1.0);
    let ds = rng_normal_fill(&mut rng, rows, inner, 1.0);
    let v_prev = rng_normal_fill(&mut rng, inner, d, 1.0);
    let dv = rng_normal_fill(&mut rng, inner, d, 1.0);

    let s_new = s_prev.add(&ds).expect("same shape");
    let v_new = v_prev.add(&dv).expect("same shape");
    let direct = matmul(&s_new, &v_new)
        .unwrap()
        .sub(&matmul(&s_prev, &v_prev).unwrap())
        .unwrap();
    let decomposed = matmul(&s_new, &dv)
        .unwrap()
        .add(&matmul(&ds, &v_prev).unwrap())
        .unwrap();
    direct.max_abs_diff(&decomposed)
}

/// Max deviation of `RMSNorm((alpha C) W) - RMSNorm(C W)` (epsilon 0, unit
/// gain) over random `(C, W, alpha)` trials with `alpha` in (0, 100].
pub fn check_scale_invariance(d: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let gain = vec![1.0; d];
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let c = rng_normal_fill(&mut rng, 1, d, 1.0);
        let w = rng_normal_fill(&mut rng, d, d, 1.0);
        let alpha = rng.next_uniform() * 100.0;
        let base = rms_norm_with_eps(&matmul(&c, &w).unwrap(), &gain, 0.0).unwrap();
        let scaled = rms_norm_with_eps(&matmul(&c.scale(alpha), &w).unwrap(), &gain, 0.0).unwrap();
        worst = worst.max(scaled.max_abs_diff(&base));
    }
    worst
}

/// Result of the directional-alignment bound measurement.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentBoundReport {
    /// Max error of the exact identity `||u - v|| = sqrt(2(1 - s))` on unit vectors.
    pub max_exact_error: f64,
    /// Fraction of trials where `delta > kappa * sqrt(2(1 - s))`.
    pub violation_rate: f64,
    /// Max observed `delta / (kappa * sqrt(2(1 - s)))`.
    pub max_ratio: f64,
    pub trials: usize,
}

/// Checks the exact unit-vector distance identity, and measures (without
/// asserting) how the normalized-projection error compares to
/// `kappa(W) * sqrt(2(1 - s))`.
///
/// The bound is reported rather than enforced: the proof bounds unit-norm
/// outputs while the measured delta uses RMSNorm, which differ by a
/// dimension-dependent factor (exactly `sqrt(d)` when `W` is the identity).
pub fn check_alignment_bound(d: usize, trials: usize, seed: u64) -> AlignmentBoundReport {
    let mut rng = Rng::new(seed);
    let gain = vec![1.0; d];
    let mut max_exact_error: f64 = 0.0;
    let mut violations = 0usize;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..trials {
        let u = unit_row(&mut rng, d);
        let v = unit_row(&mut rng, d);
        let s = cosine_similarity_rows(&u, &v).unwrap()[0];
        let dist = u
            .sub(&v)
            .unwrap()
            .row(0)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let predicted = (2.0 * (1.0 - s)).max(0.0).sqrt();
        max_exact_error = max_exact_error.max((dist - predicted).abs());

        let w = rng_normal_fill(&mut rng, d, d, 1.0);
        let kappa = condition_number(&w).unwrap();
        let nu = rms_norm_with_eps(&matmul(&u, &w).unwrap(), &gain, 0.0).unwrap();
        let nv = rms_norm_with_eps(&matmul(&v, &w).unwrap(), &gain, 0.0).unwrap();
        let delta = nu
            .sub(&nv)
            .unwrap()
            .row(0)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let bound = kappa * predicted;
        if delta > bound {
            violations += 1;
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(delta / bound);
        }
    }
    AlignmentBoundReport {
        max_exact_error,
        violation_rate: violations as f64 / trials.max(1) as f64,
        max_ratio,
        trials,
    }
}

fn unit_row(rng: &mut Rng, d: usize) -> Matrix {
    loop {
        let mut m = rng_normal_fill(rng, 1, d, 1.0);
        let norm = m.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for v in m.data_mut() {
                *v /= norm;
            }
            return m;
        }
    }
}

// ---------------------------------------------------------------------------
// Oracle equivalence harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub tokens_identical: bool,
    pub max_logit_deviation: f64,
    pub oracle_flops: u64,
    pub sparse_flops: u64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.tokens_identical && self.max_logit_deviation < 1e-9
    }
}

/// Runs the same seeded session twice: once with exact full steps every
/// step, once through the sparse path forced all-salient with full-sequence
/// input. Passes when the decoded tokens match and logits agree to 1e-9.
pub fn verify_equivalence(
    config: &ModelConfig,
    seed: u64,
    l_p: usize,
    l_r: usize,
    sampler: &SamplerConfig,
) -> Result<EquivalenceReport> {
    let weights = crate::model::init_weights(config, seed)?;
    let prompt = engine::synthetic_prompt(config, l_p, seed);

    let oracle_cfg = EngineConfig {
        t_full: usize::MAX,
        response_only: false,
        record_logits: true,
        ..EngineConfig::default()
    };
    let oracle = engine::generate(&weights, &prompt, l_r, &oracle_cfg, sampler)?;

    let sparse_cfg = EngineConfig {
        force_mode: ForceMode::AllSalient,
        response_only: false,
        record_logits: true,
        ..EngineConfig::default()
    };
    let sparse = engine::generate(&weights, &prompt, l_r, &sparse_cfg, sampler)?;

    let mut max_dev: f64 = 0.0;
    for (a, b) in oracle
        .report
        .step_logits
        .iter()
        .zip(&sparse.report.step_logits)
    {
        max_dev = max_dev.max(a.max_abs_diff(b));
    }
    Ok(EquivalenceReport {
        tokens_identical: oracle.tokens == sparse.tokens,
        max_logit_deviation: max_dev,
        oracle_flops: oracle.report.totals.total(),
        sparse_flops: sparse.report.totals.total(),
    })
}

// ---------------------------------------------------------------------------
// Histograms and per-layer summaries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Default fine-bin count over [0.9, 1.0]; similarity mass concentrates
/// near 1, so the rest of [-1, 0.9) is a single underflow bin.
pub const DEFAULT_HIST_BINS: usize = 50;

/// Bins one layer's similarity values over all sparse steps: an underflow
/// bin covering [-1, 0.9) followed by `bins` uniform bins over [0.9, 1.0].
pub fn similarity_histogram(
    run: &RunReport,
    layer: usize,
    bins: usize,
) -> Result<Vec<HistogramBin>> {
    let n_layers = run.model.n_layers;
    if layer >= n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers });
    }
    let bins = bins.max(1);
    let width = 0.1 / bins as f64;
    let mut out = Vec::with_capacity(bins + 1);
    out.push(HistogramBin {
        lo: -1.0,
        hi: 0.9,
        count: 0,
    });
    for i in 0..bins {
        out.push(HistogramBin {
            lo: 0.9 + i as f64 * width,
            hi: 0.9 + (i + 1) as f64 * width,
            count: 0,
        });
    }
    for step in run.steps.iter().filter(|s| s.mode.is_sparse()) {
        for &s in &step.layers[layer].sims {
            let idx = if s < 0.9 {
                0
            } else {
                (1 + ((s - 0.9) / width) as usize).min(bins)
            };
            out[idx].count += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSalientStats {
    pub layer: usize,
    pub avg_salient: f64,
    pub min_salient: usize,
    pub max_salient: usize,
}

/// Per-layer salient-count statistics across sparse steps.
pub fn salient_counts(run: &RunReport) -> Vec<LayerSalientStats> {
    let n_layers = run.model.n_layers;
    let mut out = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let counts: Vec<usize> = run
            .steps
            .iter()
            .filter(|s| s.mode.is_sparse())
            .map(|s| s.layers[layer].n_salient)
            .collect();
        if counts.is_empty() {
            out.push(LayerSalientStats {
                layer,
                avg_salient: 0.0,
                min_salient: 0,
                max_salient: 0,
            });
        } else {
            out.push(LayerSalientStats {
                layer,
                avg_salient: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
                min_salient: *counts.iter().min().unwrap(),
                max_salient: *counts.iter().max().unwrap(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CSV emission (0-based indices, comma separators, header row)
// ---------------------------------------------------------------------------

pub fn write_salient_counts_csv(run: &RunReport, w: &mut impl Write) -> Result<()> {
    writeln!(w, "layer,avg_salient,min_salient,max_salient")?;
    for row in salient_counts(run) {
        writeln!(
            w,
            "{},{},{},{}",
            row.layer, row.avg_salient, row.min_salient, row.max_salient
        )?;
    }
    Ok(())
}

pub fn write_step_metrics_csv(run: &RunReport, w: &mut impl Write) -> Result<()> {
    writeln!(
        w,
        "step,mode,layer,n_salient,flops_attn_scores,flops_attn_context,flops_ffn,flops_proj"
    )?;
    for step in &run.steps {
        for (layer, lm) in step.layers.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                step.step,
                step.mode.as_str(),
                layer,
                lm.n_salient,
                lm.flops.attn_scores,
                lm.flops.attn_context,
                lm.flops.ffn,
                lm.flops.proj
            )?;
        }
    }
    Ok(())
}

pub fn write_similarity_hist_csv(run: &RunReport, bins: usize, w: &mut impl Write) -> Result<()> {
    writeln!(w, "layer,bin_lo,bin_hi,count")?;
    for layer in 0..run.model.n_layers {
        for bin in similarity_histogram(run, layer, bins)? {
            writeln!(w, "{},{},{},{}", layer, bin.lo, bin.hi, bin.count)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CostModelRow {
    pub policy: String,
    pub input: CostModelInput,
    pub avg_tokens: f64,
}

pub fn write_cost_model_csv(rows: &[CostModelRow], w: &mut impl Write) -> Result<()> {
    writeln!(
        w,
        "policy,L_P,L_R,B,n_u,tokens_per_step,tokens_per_refresh,avg_tokens"
    )?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.policy,
            row.input.l_p,
            row.input.l_r,
            row.input.block_size,
            row.input.n_u,
            row.input.tokens_per_step,
            row.input.tokens_per_refresh,
            row.avg_tokens
        )?;
    }
    Ok(())
}

/// Convenience: salient-set monotonicity in the threshold, used by property
/// tests and the sweep command. Inputs must describe the same state.
pub fn selection_is_subset(
    c_new: &Matrix,
    c_cached: &Matrix,
    tau_lo: f64,
    tau_hi: f64,
) -> Result<bool> {
    let lo = engine::select_salient(c_new, c_cached, tau_lo, 0)?;
    let hi = engine::select_salient(c_new, c_cached, tau_hi, 0)?;
    Ok(is_subset(&lo, &hi))
}

pub fn is_subset(a: &SaliencyIndex, b: &SaliencyIndex) -> bool {
    a.positions().iter().all(|p| b.contains(*p))
}
