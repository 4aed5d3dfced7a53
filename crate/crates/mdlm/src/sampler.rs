//! Reverse-process token selection: confidence-ranked unmasking with
//! parallel degree `n_u`, optionally restricted to semi-autoregressive
//! blocks decoded left to right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Confidence measure for ranking masked positions. Extension point; only
/// max softmax probability is implemented, matching deterministic decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    MaxProb,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Tokens unmasked per step.
    pub n_u: usize,
    /// Semi-AR block size; must divide the response length.
    pub block_size: usize,
    pub semi_ar: bool,
    pub confidence: Confidence,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_u: 1,
            block_size: 32,
            semi_ar: true,
            confidence: Confidence::MaxProb,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, l_r: usize) -> Result<()> {
        if self.n_u == 0 {
            return Err(Error::InvalidSamplerConfig("n_u must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidSamplerConfig(
                "block_size must be at least 1".into(),
            ));
        }
        if !l_r.is_multiple_of(self.block_size) {
            return Err(Error::InvalidSamplerConfig(format!(
                "block_size {} does not divide response length {}",
                self.block_size, l_r
            )));
        }
        if self.semi_ar && self.block_size < self.n_u {
            return Err(Error::InvalidSamplerConfig(format!(
                "semi-AR block size {} is smaller than n_u {}",
                self.block_size, self.n_u
            )));
        }
        Ok(())
    }
}

/// Decode-side view of the sequence: immutable prompt plus a response buffer
/// whose positions unmask monotonically and never change afterwards.
#[derive(Debug, Clone)]
pub struct DecodeState {
    prompt: Vec<u32>,
    response: Vec<u32>,
    masked: Vec<bool>,
    mask_token_id: u32,
    block_size: usize,
    semi_ar: bool,
    active_block: usize,
    masked_per_block: Vec<usize>,
}

impl DecodeState {
    pub fn new(
        prompt: &[u32],
        l_r: usize,
        cfg: &SamplerConfig,
        mask_token_id: u32,
    ) -> Result<Self> {
        cfg.validate(l_r)?;
        if prompt.is_empty() {
            return Err(Error::InvalidSamplerConfig(
                "prompt must be nonempty".into(),
            ));
        }
        if l_r == 0 {
            return Err(Error::InvalidSamplerConfig(
                "response length must be positive".into(),
            ));
        }
        let n_blocks = l_r / cfg.block_size;
        Ok(DecodeState {
            prompt: prompt.to_vec(),
            response: vec![mask_token_id; l_r],
            masked: vec![true; l_r],
            mask_token_id,
            block_size: cfg.block_size,
            semi_ar: cfg.semi_ar,
            active_block: 0,
            masked_per_block: vec![cfg.block_size; n_blocks],
        })
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    /// Response buffer; masked positions hold the mask token id.
    pub fn response(&self) -> &[u32] {
        &self.response
    }

    pub fn full_sequence(&self) -> Vec<u32> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.response);
        seq
    }

    pub fn is_masked(&self, r: usize) -> bool {
        self.masked[r]
    }

    pub fn masked_remaining(&self) -> usize {
        self.masked_per_block.iter().sum()
    }

    pub fn active_block(&self) -> usize {
        self.active_block
    }

    pub fn mask_token_id(&self) -> u32 {
        self.mask_token_id
    }

    fn block_of(&self, r: usize) -> usize {
        r / self.block_size
    }
}

/// Selects up to `n_u` masked positions by confidence without mutating
/// state.
///
/// `logits` covers the response rows only (row `r` is response position
/// `r`); the engine maps input rows to response positions before calling.
/// Ties on confidence break toward the lowest position; ties on the argmax
/// token break toward the lowest token id. Returns `(tokens, positions)`
/// with response-relative positions.
pub fn process_logit(
    logits: &Matrix,
    state: &DecodeState,
    cfg: &SamplerConfig,
) -> Result<(Vec<u32>, Vec<usize>)> {
    debug_assert_eq!(logits.rows(), state.response.len());
    let candidates: Vec<usize> = (0..state.response.len())
        .filter(|&r| state.masked[r])
        .filter(|&r| !cfg.semi_ar || state.block_of(r) == state.active_block)
        .collect();
    if candidates.is_empty() {
        return Err(Error::DecodingComplete);
    }

    // (confidence desc, position asc); confidence is the max softmax
    // probability of the row, computed stably.
    let mut ranked: Vec<(f64, usize, u32)> = candidates
        .into_iter()
        .map(|r| {
            let row = logits.row(r);
            let mut max = f64::NEG_INFINITY;
            let mut arg = 0u32;
            for (j, &v) in row.iter().enumerate() {
                if v > max {
                    max = v;
                    arg = j as u32;
                }
            }
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            (1.0 / denom, r, arg)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(cfg.n_u);

    let positions: Vec<usize> = ranked.iter().map(|&(_, r, _)| r).collect();
    let tokens: Vec<u32> = ranked.iter().map(|&(_, _, t)| t).collect();
    Ok((tokens, positions))
}

/// Writes decoded tokens into the response buffer and advances the semi-AR
/// frontier when the active block empties.
pub fn commit(state: &mut DecodeState, tokens: &[u32], positions: &[usize]) -> Result<()> {
    debug_assert_eq!(tokens.len(), positions.len());
    for (&token, &pos) in tokens.iter().zip(positions) {
        if !state.masked[pos] {
            return Err(Error::CommitToUnmasked { position: pos });
        }
        if state.semi_ar && state.block_of(pos) != state.active_block {
            return Err(Error::OutsideActiveBlock {
                position: pos,
                active_block: state.active_block,
            });
        }
        state.response[pos] = token;
        state.masked[pos] = false;
        let block = state.block_of(pos);
        state.masked_per_block[block] -= 1;
    }
    while state.active_block < state.masked_per_block.len()
        && state.masked_per_block[state.active_block] == 0
    {
        state.active_block += 1;
    }
    Ok(())
}
