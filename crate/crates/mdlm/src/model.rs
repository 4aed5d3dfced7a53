//! Toy bidirectional masked-diffusion transformer: configuration, seeded
//! weights, sublayer forward primitives, and the binary weight file format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, rng_normal_fill, rope_rotate, Matrix, Rng};

/// How sublayer outputs combine with the hidden state.
///
/// `Replace` follows the literal step recipe: each sublayer output becomes
/// the hidden state wholesale (`x <- Norm(OutProj(C)); x <- FFN(x)`), and the
/// FFN-output cache replaces non-salient rows verbatim. `Residual` adds skip
/// connections (`x <- x + OutProj(C); x <- x + FFN(Norm(x))`) and caches the
/// post-residual hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    Replace,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Key/value head count; fewer than `n_heads` gives grouped-query attention.
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub mask_token_id: u32,
    pub rope_theta: f64,
    pub residual_mode: ResidualMode,
}

impl ModelConfig {
    /// Desk-scale default: 8 layers, d_model 128, 8 heads, d_ff 512, vocab 512.
    pub fn toy_default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 128,
            n_heads: 8,
            n_kv_heads: 8,
            d_ff: 512,
            vocab_size: 512,
            mask_token_id: 511,
            rope_theta: 10000.0,
            residual_mode: ResidualMode::Replace,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return fail("all dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.d_head().is_multiple_of(2) {
            return fail(format!(
                "head dimension {} must be even for rotary embeddings",
                self.d_head()
            ));
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return fail(format!(
                "mask_token_id {} outside vocabulary of size {}",
                self.mask_token_id, self.vocab_size
            ));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return fail(format!(
                "rope_theta {} must be finite and positive",
                self.rope_theta
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the K and V projections: `n_kv_heads * d_head`.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub attn_gain: Vec<f64>,
    pub ffn_gain: Vec<f64>,
}

/// Immutable parameter set, deterministically derived from `(config, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub lm_head: Matrix,
}

/// Initialization stddev for all projection tensors.
pub const INIT_STDDEV: f64 = 0.02;

/// Seeds every tensor from one SplitMix64 stream in a fixed order:
/// embedding, then per layer Wq, Wk, Wv, Wo, W1, W2 (gains are ones and
/// consume no draws), then lm_head. The order is part of the weight-file
/// contract.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    init_weights_with_stddev(config, seed, INIT_STDDEV)
}

/// Test hook: stddev 0 gives all-zero projections with unit gains.
pub fn init_weights_with_stddev(
    config: &ModelConfig,
    seed: u64,
    stddev: f64,
) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let d = config.d_model;
    let kv = config.kv_width();
    let embedding = rng_normal_fill(&mut rng, config.vocab_size, d, stddev);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: rng_normal_fill(&mut rng, d, d, stddev),
            wk: rng_normal_fill(&mut rng, d, kv, stddev),
            wv: rng_normal_fill(&mut rng, d, kv, stddev),
            wo: rng_normal_fill(&mut rng, d, d, stddev),
            w1: rng_normal_fill(&mut rng, d, config.d_ff, stddev),
            w2: rng_normal_fill(&mut rng, config.d_ff, d, stddev),
            attn_gain: vec![1.0; d],
            ffn_gain: vec![1.0; d],
        });
    }
    let final_gain = vec![1.0; d];
    let lm_head = rng_normal_fill(&mut rng, d, config.vocab_size, stddev);
    Ok(ModelWeights {
        config: config.clone(),
        embedding,
        layers,
        final_gain,
        lm_head,
    })
}

/// GELU, tanh form: `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

impl ModelWeights {
    fn check_layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            n_layers: self.config.n_layers,
        })
    }

    /// Q, K, V projections with rotary embeddings applied to Q and K at the
    /// given global positions. K and V have kv-width columns.
    pub fn qkv_project(
        &self,
        layer: usize,
        x_rows: &Matrix,
        positions: &[usize],
    ) -> Result<(Matrix, Matrix, Matrix)> {
        let lw = self.check_layer(layer)?;
        let d_head = self.config.d_head();
        let theta = self.config.rope_theta;
        let q = rope_rotate(&matmul(x_rows, &lw.wq)?, positions, theta, d_head)?;
        let k = rope_rotate(&matmul(x_rows, &lw.wk)?, positions, theta, d_head)?;
        let v = matmul(x_rows, &lw.wv)?;
        Ok((q, k, v))
    }

    /// Two-layer GELU MLP: rows are independent, so a subset call equals the
    /// full call restricted to those rows, exactly.
    pub fn ffn_forward(&self, layer: usize, x_rows: &Matrix) -> Result<Matrix> {
        let lw = self.check_layer(layer)?;
        let mut hidden = matmul(x_rows, &lw.w1)?;
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        matmul(&hidden, &lw.w2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        self.write_to(&mut file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights> {
        let mut file = std::fs::File::open(path)?;
        Self::read_from(&mut file)
    }

    /// Binary layout: magic "DYLM"; version u32; the seven integer config
    /// fields as u32; residual_mode as u32 (0 = replace, 1 = residual);
    /// rope_theta as f64 bits; then every tensor as raw little-endian f64 in
    /// initialization order. All integers little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        write_u32(w, WEIGHT_VERSION)?;
        let c = &self.config;
        for field in [
            c.n_layers as u32,
            c.d_model as u32,
            c.n_heads as u32,
            c.n_kv_heads as u32,
            c.d_ff as u32,
            c.vocab_size as u32,
            c.mask_token_id,
        ] {
            write_u32(w, field)?;
        }
        write_u32(
            w,
            match c.residual_mode {
                ResidualMode::Replace => 0,
                ResidualMode::Residual => 1,
            },
        )?;
        w.write_all(&c.rope_theta.to_le_bytes())?;
        for (name, tensor) in self.tensor_views() {
            let _ = name;
            for v in tensor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ModelWeights> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "header magic")?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = read_u32(r, "header version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::BadVersion {
                found: version,
                expected: WEIGHT_VERSION,
            });
        }
        let n_layers = read_u32(r, "config n_layers")? as usize;
        let d_model = read_u32(r, "config d_model")? as usize;
        let n_heads = read_u32(r, "config n_heads")? as usize;
        let n_kv_heads = read_u32(r, "config n_kv_heads")? as usize;
        let d_ff = read_u32(r, "config d_ff")? as usize;
        let vocab_size = read_u32(r, "config vocab_size")? as usize;
        let mask_token_id = read_u32(r, "config mask_token_id")?;
        let residual_mode = match read_u32(r, "config residual_mode")? {
            0 => ResidualMode::Replace,
            1 => ResidualMode::Residual,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown residual_mode tag {other} in weight file"
                )))
            }
        };
        let mut theta_bytes = [0u8; 8];
        read_exact(r, &mut theta_bytes, "config rope_theta")?;
        let config = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads,
            d_ff,
            vocab_size,
            mask_token_id,
            rope_theta: f64::from_le_bytes(theta_bytes),
            residual_mode,
        };
        config.validate()?;

        let kv = config.kv_width();
        let read_tensor =
            |r: &mut dyn Read, name: String, rows: usize, cols: usize| -> Result<Matrix> {
                let mut data = vec![0.0f64; rows * cols];
                let mut buf = [0u8; 8];
                for v in data.iter_mut() {
                    if r.read_exact(&mut buf).is_err() {
                        return Err(Error::UnexpectedEof { section: name });
                    }
                    *v = f64::from_le_bytes(buf);
                    if !v.is_finite() {
                        return Err(Error::NonFiniteWeight { section: name });
                    }
                }
                Matrix::from_vec(rows, cols, data)
            };
        let embedding = read_tensor(r, "embedding".into(), vocab_size, d_model)?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let wq = read_tensor(r, format!("layer {l} wq"), d_model, d_model)?;
            let wk = read_tensor(r, format!("layer {l} wk"), d_model, kv)?;
            let wv = read_tensor(r, format!("layer {l} wv"), d_model, kv)?;
            let wo = read_tensor(r, format!("layer {l} wo"), d_model, d_model)?;
            let w1 = read_tensor(r, format!("layer {l} w1"), d_model, d_ff)?;
            let w2 = read_tensor(r, format!("layer {l} w2"), d_ff, d_model)?;
            let attn_gain = read_tensor(r, format!("layer {l} attn_gain"), 1, d_model)?;
            let ffn_gain = read_tensor(r, format!("layer {l} ffn_gain"), 1, d_model)?;
            layers.push(LayerWeights {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
                attn_gain: attn_gain.data().to_vec(),
                ffn_gain: ffn_gain.data().to_vec(),
            });
        }
        let final_gain = read_tensor(r, "final_gain".into(), 1, d_model)?
            .data()
            .to_vec();
        let lm_head = read_tensor(r, "lm_head".into(), d_model, vocab_size)?;
        Ok(ModelWeights {
            config,
            embedding,
            layers,
            final_gain,
            lm_head,
        })
    }

    /// Tensors in initialization/serialization order, flattened.
    fn tensor_views(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embedding".into(), self.embedding.data())];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer {l} wq"), lw.wq.data()));
            out.push((format!("layer {l} wk"), lw.wk.data()));
            out.push((format!("layer {l} wv"), lw.wv.data()));
            out.push((format!("layer {l} wo"), lw.wo.data()));
            out.push((format!("layer {l} w1"), lw.w1.data()));
            out.push((format!("layer {l} w2"), lw.w2.data()));
            out.push((format!("layer {l} attn_gain"), &lw.attn_gain));
            out.push((format!("layer {l} ffn_gain"), &lw.ffn_gain));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("lm_head".into(), self.lm_head.data()));
        out
    }
}

pub const WEIGHT_MAGIC: &[u8; 4] = b"DYLM";
pub const WEIGHT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, section: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, section)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], section: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::UnexpectedEof {
        section: section.to_string(),
    })
}
