//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "dimension mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}"
    )]
    DimMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    BadShape {
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("condition number requires a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("rotary embedding requires an even head dimension, got {d_head}")]
    OddHeadDim { d_head: usize },

    #[error("rotary embedding: width {cols} is not divisible by head dimension {d_head}")]
    HeadSplit { cols: usize, d_head: usize },

    #[error("expected one position per row: {rows} rows, {positions} positions")]
    PositionCount { rows: usize, positions: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("layer index {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("index {index} out of bounds for {len} rows")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("salient index set is not strictly increasing at entry {entry}")]
    UnsortedIndex { entry: usize },

    #[error("row count mismatch: index set has {index_len} entries, payload has {rows} rows")]
    RowCountMismatch { index_len: usize, rows: usize },

    #[error("bad magic in weight file: expected \"DYLM\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weight file version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("unexpected end of file while reading {section}")]
    UnexpectedEof { section: String },

    #[error("weight file holds a non-finite value in {section}")]
    NonFiniteWeight { section: String },

    #[error("step input is invalid: {0}")]
    InvalidStepInput(String),

    #[error("cache state is invalid: {0}")]
    InvalidCacheState(String),

    #[error("decoding complete: no masked positions remain")]
    DecodingComplete,

    #[error("cannot commit to position {position}: already unmasked")]
    CommitToUnmasked { position: usize },

    #[error("cannot commit to position {position}: outside active block {active_block}")]
    OutsideActiveBlock {
        position: usize,
        active_block: usize,
    },

    #[error("sampler exhausted: {remaining} masked positions remain after {steps} steps")]
    SamplerExhausted { remaining: usize, steps: usize },

    #[error("invalid sampler config: {0}")]
    InvalidSamplerConfig(String),

    #[error("block size {block} is not divisible by parallel degree {n_u}")]
    Divisibility { block: usize, n_u: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
