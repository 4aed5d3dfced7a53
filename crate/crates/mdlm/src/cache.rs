//! Per-layer activation stores written by full steps and selectively reused
//! by sparse steps: K, V, attention context C, and the FFN output.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Matrix;

/// Sorted, unique global token positions in `[0, l_total)`.
///
/// Positions are global sequence indices everywhere, including response-only
/// steps; the engine maps input rows to global positions at its boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SaliencyIndex {
    positions: Vec<usize>,
}

impl SaliencyIndex {
    /// Validates ordering, uniqueness and bounds.
    pub fn new(positions: Vec<usize>, l_total: usize) -> Result<Self> {
        for (i, w) in positions.windows(2).enumerate() {
            if w[0] >= w[1] {
                return Err(Error::UnsortedIndex { entry: i + 1 });
            }
        }
        if let Some(&last) = positions.last() {
            if last >= l_total {
                return Err(Error::IndexOutOfBounds {
                    index: last,
                    len: l_total,
                });
            }
        }
        Ok(SaliencyIndex { positions })
    }

    pub fn empty() -> Self {
        SaliencyIndex {
            positions: Vec::new(),
        }
    }

    /// All positions in `[start, end)`.
    pub fn range(start: usize, end: usize) -> Self {
        SaliencyIndex {
            positions: (start..end).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }

    /// Splits into positions inside `[start, end)` and the rest.
    pub fn partition_range(&self, start: usize, end: usize) -> (SaliencyIndex, SaliencyIndex) {
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            self.positions.iter().partition(|&&p| p >= start && p < end);
        (
            SaliencyIndex { positions: inside },
            SaliencyIndex { positions: outside },
        )
    }

    /// Sorted union of two index sets.
    pub fn union(&self, other: &SaliencyIndex) -> SaliencyIndex {
        let mut merged = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.positions.len() && j < other.positions.len() {
            match self.positions[i].cmp(&other.positions[j]) {
                std::cmp::Ordering::Less => {
                    merged.push(self.positions[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    merged.push(other.positions[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    merged.push(self.positions[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        merged.extend_from_slice(&self.positions[i..]);
        merged.extend_from_slice(&other.positions[j..]);
        SaliencyIndex { positions: merged }
    }
}

/// One layer's activation store. All four matrices share the row count
/// `l_total`; `valid` flips on only after a full step has written every row.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub k: Matrix,
    pub v: Matrix,
    pub c: Matrix,
    pub ffn_out: Matrix,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct CacheSet {
    layers: Vec<LayerCache>,
    l_p: usize,
    l_r: usize,
}

impl CacheSet {
    /// Preallocates every matrix at `l_p + l_r` rows. Sequence length is
    /// fixed for the life of a session; there is no growth or eviction.
    pub fn new(config: &ModelConfig, l_p: usize, l_r: usize) -> Self {
        let l_total = l_p + l_r;
        let layers = (0..config.n_layers)
            .map(|_| LayerCache {
                k: Matrix::zeros(l_total, config.kv_width()),
                v: Matrix::zeros(l_total, config.kv_width()),
                c: Matrix::zeros(l_total, config.d_model),
                ffn_out: Matrix::zeros(l_total, config.d_model),
                valid: false,
            })
            .collect();
        CacheSet { layers, l_p, l_r }
    }

    pub fn l_p(&self) -> usize {
        self.l_p
    }

    pub fn l_r(&self) -> usize {
        self.l_r
    }

    pub fn l_total(&self) -> usize {
        self.l_p + self.l_r
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    pub fn all_valid(&self) -> bool {
        self.layers.iter().all(|l| l.valid)
    }
}

/// Replaces exactly the indexed rows of `target` with `rows`; every other
/// row is left bit-unchanged.
pub fn scatter_rows(target: &mut Matrix, idx: &SaliencyIndex, rows: &Matrix) -> Result<()> {
    if rows.rows() != idx.len() {
        return Err(Error::RowCountMismatch {
            index_len: idx.len(),
            rows: rows.rows(),
        });
    }
    if let Some(&max) = idx.positions().last() {
        if max >= target.rows() {
            return Err(Error::IndexOutOfBounds {
                index: max,
                len: target.rows(),
            });
        }
    }
    debug_assert_eq!(target.cols(), rows.cols());
    for (src, &dst) in idx.positions().iter().enumerate() {
        let row = rows.row(src).to_vec();
        target.row_mut(dst).copy_from_slice(&row);
    }
    Ok(())
}

/// Copies the indexed rows of `source` in index order. An empty index yields
/// a legal 0-row matrix.
pub fn gather_rows(source: &Matrix, idx: &SaliencyIndex) -> Result<Matrix> {
    if let Some(&max) = idx.positions().last() {
        if max >= source.rows() {
            return Err(Error::IndexOutOfBounds {
                index: max,
                len: source.rows(),
            });
        }
    }
    let mut out = Matrix::zeros(idx.len(), source.cols());
    for (dst, &src) in idx.positions().iter().enumerate() {
        out.row_mut(dst).copy_from_slice(source.row(src));
    }
    Ok(out)
}

/// Debug dump of a cache matrix: `row,<values...>` per line, 0-based rows.
pub fn dump_matrix_csv(m: &Matrix, w: &mut impl Write) -> Result<()> {
    for r in 0..m.rows() {
        write!(w, "{r}")?;
        for v in m.row(r) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
