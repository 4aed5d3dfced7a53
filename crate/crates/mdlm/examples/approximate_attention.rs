//! The column-sparse context update: with value deltas confined to a few
//! salient rows, gathering those attention-weight columns reproduces the
//! dense zero-padded product exactly.
//!
//! Run with: cargo run --example approximate_attention

use mdlm::cache::SaliencyIndex;
use mdlm::engine::{approximate_attention, exact_attention_rows};
use mdlm::numerics::{rng_normal_fill, Matrix, Rng};

fn main() -> mdlm::Result<()> {
    let (n_heads, n_kv_heads) = (4, 2);
    let (rows, l_total, d_model, kv_width) = (6, 10, 16, 8);
    let mut rng = Rng::new(42);

    let q = rng_normal_fill(&mut rng, rows, d_model, 1.0);
    let k = rng_normal_fill(&mut rng, l_total, kv_width, 1.0);

    for positions in [
        vec![],
        vec![4],
        vec![1, 5, 8],
        (0..l_total).collect::<Vec<_>>(),
    ] {
        let idx = SaliencyIndex::new(positions, l_total)?;
        let delta_v = rng_normal_fill(&mut rng, idx.len(), kv_width, 1.0);

        let sparse = approximate_attention(&q, &k, &delta_v, &idx, n_heads, n_kv_heads)?;

        // Dense route: zero-pad the deltas to every key row and multiply
        // through the full attention matrix.
        let mut padded = Matrix::zeros(l_total, kv_width);
        for (i, &p) in idx.positions().iter().enumerate() {
            padded.row_mut(p).copy_from_slice(delta_v.row(i));
        }
        let dense = exact_attention_rows(&q, &k, &padded, n_heads, n_kv_heads)?;

        println!(
            "|idx| = {:>2}: max |sparse - dense| = {:e}",
            idx.len(),
            sparse.max_abs_diff(&dense)
        );
    }
    Ok(())
}
