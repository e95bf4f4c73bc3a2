//! Kernel point operators: influence tables, rigid and depthwise kernel
//! point convolutions, and the modulated variants.
//!
//! Every operator takes features of the support points (`[N_s × C]`), a
//! neighbor table and a matching influence table, and produces one row
//! per query. Shadow neighbor slots contribute nothing.

mod conv;
mod influence;
mod modulated;

pub use conv::{kpconv_dense, kpconvd, kpconvd_fullsum};
pub use influence::{influence, InfluenceMode, InfluenceTable};
pub use modulated::{generate_modulations, kpconvx, kpconvx_with, kpinv, kpinv_with, ModulationHead};

use crate::error::{KpxError, Result};
use crate::sampling::NeighborTable;
use crate::tensor::{Real, Tensor};

/// Runs `row(i, out_row)` for every output row, in parallel when enabled,
/// and returns the sum of the per-row operation counts.
fn for_rows<T: Real>(out: &mut [T], width: usize, row: impl Fn(usize, &mut [T]) -> u64 + Sync) -> u64 {
    if width == 0 {
        return 0;
    }
    let rows = out.len() / width;
    if crate::parallel::enabled(rows) {
        use rayon::prelude::*;
        out.par_chunks_mut(width).enumerate().map(|(i, r)| row(i, r)).sum()
    } else {
        out.chunks_mut(width).enumerate().map(|(i, r)| row(i, r)).sum()
    }
}

fn check_inputs<T: Real>(
    op: &'static str,
    features: &Tensor<T>,
    table: &NeighborTable,
    infl: &InfluenceTable<T>,
    mode: InfluenceMode,
) -> Result<()> {
    if features.shape().len() != 2 {
        return Err(KpxError::Shape {
            op,
            lhs: features.shape().to_vec(),
            rhs: vec![table.shadow],
        });
    }
    table.validate(features.rows())?;
    if infl.mode != mode {
        return Err(KpxError::contract(format!(
            "{op} needs a {mode:?} influence table, got {:?}",
            infl.mode
        )));
    }
    if infl.n_queries != table.n_queries || infl.width != table.width {
        return Err(KpxError::contract(format!(
            "{op}: influence table is {}×{}, neighbor table {}×{}",
            infl.n_queries, infl.width, table.n_queries, table.width
        )));
    }
    Ok(())
}

fn check_param<T: Real>(op: &'static str, w: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if w.shape() != expected {
        return Err(KpxError::Shape {
            op,
            lhs: w.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}
