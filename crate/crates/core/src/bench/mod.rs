//! Operation counting and wall-clock sweeps.

pub mod counter;
mod sweep;

pub use counter::{count_ops, OpCounter, OpKind};
pub use sweep::{
    expected_ops, parse_sweep, shells_for, sweep, BenchOp, BenchReport, BenchRow, Instance, SweepParam, SweepSpec,
};
