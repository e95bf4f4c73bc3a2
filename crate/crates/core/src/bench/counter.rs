//! Thread-local multiply-add counters. Operators record into the counter of
//! the calling thread, so parallel row kernels still tally exactly.

use std::cell::Cell;
use std::fmt;

/// Operation family a count is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Matmul,
    KpconvDense,
    KpconvdFullsum,
    Kpconvd,
    Kpconvx,
    Kpinv,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Matmul,
        OpKind::KpconvDense,
        OpKind::KpconvdFullsum,
        OpKind::Kpconvd,
        OpKind::Kpconvx,
        OpKind::Kpinv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::KpconvDense => "kpconv",
            OpKind::KpconvdFullsum => "kpconvd_fullsum",
            OpKind::Kpconvd => "kpconvd",
            OpKind::Kpconvx => "kpconvx",
            OpKind::Kpinv => "kpinv",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static COUNTS: [Cell<u64>; 6] = Default::default();
}

pub fn record(kind: OpKind, n: u64) {
    COUNTS.with(|c| {
        let cell = &c[kind as usize];
        cell.set(cell.get() + n);
    });
}

pub(crate) fn record_matmul(n: usize) {
    record(OpKind::Matmul, n as u64);
}

/// Snapshot of multiply-add counts per operation family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    counts: [u64; 6],
}

impl OpCounter {
    pub fn get(&self, kind: OpKind) -> u64 {
        self.counts[kind as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, kind: OpKind, n: u64) {
        self.counts[kind as usize] += n;
    }

    fn since(&self, earlier: &OpCounter) -> OpCounter {
        let mut counts = [0; 6];
        for (o, (a, b)) in counts.iter_mut().zip(self.counts.iter().zip(&earlier.counts)) {
            *o = a - b;
        }
        OpCounter { counts }
    }
}

pub fn snapshot() -> OpCounter {
    let mut counts = [0; 6];
    COUNTS.with(|c| {
        for (o, cell) in counts.iter_mut().zip(c.iter()) {
            *o = cell.get();
        }
    });
    OpCounter { counts }
}

/// Runs `f` and returns the multiply-adds it recorded on this thread.
pub fn count_ops<R>(f: impl FnOnce() -> R) -> (R, OpCounter) {
    let before = snapshot();
    let out = f();
    (out, snapshot().since(&before))
}
