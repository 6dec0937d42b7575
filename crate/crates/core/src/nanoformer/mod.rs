//! Decoder-only transformer with full activation capture and edge-level
//! patching.
//!
//! Pre-layer-norm blocks: every layer runs its attention heads on the same
//! residual stream, then the MLP reads the updated stream. Learned absolute
//! positions are folded into the embedding node.

mod checkpoint;
mod config;
mod forward;
mod model;
mod nodes;

pub use checkpoint::{Checkpoint, CheckpointHeader, ManifestEntry, FORMAT_VERSION};
pub use config::{ModelConfig, SlotMode, PAD, PLACEHOLDER};
pub use forward::{
    forward, forward_batch, forward_interpolated, forward_patched, interpolate, ActivationTrace,
    LogitDifference, LogitMetric, PatchedRun,
};
pub(crate) use forward::{run, slot_gradients, unembed, RunOptions};
pub use model::{LayerIndex, Layout, Model};
pub use nodes::{all_edges, all_nodes, parents_of, EdgeKey, NodeId, PatchPlan, Slot, Source};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Number of entries strictly greater than `xs[i]` (0 = top).
pub fn rank_of<T: PartialOrd + Copy>(xs: &[T], i: usize) -> usize {
    let v = xs[i];
    xs.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < i))
        .count()
}
