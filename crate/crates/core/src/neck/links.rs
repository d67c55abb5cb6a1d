//! Which earlier nodes feed a GFPN node.

use crate::graph::{GraphError, Result, Transform};

/// `(level, layer)` key of a neck node.
pub type NodeKey = (u8, u32);

fn require_layer(l: u32) -> Result<()> {
    if l == 0 {
        return Err(GraphError::Config("layer 0 has no predecessors".into()));
    }
    Ok(())
}

/// Every earlier layer at level `k`, ascending.
pub fn dense_link_inputs(k: u8, l: u32) -> Result<Vec<NodeKey>> {
    require_layer(l)?;
    Ok((0..l).map(|j| (k, j)).collect())
}

/// Layers `l - 2^n` for `n = 0, 1, ...` while non-negative, nearest first.
pub fn log2n_link_inputs(k: u8, l: u32) -> Result<Vec<NodeKey>> {
    require_layer(l)?;
    let mut out = Vec::new();
    let mut step = 1u32;
    while step <= l {
        out.push((k, l - step));
        match step.checked_mul(2) {
            Some(s) => step = s,
            None => break,
        }
    }
    Ok(out)
}

/// Sweep direction inside one GFPN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Lower levels first; the current-layer neighbor is `k - 1`.
    BottomUp,
    /// Higher levels first; the current-layer neighbor is `k + 1`.
    TopDown,
}

/// Queen-fusion inputs of `(k, l)` for a bottom-up sweep: previous-layer
/// `k-1` (downsampled), previous-layer `k+1` (upsampled), previous-layer `k`,
/// current-layer `k-1` (downsampled). Neighbors outside `levels` are dropped.
pub fn queen_fusion_inputs(k: u8, l: u32, levels: (u8, u8)) -> Result<Vec<(NodeKey, Transform)>> {
    queen_fusion_inputs_directed(k, l, levels, Sweep::BottomUp)
}

/// [`queen_fusion_inputs`] with the sweep direction made explicit. A top-down
/// sweep mirrors the pattern so the current-layer neighbor is already built.
pub fn queen_fusion_inputs_directed(
    k: u8,
    l: u32,
    levels: (u8, u8),
    sweep: Sweep,
) -> Result<Vec<(NodeKey, Transform)>> {
    require_layer(l)?;
    let (lo, hi) = levels;
    let below = (k > lo).then(|| k - 1);
    let above = (k < hi).then(|| k + 1);
    let mut out = Vec::with_capacity(4);
    let (first, second, current) = match sweep {
        Sweep::BottomUp => (
            below.map(|b| (b, Transform::Downsample2)),
            above.map(|a| (a, Transform::Upsample2)),
            below.map(|b| (b, Transform::Downsample2)),
        ),
        Sweep::TopDown => (
            above.map(|a| (a, Transform::Upsample2)),
            below.map(|b| (b, Transform::Downsample2)),
            above.map(|a| (a, Transform::Upsample2)),
        ),
    };
    if let Some((lv, t)) = first {
        out.push(((lv, l - 1), t));
    }
    if let Some((lv, t)) = second {
        out.push(((lv, l - 1), t));
    }
    out.push(((k, l - 1), Transform::Identity));
    if let Some((lv, t)) = current {
        out.push(((lv, l), t));
    }
    Ok(out)
}
