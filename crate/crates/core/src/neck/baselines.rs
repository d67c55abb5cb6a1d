//! FPN, PANet and BiFPN baselines built from plain sum fusion.

use serde_json::json;

use super::NeckBuilder;
use crate::graph::{ArchitectureGraph, FusionStyle, GraphError, NodeId, Result, Transform};

const STYLE: FusionStyle = FusionStyle::Sum;

fn require_repeats(repeats: usize) -> Result<u32> {
    if repeats == 0 {
        return Err(GraphError::Config("at least one repeat is required".into()));
    }
    u32::try_from(repeats).map_err(|_| GraphError::Config("too many repeats".into()))
}

/// Top-down pass at `layer` over `laterals` (indexed by `k - lo`).
fn top_down(b: &mut NeckBuilder, levels: (u8, u8), layer: u32, laterals: &[NodeId]) -> Vec<NodeId> {
    let (lo, hi) = levels;
    let mut out = vec![NodeId(0); laterals.len()];
    for k in (lo..=hi).rev() {
        let i = usize::from(k - lo);
        let mut inputs = vec![(laterals[i], Transform::Identity)];
        if k < hi {
            inputs.push((out[i + 1], Transform::Upsample2));
        }
        out[i] = b.fuse((k, layer), STYLE, &inputs);
    }
    out
}

fn laterals(b: &mut NeckBuilder, levels: (u8, u8), layer: u32, from: &[NodeId]) -> Vec<NodeId> {
    (levels.0..=levels.1)
        .zip(from)
        .map(|(k, &src)| b.lateral((k, layer), src))
        .collect()
}

fn sources(b: &NeckBuilder, levels: (u8, u8)) -> Vec<NodeId> {
    (levels.0..=levels.1).map(|k| b.source(k)).collect()
}

/// `repeats` stacked FPNs; each stack is laterals (layer `2s`) and a
/// top-down chain (layer `2s + 1`).
pub fn build_fpn(levels: (u8, u8), width: usize, pyramid: &[(u8, usize)], repeats: usize) -> Result<ArchitectureGraph> {
    let n = require_repeats(repeats)?;
    let mut b = NeckBuilder::new("fpn", levels, width, pyramid)?;
    let mut feats = sources(&b, levels);
    for s in 0..n {
        let lat = laterals(&mut b, levels, 2 * s, &feats);
        feats = top_down(&mut b, levels, 2 * s + 1, &lat);
    }
    Ok(b.finish(feats, json!({"kind": "fpn", "repeats": repeats, "width": width})))
}

/// `repeats` stacked PANets: laterals, top-down, then bottom-up
/// (layers `3s`, `3s + 1`, `3s + 2`).
pub fn build_panet(
    levels: (u8, u8),
    width: usize,
    pyramid: &[(u8, usize)],
    repeats: usize,
) -> Result<ArchitectureGraph> {
    let n = require_repeats(repeats)?;
    let (lo, hi) = levels;
    let mut b = NeckBuilder::new("panet", levels, width, pyramid)?;
    let mut feats = sources(&b, levels);
    for s in 0..n {
        let lat = laterals(&mut b, levels, 3 * s, &feats);
        let td = top_down(&mut b, levels, 3 * s + 1, &lat);
        let mut bu: Vec<NodeId> = Vec::with_capacity(td.len());
        for k in lo..=hi {
            let i = usize::from(k - lo);
            let mut inputs = vec![(td[i], Transform::Identity)];
            if k > lo {
                inputs.push((bu[i - 1], Transform::Downsample2));
            }
            bu.push(b.fuse((k, 3 * s + 2), STYLE, &inputs));
        }
        feats = bu;
    }
    Ok(b.finish(feats, json!({"kind": "panet", "repeats": repeats, "width": width})))
}

/// BiFPN with unweighted sum fusion. Laterals sit at layer 0; repeat `i`
/// places its intermediate nodes at layer `2i + 1` and outputs at `2i + 2`.
pub fn build_bifpn(
    levels: (u8, u8),
    width: usize,
    pyramid: &[(u8, usize)],
    repeats: usize,
) -> Result<ArchitectureGraph> {
    let n = require_repeats(repeats)?;
    let (lo, hi) = levels;
    let mut b = NeckBuilder::new("bifpn", levels, width, pyramid)?;
    let src = sources(&b, levels);
    let mut feats = laterals(&mut b, levels, 0, &src);
    let count = feats.len();
    for r in 0..n {
        let (mid_layer, out_layer) = (2 * r + 1, 2 * r + 2);
        let mut mid: Vec<Option<NodeId>> = vec![None; count];
        for k in (lo..=hi).rev().filter(|&k| k > lo && k < hi) {
            let i = usize::from(k - lo);
            let upper = mid[i + 1].unwrap_or(feats[i + 1]);
            mid[i] = Some(b.fuse(
                (k, mid_layer),
                STYLE,
                &[(feats[i], Transform::Identity), (upper, Transform::Upsample2)],
            ));
        }
        let mut out: Vec<NodeId> = Vec::with_capacity(count);
        for k in lo..=hi {
            let i = usize::from(k - lo);
            let inputs = if k == lo {
                let mut v = vec![(feats[i], Transform::Identity)];
                if k < hi {
                    v.push((mid[i + 1].unwrap_or(feats[i + 1]), Transform::Upsample2));
                }
                v
            } else if k == hi {
                vec![(feats[i], Transform::Identity), (out[i - 1], Transform::Downsample2)]
            } else {
                vec![
                    (
                        mid[i].expect("interior level has an intermediate node"),
                        Transform::Identity,
                    ),
                    (out[i - 1], Transform::Downsample2),
                    (feats[i], Transform::Identity),
                ]
            };
            out.push(b.fuse((k, out_layer), STYLE, &inputs));
        }
        feats = out;
    }
    Ok(b.finish(feats, json!({"kind": "bifpn", "repeats": repeats, "width": width})))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Component, Op};

    fn pyramid() -> Vec<(u8, usize)> {
        vec![(3, 128), (4, 256), (5, 512), (6, 1024), (7, 2048)]
    }

    fn fusion_count(g: &ArchitectureGraph) -> usize {
        g.nodes.iter().filter(|n| matches!(n.op, Op::Fusion { .. })).count()
    }

    fn count_transform(g: &ArchitectureGraph, t: Transform) -> usize {
        g.edges.iter().filter(|e| e.transform == t).count()
    }

    #[test]
    fn fpn_structure() {
        let g = build_fpn((3, 7), 8, &pyramid(), 1).unwrap();
        g.validate().unwrap();
        let laterals = g.nodes.iter().filter(|n| matches!(n.op, Op::Conv { .. })).count();
        assert_eq!(laterals, 5);
        assert_eq!(count_transform(&g, Transform::Upsample2), 4);
        let top = g.find_neck(7, 1).unwrap();
        assert_eq!(g.in_edges(top.id).len(), 1);
        for stacks in 1..=4 {
            let g = build_fpn((3, 7), 8, &pyramid(), stacks).unwrap();
            assert_eq!(g.count(Component::Neck), stacks * 2 * 5);
        }
    }

    #[test]
    fn panet_structure() {
        let g = build_panet((3, 7), 8, &pyramid(), 1).unwrap();
        g.validate().unwrap();
        assert_eq!(count_transform(&g, Transform::Upsample2), 4);
        assert_eq!(count_transform(&g, Transform::Downsample2), 4);
        assert_eq!(g.in_edges(g.find_neck(3, 2).unwrap().id).len(), 1);
        for stacks in 1..=4 {
            let g = build_panet((3, 7), 8, &pyramid(), stacks).unwrap();
            assert_eq!(g.count(Component::Neck), stacks * 3 * 5);
        }
    }

    #[test]
    fn bifpn_structure() {
        let g = build_bifpn((3, 7), 8, &pyramid(), 1).unwrap();
        g.validate().unwrap();
        let mids: Vec<u8> = g
            .nodes
            .iter()
            .filter(|n| n.component == Component::Neck && n.layer == 1)
            .map(|n| n.level.unwrap())
            .collect();
        assert_eq!(mids, vec![6, 5, 4]);
        for k in 4..=6 {
            assert_eq!(g.in_edges(g.find_neck(k, 2).unwrap().id).len(), 3);
        }
        for r in 1..=5 {
            let g = build_bifpn((3, 7), 8, &pyramid(), r).unwrap();
            assert_eq!(fusion_count(&g), 8 * r);
        }
    }

    #[test]
    fn zero_repeats_rejected() {
        assert!(build_fpn((3, 7), 8, &pyramid(), 0).is_err());
        assert!(build_bifpn((3, 7), 8, &pyramid(), 0).is_err());
    }

    #[test]
    fn two_level_bifpn_has_no_intermediates() {
        let g = build_bifpn((3, 4), 4, &pyramid(), 2).unwrap();
        g.validate().unwrap();
        assert_eq!(fusion_count(&g), 4);
    }
}
