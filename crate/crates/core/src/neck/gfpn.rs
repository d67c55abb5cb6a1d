use serde_json::json;

use super::links::{dense_link_inputs, log2n_link_inputs, queen_fusion_inputs_directed, NodeKey, Sweep};
use super::{CrossScale, GfpnConfig, NeckBuilder, SkipMode};
use crate::graph::{ArchitectureGraph, GraphError, Result, Transform};

/// Ordered `(key, transform)` inputs of GFPN node `(k, l)`: cross-scale
/// inputs first, then the remaining skip inputs by descending layer.
pub(crate) fn gfpn_node_inputs(cfg: &GfpnConfig, k: u8, l: u32) -> Result<Vec<(NodeKey, Transform)>> {
    let mut inputs = match cfg.cross_scale {
        CrossScale::Queen => queen_fusion_inputs_directed(k, l, cfg.levels, cfg.within_layer_order.sweep(l))?,
        CrossScale::None => vec![((k, l - 1), Transform::Identity)],
    };
    let mut skips = match cfg.skip_mode {
        SkipMode::None => Vec::new(),
        SkipMode::Dense => dense_link_inputs(k, l)?,
        SkipMode::Log2n => log2n_link_inputs(k, l)?,
    };
    skips.sort_unstable_by_key(|&(_, l)| std::cmp::Reverse(l));
    for key in skips {
        if !inputs.iter().any(|(existing, _)| *existing == key) {
            inputs.push((key, Transform::Identity));
        }
    }
    Ok(inputs)
}

/// Builds a GFPN over `cfg.levels`. Layer 0 projects the backbone taps to
/// `cfg.width`; layers `1..=depth` are fusion nodes.
pub fn build_gfpn(cfg: &GfpnConfig, pyramid: &[(u8, usize)]) -> Result<ArchitectureGraph> {
    cfg.validate()?;
    let (lo, hi) = cfg.levels;
    let depth = u32::try_from(cfg.depth).map_err(|_| GraphError::Config("GFPN depth too large".into()))?;
    let mut b = NeckBuilder::new("gfpn", cfg.levels, cfg.width, pyramid)?;

    for k in lo..=hi {
        let src = b.source(k);
        b.lateral((k, 0), src);
    }
    for l in 1..=depth {
        let levels: Vec<u8> = match cfg.within_layer_order.sweep(l) {
            Sweep::BottomUp => (lo..=hi).collect(),
            Sweep::TopDown => (lo..=hi).rev().collect(),
        };
        for k in levels {
            let inputs = gfpn_node_inputs(cfg, k, l)?
                .into_iter()
                .map(|(key, t)| (b.get(key), t))
                .collect::<Vec<_>>();
            b.fuse((k, l), cfg.fusion_style, &inputs);
        }
    }

    let outputs = (lo..=hi).map(|k| b.get((k, depth))).collect();
    Ok(b.finish(
        outputs,
        json!({
            "kind": "gfpn",
            "depth": cfg.depth,
            "width": cfg.width,
            "skip_mode": cfg.skip_mode,
            "cross_scale": cfg.cross_scale,
            "fusion_style": cfg.fusion_style.to_string(),
            "levels": [lo, hi],
            "within_layer_order": cfg.within_layer_order,
        }),
    ))
}
