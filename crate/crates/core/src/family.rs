//! The GiraffeDet family: compound depth/width coefficients for the neck.

use serde::Serialize;

use crate::graph::{FusionStyle, GraphError, Result};
use crate::neck::{CrossScale, GfpnConfig, LayerOrder, SkipMode};

const BASE_WIDTH: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FamilyEntry {
    pub name: &'static str,
    pub phi_d: usize,
    pub phi_w: f64,
    pub depth: usize,
    pub width: usize,
}

const TABLE: [(&str, usize, f64); 6] = [
    ("D7", 7, 0.7),
    ("D11", 11, 0.85),
    ("D14", 14, 0.95),
    ("D16", 16, 1.0),
    ("D25", 25, 1.15),
    ("D29", 29, 1.2),
];

/// `(phi_d, round_half_up(256 * phi_w))`.
pub fn scale(phi_d: usize, phi_w: f64) -> Result<(usize, usize)> {
    if phi_d == 0 || !(phi_w.is_finite() && phi_w > 0.0) {
        return Err(GraphError::Config(format!(
            "scaling coefficients must be positive, got phi_d={phi_d}, phi_w={phi_w}"
        )));
    }
    let w = (BASE_WIDTH * phi_w + 0.5).floor() as usize;
    Ok((phi_d, w.max(1)))
}

pub fn family_table() -> Vec<FamilyEntry> {
    TABLE
        .iter()
        .map(|&(name, phi_d, phi_w)| {
            let (depth, width) = scale(phi_d, phi_w).expect("table coefficients are valid");
            FamilyEntry {
                name,
                phi_d,
                phi_w,
                depth,
                width,
            }
        })
        .collect()
}

/// Looks up `D7`..`D29` (case-insensitive, optional `giraffe-` prefix).
pub fn lookup(name: &str) -> Result<FamilyEntry> {
    let key = name.trim().to_ascii_uppercase();
    let key = key.strip_prefix("GIRAFFE-").unwrap_or(&key);
    family_table().into_iter().find(|e| e.name == key).ok_or_else(|| {
        GraphError::Config(format!(
            "unknown model `{name}` (expected one of D7, D11, D14, D16, D25, D29)"
        ))
    })
}

/// Neck configuration for `entry`; only the neck is scaled, the backbone
/// stays the default space-to-depth chain.
pub fn instantiate(
    entry: &FamilyEntry,
    skip_mode: SkipMode,
    fusion_style: FusionStyle,
    width_override: Option<usize>,
) -> GfpnConfig {
    GfpnConfig {
        depth: entry.depth,
        width: width_override.unwrap_or(entry.width),
        skip_mode,
        cross_scale: CrossScale::Queen,
        fusion_style,
        levels: (3, 7),
        within_layer_order: LayerOrder::BottomUp,
    }
}
