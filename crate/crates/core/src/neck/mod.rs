//! Feature-pyramid necks: GFPN and the FPN / PANet / BiFPN baselines.

mod baselines;
mod gfpn;
mod links;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{
    static_channels, Activation, ArchitectureGraph, Component, FusionStyle, GraphError, NodeId, Op, Result, Transform,
};

pub use baselines::{build_bifpn, build_fpn, build_panet};
pub use gfpn::build_gfpn;
pub use links::{
    dense_link_inputs, log2n_link_inputs, queen_fusion_inputs, queen_fusion_inputs_directed, NodeKey, Sweep,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    None,
    Dense,
    Log2n,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossScale {
    Queen,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    #[default]
    BottomUp,
    /// Odd layers sweep bottom-up, even layers top-down.
    Alternating,
}

impl LayerOrder {
    pub fn sweep(self, layer: u32) -> Sweep {
        match self {
            LayerOrder::Alternating if layer.is_multiple_of(2) => Sweep::TopDown,
            _ => Sweep::BottomUp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GfpnConfig {
    /// Number of fusion layers; layer 0 holds the projected inputs.
    pub depth: usize,
    pub width: usize,
    pub skip_mode: SkipMode,
    pub cross_scale: CrossScale,
    pub fusion_style: FusionStyle,
    /// Inclusive level range.
    pub levels: (u8, u8),
    pub within_layer_order: LayerOrder,
}

impl GfpnConfig {
    pub fn new(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            skip_mode: SkipMode::Log2n,
            cross_scale: CrossScale::Queen,
            fusion_style: FusionStyle::Concat,
            levels: (3, 7),
            within_layer_order: LayerOrder::BottomUp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(GraphError::Config("GFPN depth and width must be at least 1".into()));
        }
        if self.levels.0 > self.levels.1 {
            return Err(GraphError::Config(format!("empty level range {:?}", self.levels)));
        }
        Ok(())
    }
}

/// Neck family, as named on the command line (`gfpn-log2n`, `panet`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeckKind {
    Gfpn(SkipMode),
    Fpn,
    Panet,
    Bifpn,
}

impl NeckKind {
    /// Depth contributed by one layer (or repeat) of this neck.
    pub fn depth_per_layer(self) -> usize {
        match self {
            NeckKind::Gfpn(_) | NeckKind::Fpn => 1,
            NeckKind::Panet | NeckKind::Bifpn => 2,
        }
    }

    /// Layers (GFPN) or repeats (baselines) needed to reach at least `depth`.
    pub fn layers_for_depth(self, depth: usize) -> usize {
        depth.div_ceil(self.depth_per_layer()).max(1)
    }
}

/// Effective depth of `layers` layers of `kind`; PANet and BiFPN layers
/// count twice.
pub fn depth_accounting(kind: NeckKind, layers: usize) -> usize {
    layers * kind.depth_per_layer()
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeckKind::Gfpn(SkipMode::None) => "gfpn-none",
            NeckKind::Gfpn(SkipMode::Dense) => "gfpn-dense",
            NeckKind::Gfpn(SkipMode::Log2n) => "gfpn-log2n",
            NeckKind::Fpn => "fpn",
            NeckKind::Panet => "panet",
            NeckKind::Bifpn => "bifpn",
        })
    }
}

impl FromStr for NeckKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "gfpn" | "gfpn-log2n" => NeckKind::Gfpn(SkipMode::Log2n),
            "gfpn-dense" => NeckKind::Gfpn(SkipMode::Dense),
            "gfpn-none" | "gfpn-noskip" => NeckKind::Gfpn(SkipMode::None),
            "fpn" => NeckKind::Fpn,
            "panet" => NeckKind::Panet,
            "bifpn" => NeckKind::Bifpn,
            other => return Err(GraphError::Config(format!("unknown neck `{other}`"))),
        })
    }
}

/// Any neck, described uniformly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeckSpec {
    pub kind: NeckKind,
    /// GFPN depth, or number of stacked repeats for the baselines.
    pub layers: usize,
    pub width: usize,
    /// GFPN only.
    pub fusion_style: FusionStyle,
    /// GFPN only.
    pub cross_scale: CrossScale,
    /// GFPN only.
    pub order: LayerOrder,
}

impl NeckSpec {
    pub fn new(kind: NeckKind, layers: usize, width: usize) -> Self {
        Self {
            kind,
            layers,
            width,
            fusion_style: FusionStyle::Concat,
            cross_scale: CrossScale::Queen,
            order: LayerOrder::BottomUp,
        }
    }

    pub fn effective_depth(&self) -> usize {
        depth_accounting(self.kind, self.layers)
    }

    pub fn build(&self, pyramid: &[(u8, usize)]) -> Result<ArchitectureGraph> {
        let levels = level_range(pyramid)?;
        match self.kind {
            NeckKind::Gfpn(skip) => build_gfpn(
                &GfpnConfig {
                    depth: self.layers,
                    width: self.width,
                    skip_mode: skip,
                    cross_scale: self.cross_scale,
                    fusion_style: self.fusion_style,
                    levels,
                    within_layer_order: self.order,
                },
                pyramid,
            ),
            NeckKind::Fpn => build_fpn(levels, self.width, pyramid, self.layers),
            NeckKind::Panet => build_panet(levels, self.width, pyramid, self.layers),
            NeckKind::Bifpn => build_bifpn(levels, self.width, pyramid, self.layers),
        }
    }
}

/// Inclusive level range of a contiguous pyramid.
pub fn level_range(pyramid: &[(u8, usize)]) -> Result<(u8, u8)> {
    let mut levels: Vec<u8> = pyramid.iter().map(|p| p.0).collect();
    levels.sort_unstable();
    if levels.is_empty() {
        return Err(GraphError::Pyramid("no levels".into()));
    }
    if levels.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(GraphError::Pyramid(format!("levels {levels:?} are not contiguous")));
    }
    Ok((levels[0], *levels.last().unwrap()))
}

/// Bookkeeping shared by the neck builders.
pub(crate) struct NeckBuilder {
    pub g: ArchitectureGraph,
    keys: BTreeMap<NodeKey, NodeId>,
    pub width: usize,
}

impl NeckBuilder {
    /// Creates one `Source` input per level in `levels`, taken from `pyramid`.
    pub fn new(name: &str, levels: (u8, u8), width: usize, pyramid: &[(u8, usize)]) -> Result<Self> {
        if width == 0 {
            return Err(GraphError::Config("neck width must be at least 1".into()));
        }
        let mut g = ArchitectureGraph::new(name);
        for k in levels.0..=levels.1 {
            let channels = pyramid
                .iter()
                .find(|p| p.0 == k)
                .map(|p| p.1)
                .ok_or_else(|| GraphError::Pyramid(format!("input pyramid lacks P{k}")))?;
            let id = g.add_node(
                Some(k),
                0,
                Component::Backbone,
                Op::Source {
                    stride: 1usize << k,
                    channels,
                },
            );
            g.inputs.push(id);
        }
        Ok(Self {
            g,
            keys: BTreeMap::new(),
            width,
        })
    }

    pub fn source(&self, k: u8) -> NodeId {
        self.g
            .inputs
            .iter()
            .copied()
            .find(|id| self.g.node(*id).and_then(|n| n.level) == Some(k))
            .expect("source exists for every level")
    }

    pub fn get(&self, key: NodeKey) -> NodeId {
        self.keys[&key]
    }

    /// 1x1 projection of `src` to the neck width, registered at `key`.
    pub fn lateral(&mut self, key: NodeKey, src: NodeId) -> NodeId {
        let id = self.g.add_node(
            Some(key.0),
            key.1,
            Component::Neck,
            Op::Conv {
                out_channels: self.width,
                kernel: 1,
                stride: 1,
                padding: 0,
                activation: Activation::None,
            },
        );
        self.g.connect(src, id, Transform::Identity);
        self.keys.insert(key, id);
        id
    }

    /// Fusion node at `key` over `inputs` (in order), followed by a 3x3 conv
    /// and SiLU. Summation inserts 1x1 projections where channel counts
    /// differ from the neck width.
    pub fn fuse(&mut self, key: NodeKey, style: FusionStyle, inputs: &[(NodeId, Transform)]) -> NodeId {
        let id = self.g.add_node(
            Some(key.0),
            key.1,
            Component::Neck,
            Op::Fusion {
                style,
                out_channels: self.width,
                kernel: 3,
                activation: Activation::Silu,
            },
        );
        for &(src, t) in inputs {
            let t = match (style, t) {
                (FusionStyle::Sum, Transform::Identity) if static_channels(&self.g, src) != Some(self.width) => {
                    Transform::Project(self.width)
                }
                _ => t,
            };
            self.g.connect(src, id, t);
        }
        self.keys.insert(key, id);
        id
    }

    pub fn finish(mut self, outputs: Vec<NodeId>, metadata: serde_json::Value) -> ArchitectureGraph {
        self.g.outputs = outputs;
        self.g.metadata.insert("neck".into(), metadata);
        self.g
    }
}
