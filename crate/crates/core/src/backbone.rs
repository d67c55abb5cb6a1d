//! Space-to-depth chain backbone and pyramid stubs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::graph::{
    static_channels, Activation, ArchitectureGraph, Component, GraphError, NodeId, Op, Result, Transform,
};

/// Pyramid levels the backbone exposes, finest first.
pub const PYRAMID_LEVELS: [u8; 5] = [3, 4, 5, 6, 7];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct S2DChainConfig {
    pub stem_channels: (usize, usize),
    /// Output channels of the five 1x1 convs, producing P3..P7.
    pub stage_channels: Vec<usize>,
    /// SiLU after each of the seven convs (two stem, five block).
    pub activations: Vec<bool>,
}

impl Default for S2DChainConfig {
    fn default() -> Self {
        Self {
            stem_channels: (32, 64),
            stage_channels: vec![128, 256, 512, 1024, 2048],
            activations: vec![true; 7],
        }
    }
}

impl S2DChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != PYRAMID_LEVELS.len() {
            return Err(GraphError::Config(format!(
                "stage_channels needs {} entries, got {}",
                PYRAMID_LEVELS.len(),
                self.stage_channels.len()
            )));
        }
        if self.activations.len() != 7 {
            return Err(GraphError::Config(format!(
                "activations needs 7 entries, got {}",
                self.activations.len()
            )));
        }
        let (a, b) = self.stem_channels;
        if a == 0 || b == 0 || self.stage_channels.contains(&0) {
            return Err(GraphError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Two stride-2 3x3 convs followed by five `space_to_depth -> 1x1 conv`
/// blocks. The (post-activation) output of block `i` is exposed as `P(3+i)`.
pub fn build_s2d_chain(cfg: &S2DChainConfig) -> Result<ArchitectureGraph> {
    cfg.validate()?;
    let mut g = ArchitectureGraph::new("s2d-chain");
    let input = g.add_node(None, 0, Component::Backbone, Op::Input);
    g.inputs.push(input);

    let mut layer = 1;
    let stage = |g: &mut ArchitectureGraph, level: Option<u8>, layer: &mut u32, prev: NodeId, op: Op| {
        let id = g.add_node(level, *layer, Component::Backbone, op);
        g.connect(prev, id, Transform::Identity);
        *layer += 1;
        id
    };

    let mut prev = input;
    let mut act = cfg.activations.iter().copied();
    for c in [cfg.stem_channels.0, cfg.stem_channels.1] {
        prev = stage(&mut g, None, &mut layer, prev, conv(c, 3, 2, 1));
        if act.next().unwrap() {
            prev = stage(&mut g, None, &mut layer, prev, Op::Silu);
        }
    }
    for (&level, &c) in PYRAMID_LEVELS.iter().zip(&cfg.stage_channels) {
        let mut block_layer = 0;
        prev = stage(
            &mut g,
            Some(level),
            &mut block_layer,
            prev,
            Op::SpaceToDepth { block: 2 },
        );
        prev = stage(&mut g, Some(level), &mut block_layer, prev, conv(c, 1, 1, 0));
        if act.next().unwrap() {
            prev = stage(&mut g, Some(level), &mut block_layer, prev, Op::Silu);
        }
        g.outputs.push(prev);
    }
    g.metadata.insert(
        "backbone".into(),
        json!({
            "kind": "s2d_chain",
            "stem_channels": [cfg.stem_channels.0, cfg.stem_channels.1],
            "stage_channels": cfg.stage_channels,
            "activations": cfg.activations,
        }),
    );
    Ok(g)
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Op {
    Op::Conv {
        out_channels,
        kernel,
        stride,
        padding,
        activation: Activation::None,
    }
}

/// Declared feature pyramid standing in for an arbitrary backbone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidStubConfig {
    pub level_channels: BTreeMap<u8, usize>,
    pub level_strides: BTreeMap<u8, usize>,
}

impl PyramidStubConfig {
    /// Channels per level with the canonical stride `2^k`.
    pub fn from_channels(level_channels: impl IntoIterator<Item = (u8, usize)>) -> Self {
        let level_channels: BTreeMap<u8, usize> = level_channels.into_iter().collect();
        let level_strides = level_channels.keys().map(|&k| (k, 1usize << k)).collect();
        Self {
            level_channels,
            level_strides,
        }
    }

    /// Parses `P3=128,P4=256,...`; an empty string is an empty pyramid.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, c) = part
                .split_once('=')
                .ok_or_else(|| GraphError::Config(format!("expected P<k>=<channels>, got `{part}`")))?;
            let k = k.trim().trim_start_matches(['P', 'p']);
            let level: u8 = k
                .parse()
                .map_err(|_| GraphError::Config(format!("bad level in `{part}`")))?;
            let channels: usize = c
                .trim()
                .parse()
                .map_err(|_| GraphError::Config(format!("bad channel count in `{part}`")))?;
            levels.push((level, channels));
        }
        let cfg = Self::from_channels(levels);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let keys: Vec<u8> = self.level_channels.keys().copied().collect();
        if keys.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(GraphError::Config(format!("levels {keys:?} are not contiguous")));
        }
        if self.level_strides.keys().ne(self.level_channels.keys()) {
            return Err(GraphError::Config("strides and channels cover different levels".into()));
        }
        for (&k, &s) in &self.level_strides {
            if k >= 32 || s != 1usize << k {
                return Err(GraphError::Config(format!("P{k} stride must be 2^{k}, got {s}")));
            }
        }
        if self.level_channels.values().any(|&c| c == 0) {
            return Err(GraphError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// One source node per declared level; inputs and outputs are the sources.
pub fn build_pyramid_stub(cfg: &PyramidStubConfig) -> Result<ArchitectureGraph> {
    cfg.validate()?;
    let mut g = ArchitectureGraph::new("pyramid-stub");
    for (&level, &channels) in &cfg.level_channels {
        let stride = cfg.level_strides[&level];
        let id = g.add_node(Some(level), 0, Component::Backbone, Op::Source { stride, channels });
        g.inputs.push(id);
        g.outputs.push(id);
    }
    g.metadata.insert(
        "backbone".into(),
        json!({ "kind": "stub", "level_channels": cfg.level_channels }),
    );
    Ok(g)
}

/// `(level, channels)` for each output of a backbone graph.
pub fn pyramid_of(g: &ArchitectureGraph) -> Result<Vec<(u8, usize)>> {
    let mut out = Vec::new();
    for (level, id) in g.output_levels() {
        let c = static_channels(g, id)
            .ok_or_else(|| GraphError::Pyramid(format!("cannot determine channels of P{level}")))?;
        out.push((level, c));
    }
    Ok(out)
}
