use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::analyze;
use crate::graph::{ArchitectureGraph, Component, GraphError, GraphIndex, Result, Transform};
use crate::neck::{NeckKind, NeckSpec};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TransformTally {
    pub identity: usize,
    pub upsample: usize,
    pub downsample: usize,
    pub project: usize,
}

impl TransformTally {
    pub fn total(&self) -> usize {
        self.identity + self.upsample + self.downsample + self.project
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LevelPaths {
    pub level: u8,
    pub first_layer: u32,
    pub last_layer: u32,
    /// Same-level shortest distance from the first-layer node, per layer;
    /// `None` where the level has no node or it is unreachable.
    pub same_level: Vec<Option<u32>>,
    /// Shortest distance over all neck edges, per layer.
    pub full: Vec<Option<u32>>,
}

impl LevelPaths {
    pub fn to_last(&self) -> Option<u32> {
        self.same_level.last().copied().flatten()
    }

    pub fn max_same_level(&self) -> u32 {
        self.same_level.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn distance(&self, layer: u32) -> Option<u32> {
        let i = layer.checked_sub(self.first_layer)? as usize;
        self.same_level.get(i).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TopologyReport {
    pub graph: String,
    pub neck_nodes: usize,
    /// Edges ending at a neck node.
    pub edges: usize,
    pub tally: TransformTally,
    /// Edges between neck nodes of one level.
    pub same_level_edges: usize,
    /// Same-level edges spanning two or more layers.
    pub skip_edges: usize,
    pub levels: Vec<LevelPaths>,
}

impl TopologyReport {
    pub fn max_same_level_distance(&self) -> u32 {
        self.levels.iter().map(LevelPaths::max_same_level).max().unwrap_or(0)
    }

    pub fn level(&self, k: u8) -> Option<&LevelPaths> {
        self.levels.iter().find(|p| p.level == k)
    }
}

fn bfs(
    g: &ArchitectureGraph,
    idx: &GraphIndex,
    start: usize,
    allow: impl Fn(usize, usize) -> bool,
) -> Vec<Option<u32>> {
    let mut dist = vec![None; g.nodes.len()];
    dist[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        let d = dist[p].unwrap();
        for &ei in idx.out_edges(p) {
            let q = idx.position(g.edges[ei].dst).unwrap();
            if dist[q].is_none() && allow(p, q) {
                dist[q] = Some(d + 1);
                queue.push_back(q);
            }
        }
    }
    dist
}

/// Path lengths and edge tallies of the neck nodes in `g`.
pub fn path_report(g: &ArchitectureGraph) -> Result<TopologyReport> {
    let idx = GraphIndex::new(g)?;
    let is_neck = |p: usize| g.nodes[p].component == Component::Neck && g.nodes[p].level.is_some();

    let mut tally = TransformTally::default();
    let (mut edges, mut same_level_edges, mut skip_edges) = (0, 0, 0);
    for e in &g.edges {
        let (s, d) = (idx.position(e.src).unwrap(), idx.position(e.dst).unwrap());
        if g.nodes[d].component != Component::Neck {
            continue;
        }
        edges += 1;
        match e.transform {
            Transform::Identity => tally.identity += 1,
            Transform::Upsample2 => tally.upsample += 1,
            Transform::Downsample2 => tally.downsample += 1,
            Transform::Project(_) => tally.project += 1,
        }
        if is_neck(s) && g.nodes[s].level == g.nodes[d].level {
            same_level_edges += 1;
            if g.nodes[d].layer >= g.nodes[s].layer + 2 {
                skip_edges += 1;
            }
        }
    }

    let mut by_level: BTreeMap<u8, BTreeMap<u32, usize>> = BTreeMap::new();
    for p in (0..g.nodes.len()).filter(|&p| is_neck(p)) {
        let n = &g.nodes[p];
        by_level.entry(n.level.unwrap()).or_default().insert(n.layer, p);
    }

    let mut levels = Vec::with_capacity(by_level.len());
    for (k, layers) in &by_level {
        let (&first, &start) = layers.iter().next().unwrap();
        let last = *layers.keys().next_back().unwrap();
        let same = bfs(g, &idx, start, |_, q| is_neck(q) && g.nodes[q].level == Some(*k));
        let full = bfs(g, &idx, start, |_, q| is_neck(q));
        let per_layer = |d: &[Option<u32>]| -> Vec<Option<u32>> {
            (first..=last).map(|l| layers.get(&l).and_then(|&p| d[p])).collect()
        };
        levels.push(LevelPaths {
            level: *k,
            first_layer: first,
            last_layer: last,
            same_level: per_layer(&same),
            full: per_layer(&full),
        });
    }

    Ok(TopologyReport {
        graph: g.name.clone(),
        neck_nodes: g.count(Component::Neck),
        edges,
        tally,
        same_level_edges,
        skip_edges,
        levels,
    })
}

/// One row of a side-by-side neck comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeckComparison {
    pub neck: String,
    pub layers: usize,
    pub effective_depth: usize,
    /// Set for necks whose layers count as two depth units.
    pub note: Option<String>,
    pub width: usize,
    pub nodes: usize,
    pub edges: usize,
    pub skip_edges: usize,
    pub max_same_level_distance: u32,
    pub flops: Option<u64>,
    pub params: Option<u64>,
}

/// Builds each neck over `pyramid` and tabulates its topology, and its
/// cost at `input` when given.
pub fn compare_necks(specs: &[NeckSpec], pyramid: &[(u8, usize)], input: Option<Shape>) -> Result<Vec<NeckComparison>> {
    specs
        .iter()
        .map(|spec| {
            let g = spec.build(pyramid)?;
            let topo = path_report(&g)?;
            let cost = match input {
                Some(s) => Some(analyze(&g, s)?),
                None => None,
            };
            let note = matches!(spec.kind, NeckKind::Panet | NeckKind::Bifpn).then(|| "\u{d7}2 depth".to_string());
            Ok(NeckComparison {
                neck: spec.kind.to_string(),
                layers: spec.layers,
                effective_depth: spec.effective_depth(),
                note,
                width: spec.width,
                nodes: topo.neck_nodes,
                edges: topo.edges,
                skip_edges: topo.skip_edges,
                max_same_level_distance: topo.max_same_level_distance(),
                flops: cost.as_ref().map(|c| c.neck.flops),
                params: cost.as_ref().map(|c| c.neck.params),
            })
        })
        .collect::<Result<Vec<_>, GraphError>>()
}
