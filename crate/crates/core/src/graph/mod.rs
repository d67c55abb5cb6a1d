//! Architectures as typed DAGs of feature nodes.
//!
//! Weights never live in the graph; see [`WeightStore`].

mod dot;
mod exec;
mod json;
mod shape;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape, TensorError};

pub use dot::to_dot;
pub use exec::{execute, record, ExecMode, WeightKey, WeightStore};
pub use json::{from_json, to_json, SCHEMA_VERSION};
pub use shape::{infer_shapes, max_stride};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Backbone,
    Neck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStyle {
    Concat,
    Sum,
}

impl fmt::Display for FusionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStyle::Concat => "concat",
            FusionStyle::Sum => "sum",
        })
    }
}

/// What a node computes from its (transformed) inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    /// The image; takes the shape handed to shape inference.
    Input,
    /// An externally supplied feature map at `stride` with `channels`.
    Source {
        stride: usize,
        channels: usize,
    },
    Identity,
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    Silu,
    SpaceToDepth {
        block: usize,
    },
    /// Combine inputs, then a `kernel x kernel` stride-1 conv to `out_channels`.
    Fusion {
        style: FusionStyle,
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Source { .. } => "source",
            Op::Identity => "identity",
            Op::Conv { .. } => "conv",
            Op::Silu => "silu",
            Op::SpaceToDepth { .. } => "space_to_depth",
            Op::Fusion { .. } => "fusion",
        }
    }

    /// Allowed in-degree as `(min, max)`.
    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Input | Op::Source { .. } => (0, 0),
            Op::Fusion { .. } => (1, usize::MAX),
            _ => (1, 1),
        }
    }

    pub fn is_source(&self) -> bool {
        matches!(self, Op::Input | Op::Source { .. })
    }

    pub fn describe(&self) -> String {
        match self {
            Op::Input => "input".into(),
            Op::Source { stride, channels } => format!("source /{stride} c{channels}"),
            Op::Identity => "identity".into(),
            Op::Conv {
                out_channels,
                kernel,
                stride,
                activation,
                ..
            } => {
                let act = if *activation == Activation::Silu { "+silu" } else { "" };
                format!("conv {kernel}x{kernel}/{stride} -> {out_channels}{act}")
            }
            Op::Silu => "silu".into(),
            Op::SpaceToDepth { block } => format!("space_to_depth x{block}"),
            Op::Fusion {
                style,
                out_channels,
                kernel,
                activation,
            } => {
                let act = if *activation == Activation::Silu { "+silu" } else { "" };
                format!("fusion {style} conv {kernel}x{kernel} -> {out_channels}{act}")
            }
        }
    }
}

/// Shape action applied to a tensor while it travels along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Upsample2,
    Downsample2,
    /// 1x1 convolution to the given channel count.
    Project(usize),
}

impl Transform {
    pub fn short(&self) -> &'static str {
        match self {
            Transform::Identity => "id",
            Transform::Upsample2 => "up",
            Transform::Downsample2 => "down",
            Transform::Project(_) => "proj",
        }
    }

    pub fn apply(&self, s: Shape) -> Result<Shape, TensorError> {
        match *self {
            Transform::Identity => Ok(s),
            Transform::Upsample2 => Ok(Shape::new(2 * s.height, 2 * s.width, s.channels)),
            Transform::Downsample2 => {
                if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
                    Err(TensorError::NotDivisible {
                        height: s.height,
                        width: s.width,
                        block: 2,
                    })
                } else {
                    Ok(Shape::new(s.height / 2, s.width / 2, s.channels))
                }
            }
            Transform::Project(c) => Ok(Shape::new(s.height, s.width, c)),
        }
    }
}

/// A pyramid feature `P_level^layer`, or a backbone stage when `level` is
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNode {
    pub id: NodeId,
    pub level: Option<u8>,
    pub layer: u32,
    pub component: Component,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
}

impl FeatureNode {
    pub fn label(&self) -> String {
        match self.level {
            Some(k) => format!("P{k}^{}", self.layer),
            None => format!("S^{}", self.layer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArchitectureGraph {
    pub name: String,
    pub nodes: Vec<FeatureNode>,
    pub edges: Vec<GraphEdge>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("input {height}x{width} not divisible by {divisor}")]
    NotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("shape conflict at {node}: {detail}")]
    ShapeConflict { node: NodeId, detail: String },
    #[error("cycle through nodes {0:?}")]
    Cycle(Vec<NodeId>),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("duplicate neck key P{level}^{layer}")]
    DuplicateKey { level: u8, layer: u32 },
    #[error("node {0} is not reachable from any input")]
    Unreachable(NodeId),
    #[error("{node} ({kind}) takes {min}..={max} inputs, has {actual}")]
    Arity {
        node: NodeId,
        kind: &'static str,
        min: usize,
        max: usize,
        actual: usize,
    },
    #[error("no tensor supplied for input {0}")]
    MissingInput(NodeId),
    #[error("node {0} has no inferred shape")]
    MissingShape(NodeId),
    #[error("no weights for {0:?}")]
    MissingWeights(WeightKey),
    #[error("at {node}: {source}")]
    Runtime {
        node: NodeId,
        #[source]
        source: TensorError,
    },
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported schema_version {0}")]
    Version(u32),
    #[error("invalid pyramid: {0}")]
    Pyramid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Lookup tables derived from a graph.
#[derive(Debug)]
pub struct GraphIndex {
    pos: HashMap<NodeId, usize>,
    /// Edge indices into `g.edges`, per node position, in edge-list order.
    in_edges: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
}

impl GraphIndex {
    pub fn new(g: &ArchitectureGraph) -> Result<Self> {
        let mut pos = HashMap::with_capacity(g.nodes.len());
        for (i, n) in g.nodes.iter().enumerate() {
            if pos.insert(n.id, i).is_some() {
                return Err(GraphError::DuplicateId(n.id));
            }
        }
        let mut in_edges = vec![Vec::new(); g.nodes.len()];
        let mut out_edges = vec![Vec::new(); g.nodes.len()];
        for (ei, e) in g.edges.iter().enumerate() {
            let s = *pos.get(&e.src).ok_or(GraphError::UnknownNode(e.src))?;
            let d = *pos.get(&e.dst).ok_or(GraphError::UnknownNode(e.dst))?;
            out_edges[s].push(ei);
            in_edges[d].push(ei);
        }
        Ok(Self {
            pos,
            in_edges,
            out_edges,
        })
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.pos.get(&id).copied()
    }

    pub fn in_edges(&self, pos: usize) -> &[usize] {
        &self.in_edges[pos]
    }

    pub fn out_edges(&self, pos: usize) -> &[usize] {
        &self.out_edges[pos]
    }
}

impl ArchitectureGraph {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&FeatureNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.iter().map(|n| n.id.0 + 1).max().unwrap_or(0))
    }

    pub fn add_node(&mut self, level: Option<u8>, layer: u32, component: Component, op: Op) -> NodeId {
        let id = self.next_id();
        self.nodes.push(FeatureNode {
            id,
            level,
            layer,
            component,
            op,
            shape: None,
        });
        id
    }

    pub fn connect(&mut self, src: NodeId, dst: NodeId, transform: Transform) {
        self.edges.push(GraphEdge { src, dst, transform });
    }

    /// In-edges of `id` in their defining order.
    pub fn in_edges(&self, id: NodeId) -> Vec<&GraphEdge> {
        self.edges.iter().filter(|e| e.dst == id).collect()
    }

    /// Neck node keyed by `(level, layer)`.
    pub fn find_neck(&self, level: u8, layer: u32) -> Option<&FeatureNode> {
        self.nodes
            .iter()
            .find(|n| n.component == Component::Neck && n.level == Some(level) && n.layer == layer)
    }

    /// Kahn's algorithm; ready nodes leave in ascending id order.
    pub fn toposort(&self) -> Result<Vec<NodeId>> {
        let idx = GraphIndex::new(self)?;
        let mut indeg: Vec<usize> = (0..self.nodes.len()).map(|p| idx.in_edges(p).len()).collect();
        let mut heap: BinaryHeap<Reverse<(NodeId, usize)>> = indeg
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(p, _)| Reverse((self.nodes[p].id, p)))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse((id, p))) = heap.pop() {
            order.push(id);
            for &ei in idx.out_edges(p) {
                let d = idx.pos[&self.edges[ei].dst];
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    heap.push(Reverse((self.nodes[d].id, d)));
                }
            }
        }
        if order.len() == self.nodes.len() {
            return Ok(order);
        }

        // Left-over nodes sit on or behind a cycle; peel off those that cannot
        // lead back into the remainder.
        let mut rest: BTreeSet<usize> = (0..self.nodes.len()).filter(|&p| indeg[p] > 0).collect();
        loop {
            let sinks: Vec<usize> = rest
                .iter()
                .copied()
                .filter(|&p| {
                    idx.out_edges(p)
                        .iter()
                        .all(|&ei| !rest.contains(&idx.pos[&self.edges[ei].dst]))
                })
                .collect();
            if sinks.is_empty() {
                break;
            }
            for p in sinks {
                rest.remove(&p);
            }
        }
        let mut ids: Vec<NodeId> = rest.into_iter().map(|p| self.nodes[p].id).collect();
        ids.sort();
        Err(GraphError::Cycle(ids))
    }

    /// Structural checks shared by every builder output and loaded document.
    pub fn validate(&self) -> Result<()> {
        let idx = GraphIndex::new(self)?;
        for id in self.inputs.iter().chain(&self.outputs) {
            if idx.position(*id).is_none() {
                return Err(GraphError::UnknownNode(*id));
            }
        }
        for (p, n) in self.nodes.iter().enumerate() {
            let (min, max) = n.op.arity();
            let actual = idx.in_edges(p).len();
            if actual < min || actual > max {
                return Err(GraphError::Arity {
                    node: n.id,
                    kind: n.op.kind(),
                    min,
                    max,
                    actual,
                });
            }
        }
        let mut keys = BTreeSet::new();
        for n in self.nodes.iter().filter(|n| n.component == Component::Neck) {
            if let Some(level) = n.level {
                if !keys.insert((level, n.layer)) {
                    return Err(GraphError::DuplicateKey { level, layer: n.layer });
                }
            }
        }
        self.toposort()?;

        let mut seen = vec![false; self.nodes.len()];
        let mut queue: VecDeque<usize> = self.inputs.iter().filter_map(|id| idx.position(*id)).collect();
        for &p in &queue {
            seen[p] = true;
        }
        while let Some(p) = queue.pop_front() {
            for &ei in idx.out_edges(p) {
                let d = idx.pos[&self.edges[ei].dst];
                if !seen[d] {
                    seen[d] = true;
                    queue.push_back(d);
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(GraphError::Unreachable(self.nodes[p].id));
        }
        Ok(())
    }

    /// Number of nodes with the given component tag.
    pub fn count(&self, component: Component) -> usize {
        self.nodes.iter().filter(|n| n.component == component).count()
    }

    /// Appends `other` and returns the id remapping. Input and output lists
    /// are concatenated.
    pub fn append(&mut self, other: &ArchitectureGraph) -> BTreeMap<NodeId, NodeId> {
        let base = self.next_id().0;
        let map: BTreeMap<NodeId, NodeId> = other.nodes.iter().map(|n| (n.id, NodeId(base + n.id.0))).collect();
        for n in &other.nodes {
            let mut n = n.clone();
            n.id = map[&n.id];
            self.nodes.push(n);
        }
        for e in &other.edges {
            self.edges.push(GraphEdge {
                src: map[&e.src],
                dst: map[&e.dst],
                transform: e.transform,
            });
        }
        self.inputs.extend(other.inputs.iter().map(|id| map[id]));
        self.outputs.extend(other.outputs.iter().map(|id| map[id]));
        map
    }

    /// Pyramid levels of the output nodes, in output order.
    pub fn output_levels(&self) -> Vec<(u8, NodeId)> {
        self.outputs
            .iter()
            .filter_map(|id| self.node(*id).and_then(|n| n.level.map(|k| (k, *id))))
            .collect()
    }

    /// Feeds `neck`'s source nodes from `backbone`'s outputs level by level.
    ///
    /// Every neck input must be a `Source` whose level appears among the
    /// backbone outputs with the same channel count.
    pub fn compose(name: impl Into<String>, backbone: &ArchitectureGraph, neck: &ArchitectureGraph) -> Result<Self> {
        let taps: BTreeMap<u8, NodeId> = backbone.output_levels().into_iter().collect();
        let mut g = backbone.clone();
        g.name = name.into();
        g.outputs.clear();
        let base = g.next_id().0;
        let mut map = BTreeMap::new();
        for n in &neck.nodes {
            if neck.inputs.contains(&n.id) {
                let level = n
                    .level
                    .ok_or_else(|| GraphError::Pyramid(format!("neck input {} has no level", n.id)))?;
                let tap = *taps
                    .get(&level)
                    .ok_or_else(|| GraphError::Pyramid(format!("backbone has no P{level} output")))?;
                if let (Op::Source { channels, .. }, Some(tap_c)) = (&n.op, static_channels(backbone, tap)) {
                    if *channels != tap_c {
                        return Err(GraphError::Pyramid(format!(
                            "P{level}: neck expects {channels} channels, backbone provides {tap_c}"
                        )));
                    }
                }
                map.insert(n.id, tap);
            } else {
                let id = NodeId(base + n.id.0);
                map.insert(n.id, id);
                let mut n = n.clone();
                n.id = id;
                g.nodes.push(n);
            }
        }
        for e in &neck.edges {
            g.connect(map[&e.src], map[&e.dst], e.transform);
        }
        g.outputs = neck.outputs.iter().map(|id| map[id]).collect();
        for (k, v) in &neck.metadata {
            g.metadata.insert(k.clone(), v.clone());
        }
        Ok(g)
    }
}

/// Channel count of a node without running shape inference: the inferred
/// shape if present, else followed back through channel-preserving ops.
pub fn static_channels(g: &ArchitectureGraph, id: NodeId) -> Option<usize> {
    let n = g.node(id)?;
    if let Some(s) = n.shape {
        return Some(s.channels);
    }
    match &n.op {
        Op::Source { channels, .. } => Some(*channels),
        Op::Conv { out_channels, .. } | Op::Fusion { out_channels, .. } => Some(*out_channels),
        Op::Silu | Op::Identity => {
            let e = g.in_edges(id).into_iter().next()?;
            match e.transform {
                Transform::Project(c) => Some(c),
                _ => static_channels(g, e.src),
            }
        }
        Op::SpaceToDepth { block } => {
            let e = g.in_edges(id).into_iter().next()?;
            static_channels(g, e.src).map(|c| c * block * block)
        }
        Op::Input => None,
    }
}
