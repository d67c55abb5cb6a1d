//! FLOPs and parameter accounting, plus neck topology metrics.

mod topology;

use std::fmt::Write as _;

use serde::Serialize;

use crate::graph::{
    infer_shapes, static_channels, Activation, ArchitectureGraph, Component, FusionStyle, GraphError, GraphIndex,
    NodeId, Op, Result, Transform,
};
use crate::tensor::Shape;

pub use topology::{compare_necks, path_report, LevelPaths, NeckComparison, TopologyReport, TransformTally};

/// Counting convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopMode {
    /// Convolution multiply-accumulates only.
    #[default]
    ConvMacs,
    /// Also counts bias adds, activations, resampling and summation, one op
    /// per output element. Not comparable with published figures.
    Strict,
}

fn in_shapes(g: &ArchitectureGraph, idx: &GraphIndex, p: usize) -> Result<Vec<(usize, Shape, Shape)>> {
    idx.in_edges(p)
        .iter()
        .map(|&ei| {
            let e = &g.edges[ei];
            let src = g.nodes[idx.position(e.src).unwrap()]
                .shape
                .ok_or(GraphError::MissingShape(e.src))?;
            let t = e
                .transform
                .apply(src)
                .map_err(|source| GraphError::Runtime { node: e.dst, source })?;
            Ok((ei, src, t))
        })
        .collect()
}

fn conv_in_channels(op: &Op, ins: &[(usize, Shape, Shape)]) -> usize {
    match op {
        Op::Fusion {
            style: FusionStyle::Concat,
            ..
        } => ins.iter().map(|i| i.2.channels).sum(),
        _ => ins.first().map_or(0, |i| i.2.channels),
    }
}

/// `(flops, params)` of one node, including the 1x1 projections on its
/// incoming edges.
fn node_cost(g: &ArchitectureGraph, idx: &GraphIndex, id: NodeId, mode: FlopMode) -> Result<(u64, u64)> {
    let p = idx.position(id).ok_or(GraphError::UnknownNode(id))?;
    let node = &g.nodes[p];
    let out = node.shape.ok_or(GraphError::MissingShape(id))?;
    let ins = in_shapes(g, idx, p)?;
    let numel = out.numel() as u64;
    let strict = mode == FlopMode::Strict;
    let mut flops = 0u64;
    let mut params = 0u64;

    for (ei, src, t) in &ins {
        match g.edges[*ei].transform {
            Transform::Project(c) => {
                let (c, cin) = (c as u64, src.channels as u64);
                flops += t.numel() as u64 * cin;
                params += cin * c + c;
                if strict {
                    flops += t.numel() as u64;
                }
            }
            Transform::Upsample2 | Transform::Downsample2 if strict => flops += t.numel() as u64,
            _ => {}
        }
    }

    let mut conv = |kernel: usize, activation: Activation| {
        let k2 = (kernel * kernel) as u64;
        let cin = conv_in_channels(&node.op, &ins) as u64;
        let cout = out.channels as u64;
        flops += numel * k2 * cin;
        params += k2 * cin * cout + cout;
        if strict {
            flops += numel;
            if activation == Activation::Silu {
                flops += numel;
            }
        }
    };
    match &node.op {
        Op::Conv { kernel, activation, .. } => conv(*kernel, *activation),
        Op::Fusion {
            style,
            kernel,
            activation,
            ..
        } => {
            conv(*kernel, *activation);
            if strict && *style == FusionStyle::Sum && ins.len() > 1 {
                flops += (ins.len() as u64 - 1) * ins[0].2.numel() as u64;
            }
        }
        Op::Silu if strict => flops += numel,
        _ => {}
    }
    Ok((flops, params))
}

/// FLOPs of `id` in a shape-annotated graph counting convolution MACs only:
/// `outH * outW * outC * kH * kW * inC` for convolutions, zero otherwise.
pub fn flops_of(g: &ArchitectureGraph, id: NodeId) -> Result<u64> {
    flops_of_mode(g, id, FlopMode::ConvMacs)
}

pub fn flops_of_mode(g: &ArchitectureGraph, id: NodeId, mode: FlopMode) -> Result<u64> {
    let idx = GraphIndex::new(g)?;
    Ok(node_cost(g, &idx, id, mode)?.0)
}

/// Convolution weights plus biases of a shape-annotated graph.
pub fn param_count(g: &ArchitectureGraph) -> Result<u64> {
    let idx = GraphIndex::new(g)?;
    g.nodes
        .iter()
        .map(|n| node_cost(g, &idx, n.id, FlopMode::ConvMacs).map(|c| c.1))
        .sum()
}

/// Parameter count without shape inference; fails if some conv's input
/// channels cannot be traced back statically.
pub fn static_param_count(g: &ArchitectureGraph) -> Result<u64> {
    let mut total = 0u64;
    for n in &g.nodes {
        let edges = g.in_edges(n.id);
        let mut widths = Vec::with_capacity(edges.len());
        for e in &edges {
            let c = static_channels(g, e.src).ok_or(GraphError::MissingShape(e.src))? as u64;
            if let Transform::Project(p) = e.transform {
                total += c * p as u64 + p as u64;
                widths.push(p as u64);
            } else {
                widths.push(c);
            }
        }
        let (kernel, cout, cin) = match &n.op {
            Op::Conv {
                kernel, out_channels, ..
            } => (*kernel, *out_channels, widths[0]),
            Op::Fusion {
                style,
                kernel,
                out_channels,
                ..
            } => {
                let cin = match style {
                    FusionStyle::Concat => widths.iter().sum(),
                    FusionStyle::Sum => widths[0],
                };
                (*kernel, *out_channels, cin)
            }
            _ => continue,
        };
        let (k2, cout) = ((kernel * kernel) as u64, cout as u64);
        total += k2 * cin * cout + cout;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub node: NodeId,
    pub label: String,
    pub component: Component,
    pub description: String,
    pub shape: Shape,
    pub flops: u64,
    pub cumulative: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Totals {
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub graph: String,
    pub mode: FlopMode,
    pub input: Option<Shape>,
    pub rows: Vec<CostRow>,
    pub backbone: Totals,
    pub neck: Totals,
    pub total: Totals,
}

/// Shape inference followed by per-node accounting in topological order.
pub fn analyze(g: &ArchitectureGraph, input: Shape) -> Result<CostReport> {
    analyze_with(g, input, FlopMode::ConvMacs)
}

pub fn analyze_with(g: &ArchitectureGraph, input: Shape, mode: FlopMode) -> Result<CostReport> {
    let shaped = infer_shapes(g, input)?;
    let mut report = analyze_shaped(&shaped, mode)?;
    report.input = Some(input);
    Ok(report)
}

/// Accounting for a graph whose shapes are already annotated.
pub fn analyze_shaped(g: &ArchitectureGraph, mode: FlopMode) -> Result<CostReport> {
    let idx = GraphIndex::new(g)?;
    let mut report = CostReport {
        graph: g.name.clone(),
        mode,
        input: None,
        rows: Vec::with_capacity(g.nodes.len()),
        backbone: Totals::default(),
        neck: Totals::default(),
        total: Totals::default(),
    };
    let mut cumulative = 0u64;
    for id in g.toposort()? {
        let node = &g.nodes[idx.position(id).unwrap()];
        let (flops, params) = node_cost(g, &idx, id, mode)?;
        cumulative += flops;
        let bucket = match node.component {
            Component::Backbone => &mut report.backbone,
            Component::Neck => &mut report.neck,
        };
        bucket.flops += flops;
        bucket.params += params;
        report.rows.push(CostRow {
            node: id,
            label: node.label(),
            component: node.component,
            description: node.op.describe(),
            shape: node.shape.ok_or(GraphError::MissingShape(id))?,
            flops,
            cumulative,
            params,
        });
    }
    report.total = Totals {
        flops: cumulative,
        params: report.backbone.params + report.neck.params,
    };
    Ok(report)
}

/// `flops` in units of 1e9, two decimals.
pub fn gflops(flops: u64) -> String {
    format!("{:.2}", flops as f64 / 1e9)
}

fn component_name(c: Component) -> &'static str {
    match c {
        Component::Backbone => "backbone",
        Component::Neck => "neck",
    }
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:<9} {:<40} {:>16} {:>8} {:>8} {:>12}",
            "node", "part", "operation", "output", "GFLOPs", "cum", "params"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:<9} {:<40} {:>16} {:>8} {:>8} {:>12}",
                r.label,
                component_name(r.component),
                r.description,
                r.shape.to_string(),
                gflops(r.flops),
                gflops(r.cumulative),
                r.params
            );
        }
        if self.mode == FlopMode::Strict {
            s.push_str("mode: strict (counts non-conv ops; not comparable with published figures)\n");
        }
        for (name, t) in [("backbone", self.backbone), ("neck", self.neck), ("total", self.total)] {
            let _ = writeln!(s, "{name:<9} {:>8} GFLOPs {:>14} params", gflops(t.flops), t.params);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,label,component,operation,output,flops,cumulative,params\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},\"{}\",{},{},{},{}",
                r.node.0,
                r.label,
                component_name(r.component),
                r.description,
                r.shape,
                r.flops,
                r.cumulative,
                r.params
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Smallest width in `lo..=hi` whose FLOPs (as computed by `flops_at`)
/// reach `target`, or the one of the two bracketing widths closer to it.
/// `flops_at` must be non-decreasing in the width.
pub fn match_width<F>(target: u64, lo: usize, hi: usize, mut flops_at: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<u64>,
{
    if lo == 0 || lo > hi {
        return Err(GraphError::Config(format!("invalid width range {lo}..={hi}")));
    }
    let (mut a, mut b) = (lo, hi);
    while a < b {
        let mid = a + (b - a) / 2;
        if flops_at(mid)? < target {
            a = mid + 1;
        } else {
            b = mid;
        }
    }
    if a > lo {
        let above = flops_at(a)?.abs_diff(target);
        let below = flops_at(a - 1)?.abs_diff(target);
        if below < above {
            return Ok(a - 1);
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_s2d_chain, S2DChainConfig};

    fn single_conv(h: usize, w: usize, cin: usize, cout: usize, k: usize, stride: usize) -> ArchitectureGraph {
        let mut g = ArchitectureGraph::new("one");
        let a = g.add_node(
            Some(3),
            0,
            Component::Neck,
            Op::Source {
                stride: 1,
                channels: cin,
            },
        );
        let b = g.add_node(
            Some(3),
            1,
            Component::Neck,
            Op::Conv {
                out_channels: cout,
                kernel: k,
                stride,
                padding: k / 2,
                activation: Activation::None,
            },
        );
        g.connect(a, b, Transform::Identity);
        g.inputs = vec![a];
        g.outputs = vec![b];
        infer_shapes(&g, Shape::new(h, w, 3)).unwrap()
    }

    #[test]
    fn conv_flops_match_formula() {
        let g = single_conv(1280, 768, 3, 32, 3, 2);
        assert_eq!(flops_of(&g, NodeId(1)).unwrap(), 640 * 384 * 32 * 3 * 3 * 3);
        assert_eq!(flops_of(&g, NodeId(1)).unwrap(), 212_336_640);
        assert_eq!(flops_of(&g, NodeId(0)).unwrap(), 0);
        let g = single_conv(160, 96, 256, 128, 1, 1);
        assert_eq!(flops_of(&g, NodeId(1)).unwrap(), 503_316_480);
        assert_eq!(param_count(&g).unwrap(), 32_896);
        assert_eq!(static_param_count(&g).unwrap(), 32_896);
    }

    #[test]
    fn s2d_chain_rows() {
        let g = build_s2d_chain(&S2DChainConfig::default()).unwrap();
        let r = analyze(&g, Shape::new(1280, 768, 3)).unwrap();
        assert_eq!(r.rows.len(), 20);
        assert!(r.rows.iter().filter(|r| r.description == "silu").all(|r| r.flops == 0));
        assert_eq!(r.total.flops, r.rows.last().unwrap().cumulative);
        assert_eq!(r.neck, Totals::default());
        let expected_params: u64 = [
            (27, 32),
            (288, 64),
            (256, 128),
            (512, 256),
            (1024, 512),
            (2048, 1024),
            (4096, 2048),
        ]
        .iter()
        .map(|&(fan_in, out)| fan_in * out + out)
        .sum();
        assert_eq!(r.total.params, expected_params);
        assert!(static_param_count(&g).is_err());
    }

    #[test]
    fn empty_graph_is_free() {
        let r = analyze(&ArchitectureGraph::new("empty"), Shape::new(8, 8, 3)).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.total, Totals::default());
    }

    #[test]
    fn strict_mode_counts_more() {
        let g = build_s2d_chain(&S2DChainConfig::default()).unwrap();
        let base = analyze(&g, Shape::new(256, 256, 3)).unwrap();
        let strict = analyze_with(&g, Shape::new(256, 256, 3), FlopMode::Strict).unwrap();
        assert!(strict.total.flops > base.total.flops);
        assert_eq!(strict.total.params, base.total.params);
        assert!(strict.to_table().contains("strict"));
    }

    #[test]
    fn match_width_brackets_target() {
        let f = |w: usize| Ok((w * w) as u64);
        assert_eq!(match_width(100, 1, 64, f).unwrap(), 10);
        assert_eq!(match_width(110, 1, 64, f).unwrap(), 10);
        assert_eq!(match_width(116, 1, 64, f).unwrap(), 11);
        assert_eq!(match_width(0, 1, 64, f).unwrap(), 1);
        assert_eq!(match_width(1 << 40, 1, 64, f).unwrap(), 64);
        assert!(match_width(1, 0, 4, f).is_err());
    }

    #[test]
    fn csv_and_json_agree_with_rows() {
        let g = build_s2d_chain(&S2DChainConfig::default()).unwrap();
        let r = analyze(&g, Shape::new(128, 128, 3)).unwrap();
        assert_eq!(r.to_csv().lines().count(), r.rows.len() + 1);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["total"]["flops"].as_u64().unwrap(), r.total.flops);
    }
}
