use std::fmt::Write;

use super::{ArchitectureGraph, Transform};

/// Graphviz rendering: one node per feature node, labelled `P{k}^{l}`
/// (backbone stages `S^{l}`). Edge style encodes the transform.
pub fn to_dot(g: &ArchitectureGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", g.name.replace('"', "'"));
    if !g.nodes.is_empty() {
        out.push_str("  rankdir=BT;\n  node [shape=box, fontsize=10];\n");
    }
    for n in &g.nodes {
        let mut label = format!("{}\\n{}", n.label(), n.op.describe());
        if let Some(s) = n.shape {
            let _ = write!(label, "\\n{s}");
        }
        let _ = writeln!(out, "  n{} [label=\"{}\"];", n.id.0, label);
    }
    for e in &g.edges {
        let attrs = match e.transform {
            Transform::Identity => "style=solid".to_string(),
            Transform::Upsample2 => "style=dashed, color=blue, label=\"up\"".to_string(),
            Transform::Downsample2 => "style=dotted, color=red, label=\"down\"".to_string(),
            Transform::Project(c) => format!("style=bold, color=darkgreen, label=\"proj {c}\""),
        };
        let _ = writeln!(out, "  n{} -> n{} [{}];", e.src.0, e.dst.0, attrs);
    }
    out.push_str("}\n");
    out
}
