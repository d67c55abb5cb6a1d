use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ArchitectureGraph, FeatureNode, GraphEdge, GraphError, NodeId, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct DocumentRef<'a> {
    name: &'a str,
    schema_version: u32,
    nodes: &'a [FeatureNode],
    edges: &'a [GraphEdge],
    inputs: &'a [NodeId],
    outputs: &'a [NodeId],
    metadata: &'a BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    name: String,
    schema_version: u32,
    nodes: Vec<FeatureNode>,
    edges: Vec<GraphEdge>,
    #[serde(default)]
    inputs: Vec<NodeId>,
    #[serde(default)]
    outputs: Vec<NodeId>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Pretty-printed schema-v1 document. Edge order is preserved verbatim.
pub fn to_json(g: &ArchitectureGraph) -> String {
    let doc = DocumentRef {
        name: &g.name,
        schema_version: SCHEMA_VERSION,
        nodes: &g.nodes,
        edges: &g.edges,
        inputs: &g.inputs,
        outputs: &g.outputs,
        metadata: &g.metadata,
    };
    serde_json::to_string_pretty(&doc).expect("graph documents always serialize")
}

/// Parses and structurally validates a schema-v1 document.
pub fn from_json(text: &str) -> Result<ArchitectureGraph> {
    let mut de = serde_json::Deserializer::from_str(text);
    let doc: Document = serde_path_to_error::deserialize(&mut de).map_err(|e| GraphError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(GraphError::Version(doc.schema_version));
    }
    let g = ArchitectureGraph {
        name: doc.name,
        nodes: doc.nodes,
        edges: doc.edges,
        inputs: doc.inputs,
        outputs: doc.outputs,
        metadata: doc.metadata,
    };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_shapes, Op};
    use crate::tensor::Shape;

    const MINIMAL: &str = r#"{
        "name": "minimal",
        "schema_version": 1,
        "nodes": [
            {"id": 0, "level": null, "layer": 0, "component": "backbone", "op": {"kind": "input"}},
            {"id": 1, "level": null, "layer": 1, "component": "backbone",
             "op": {"kind": "conv", "out_channels": 8, "kernel": 3, "stride": 2, "padding": 1}}
        ],
        "edges": [{"src": 0, "dst": 1, "transform": "identity"}],
        "inputs": [0],
        "outputs": [1]
    }"#;

    #[test]
    fn minimal_document_loads_and_infers() {
        let g = from_json(MINIMAL).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert!(matches!(g.nodes[1].op, Op::Conv { out_channels: 8, .. }));
        let g = infer_shapes(&g, Shape::new(16, 16, 3)).unwrap();
        assert_eq!(g.nodes[1].shape, Some(Shape::new(8, 8, 8)));
        assert_eq!(from_json(&to_json(&g)).unwrap(), g);
    }

    #[test]
    fn schema_errors_carry_paths() {
        let bad = MINIMAL.replace(r#""stride": 2"#, r#""stride": "two""#);
        match from_json(&bad) {
            // tagged op bodies are buffered, so the path stops at the op
            Err(GraphError::Schema { path, message }) => {
                assert_eq!(path, "nodes[1].op");
                assert!(message.contains("two"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace(r#""transform": "identity""#, r#""transform": "sideways""#);
        match from_json(&bad) {
            Err(GraphError::Schema { path, .. }) => assert_eq!(path, "edges[0].transform"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace(r#""schema_version": 1"#, r#""schema_version": 2"#);
        assert!(matches!(from_json(&bad), Err(GraphError::Version(2))));
        let bad = MINIMAL.replace(r#""dst": 1"#, r#""dst": 5"#);
        assert!(matches!(from_json(&bad), Err(GraphError::UnknownNode(NodeId(5)))));
    }
}
