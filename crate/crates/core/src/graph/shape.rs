use super::{ArchitectureGraph, FusionStyle, GraphError, GraphIndex, Op, Result, Transform};
use crate::tensor::{conv_output_dim, Shape};

/// Largest downsampling factor any node sees relative to the graph input.
pub fn max_stride(g: &ArchitectureGraph) -> Result<usize> {
    let idx = GraphIndex::new(g)?;
    let order = g.toposort()?;
    let mut stride = vec![1usize; g.nodes.len()];
    let mut best = 1;
    for id in order {
        let p = idx.position(id).unwrap();
        let incoming = idx
            .in_edges(p)
            .iter()
            .map(|&ei| {
                let e = &g.edges[ei];
                let s = stride[idx.position(e.src).unwrap()];
                match e.transform {
                    Transform::Upsample2 => (s / 2).max(1),
                    Transform::Downsample2 => s * 2,
                    _ => s,
                }
            })
            .max()
            .unwrap_or(1);
        stride[p] = match &g.nodes[p].op {
            Op::Input => 1,
            Op::Source { stride, .. } => *stride,
            Op::Conv { stride, .. } => incoming * stride,
            Op::SpaceToDepth { block } => incoming * block,
            _ => incoming,
        };
        best = best.max(stride[p]);
    }
    Ok(best)
}

/// Annotates every node with its output shape for an input of `input`.
pub fn infer_shapes(g: &ArchitectureGraph, input: Shape) -> Result<ArchitectureGraph> {
    let divisor = max_stride(g)?;
    if !input.height.is_multiple_of(divisor) || !input.width.is_multiple_of(divisor) || input.numel() == 0 {
        return Err(GraphError::NotDivisible {
            height: input.height,
            width: input.width,
            divisor,
        });
    }
    let idx = GraphIndex::new(g)?;
    let mut out = g.clone();
    let mut shapes: Vec<Option<Shape>> = vec![None; g.nodes.len()];

    for id in g.toposort()? {
        let p = idx.position(id).unwrap();
        let conflict = |detail: String| GraphError::ShapeConflict { node: id, detail };
        let ins = idx
            .in_edges(p)
            .iter()
            .map(|&ei| {
                let e = &g.edges[ei];
                let s = shapes[idx.position(e.src).unwrap()].expect("toposort visits sources first");
                e.transform
                    .apply(s)
                    .map_err(|err| conflict(format!("edge from {}: {err}", e.src)))
            })
            .collect::<Result<Vec<_>>>()?;

        let shape = match &g.nodes[p].op {
            Op::Input => input,
            Op::Source { stride, channels } => {
                if *stride == 0 || *channels == 0 {
                    return Err(conflict("source needs positive stride and channels".into()));
                }
                Shape::new(input.height / stride, input.width / stride, *channels)
            }
            Op::Identity | Op::Silu => ins[0],
            Op::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let s = ins[0];
                let oh = conv_output_dim(s.height, *kernel, *stride, *padding);
                let ow = conv_output_dim(s.width, *kernel, *stride, *padding);
                match (oh, ow) {
                    (Some(h), Some(w)) if *out_channels > 0 => Shape::new(h, w, *out_channels),
                    _ => {
                        return Err(conflict(format!(
                            "conv {kernel}x{kernel}/{stride} on {s} has no output"
                        )))
                    }
                }
            }
            Op::SpaceToDepth { block } => {
                let s = ins[0];
                if *block == 0 || s.height % block != 0 || s.width % block != 0 {
                    return Err(conflict(format!("{s} not divisible by block {block}")));
                }
                Shape::new(s.height / block, s.width / block, s.channels * block * block)
            }
            Op::Fusion {
                style, out_channels, ..
            } => {
                let first = ins[0];
                for s in &ins[1..] {
                    let ok = match style {
                        FusionStyle::Concat => s.same_spatial(&first),
                        FusionStyle::Sum => *s == first,
                    };
                    if !ok {
                        return Err(conflict(format!("{style} fusion of {first} and {s}")));
                    }
                }
                Shape::new(first.height, first.width, *out_channels)
            }
        };
        shapes[p] = Some(shape);
        out.nodes[p].shape = Some(shape);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Component;

    #[test]
    fn identity_graph_keeps_input_shape() {
        let mut g = ArchitectureGraph::new("id");
        let a = g.add_node(None, 0, Component::Backbone, Op::Input);
        let b = g.add_node(None, 1, Component::Backbone, Op::Identity);
        g.connect(a, b, Transform::Identity);
        g.inputs = vec![a];
        g.outputs = vec![b];
        let s = Shape::new(5, 3, 2);
        let g2 = infer_shapes(&g, s).unwrap();
        assert!(g2.nodes.iter().all(|n| n.shape == Some(s)));
        assert_eq!(infer_shapes(&g2, s).unwrap(), g2);
    }

    #[test]
    fn fusion_conflicts_are_reported() {
        let mut g = ArchitectureGraph::new("bad");
        let a = g.add_node(Some(3), 0, Component::Neck, Op::Source { stride: 8, channels: 4 });
        let b = g.add_node(
            Some(4),
            0,
            Component::Neck,
            Op::Source {
                stride: 16,
                channels: 4,
            },
        );
        let f = g.add_node(
            Some(3),
            1,
            Component::Neck,
            Op::Fusion {
                style: crate::graph::FusionStyle::Concat,
                out_channels: 4,
                kernel: 3,
                activation: Default::default(),
            },
        );
        g.connect(a, f, Transform::Identity);
        g.connect(b, f, Transform::Identity);
        g.inputs = vec![a, b];
        g.outputs = vec![f];
        assert!(matches!(
            infer_shapes(&g, Shape::new(64, 64, 3)),
            Err(GraphError::ShapeConflict { .. })
        ));
        g.edges[1].transform = Transform::Upsample2;
        assert!(infer_shapes(&g, Shape::new(64, 64, 3)).is_ok());
        assert!(matches!(
            infer_shapes(&g, Shape::new(40, 64, 3)),
            Err(GraphError::NotDivisible { divisor: 16, .. })
        ));
    }
}
