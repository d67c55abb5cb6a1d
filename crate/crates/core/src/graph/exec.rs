use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ArchitectureGraph, FusionStyle, GraphError, GraphIndex, NodeId, Op, Result, Transform};
use crate::graph::Activation;
use crate::tensor::{self, ConvWeights, Element, ParamId, Shape, Tape, Tensor, TensorError, Var};

/// Where a parameter block is attached: a node's own conv, or the 1x1
/// projection on an edge (by index into `edges`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WeightKey {
    Node(NodeId),
    Edge(usize),
}

/// Convolution weights for one graph, kept apart from the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T: Element> {
    blocks: BTreeMap<WeightKey, ConvWeights<T>>,
}

impl<T: Element> Default for WeightStore<T> {
    fn default() -> Self {
        Self {
            blocks: BTreeMap::new(),
        }
    }
}

impl<T: Element> WeightStore<T> {
    /// Every conv and projection initialized from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// drawn in topological order from a ChaCha stream seeded with `seed`.
    ///
    /// Values are drawn in double precision and then converted, so single-
    /// and double-precision stores built from one seed agree up to rounding.
    pub fn seeded(g: &ArchitectureGraph, seed: u64) -> Result<Self> {
        let idx = GraphIndex::new(g)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        let shape_of = |id: NodeId| -> Result<Shape> {
            g.nodes[idx.position(id).unwrap()]
                .shape
                .ok_or(GraphError::MissingShape(id))
        };
        for id in g.toposort()? {
            let p = idx.position(id).unwrap();
            let mut in_shapes = Vec::new();
            for &ei in idx.in_edges(p) {
                let e = &g.edges[ei];
                let src = shape_of(e.src)?;
                if let Transform::Project(c) = e.transform {
                    store
                        .blocks
                        .insert(WeightKey::Edge(ei), draw(&mut rng, c, src.channels, 1));
                }
                in_shapes.push(
                    e.transform
                        .apply(src)
                        .map_err(|source| GraphError::Runtime { node: id, source })?,
                );
            }
            match &g.nodes[p].op {
                Op::Conv {
                    out_channels, kernel, ..
                } => {
                    let cin = in_shapes[0].channels;
                    store
                        .blocks
                        .insert(WeightKey::Node(id), draw(&mut rng, *out_channels, cin, *kernel));
                }
                Op::Fusion {
                    style,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let cin = match style {
                        FusionStyle::Concat => in_shapes.iter().map(|s| s.channels).sum(),
                        FusionStyle::Sum => in_shapes[0].channels,
                    };
                    store
                        .blocks
                        .insert(WeightKey::Node(id), draw(&mut rng, *out_channels, cin, *kernel));
                }
                _ => {}
            }
        }
        Ok(store)
    }

    pub fn get(&self, key: WeightKey) -> Option<&ConvWeights<T>> {
        self.blocks.get(&key)
    }

    pub fn insert(&mut self, key: WeightKey, w: ConvWeights<T>) {
        self.blocks.insert(key, w);
    }

    pub fn iter(&self) -> impl Iterator<Item = (WeightKey, &ConvWeights<T>)> {
        self.blocks.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.values().map(ConvWeights::param_count).sum()
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        WeightStore {
            blocks: self.blocks.iter().map(|(k, v)| (*k, v.cast())).collect(),
        }
    }
}

fn draw<T: Element>(rng: &mut ChaCha8Rng, out: usize, cin: usize, k: usize) -> ConvWeights<T> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let mut sample = || T::from_f64(rng.gen_range(-bound..bound)).unwrap();
    let values = (0..out * cin * k * k).map(|_| sample()).collect();
    let bias = (0..out).map(|_| sample()).collect();
    ConvWeights {
        out_channels: out,
        in_channels: cin,
        kernel_h: k,
        kernel_w: k,
        values,
        bias: Some(bias),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Serial,
    /// Independent ready nodes run concurrently; results match serial runs
    /// bit for bit.
    Parallel,
}

trait Backend<T: Element> {
    type Value: Clone;
    fn shape(&self, v: &Self::Value) -> Shape;
    fn conv(
        &mut self,
        node: NodeId,
        x: &Self::Value,
        key: WeightKey,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn space_to_depth(&mut self, x: &Self::Value, block: usize) -> Result<Self::Value, TensorError>;
    fn up(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn down(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn concat(&mut self, xs: &[Self::Value]) -> Result<Self::Value, TensorError>;
    fn sum(&mut self, xs: &[Self::Value]) -> Result<Self::Value, TensorError>;
}

struct Eager<'a, T: Element> {
    weights: &'a WeightStore<T>,
}

impl<T: Element> Backend<T> for Eager<'_, T> {
    type Value = Arc<Tensor<T>>;

    fn shape(&self, v: &Self::Value) -> Shape {
        v.shape()
    }

    fn conv(
        &mut self,
        node: NodeId,
        x: &Self::Value,
        key: WeightKey,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value> {
        let w = self.weights.get(key).ok_or(GraphError::MissingWeights(key))?;
        tensor::conv2d(x, w, stride, padding)
            .map(Arc::new)
            .map_err(|source| GraphError::Runtime { node, source })
    }

    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError> {
        Ok(Arc::new(tensor::silu(x)))
    }

    fn space_to_depth(&mut self, x: &Self::Value, block: usize) -> Result<Self::Value, TensorError> {
        tensor::space_to_depth(x, block).map(Arc::new)
    }

    fn up(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError> {
        Ok(Arc::new(tensor::bilinear_up2(x)))
    }

    fn down(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError> {
        tensor::maxpool_down2(x).map(Arc::new)
    }

    fn concat(&mut self, xs: &[Self::Value]) -> Result<Self::Value, TensorError> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| v.as_ref()).collect();
        tensor::concat_channels(&refs).map(Arc::new)
    }

    fn sum(&mut self, xs: &[Self::Value]) -> Result<Self::Value, TensorError> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| v.as_ref()).collect();
        tensor::sum_tensors(&refs).map(Arc::new)
    }
}

struct Recording<'a, T: Element> {
    tape: &'a mut Tape<T>,
    params: &'a BTreeMap<WeightKey, ParamId>,
}

impl<T: Element> Backend<T> for Recording<'_, T> {
    type Value = Var;

    fn shape(&self, v: &Var) -> Shape {
        self.tape.value(*v).shape()
    }

    fn conv(&mut self, node: NodeId, x: &Var, key: WeightKey, stride: usize, padding: usize) -> Result<Var> {
        let p = *self.params.get(&key).ok_or(GraphError::MissingWeights(key))?;
        self.tape
            .conv2d(*x, p, stride, padding)
            .map_err(|source| GraphError::Runtime { node, source })
    }

    fn silu(&mut self, x: &Var) -> Result<Var, TensorError> {
        self.tape.silu(*x)
    }

    fn space_to_depth(&mut self, x: &Var, block: usize) -> Result<Var, TensorError> {
        self.tape.space_to_depth(*x, block)
    }

    fn up(&mut self, x: &Var) -> Result<Var, TensorError> {
        self.tape.bilinear_up2(*x)
    }

    fn down(&mut self, x: &Var) -> Result<Var, TensorError> {
        self.tape.maxpool_down2(*x)
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        self.tape.concat_channels(xs)
    }

    fn sum(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        self.tape.sum_tensors(xs)
    }
}

fn eval_node<T: Element, B: Backend<T>>(
    b: &mut B,
    g: &ArchitectureGraph,
    idx: &GraphIndex,
    p: usize,
    inputs: Vec<B::Value>,
) -> Result<B::Value> {
    let node = &g.nodes[p];
    let id = node.id;
    let rt = |source: TensorError| GraphError::Runtime { node: id, source };

    let mut xs = Vec::with_capacity(inputs.len());
    for (&ei, v) in idx.in_edges(p).iter().zip(inputs) {
        let v = match g.edges[ei].transform {
            Transform::Identity => v,
            Transform::Upsample2 => b.up(&v).map_err(rt)?,
            Transform::Downsample2 => b.down(&v).map_err(rt)?,
            Transform::Project(_) => b.conv(id, &v, WeightKey::Edge(ei), 1, 0)?,
        };
        xs.push(v);
    }

    let out = match &node.op {
        Op::Input | Op::Source { .. } => unreachable!("sources are supplied, not evaluated"),
        Op::Identity => xs.swap_remove(0),
        Op::Silu => b.silu(&xs[0]).map_err(rt)?,
        Op::SpaceToDepth { block } => b.space_to_depth(&xs[0], *block).map_err(rt)?,
        Op::Conv {
            stride,
            padding,
            activation,
            ..
        } => {
            let y = b.conv(id, &xs[0], WeightKey::Node(id), *stride, *padding)?;
            activate(b, y, *activation).map_err(rt)?
        }
        Op::Fusion {
            style,
            kernel,
            activation,
            ..
        } => {
            let fused = match style {
                FusionStyle::Concat => b.concat(&xs),
                FusionStyle::Sum => b.sum(&xs),
            }
            .map_err(rt)?;
            let y = b.conv(id, &fused, WeightKey::Node(id), 1, kernel / 2)?;
            activate(b, y, *activation).map_err(rt)?
        }
    };

    let expected = node.shape.ok_or(GraphError::MissingShape(id))?;
    let actual = b.shape(&out);
    if actual != expected {
        return Err(GraphError::ShapeConflict {
            node: id,
            detail: format!("computed {actual}, inferred {expected}"),
        });
    }
    Ok(out)
}

fn activate<T: Element, B: Backend<T>>(b: &mut B, y: B::Value, act: Activation) -> Result<B::Value, TensorError> {
    match act {
        Activation::None => Ok(y),
        Activation::Silu => b.silu(&y),
    }
}

fn gather<V: Clone>(g: &ArchitectureGraph, idx: &GraphIndex, p: usize, values: &[Option<V>]) -> Vec<V> {
    idx.in_edges(p)
        .iter()
        .map(|&ei| {
            values[idx.position(g.edges[ei].src).unwrap()]
                .clone()
                .expect("predecessor evaluated first")
        })
        .collect()
}

/// Seeds the value slots of all source nodes, checking supplied shapes.
fn seed_sources<V, F>(g: &ArchitectureGraph, idx: &GraphIndex, mut supply: F) -> Result<Vec<Option<V>>>
where
    F: FnMut(NodeId) -> Option<(V, Shape)>,
{
    let mut values: Vec<Option<V>> = (0..g.nodes.len()).map(|_| None).collect();
    for n in g.nodes.iter().filter(|n| n.op.is_source()) {
        let expected = n.shape.ok_or(GraphError::MissingShape(n.id))?;
        let (v, shape) = supply(n.id).ok_or(GraphError::MissingInput(n.id))?;
        if shape != expected {
            return Err(GraphError::ShapeConflict {
                node: n.id,
                detail: format!("supplied {shape}, inferred {expected}"),
            });
        }
        values[idx.position(n.id).unwrap()] = Some(v);
    }
    Ok(values)
}

/// Runs the graph forward. Shapes must already be inferred; every `Input` or
/// `Source` node needs a tensor in `inputs`.
pub fn execute<T: Element>(
    g: &ArchitectureGraph,
    inputs: &BTreeMap<NodeId, Tensor<T>>,
    weights: &WeightStore<T>,
    mode: ExecMode,
) -> Result<BTreeMap<NodeId, Tensor<T>>> {
    let idx = GraphIndex::new(g)?;
    let order = g.toposort()?;
    let mut values = seed_sources(g, &idx, |id| inputs.get(&id).map(|t| (Arc::new(t.clone()), t.shape())))?;

    match mode {
        ExecMode::Serial => {
            for id in order {
                let p = idx.position(id).unwrap();
                if values[p].is_some() {
                    continue;
                }
                let ins = gather(g, &idx, p, &values);
                values[p] = Some(eval_node(&mut Eager { weights }, g, &idx, p, ins)?);
            }
        }
        ExecMode::Parallel => {
            // group by longest distance from a source; each wave only reads
            // earlier waves
            let mut wave = vec![0usize; g.nodes.len()];
            for &id in &order {
                let p = idx.position(id).unwrap();
                wave[p] = idx
                    .in_edges(p)
                    .iter()
                    .map(|&ei| wave[idx.position(g.edges[ei].src).unwrap()] + 1)
                    .max()
                    .unwrap_or(0);
            }
            let depth = wave.iter().copied().max().unwrap_or(0);
            for w in 1..=depth {
                let ready: Vec<usize> = order
                    .iter()
                    .map(|id| idx.position(*id).unwrap())
                    .filter(|&p| wave[p] == w && values[p].is_none())
                    .collect();
                let computed: Vec<(usize, Result<Arc<Tensor<T>>>)> = ready
                    .par_iter()
                    .map(|&p| {
                        let ins = gather(g, &idx, p, &values);
                        (p, eval_node(&mut Eager { weights }, g, &idx, p, ins))
                    })
                    .collect();
                for (p, r) in computed {
                    values[p] = Some(r?);
                }
            }
        }
    }

    Ok(g.nodes
        .iter()
        .zip(values)
        .filter_map(|(n, v)| v.map(|v| (n.id, Arc::try_unwrap(v).unwrap_or_else(|a| (*a).clone()))))
        .collect())
}

/// Replays the graph onto `tape`, registering every weight block as a tape
/// parameter. Returns the tape variable of each node and the parameter id of
/// each weight block.
pub fn record<T: Element>(
    g: &ArchitectureGraph,
    tape: &mut Tape<T>,
    inputs: &BTreeMap<NodeId, Var>,
    weights: &WeightStore<T>,
) -> Result<(BTreeMap<NodeId, Var>, BTreeMap<WeightKey, ParamId>)> {
    let idx = GraphIndex::new(g)?;
    let order = g.toposort()?;
    let params: BTreeMap<WeightKey, ParamId> = weights.iter().map(|(k, w)| (k, tape.param(w.clone()))).collect();
    let mut values = seed_sources(g, &idx, |id| inputs.get(&id).map(|&v| (v, tape.value(v).shape())))?;
    for id in order {
        let p = idx.position(id).unwrap();
        if values[p].is_some() {
            continue;
        }
        let ins = gather(g, &idx, p, &values);
        let mut b = Recording { tape, params: &params };
        values[p] = Some(eval_node(&mut b, g, &idx, p, ins)?);
    }
    let vars = g
        .nodes
        .iter()
        .zip(values)
        .filter_map(|(n, v)| v.map(|v| (n.id, v)))
        .collect();
    Ok((vars, params))
}
