//! Central finite-difference checks of the tape's gradients, in double
//! precision.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{infer_shapes, record, FusionStyle, GraphError, NodeId, WeightKey, WeightStore};
use crate::neck::{build_gfpn, CrossScale, GfpnConfig, LayerOrder, SkipMode};
use crate::tensor::{ConvWeights, ParamId, Shape, Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-4;
/// Each entry is retried at `STEP / 10^n` for `n < STEP_REFINEMENTS` until it
/// is well inside the tolerance; the smallest error counts. A max-pool tie
/// inside one step size then does not register as a gradient error.
pub const STEP_REFINEMENTS: i32 = 4;
pub const TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator, so near-zero gradients are
/// compared absolutely.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Forward = dyn Fn(&mut Tape<f64>, &[Var], &[ConvWeights<f64>]) -> Result<(Vec<Var>, Vec<ParamId>), GradcheckError>;

/// A differentiable function of some input tensors and weight blocks.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub weights: Vec<ConvWeights<f64>>,
    forward: Box<Forward>,
}

impl Case {
    pub fn new<F>(name: impl Into<String>, inputs: Vec<Tensor<f64>>, weights: Vec<ConvWeights<f64>>, forward: F) -> Self
    where
        F: Fn(&mut Tape<f64>, &[Var], &[ConvWeights<f64>]) -> Result<(Vec<Var>, Vec<ParamId>), GradcheckError>
            + 'static,
    {
        Self {
            name: name.into(),
            inputs,
            weights,
            forward: Box::new(forward),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockResult {
    pub case: String,
    pub block: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Options {
    pub seed: u64,
    /// Break the SiLU backward pass on purpose.
    pub inject_fault: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0)).expect("positive shape")
}

fn random_weights(rng: &mut ChaCha8Rng, out: usize, cin: usize, k: usize) -> ConvWeights<f64> {
    let values = (0..out * cin * k * k).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bias = (0..out).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ConvWeights::new(out, cin, k, k, values, Some(bias)).expect("consistent sizes")
}

/// Tape, input vars, output vars and parameter ids of one recorded run.
type Recorded = (Tape<f64>, Vec<Var>, Vec<Var>, Vec<ParamId>);

fn run(
    case: &Case,
    inputs: &[Tensor<f64>],
    weights: &[ConvWeights<f64>],
    fault: bool,
) -> Result<Recorded, GradcheckError> {
    let mut tape = Tape::new();
    if fault {
        tape.corrupt_silu_backward(1.5);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let (outs, params) = (case.forward)(&mut tape, &vars, weights)?;
    Ok((tape, vars, outs, params))
}

fn loss(tape: &Tape<f64>, outs: &[Var], seeds: &[Tensor<f64>]) -> f64 {
    outs.iter()
        .zip(seeds)
        .map(|(&o, r)| {
            tape.value(o)
                .data()
                .iter()
                .zip(r.data())
                .map(|(y, r)| y * r)
                .sum::<f64>()
        })
        .sum()
}

fn perturbed_tensor(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut d = t.data().to_vec();
    d[i] += delta;
    Tensor::from_shape_vec(t.shape(), d).expect("same shape")
}

/// Checks every input element, weight and bias of `case` against central
/// differences of `sum(r * y)` for a random `r`.
pub fn check_case(case: &Case, opts: Options) -> Result<Vec<BlockResult>, GradcheckError> {
    let (tape, vars, outs, params) = run(case, &case.inputs, &case.weights, opts.inject_fault)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let seeds: Vec<Tensor<f64>> = outs
        .iter()
        .map(|&o| random_tensor(&mut rng, tape.value(o).shape()))
        .collect();

    let mut input_grads: Vec<Vec<f64>> = case.inputs.iter().map(|t| vec![0.0; t.data().len()]).collect();
    let mut weight_grads: Vec<(Vec<f64>, Vec<f64>)> = case
        .weights
        .iter()
        .map(|w| {
            (
                vec![0.0; w.values.len()],
                vec![0.0; w.bias.as_ref().map_or(0, Vec::len)],
            )
        })
        .collect();
    for (&o, r) in outs.iter().zip(&seeds) {
        let grads = tape.backward(o, r)?;
        for (acc, &v) in input_grads.iter_mut().zip(&vars) {
            if let Some(g) = grads.tensor(v) {
                acc.iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
            }
        }
        for (acc, &p) in weight_grads.iter_mut().zip(&params) {
            if let Some(g) = grads.param(p) {
                acc.0.iter_mut().zip(&g.values).for_each(|(a, g)| *a += g);
                if let Some(b) = &g.bias {
                    acc.1.iter_mut().zip(b).for_each(|(a, g)| *a += g);
                }
            }
        }
    }

    let eval = |inputs: &[Tensor<f64>], weights: &[ConvWeights<f64>]| -> Result<f64, GradcheckError> {
        let (tape, _, outs, _) = run(case, inputs, weights, false)?;
        Ok(loss(&tape, &outs, &seeds))
    };
    let mut results = Vec::new();
    let mut push = |block: String, entries: usize, max: f64| {
        results.push(BlockResult {
            case: case.name.clone(),
            block,
            entries,
            max_rel_error: max,
            passed: max <= TOLERANCE,
        })
    };

    for (j, analytic) in input_grads.iter().enumerate() {
        let mut max = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let err = entry_error(a, |h| {
                let mut inputs = case.inputs.clone();
                inputs[j] = perturbed_tensor(&case.inputs[j], i, h);
                eval(&inputs, &case.weights)
            })?;
            max = max.max(err);
        }
        push(format!("input[{j}]"), analytic.len(), max);
    }

    for (j, (wg, bg)) in weight_grads.iter().enumerate() {
        let mut max = 0.0f64;
        for (i, &a) in wg.iter().enumerate() {
            let err = entry_error(a, |h| {
                let mut weights = case.weights.clone();
                weights[j].values[i] += h;
                eval(&case.inputs, &weights)
            })?;
            max = max.max(err);
        }
        for (i, &a) in bg.iter().enumerate() {
            let err = entry_error(a, |h| {
                let mut weights = case.weights.clone();
                weights[j].bias.as_mut().unwrap()[i] += h;
                eval(&case.inputs, &weights)
            })?;
            max = max.max(err);
        }
        push(format!("weights[{j}]"), wg.len() + bg.len(), max);
    }
    Ok(results)
}

/// Smallest central-difference relative error over the refined steps.
fn entry_error(
    analytic: f64,
    mut loss_at: impl FnMut(f64) -> Result<f64, GradcheckError>,
) -> Result<f64, GradcheckError> {
    let mut best = f64::INFINITY;
    for n in 0..STEP_REFINEMENTS {
        let h = STEP / 10f64.powi(n);
        let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        best = best.min(rel_error(analytic, numeric));
        if best <= TOLERANCE * 1e-2 {
            break;
        }
    }
    Ok(best)
}

/// One case per primitive: convolutions, SiLU, space-to-depth, resampling,
/// concatenation and summation.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let s = Shape::new(6, 4, 3);

    for (name, k, stride, pad) in [("conv3x3", 3, 1, 1), ("conv3x3/2", 3, 2, 1), ("conv1x1", 1, 1, 0)] {
        let x = random_tensor(&mut rng, s);
        let w = random_weights(&mut rng, 2, 3, k);
        cases.push(Case::new(name, vec![x], vec![w], move |t, v, w| {
            let p = t.param(w[0].clone());
            let y = if k == 1 {
                t.conv1x1(v[0], p)?
            } else {
                t.conv2d(v[0], p, stride, pad)?
            };
            Ok((vec![y], vec![p]))
        }));
    }
    let x = random_tensor(&mut rng, s);
    cases.push(Case::new("silu", vec![x], vec![], |t, v, _| {
        Ok((vec![t.silu(v[0])?], vec![]))
    }));
    let x = random_tensor(&mut rng, s);
    cases.push(Case::new("space_to_depth", vec![x], vec![], |t, v, _| {
        Ok((vec![t.space_to_depth(v[0], 2)?], vec![]))
    }));
    let x = random_tensor(&mut rng, s);
    cases.push(Case::new("bilinear_up2", vec![x], vec![], |t, v, _| {
        Ok((vec![t.bilinear_up2(v[0])?], vec![]))
    }));
    let x = random_tensor(&mut rng, s);
    cases.push(Case::new("maxpool_down2", vec![x], vec![], |t, v, _| {
        Ok((vec![t.maxpool_down2(v[0])?], vec![]))
    }));
    let (a, b) = (random_tensor(&mut rng, s), random_tensor(&mut rng, Shape::new(6, 4, 2)));
    cases.push(Case::new("concat", vec![a, b], vec![], |t, v, _| {
        Ok((vec![t.concat_channels(v)?], vec![]))
    }));
    let (a, b) = (random_tensor(&mut rng, s), random_tensor(&mut rng, s));
    cases.push(Case::new("sum", vec![a, b], vec![], |t, v, _| {
        Ok((vec![t.sum_tensors(v)?], vec![]))
    }));
    cases
}

/// GFPN over P3..P4 (three channels each), depth 2, width 4, fed by a
/// 64x64 image so P3 is 8x8 and P4 is 4x4.
pub fn tiny_gfpn_case(seed: u64) -> Result<Case, GradcheckError> {
    let cfg = GfpnConfig {
        depth: 2,
        width: 4,
        skip_mode: SkipMode::Log2n,
        cross_scale: CrossScale::Queen,
        fusion_style: FusionStyle::Concat,
        levels: (3, 4),
        within_layer_order: LayerOrder::BottomUp,
    };
    let g = infer_shapes(&build_gfpn(&cfg, &[(3, 3), (4, 3)])?, Shape::new(64, 64, 3))?;
    let store = WeightStore::<f64>::seeded(&g, seed)?;
    let keys: Vec<WeightKey> = store.iter().map(|(k, _)| k).collect();
    let weights: Vec<ConvWeights<f64>> = store.iter().map(|(_, w)| w.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let sources: Vec<NodeId> = g.inputs.clone();
    let inputs = sources
        .iter()
        .map(|id| random_tensor(&mut rng, g.node(*id).unwrap().shape.unwrap()))
        .collect();
    Ok(Case::new("tiny-gfpn", inputs, weights, move |tape, vars, w| {
        let store: WeightStore<f64> = {
            let mut s = WeightStore::default();
            for (k, w) in keys.iter().zip(w) {
                s.insert(*k, w.clone());
            }
            s
        };
        let feed: BTreeMap<NodeId, Var> = sources.iter().copied().zip(vars.iter().copied()).collect();
        let (values, params) = record(&g, tape, &feed, &store)?;
        let outs = g.outputs.iter().map(|id| values[id]).collect();
        Ok((outs, keys.iter().map(|k| params[k]).collect()))
    }))
}

/// Primitive suite plus the tiny GFPN.
pub fn run_suite(opts: Options) -> Result<GradcheckReport, GradcheckError> {
    let mut blocks = Vec::new();
    let mut cases = primitive_cases(opts.seed);
    cases.push(tiny_gfpn_case(opts.seed)?);
    for case in &cases {
        blocks.extend(check_case(case, opts)?);
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        blocks,
    })
}
