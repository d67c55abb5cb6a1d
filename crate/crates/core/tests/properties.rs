use std::collections::BTreeMap;

use giraffe_core::backbone::{build_pyramid_stub, build_s2d_chain, PyramidStubConfig, S2DChainConfig};
use giraffe_core::cost::analyze;
use giraffe_core::graph::{
    execute, from_json, infer_shapes, to_dot, to_json, ArchitectureGraph, Component, ExecMode, FusionStyle, Op,
    Transform, WeightStore,
};
use giraffe_core::neck::{build_gfpn, CrossScale, GfpnConfig, LayerOrder, NeckKind, NeckSpec, SkipMode};
use giraffe_core::tensor::{
    bilinear_up2, conv2d, conv_output_dim, depth_to_space, maxpool_down2, space_to_depth, ConvWeights, Shape, Tensor,
};
use proptest::prelude::*;

fn tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_, _, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
    .unwrap()
}

fn arb_gfpn() -> impl Strategy<Value = GfpnConfig> {
    (
        1usize..7,
        1usize..12,
        prop_oneof![Just(SkipMode::None), Just(SkipMode::Dense), Just(SkipMode::Log2n)],
        prop_oneof![Just(CrossScale::Queen), Just(CrossScale::None)],
        prop_oneof![Just(FusionStyle::Concat), Just(FusionStyle::Sum)],
        prop_oneof![Just(LayerOrder::BottomUp), Just(LayerOrder::Alternating)],
        (3u8..=7, 0u8..=4),
    )
        .prop_map(
            |(depth, width, skip_mode, cross_scale, fusion_style, order, (lo, span))| GfpnConfig {
                depth,
                width,
                skip_mode,
                cross_scale,
                fusion_style,
                levels: (lo, (lo + span).min(7)),
                within_layer_order: order,
            },
        )
}

fn pyramid() -> Vec<(u8, usize)> {
    vec![(3, 5), (4, 6), (5, 7), (6, 3), (7, 2)]
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(64)
    })]

    #[test]
    fn gfpn_graphs_are_valid(cfg in arb_gfpn()) {
        let g = build_gfpn(&cfg, &pyramid()).unwrap();
        g.validate().unwrap();
        let g = infer_shapes(&g, Shape::new(256, 128, 3)).unwrap();
        let (lo, hi) = cfg.levels;
        for n in &g.nodes {
            let k = n.level.unwrap();
            prop_assert!((lo..=hi).contains(&k));
            if let Op::Fusion { style, .. } = n.op {
                prop_assert_eq!(n.shape.unwrap().channels, cfg.width);
                let ins = g.in_edges(n.id);
                let widths: Vec<usize> = ins
                    .iter()
                    .map(|e| e.transform.apply(g.node(e.src).unwrap().shape.unwrap()).unwrap().channels)
                    .collect();
                if style == FusionStyle::Concat {
                    let expected = widths.len() * cfg.width;
                    prop_assert_eq!(widths.iter().sum::<usize>(), expected);
                } else {
                    prop_assert!(widths.iter().all(|&w| w == cfg.width));
                }
                for e in ins {
                    let src = g.node(e.src).unwrap().level.unwrap();
                    prop_assert!((lo..=hi).contains(&src));
                    let expect = match src.cmp(&k) {
                        std::cmp::Ordering::Less => Transform::Downsample2,
                        std::cmp::Ordering::Greater => Transform::Upsample2,
                        std::cmp::Ordering::Equal => Transform::Identity,
                    };
                    prop_assert_eq!(e.transform, expect);
                }
            }
        }
        prop_assert_eq!(g.outputs.len(), usize::from(hi - lo + 1));
    }

    #[test]
    fn json_round_trip(cfg in arb_gfpn()) {
        let g = build_gfpn(&cfg, &pyramid()).unwrap();
        let back = from_json(&to_json(&g)).unwrap();
        prop_assert_eq!(&back, &g);
        let shaped = infer_shapes(&g, Shape::new(128, 128, 3)).unwrap();
        prop_assert_eq!(from_json(&to_json(&shaped)).unwrap(), shaped);
        let dot = to_dot(&g);
        prop_assert_eq!(dot.lines().filter(|l| l.contains("[label=") && !l.contains(" -> n")).count(), g.nodes.len());
        prop_assert_eq!(dot.lines().filter(|l| l.contains(" -> n")).count(), g.edges.len());
    }

    #[test]
    fn space_to_depth_is_a_bijection(h in 1usize..9, w in 1usize..9, c in 1usize..5, block in 1usize..4, seed: u64) {
        let x = tensor(Shape::new(h * block, w * block, c), seed);
        let y = space_to_depth(&x, block).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(h, w, c * block * block));
        let mut a: Vec<f64> = x.data().to_vec();
        let mut b: Vec<f64> = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(depth_to_space(&y, block).unwrap(), x);
    }

    #[test]
    fn conv_shape_algebra(h in 1usize..12, w in 1usize..12, k in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        let x = tensor(Shape::new(h, w, 2), 1);
        let wts = ConvWeights::new(3, 2, k, k, vec![0.5; 3 * 2 * k * k], None).unwrap();
        let oh = conv_output_dim(h, k, stride, pad);
        let ow = conv_output_dim(w, k, stride, pad);
        let direct = |n: usize| (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1);
        prop_assert_eq!(oh, direct(h));
        prop_assert_eq!(ow, direct(w));
        match (oh, ow) {
            (Some(oh), Some(ow)) => prop_assert_eq!(conv2d(&x, &wts, stride, pad).unwrap().shape(), Shape::new(oh, ow, 3)),
            _ => prop_assert!(conv2d(&x, &wts, stride, pad).is_err()),
        }
    }

    #[test]
    fn bilinear_stays_in_range(h in 1usize..8, w in 1usize..8, c in 1usize..3, seed: u64) {
        let x = tensor(Shape::new(h, w, c), seed);
        let y = bilinear_up2(&x);
        prop_assert_eq!(y.shape(), Shape::new(2 * h, 2 * w, c));
        for ch in 0..c {
            let xs: Vec<f64> = (0..h * w).map(|i| x.get(i / w, i % w, ch)).collect();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    let v = y.get(yy, xx, ch);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_window_member(h in 1usize..8, w in 1usize..8, c in 1usize..3, seed: u64) {
        let x = tensor(Shape::new(2 * h, 2 * w, c), seed);
        let y = maxpool_down2(&x).unwrap();
        for oy in 0..h {
            for ox in 0..w {
                for ch in 0..c {
                    let window = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| x.get(2 * oy + dy, 2 * ox + dx, ch));
                    let v = y.get(oy, ox, ch);
                    prop_assert!(window.contains(&v));
                    prop_assert!(window.iter().all(|&u| u <= v));
                }
            }
        }
    }

    #[test]
    fn flops_add_over_disjoint_union(a in arb_gfpn(), b in arb_gfpn()) {
        let ga = build_gfpn(&a, &pyramid()).unwrap();
        let gb = build_gfpn(&b, &pyramid()).unwrap();
        let mut both = ga.clone();
        both.append(&gb);
        let input = Shape::new(256, 256, 3);
        let (ra, rb, rab) = (analyze(&ga, input).unwrap(), analyze(&gb, input).unwrap(), analyze(&both, input).unwrap());
        prop_assert_eq!(rab.total.flops, ra.total.flops + rb.total.flops);
        prop_assert_eq!(rab.total.params, ra.total.params + rb.total.params);
        prop_assert_eq!(rab.rows.last().unwrap().cumulative, rab.total.flops);
    }

    #[test]
    fn flops_scale_quadratically(cfg in arb_gfpn(), a in 1usize..3, b in 1usize..3) {
        let g = build_gfpn(&cfg, &pyramid()).unwrap();
        let small = analyze(&g, Shape::new(128 * a, 128 * b, 3)).unwrap();
        let large = analyze(&g, Shape::new(256 * a, 256 * b, 3)).unwrap();
        prop_assert_eq!(large.total.flops, 4 * small.total.flops);
        prop_assert_eq!(large.total.params, small.total.params);
    }
}

#[test]
fn s2d_chain_flops_scale_quadratically() {
    let g = build_s2d_chain(&S2DChainConfig::default()).unwrap();
    let small = analyze(&g, Shape::new(640, 384, 3)).unwrap();
    let large = analyze(&g, Shape::new(1280, 768, 3)).unwrap();
    assert_eq!(large.total.flops, 4 * small.total.flops);
}

#[test]
fn serial_and_parallel_execution_agree_bitwise() {
    for kind in ["gfpn-log2n", "gfpn-dense", "fpn", "panet", "bifpn"] {
        let kind: NeckKind = kind.parse().unwrap();
        let spec = NeckSpec::new(kind, 3, 6);
        let neck = spec.build(&pyramid()).unwrap();
        let stub = build_pyramid_stub(&PyramidStubConfig::from_channels(pyramid())).unwrap();
        let g = ArchitectureGraph::compose("stub+neck", &stub, &neck).unwrap();
        let g = infer_shapes(&g, Shape::new(128, 256, 3)).unwrap();
        let weights = WeightStore::<f32>::seeded(&g, 3).unwrap();
        let inputs: BTreeMap<_, _> = g
            .inputs
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, tensor(g.node(*id).unwrap().shape.unwrap(), i as u64).cast::<f32>()))
            .collect();
        let serial = execute(&g, &inputs, &weights, ExecMode::Serial).unwrap();
        let parallel = execute(&g, &inputs, &weights, ExecMode::Parallel).unwrap();
        assert_eq!(serial, parallel, "{kind}");
        assert_eq!(g.count(Component::Neck), neck.count(Component::Neck));
    }
}
