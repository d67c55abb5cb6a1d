use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use giraffe_core::backbone::{build_pyramid_stub, build_s2d_chain, pyramid_of, PyramidStubConfig, S2DChainConfig};
use giraffe_core::cost::{analyze, analyze_with, compare_necks, gflops, match_width, path_report, FlopMode};
use giraffe_core::family::{family_table, instantiate, lookup};
use giraffe_core::gradcheck::{run_suite, Options};
use giraffe_core::graph::{
    execute, infer_shapes, to_dot, to_json, ArchitectureGraph, ExecMode, FusionStyle, NodeId, WeightStore,
};
use giraffe_core::neck::{CrossScale, LayerOrder, NeckKind, NeckSpec, SkipMode};
use giraffe_core::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::options::{
    parse_shape, AnalyzeArgs, BuildArgs, ConfigFile, FamilyAction, FamilyArgs, Format, ForwardArgs, GradcheckArgs,
    InvalidInput, ModelArgs, TopoArgs, UsageError,
};

pub const DEFAULT_ANALYZE_INPUT: Shape = Shape {
    height: 1280,
    width: 768,
    channels: 3,
};
pub const DEFAULT_FORWARD_INPUT: Shape = Shape {
    height: 128,
    width: 128,
    channels: 3,
};
const DEFAULT_WIDTH: usize = 256;
const DEFAULT_TOPO_DEPTH: usize = 11;
/// Published S2D-chain backbone cost at 1280x768, in GFLOPs.
const REFERENCE_BACKBONE_GFLOPS: f64 = 3.89;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Backbone {
    S2d,
    Stub(String),
}

#[derive(Debug, Clone)]
struct Selection {
    name: String,
    backbone: Backbone,
    neck: Option<NeckSpec>,
}

fn resolve(m: ModelArgs) -> Result<Selection> {
    let backbone = match m.backbone.as_deref().map(str::trim) {
        None | Some("s2d") => Backbone::S2d,
        Some(s) => match s.strip_prefix("stub:") {
            Some(spec) => Backbone::Stub(spec.to_string()),
            None if s == "stub" => Backbone::Stub(String::new()),
            None => bail!(UsageError(format!("unknown backbone `{s}` (s2d or stub:P3=C,...)"))),
        },
    };
    if m.model.is_some() && m.depth.is_some() {
        bail!(UsageError("--model and --depth are mutually exclusive".into()));
    }
    let entry = m.model.as_deref().map(lookup).transpose()?;
    let depth = entry.map(|e| e.depth).or(m.depth);
    let Some(depth) = depth else {
        let neck_flags = m.width.is_some()
            || m.skip.is_some()
            || m.fusion.is_some()
            || m.cross_scale.is_some()
            || m.order.is_some()
            || m.neck.is_some();
        if neck_flags {
            bail!(UsageError("neck options need --model or --depth".into()));
        }
        let name = match &backbone {
            Backbone::S2d => "s2d-chain".to_string(),
            Backbone::Stub(_) => "pyramid-stub".to_string(),
        };
        return Ok(Selection {
            name,
            backbone,
            neck: None,
        });
    };

    let kind = match (m.neck, m.skip) {
        (Some(NeckKind::Gfpn(a)), Some(b)) if a != b => {
            bail!(UsageError(format!(
                "--neck {} conflicts with --skip",
                NeckKind::Gfpn(a)
            )))
        }
        (Some(k @ NeckKind::Gfpn(_)), _) => k,
        (Some(k), None) => k,
        (Some(k), Some(_)) => bail!(UsageError(format!("--skip applies to GFPN necks, not {k}"))),
        (None, skip) => NeckKind::Gfpn(skip.unwrap_or(SkipMode::Log2n)),
    };
    let width = m.width.or(entry.map(|e| e.width)).unwrap_or(DEFAULT_WIDTH);
    let layers = match kind {
        NeckKind::Gfpn(_) => depth,
        other => other.layers_for_depth(depth),
    };
    let mut spec = NeckSpec::new(kind, layers, width);
    spec.fusion_style = m.fusion.unwrap_or(FusionStyle::Concat);
    spec.cross_scale = m.cross_scale.unwrap_or(CrossScale::Queen);
    spec.order = m.order.unwrap_or(LayerOrder::BottomUp);
    let name = match entry {
        Some(e) => format!("giraffe-{}", e.name),
        None => format!("{kind}-d{depth}-w{width}"),
    };
    Ok(Selection {
        name,
        backbone,
        neck: Some(spec),
    })
}

fn build_graph(sel: &Selection) -> Result<ArchitectureGraph> {
    let backbone = match &sel.backbone {
        Backbone::S2d => build_s2d_chain(&S2DChainConfig::default())?,
        Backbone::Stub(spec) => build_pyramid_stub(&PyramidStubConfig::parse(spec)?)?,
    };
    let Some(spec) = &sel.neck else {
        return Ok(backbone);
    };
    let neck = spec.build(&pyramid_of(&backbone)?)?;
    let mut g = ArchitectureGraph::compose(sel.name.clone(), &backbone, &neck)?;
    g.validate()?;
    g.name = sel.name.clone();
    Ok(g)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn shape_arg(cfg: &ConfigFile, flag: Option<String>, default: Shape) -> Result<Shape> {
    match cfg.pick_string(flag, "input") {
        Some(s) => parse_shape(&s),
        None => Ok(default),
    }
}

pub fn build(args: BuildArgs, cfg: &ConfigFile) -> Result<()> {
    let sel = resolve(cfg.model(args.model)?)?;
    let mut g = build_graph(&sel)?;
    if let Some(s) = cfg.pick_string(args.input, "input") {
        g = infer_shapes(&g, parse_shape(&s)?)?;
    }
    let out = cfg.pick_string(args.out.map(|p| p.display().to_string()), "out");
    let dot = cfg.pick_string(args.dot.map(|p| p.display().to_string()), "dot");
    if let Some(path) = dot {
        std::fs::write(&path, to_dot(&g)).with_context(|| format!("writing {path}"))?;
    }
    let json = to_json(&g);
    match out {
        Some(path) => {
            std::fs::write(&path, json + "\n").with_context(|| format!("writing {path}"))?;
            eprintln!("wrote {} ({} nodes, {} edges)", path, g.nodes.len(), g.edges.len());
            Ok(())
        }
        None => emit(&(json + "\n"), None),
    }
}

pub fn analyze_cmd(args: AnalyzeArgs, cfg: &ConfigFile) -> Result<()> {
    let sel = resolve(cfg.model(args.model)?)?;
    let g = build_graph(&sel)?;
    let input = shape_arg(cfg, args.input, DEFAULT_ANALYZE_INPUT)?;
    let mode = if cfg.pick_bool(args.strict, "strict")? {
        FlopMode::Strict
    } else {
        FlopMode::ConvMacs
    };
    let report = analyze_with(&g, input, mode)?;
    let reference = (sel.backbone == Backbone::S2d && input == DEFAULT_ANALYZE_INPUT && mode == FlopMode::ConvMacs)
        .then(|| {
            let computed = report.backbone.flops as f64 / 1e9;
            let gap = (computed - REFERENCE_BACKBONE_GFLOPS) / REFERENCE_BACKBONE_GFLOPS * 100.0;
            (computed, gap)
        });
    let text = match cfg.format(args.format)? {
        Format::Table => {
            let mut s = report.to_table();
            if let Some((computed, gap)) = reference {
                let _ = writeln!(
                    s,
                    "reference backbone: {REFERENCE_BACKBONE_GFLOPS:.2} GFLOPs published, {computed:.2} computed (gap {gap:+.2}%)"
                );
            }
            s
        }
        Format::Json => {
            let mut v = serde_json::to_value(&report)?;
            if let Some((computed, gap)) = reference {
                v["backbone_reference"] = json!({
                    "published_gflops": REFERENCE_BACKBONE_GFLOPS,
                    "computed_gflops": computed,
                    "gap_percent": gap,
                });
            }
            serde_json::to_string_pretty(&v)? + "\n"
        }
        Format::Csv => report.to_csv(),
    };
    let out = cfg.pick_string(args.out.map(|p| p.display().to_string()), "out");
    emit(&text, out.as_deref().map(Path::new))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Position-keyed hash of the values rounded to 1e-6.
pub fn checksum(t: &Tensor<f32>) -> u64 {
    t.data().iter().enumerate().fold(0u64, |acc, (i, &v)| {
        let q = (f64::from(v) * 1e6).round() as i64;
        acc.wrapping_add(splitmix64(splitmix64(i as u64) ^ q as u64))
    })
}

fn forward_input(cfg: &ConfigFile, flag: Option<String>) -> Result<Shape> {
    match cfg.pick_string(flag, "input").as_deref().map(str::trim) {
        None | Some("random") => Ok(DEFAULT_FORWARD_INPUT),
        Some(s) => parse_shape(s.strip_prefix("random:").unwrap_or(s)),
    }
}

pub fn forward(args: ForwardArgs, cfg: &ConfigFile) -> Result<()> {
    let sel = resolve(cfg.model(args.model)?)?;
    let g = build_graph(&sel)?;
    let input = forward_input(cfg, args.input)?;
    let seed = cfg.seed(args.seed)?;
    let mode = if args.serial {
        ExecMode::Serial
    } else if args.parallel {
        ExecMode::Parallel
    } else {
        match cfg.raw("mode").map(str::trim) {
            None | Some("parallel") => ExecMode::Parallel,
            Some("serial") => ExecMode::Serial,
            Some(other) => bail!(InvalidInput(format!(
                "config key `mode`: expected serial or parallel, got `{other}`"
            ))),
        }
    };

    let g = infer_shapes(&g, input)?;
    let weights = WeightStore::<f32>::seeded(&g, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut inputs: BTreeMap<NodeId, Tensor<f32>> = BTreeMap::new();
    for &id in &g.inputs {
        let shape = g.node(id).and_then(|n| n.shape).expect("shapes inferred");
        inputs.insert(id, Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0f32..1.0))?);
    }
    let values = execute(&g, &inputs, &weights, mode)?;

    let mut rows = Vec::new();
    let mut combined = 0u64;
    for &id in &g.outputs {
        let node = g.node(id).expect("output exists");
        let t = &values[&id];
        let sum = checksum(t);
        combined = combined.wrapping_add(splitmix64(u64::from(id.0) ^ sum));
        rows.push((node.label(), t.shape(), sum));
    }
    let mode_name = match mode {
        ExecMode::Serial => "serial",
        ExecMode::Parallel => "parallel",
    };
    let text = match cfg.format(args.format)? {
        Format::Table => {
            let mut s = format!("graph {} input {} seed {} mode {}\n", g.name, input, seed, mode_name);
            let _ = writeln!(s, "{:<8} {:>16} {:>20}", "output", "shape", "checksum");
            for (label, shape, sum) in &rows {
                let _ = writeln!(
                    s,
                    "{:<8} {:>16} {:>20}",
                    label,
                    shape.to_string(),
                    format!("{sum:016x}")
                );
            }
            let _ = writeln!(s, "checksum {combined:016x}");
            s
        }
        Format::Json => {
            let outputs: Vec<Value> = rows
                .iter()
                .map(|(label, shape, sum)| json!({"output": label, "shape": shape.to_string(), "checksum": format!("{sum:016x}")}))
                .collect();
            serde_json::to_string_pretty(&json!({
                "graph": g.name,
                "input": input.to_string(),
                "seed": seed,
                "mode": mode_name,
                "outputs": outputs,
                "checksum": format!("{combined:016x}"),
            }))? + "\n"
        }
        Format::Csv => {
            let mut s = String::from("output,shape,checksum\n");
            for (label, shape, sum) in &rows {
                let _ = writeln!(s, "{label},{shape},{sum:016x}");
            }
            let _ = writeln!(s, "all,,{combined:016x}");
            s
        }
    };
    emit(&text, None)
}

pub fn gradcheck(args: GradcheckArgs, cfg: &ConfigFile) -> Result<()> {
    let opts = Options {
        seed: cfg.seed(args.seed)?,
        inject_fault: args.inject_fault,
    };
    let report = run_suite(opts)?;
    let text = match cfg.format(args.format)? {
        Format::Table => {
            let mut s = format!(
                "{:<16} {:<12} {:>8} {:>14} result\n",
                "case", "block", "entries", "max rel err"
            );
            for b in &report.blocks {
                let _ = writeln!(
                    s,
                    "{:<16} {:<12} {:>8} {:>14.3e} {}",
                    b.case,
                    b.block,
                    b.entries,
                    b.max_rel_error,
                    if b.passed { "PASS" } else { "FAIL" }
                );
            }
            let _ = writeln!(
                s,
                "{} (max rel err {:.3e}, tolerance {:.0e})",
                if report.passed() { "PASS" } else { "FAIL" },
                report.max_rel_error(),
                report.tolerance
            );
            s
        }
        Format::Json => {
            serde_json::to_string_pretty(&json!({
                "passed": report.passed(),
                "tolerance": report.tolerance,
                "blocks": report.blocks,
            }))? + "\n"
        }
        Format::Csv => {
            let mut s = String::from("case,block,entries,max_rel_error,passed\n");
            for b in &report.blocks {
                let _ = writeln!(
                    s,
                    "{},{},{},{:e},{}",
                    b.case, b.block, b.entries, b.max_rel_error, b.passed
                );
            }
            s
        }
    };
    emit(&text, None)?;
    if !report.passed() {
        bail!(InvalidInput("gradient check failed".into()));
    }
    Ok(())
}

fn reference_pyramid() -> Result<Vec<(u8, usize)>> {
    Ok(pyramid_of(&build_s2d_chain(&S2DChainConfig::default())?)?)
}

fn spec_for(kind: NeckKind, depth: usize, width: usize) -> NeckSpec {
    let layers = match kind {
        NeckKind::Gfpn(_) => depth,
        other => other.layers_for_depth(depth),
    };
    NeckSpec::new(kind, layers, width)
}

pub fn topo(args: TopoArgs, cfg: &ConfigFile) -> Result<()> {
    let pyramid = reference_pyramid()?;
    let num = |s: &str| s.parse::<usize>().map_err(|e| e.to_string());
    let depth = cfg.pick(args.depth, "depth", num)?.unwrap_or(DEFAULT_TOPO_DEPTH);
    let width = cfg.pick(args.width, "width", num)?.unwrap_or(DEFAULT_WIDTH);
    if depth == 0 || width == 0 {
        bail!(InvalidInput("--depth and --width must be positive".into()));
    }
    let format = cfg.format(args.format)?;

    if args.compare.is_empty() {
        if args.match_flops {
            bail!(UsageError("--match-flops needs --compare".into()));
        }
        let kind = cfg
            .pick(args.neck, "neck", crate::options::parse_neck)?
            .unwrap_or(NeckKind::Gfpn(SkipMode::Log2n));
        let spec = spec_for(kind, depth, width);
        let g = spec.build(&pyramid)?;
        let r = path_report(&g)?;
        let text = match format {
            Format::Json => {
                serde_json::to_string_pretty(&json!({
                    "neck": kind.to_string(),
                    "layers": spec.layers,
                    "effective_depth": spec.effective_depth(),
                    "width": width,
                    "max_same_level_distance": r.max_same_level_distance(),
                    "report": r,
                }))? + "\n"
            }
            Format::Table => {
                let mut s = format!(
                    "neck {kind}  layers {}  effective depth {}  width {width}\n",
                    spec.layers,
                    spec.effective_depth()
                );
                let _ = writeln!(
                    s,
                    "nodes {}  edges {} (id {}, up {}, down {}, proj {})  same-level {}  skip {}",
                    r.neck_nodes,
                    r.edges,
                    r.tally.identity,
                    r.tally.upsample,
                    r.tally.downsample,
                    r.tally.project,
                    r.same_level_edges,
                    r.skip_edges
                );
                let _ = writeln!(
                    s,
                    "{:<6} {:>6} {:>6} {:>12} {:>12} {:>12}",
                    "level", "first", "last", "same->last", "max same", "full->last"
                );
                let fmt = |d: Option<u32>| d.map_or("-".to_string(), |d| d.to_string());
                for p in &r.levels {
                    let _ = writeln!(
                        s,
                        "P{:<5} {:>6} {:>6} {:>12} {:>12} {:>12}",
                        p.level,
                        p.first_layer,
                        p.last_layer,
                        fmt(p.to_last()),
                        p.max_same_level(),
                        fmt(p.full.last().copied().flatten())
                    );
                }
                let _ = writeln!(s, "max same-level distance: {}", r.max_same_level_distance());
                s
            }
            Format::Csv => {
                let mut s = String::from("level,first_layer,last_layer,same_to_last,max_same,full_to_last\n");
                for p in &r.levels {
                    let f = |d: Option<u32>| d.map_or(String::new(), |d| d.to_string());
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        p.level,
                        p.first_layer,
                        p.last_layer,
                        f(p.to_last()),
                        p.max_same_level(),
                        f(p.full.last().copied().flatten())
                    );
                }
                s
            }
        };
        return emit(&text, None);
    }

    let input = shape_arg(cfg, args.input, DEFAULT_ANALYZE_INPUT)?;
    let mut specs: Vec<NeckSpec> = args.compare.iter().map(|&k| spec_for(k, depth, width)).collect();
    if args.match_flops {
        let neck_flops = |spec: &NeckSpec| -> Result<u64> { Ok(analyze(&spec.build(&pyramid)?, input)?.neck.flops) };
        let target = neck_flops(&specs[0])?;
        for spec in specs.iter_mut().skip(1) {
            let base = spec.clone();
            spec.width = match_width(target, 1, 4096, |w| {
                let mut s = base.clone();
                s.width = w;
                Ok(analyze(&s.build(&pyramid)?, input)?.neck.flops)
            })?;
        }
    }
    let rows = compare_necks(&specs, &pyramid, Some(input))?;
    let text = match format {
        Format::Json => {
            serde_json::to_string_pretty(&json!({
                "depth": depth,
                "input": input.to_string(),
                "matched_flops": args.match_flops,
                "rows": rows,
            }))? + "\n"
        }
        Format::Table => {
            let mut s = format!(
                "{:<11} {:>6} {:>6} {:<10} {:>6} {:>6} {:>7} {:>6} {:>9} {:>9} {:>12}\n",
                "neck", "layers", "depth", "note", "width", "nodes", "edges", "skip", "max dist", "GFLOPs", "params"
            );
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{:<11} {:>6} {:>6} {:<10} {:>6} {:>6} {:>7} {:>6} {:>9} {:>9} {:>12}",
                    r.neck,
                    r.layers,
                    r.effective_depth,
                    r.note.as_deref().unwrap_or(""),
                    r.width,
                    r.nodes,
                    r.edges,
                    r.skip_edges,
                    r.max_same_level_distance,
                    r.flops.map(gflops).unwrap_or_default(),
                    r.params.map(|p| p.to_string()).unwrap_or_default()
                );
            }
            let _ = writeln!(s, "FLOPs at input {input}");
            s
        }
        Format::Csv => {
            let mut s = String::from(
                "neck,layers,effective_depth,note,width,nodes,edges,skip_edges,max_same_level_distance,flops,params\n",
            );
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.neck,
                    r.layers,
                    r.effective_depth,
                    r.note.as_deref().unwrap_or(""),
                    r.width,
                    r.nodes,
                    r.edges,
                    r.skip_edges,
                    r.max_same_level_distance,
                    r.flops.unwrap_or(0),
                    r.params.unwrap_or(0)
                );
            }
            s
        }
    };
    emit(&text, None)
}

pub fn family(args: FamilyArgs, cfg: &ConfigFile) -> Result<()> {
    let FamilyAction::List { input, format } = args.action;
    let input = shape_arg(cfg, input, DEFAULT_ANALYZE_INPUT)?;
    let backbone = build_s2d_chain(&S2DChainConfig::default())?;
    let pyramid = pyramid_of(&backbone)?;
    let mut rows = Vec::new();
    for e in family_table() {
        let cfg = instantiate(&e, SkipMode::Log2n, FusionStyle::Concat, None);
        let neck = giraffe_core::neck::build_gfpn(&cfg, &pyramid)?;
        let g = ArchitectureGraph::compose(format!("giraffe-{}", e.name), &backbone, &neck)?;
        let r = analyze(&g, input)?;
        rows.push((e, r.backbone.flops, r.neck.flops, r.total.params));
    }
    let text = match cfg.format(format)? {
        Format::Table => {
            let mut s = format!(
                "{:<6} {:>5} {:>6} {:>6} {:>6} {:>14} {:>12} {:>12}\n",
                "model", "phi_d", "phi_w", "depth", "width", "backbone GF", "neck GF", "params"
            );
            for (e, b, n, p) in &rows {
                let _ = writeln!(
                    s,
                    "{:<6} {:>5} {:>6.2} {:>6} {:>6} {:>14} {:>12} {:>12}",
                    e.name,
                    e.phi_d,
                    e.phi_w,
                    e.depth,
                    e.width,
                    gflops(*b),
                    gflops(*n),
                    p
                );
            }
            let _ = writeln!(s, "FLOPs at input {input}");
            s
        }
        Format::Json => {
            let v: Vec<Value> = rows
                .iter()
                .map(|(e, b, n, p)| {
                    json!({
                        "name": e.name,
                        "phi_d": e.phi_d,
                        "phi_w": e.phi_w,
                        "depth": e.depth,
                        "width": e.width,
                        "backbone_flops": b,
                        "neck_flops": n,
                        "params": p,
                    })
                })
                .collect();
            serde_json::to_string_pretty(&json!({"input": input.to_string(), "models": v}))? + "\n"
        }
        Format::Csv => {
            let mut s = String::from("name,phi_d,phi_w,depth,width,backbone_flops,neck_flops,params\n");
            for (e, b, n, p) in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    e.name, e.phi_d, e.phi_w, e.depth, e.width, b, n, p
                );
            }
            s
        }
    };
    emit(&text, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_ignores_sub_micro_noise() {
        let s = Shape::new(2, 2, 1);
        let a = Tensor::new(2, 2, 1, vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let b = Tensor::new(2, 2, 1, vec![0.1f32 + 1e-9, 0.2, 0.3, 0.4]).unwrap();
        let c = Tensor::new(2, 2, 1, vec![0.2f32, 0.1, 0.3, 0.4]).unwrap();
        assert_eq!(checksum(&a), checksum(&b));
        assert_ne!(checksum(&a), checksum(&c));
        assert_eq!(a.shape(), s);
    }

    #[test]
    fn resolve_rules() {
        let sel = resolve(ModelArgs {
            model: Some("D11".into()),
            ..Default::default()
        })
        .unwrap();
        let spec = sel.neck.unwrap();
        assert_eq!((spec.layers, spec.width), (11, 218));
        assert!(resolve(ModelArgs {
            model: Some("D11".into()),
            depth: Some(3),
            ..Default::default()
        })
        .is_err());
        assert!(resolve(ModelArgs {
            width: Some(3),
            ..Default::default()
        })
        .is_err());
        let sel = resolve(ModelArgs {
            depth: Some(11),
            neck: Some(NeckKind::Panet),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(sel.neck.unwrap().layers, 6);
    }
}
