use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use giraffe_core::graph::FusionStyle;
use giraffe_core::neck::{CrossScale, LayerOrder, NeckKind, SkipMode};
use giraffe_core::tensor::Shape;

pub const CONFIG_ENV: &str = "GIRAFFE_CONFIG";

/// Raised for bad flag combinations; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Raised for inputs that parse but are rejected; maps to exit code 2.
#[derive(Debug)]
pub struct InvalidInput(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

#[derive(Debug, Parser)]
#[command(
    name = "giraffe",
    version,
    about = "Build, analyze and run GiraffeDet-style detector graphs"
)]
pub struct Cli {
    /// Key-value config file; defaults to $GIRAFFE_CONFIG. Flags win over it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a backbone + neck graph and write it as JSON (and DOT).
    Build(BuildArgs),
    /// FLOPs and parameter report.
    Analyze(AnalyzeArgs),
    /// Run the graph on a random input and print output checksums.
    Forward(ForwardArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Path lengths and edge counts of necks.
    Topo(TopoArgs),
    /// The scaled model family.
    Family(FamilyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Family member: D7, D11, D14, D16, D25 or D29.
    #[arg(long)]
    pub model: Option<String>,
    /// Neck depth (GFPN layers; baselines get enough repeats to reach it).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Neck width; overrides the family width when combined with --model.
    #[arg(long)]
    pub width: Option<usize>,
    /// GFPN skip connections: none, dense or log2n.
    #[arg(long, value_parser = parse_skip)]
    pub skip: Option<SkipMode>,
    /// Fusion style: concat or sum.
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionStyle>,
    /// Cross-scale wiring: queen or none.
    #[arg(long = "cross-scale", value_parser = parse_cross)]
    pub cross_scale: Option<CrossScale>,
    /// Within-layer order: bottom-up or alternating.
    #[arg(long, value_parser = parse_order)]
    pub order: Option<LayerOrder>,
    /// Neck family: gfpn, gfpn-dense, gfpn-log2n, gfpn-none, fpn, panet, bifpn.
    #[arg(long, value_parser = parse_neck)]
    pub neck: Option<NeckKind>,
    /// s2d, or stub:P3=128,P4=256,... for a synthetic pyramid.
    #[arg(long)]
    pub backbone: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Annotate shapes for this input (HxWxC).
    #[arg(long)]
    pub input: Option<String>,
    /// Graph JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write Graphviz DOT here.
    #[arg(long)]
    pub dot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input shape HxWxC (default 1280x768x3).
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Also count activations, resampling, bias and summation.
    #[arg(long)]
    pub strict: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `random` (128x128x3), `HxWxC` or `random:HxWxC`; contents are always
    /// drawn from the seed.
    #[arg(long)]
    pub input: Option<String>,
    /// Seed for weights and input contents (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run independent nodes on the thread pool (the default).
    #[arg(long, conflicts_with = "serial")]
    pub parallel: bool,
    /// Run nodes one at a time in topological order.
    #[arg(long)]
    pub serial: bool,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for test tensors and loss weights (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct TopoArgs {
    /// Neck to inspect (default gfpn-log2n).
    #[arg(long, value_parser = parse_neck)]
    pub neck: Option<NeckKind>,
    /// Comma-separated neck list to tabulate side by side.
    #[arg(long, value_delimiter = ',', value_parser = parse_neck)]
    pub compare: Vec<NeckKind>,
    /// Neck depth (default 11).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Neck width (default 256).
    #[arg(long)]
    pub width: Option<usize>,
    /// Rescale each compared neck's width to match the first one's FLOPs.
    #[arg(long)]
    pub match_flops: bool,
    /// Input shape used for FLOPs columns (default 1280x768x3).
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct FamilyArgs {
    #[command(subcommand)]
    pub action: FamilyAction,
}

#[derive(Debug, Subcommand)]
pub enum FamilyAction {
    /// Print every member with its depth, width and FLOPs.
    List {
        /// Input shape used for FLOPs (default 1280x768x3).
        #[arg(long)]
        input: Option<String>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
}

fn lower(s: &str) -> String {
    s.trim().to_ascii_lowercase().replace('_', "-")
}

pub fn parse_skip(s: &str) -> Result<SkipMode, String> {
    match lower(s).as_str() {
        "none" => Ok(SkipMode::None),
        "dense" => Ok(SkipMode::Dense),
        "log2n" => Ok(SkipMode::Log2n),
        other => Err(format!("unknown skip mode `{other}` (none, dense, log2n)")),
    }
}

pub fn parse_fusion(s: &str) -> Result<FusionStyle, String> {
    match lower(s).as_str() {
        "concat" => Ok(FusionStyle::Concat),
        "sum" => Ok(FusionStyle::Sum),
        other => Err(format!("unknown fusion style `{other}` (concat, sum)")),
    }
}

pub fn parse_cross(s: &str) -> Result<CrossScale, String> {
    match lower(s).as_str() {
        "queen" => Ok(CrossScale::Queen),
        "none" => Ok(CrossScale::None),
        other => Err(format!("unknown cross-scale mode `{other}` (queen, none)")),
    }
}

pub fn parse_order(s: &str) -> Result<LayerOrder, String> {
    match lower(s).as_str() {
        "bottom-up" => Ok(LayerOrder::BottomUp),
        "alternating" => Ok(LayerOrder::Alternating),
        other => Err(format!("unknown order `{other}` (bottom-up, alternating)")),
    }
}

pub fn parse_neck(s: &str) -> Result<NeckKind, String> {
    NeckKind::from_str(s).map_err(|e| e.to_string())
}

pub fn parse_format(s: &str) -> Result<Format, String> {
    Format::from_str(s, true).map_err(|_| format!("unknown format `{s}` (table, json, csv)"))
}

pub fn parse_bool(s: &str) -> Result<bool, String> {
    match lower(s).as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

/// `HxWxC` with positive dimensions.
pub fn parse_shape(s: &str) -> Result<Shape> {
    let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
    let dims: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match dims.as_deref() {
        Some(&[h, w, c]) if h > 0 && w > 0 && c > 0 => Ok(Shape::new(h, w, c)),
        _ => Err(InvalidInput(format!("invalid input shape `{s}` (expected HxWxC, e.g. 1280x768x3)")).into()),
    }
}

const KEYS: [&str; 16] = [
    "model",
    "depth",
    "width",
    "skip",
    "fusion",
    "cross-scale",
    "order",
    "neck",
    "backbone",
    "input",
    "seed",
    "format",
    "out",
    "dot",
    "strict",
    "mode",
];

/// `key = value` lines; `#` starts a comment. Keys mirror the long flags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(InvalidInput(format!("config line {}: expected `key = value`", n + 1)));
            };
            let key = lower(k);
            if !KEYS.contains(&key.as_str()) {
                bail!(InvalidInput(format!(
                    "config line {}: unknown key `{}`",
                    n + 1,
                    k.trim()
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => PathBuf::from(p),
                _ => return Ok(Self::default()),
            },
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// `flag` if set, else the parsed file value for `key`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            Some(v) => parse(v)
                .map(Some)
                .map_err(|e| InvalidInput(format!("config key `{key}`: {e}")).into()),
            None => Ok(None),
        }
    }

    pub fn pick_string(&self, flag: Option<String>, key: &str) -> Option<String> {
        flag.or_else(|| self.raw(key).map(str::to_string))
    }

    pub fn pick_bool(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.pick(None, key, parse_bool)?.unwrap_or(false))
    }

    pub fn format(&self, flag: Option<Format>) -> Result<Format> {
        Ok(self.pick(flag, "format", parse_format)?.unwrap_or_default())
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        Ok(self
            .pick(flag, "seed", |s| s.parse::<u64>().map_err(|e| e.to_string()))?
            .unwrap_or(0))
    }

    /// Fills every unset model flag from the file.
    pub fn model(&self, m: ModelArgs) -> Result<ModelArgs> {
        let num = |s: &str| s.parse::<usize>().map_err(|e| e.to_string());
        Ok(ModelArgs {
            model: self.pick_string(m.model, "model"),
            depth: self.pick(m.depth, "depth", num)?,
            width: self.pick(m.width, "width", num)?,
            skip: self.pick(m.skip, "skip", parse_skip)?,
            fusion: self.pick(m.fusion, "fusion", parse_fusion)?,
            cross_scale: self.pick(m.cross_scale, "cross-scale", parse_cross)?,
            order: self.pick(m.order, "order", parse_order)?,
            neck: self.pick(m.neck, "neck", parse_neck)?,
            backbone: self.pick_string(m.backbone, "backbone"),
        })
    }
}
