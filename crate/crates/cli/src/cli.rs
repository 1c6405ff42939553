//! Flag definitions and the `key = value` config file overlay.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use eranet::degrade::Scene;
use eranet::kirsch::EdgeOperator;

use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "eranet",
    version,
    about = "Edge-reparameterized attention network for visibility enhancement"
)]
pub struct Cli {
    /// `key = value` file mirroring the flags; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log verbosity (-v debug, -vv trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate paired clean/degraded images.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a model and write training-mode weights.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Fold every reparameterization block into one convolution.
    #[command(args_override_self = true)]
    Fuse(FuseArgs),
    /// Enhance an image or a directory of images.
    #[command(args_override_self = true)]
    Enhance(EnhanceArgs),
    /// PSNR/SSIM of test images against references.
    #[command(args_override_self = true)]
    Metrics(MetricsArgs),
    /// Latency of training-mode and fused inference.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Dump a weight file's header and tensors.
    #[command(args_override_self = true)]
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Fuse(_) => "fuse",
            Command::Enhance(_) => "enhance",
            Command::Metrics(_) => "metrics",
            Command::Bench(_) => "bench",
            Command::Inspect(_) => "inspect",
        }
    }
}

/// `WxH` image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        let size = Size {
            width: parse(w)?,
            height: parse(h)?,
        };
        if size.width == 0 || size.height == 0 {
            return Err("size must be positive".into());
        }
        Ok(size)
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

fn parse_scene(s: &str) -> std::result::Result<Scene, String> {
    s.parse::<Scene>().map_err(|e| e.to_string())
}

fn parse_operator(s: &str) -> std::result::Result<EdgeOperator, String> {
    [
        EdgeOperator::Kirsch,
        EdgeOperator::Roberts,
        EdgeOperator::Prewitt,
        EdgeOperator::Sobel,
        EdgeOperator::Laplacian,
    ]
    .into_iter()
    .find(|op| op.name().eq_ignore_ascii_case(s))
    .ok_or_else(|| format!("unknown operator `{s}` (kirsch, roberts, prewitt, sobel, laplacian)"))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// haze, rain, lowlight or mixed.
    #[arg(long, default_value = "mixed", value_parser = parse_scene)]
    pub scene: Scene,
    /// Number of pairs (ignored with --clean).
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value = "32x32")]
    pub size: Size,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Degrade these images instead of procedural ones.
    #[arg(long, value_name = "DIR")]
    pub clean: Option<PathBuf>,
    /// Write lossless `.eraf` files instead of PNG.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of `degraded_*`/`clean_*` pairs; procedural pairs when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "mixed", value_parser = parse_scene)]
    pub scene: Scene,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value = "32x32")]
    pub size: Size,
    /// Seeds initialization, data shuffling and procedural data.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 30)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 0.85)]
    pub w_msssim: f64,
    #[arg(long, default_value_t = 0.15)]
    pub w_l1: f64,
    #[arg(long, default_value_t = 0.01)]
    pub w_tv: f64,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 5)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub reduction: usize,
    #[arg(long, default_value = "kirsch", value_parser = parse_operator)]
    pub operator: EdgeOperator,
    /// Plain 3×3 convolutions instead of reparameterization blocks.
    #[arg(long)]
    pub plain: bool,
    #[arg(long)]
    pub no_cam: bool,
    #[arg(long)]
    pub no_sam: bool,
    /// Start from these training-mode weights instead of a fresh init.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Loss curve output, one line per epoch.
    #[arg(long, value_name = "FILE")]
    pub curve: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
    /// An image file or a directory of images.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Refuse training-mode weights instead of fusing them.
    #[arg(long, conflicts_with = "no_fuse")]
    pub fused_only: bool,
    /// Run training-mode weights without fusing.
    #[arg(long)]
    pub no_fuse: bool,
    /// Write lossless `.eraf` files instead of PNG.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Reference image or directory.
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    /// Test image or directory (matched to references by file name).
    #[arg(long, value_name = "PATH")]
    pub test: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Weights to time; a seeded default model when absent.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "256x256")]
    pub size: Size,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
}

/// Parsed config file: global entries plus `[command]` sections.
#[derive(Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(Option<String>, String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut section = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let key = k.trim().replace('_', "-");
            if key.is_empty() {
                return Err(format!("line {}: empty key", i + 1));
            }
            entries.push((section.clone(), key, v.trim().to_string()));
        }
        Ok(Self { entries })
    }
}

/// Finds `--config` and the subcommand position without full parsing.
fn scan(argv: &[String]) -> (Option<PathBuf>, Option<usize>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    (config, sub)
}

/// Flags contributed by the config file for `command`, to be placed before
/// the user's own flags so that later (command-line) occurrences win.
pub fn config_flags(cfg: &ConfigFile, command: &str) -> Result<Vec<String>> {
    let root = Cli::command();
    let all_longs: Vec<String> = root
        .get_subcommands()
        .flat_map(|s| {
            s.get_arguments()
                .filter_map(|a| a.get_long().map(str::to_string))
        })
        .collect();
    let sub = root
        .find_subcommand(command)
        .ok_or_else(|| CliError::Usage(format!("unknown command `{command}`")))?;
    let mut out = Vec::new();
    for (section, key, value) in &cfg.entries {
        if key == "config" || key == "verbose" {
            return Err(CliError::Usage(format!(
                "config key `{key}` is only valid on the command line"
            )));
        }
        match section.as_deref() {
            Some(s) if root.find_subcommand(s).is_none() => {
                return Err(CliError::Usage(format!(
                    "config section `[{s}]` is not a command"
                )));
            }
            Some(s) if s != command => continue,
            _ => {}
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            if section.is_none() && all_longs.iter().any(|l| l == key) {
                continue;
            }
            return Err(CliError::Usage(format!(
                "config key `{key}` is not a flag of `{command}`"
            )));
        };
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "yes" | "1" => out.push(format!("--{key}")),
                "false" | "no" | "0" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "config key `{key}`: expected true/false, got `{other}`"
                    )));
                }
            }
        } else {
            out.push(format!("--{key}"));
            out.push(value.clone());
        }
    }
    Ok(out)
}

/// Parses `argv`, overlaying the config file named by `--config` if any.
pub fn parse_args(argv: Vec<String>) -> std::result::Result<Cli, ParseFailure> {
    let (config, sub) = scan(&argv);
    let argv = match (config, sub) {
        (Some(path), Some(at)) => {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                ParseFailure::Cli(CliError::Usage(format!("{}: {e}", path.display())))
            })?;
            let cfg = ConfigFile::parse(&text).map_err(|e| {
                ParseFailure::Cli(CliError::Usage(format!("{}: {e}", path.display())))
            })?;
            let extra = config_flags(&cfg, &argv[at]).map_err(ParseFailure::Cli)?;
            let mut merged = argv[..=at].to_vec();
            merged.extend(extra);
            merged.extend_from_slice(&argv[at + 1..]);
            merged
        }
        _ => argv,
    };
    Cli::try_parse_from(argv).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Cli(CliError),
}

pub fn exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{}: no such file or directory",
            path.display()
        )))
    }
}
