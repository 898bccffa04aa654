// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Global settings resolve in the order flags, then `PADPROBE_*`
//! environment variables, then the registry file's `[defaults]` table,
//! then built-in defaults. Exit codes: 0 success, 1 domain error (printed
//! as `error[E_CODE]: message`), 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attnprobe::{
    histogram_csv, record_attention, spatial_map_pgm, token_attention_mass, token_spatial_map,
    trim_middle,
};
use crate::backends::conformance::{adapter_conformance, CheckStatus};
use crate::backends::registry::{Registry, BACKEND_DIR_ENV};
use crate::backends::BackendHandle;
use crate::dataset::{build_plan, load_prompts, ExperimentPlan};
use crate::error::{Error, Result};
use crate::idp::{idp_generate, register_leakage_probe, IdpPlan, LatentPolicy, ReplacePoints};
use crate::ite::{ite_generate_with, IteOptions};
use crate::matrix::Matrix;
use crate::metrics::{
    aggregate, clip_score, kid, FeatureSet, KernelGamma, KidConfig, Normalizer, ToyExtractor,
};
use crate::repfile::{read_features, write_features, write_rep, FeatureFile};
use crate::reptypes::{make_keep_mask, Condition, EncodedRep, Method, PaddedPrompt, Segment};
use crate::runner::{
    build_report, emit_report, plots, read_manifest, resolve_workers, run_plan, segment_report,
    CellStatus, EmitOptions, ReportFormat, RunOptions,
};

pub const DEFAULT_BACKEND: &str = "toy-mmdit";
pub const DEFAULT_OUT_DIR: &str = "padprobe-out";
pub const DEFAULT_LOG_LEVEL: &str = "warn";

pub const ENV_REGISTRY: &str = "PADPROBE_REGISTRY";
pub const ENV_BACKEND: &str = "PADPROBE_BACKEND";
pub const ENV_OUT_DIR: &str = "PADPROBE_OUT_DIR";
pub const ENV_LOG_LEVEL: &str = "PADPROBE_LOG_LEVEL";
pub const ENV_SEED: &str = "PADPROBE_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "padprobe",
    version,
    about = "Causal interventions on padding-token representations",
    arg_required_else_help = true,
    after_help = "Settings resolve as: flags > PADPROBE_* environment > registry [defaults] > built-ins."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Backend registry file (TOML) [env: PADPROBE_REGISTRY]
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Backend id [env: PADPROBE_BACKEND] [default: toy-mmdit]
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Output directory [env: PADPROBE_OUT_DIR] [default: padprobe-out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Log filter, e.g. `info` [env: PADPROBE_LOG_LEVEL] [default: warn]
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Generation / plan seed [env: PADPROBE_SEED] [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize and encode a prompt; writes full.rep
    Encode(PromptArgs),
    /// Intervention at the text-encoder output
    Ite(IteArgs),
    /// Intervention inside the diffusion loop
    Idp(IdpArgs),
    /// Attention histograms and spatial maps
    Attn(AttnArgs),
    /// Metric computations on feature files
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Build an experiment plan from a prompt CSV
    Plan(PlanArgs),
    /// Execute a plan (resumable)
    Run(RunArgs),
    /// Rebuild a report from a manifest
    Report(ReportArgs),
    /// Per-segment CLIP statistics for a plan
    Segments(SegmentsArgs),
    /// Capability self-test of the selected backend
    Conformance,
    /// Toolkit version and backend config hash
    Version,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    /// Prompt text, or `@path` to read it from a file
    #[arg(long)]
    pub prompt: String,
}

#[derive(Debug, Clone, Args)]
pub struct IteArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// full | prompt | pads | clean | eos | pads-seg:<i>/<n>
    #[arg(long)]
    pub condition: String,
    /// Encoder stream left unmixed (repeatable)
    #[arg(long = "untouched-stream")]
    pub untouched_streams: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct IdpArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// full | prompt | pads | clean | eos | pads-seg:<i>/<n>
    #[arg(long)]
    pub condition: String,
    /// Replace only at these steps: `a..b`, `a..=b` or `a`
    #[arg(long)]
    pub steps_subset: Option<String>,
    /// Replace only at these layers: `a..b`, `a..=b` or `a`
    #[arg(long)]
    pub layers_subset: Option<String>,
    /// Draw the clean stream's latent from its own seed
    #[arg(long)]
    pub independent_latents: bool,
    /// Also run the register-leakage probe and write leakage.csv
    #[arg(long)]
    pub leakage: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Histogram CSV output path
    #[arg(long)]
    pub hist: Option<PathBuf>,
    /// Token index for --map
    #[arg(long, requires = "map")]
    pub token: Option<usize>,
    /// Spatial map PGM output path
    #[arg(long, requires = "token")]
    pub map: Option<PathBuf>,
    /// Spatial grid `HxW` (default: square grid of the image tokens)
    #[arg(long)]
    pub grid: Option<String>,
    /// Histogram bar chart SVG output path
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Report low-mass middle runs below this threshold
    #[arg(long)]
    pub trim_middle: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// KID between two feature files
    Kid(KidArgs),
    /// Row-paired CLIP scores between two feature files
    Clip(ClipArgs),
    /// Export one condition's image features from a manifest
    Export(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct KidArgs {
    #[arg(long)]
    pub ref_features: PathBuf,
    #[arg(long)]
    pub gen_features: PathBuf,
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long)]
    pub n_subsets: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub degree: u32,
    /// Kernel gamma (default 1/feature_dim)
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub coef0: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ClipArgs {
    #[arg(long)]
    pub image_features: PathBuf,
    #[arg(long)]
    pub text_features: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub condition: String,
    /// Output feature file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// Prompt CSV (`id,category,prompt`)
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub seeds_per_prompt: u32,
    /// Comma-separated condition names
    #[arg(long, default_value = "full,prompt,pads,clean")]
    pub conditions: String,
    /// Output plan file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// ite | idp
    #[arg(long)]
    pub method: String,
    /// Worker threads [env: PADPROBE_WORKERS overrides]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Stop after this many pending cells
    #[arg(long)]
    pub max_cells: Option<usize>,
    /// IDP only: independent clean-stream latent
    #[arg(long)]
    pub independent_latents: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// json | csv | plots
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Display multiplier for KID in csv and plots
    #[arg(long)]
    pub kid_scale: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SegmentsArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub registry_path: Option<PathBuf>,
    pub backend: String,
    pub out_dir: PathBuf,
    /// False when `out_dir` is the built-in default.
    pub out_dir_explicit: bool,
    pub log_level: String,
    pub seed: u64,
}

/// Resolves global settings. `env` looks up environment variables.
pub fn resolve_config(
    flags: &GlobalArgs,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<(CliConfig, Registry)> {
    let registry_path = flags
        .registry
        .clone()
        .or_else(|| env(ENV_REGISTRY).map(PathBuf::from));
    let backend_dir = env(BACKEND_DIR_ENV).map(PathBuf::from);
    let registry = Registry::load(registry_path.as_deref(), backend_dir.as_deref())?;
    let d = &registry.defaults;
    let backend = flags
        .backend
        .clone()
        .or_else(|| env(ENV_BACKEND))
        .or_else(|| d.backend.clone())
        .unwrap_or_else(|| DEFAULT_BACKEND.to_string());
    let out_dir = flags
        .out_dir
        .clone()
        .or_else(|| env(ENV_OUT_DIR).map(PathBuf::from))
        .or_else(|| d.out_dir.clone().map(PathBuf::from));
    let log_level = flags
        .log_level
        .clone()
        .or_else(|| env(ENV_LOG_LEVEL))
        .or_else(|| d.log_level.clone())
        .unwrap_or_else(|| DEFAULT_LOG_LEVEL.to_string());
    let seed = match flags.seed {
        Some(s) => s,
        None => match env(ENV_SEED) {
            Some(v) => v.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("{ENV_SEED}=`{v}` is not an unsigned integer"))
            })?,
            None => d.seed.unwrap_or(0),
        },
    };
    Ok((
        CliConfig {
            registry_path,
            backend,
            out_dir_explicit: out_dir.is_some(),
            out_dir: out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            log_level,
            seed,
        },
        registry,
    ))
}

/// Toolkit version plus the config hash of the resolved default backend.
pub fn version_info(flags: &GlobalArgs, env: &dyn Fn(&str) -> Option<String>) -> String {
    let version = format!("padprobe {}", crate::VERSION);
    match resolve_config(flags, env) {
        Ok((cfg, reg)) => match reg.get(&cfg.backend) {
            Ok(b) => format!(
                "{version}\nbackend {} config {}",
                cfg.backend,
                b.config_hash()
            ),
            Err(_) => format!("{version}\nbackend {} config unavailable", cfg.backend),
        },
        Err(_) => format!("{version}\nbackend config unavailable"),
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Parses `argv` (including the program name) and runs the command.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let env = |k: &str| std::env::var(k).ok();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run_with(argv, &env, &mut out, &mut err)
}

/// [`parse_and_dispatch`] with injectable environment and streams.
pub fn run_with<I, T>(
    argv: I,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    if let Command::Version = cli.command {
        let _ = writeln!(out, "{}", version_info(&cli.global, env));
        return 0;
    }
    let result = resolve_config(&cli.global, env).and_then(|(cfg, reg)| {
        init_logging(&cfg.log_level);
        dispatch(&cli.command, &cfg, &reg, env, out)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error[{}]: {e}", e.code());
            1
        }
    }
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn w(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::IoMessage(format!("stdout: {e}")))
}

fn dispatch(
    cmd: &Command,
    cfg: &CliConfig,
    reg: &Registry,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    match cmd {
        Command::Encode(a) => cmd_encode(a, cfg, reg, out),
        Command::Ite(a) => cmd_ite(a, cfg, reg, out),
        Command::Idp(a) => cmd_idp(a, cfg, reg, out),
        Command::Attn(a) => cmd_attn(a, cfg, reg, out),
        Command::Metrics(m) => cmd_metrics(m, cfg, out),
        Command::Plan(a) => cmd_plan(a, cfg, reg, out),
        Command::Run(a) => cmd_run(a, cfg, reg, env, out),
        Command::Report(a) => cmd_report(a, cfg, out),
        Command::Segments(a) => cmd_segments(a, reg, out),
        Command::Conformance => cmd_conformance(cfg, reg, out),
        Command::Version => unreachable!("handled before config resolution"),
    }
}

fn read_prompt_arg(p: &str) -> Result<String> {
    match p.strip_prefix('@') {
        Some(path) => {
            let path = Path::new(path);
            Ok(std::fs::read_to_string(path)
                .map_err(|e| Error::io(path, e))?
                .trim()
                .to_string())
        }
        None => Ok(p.to_string()),
    }
}

fn open_backend(cfg: &CliConfig, reg: &Registry) -> Result<BackendHandle> {
    reg.open(&cfg.backend)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn fmt_vec(v: &[f32]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn segment_string(p: &PaddedPrompt) -> String {
    p.segment_map()
        .iter()
        .map(|s| match s {
            Segment::Bos => 'B',
            Segment::Prompt => 'P',
            Segment::Eos => 'E',
            Segment::Pad => '.',
        })
        .collect()
}

fn rep_name(kind: &str, stream: usize) -> String {
    if stream == 0 {
        format!("{kind}.rep")
    } else {
        format!("{kind}.{stream}.rep")
    }
}

fn write_reps(
    dir: &Path,
    kind: &str,
    reps: &[EncodedRep],
    written: &mut Vec<String>,
) -> Result<()> {
    for (i, r) in reps.iter().enumerate() {
        let name = rep_name(kind, i);
        write_rep(&dir.join(&name), r)?;
        written.push(name);
    }
    Ok(())
}

fn image_pgm(image: &Matrix) -> String {
    let rows: Vec<Vec<f64>> = (0..image.rows())
        .map(|i| image.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    spatial_map_pgm(&rows)
}

fn header_lines(handle: &BackendHandle, prompt: &PaddedPrompt, out: &mut dyn Write) -> Result<()> {
    w(
        out,
        format!("backend: {} (config {})", handle.id(), handle.config_hash()),
    )?;
    w(out, format!("prompt: {:?}", prompt.text()))?;
    w(
        out,
        format!(
            "tokens: k={} n={} segments={}",
            prompt.k(),
            prompt.len(),
            segment_string(prompt)
        ),
    )
}

fn cmd_encode(a: &PromptArgs, cfg: &CliConfig, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let handle = open_backend(cfg, reg)?;
    let prompt = handle.tokenize(&read_prompt_arg(&a.prompt)?)?;
    let reps = handle.encode(&prompt)?;
    ensure_dir(&cfg.out_dir)?;
    let mut written = Vec::new();
    write_reps(&cfg.out_dir, "full", &reps, &mut written)?;
    header_lines(&handle, &prompt, out)?;
    for r in &reps {
        w(
            out,
            format!("stream {}: {}x{}", r.encoder_id(), r.len(), r.width()),
        )?;
    }
    w(out, format!("wrote: {}", written.join(" ")))
}

#[derive(Serialize)]
struct Sidecar<'a, D: Serialize> {
    descriptor: &'a D,
    config_hash: String,
    features: &'a [f32],
}

fn cmd_ite(a: &IteArgs, cfg: &CliConfig, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let condition: Condition = a.condition.parse()?;
    let handle = open_backend(cfg, reg)?;
    let prompt = handle.tokenize(&read_prompt_arg(&a.prompt.prompt)?)?;
    let options = IteOptions {
        untouched_streams: a.untouched_streams.iter().cloned().collect(),
    };
    let result = ite_generate_with(&handle, &prompt, condition, cfg.seed, &options)?;
    ensure_dir(&cfg.out_dir)?;
    let mut written = vec!["image.pgm".to_string()];
    write_file(
        &cfg.out_dir.join("image.pgm"),
        image_pgm(&result.generation.image),
    )?;
    write_reps(&cfg.out_dir, "full", &handle.encode(&prompt)?, &mut written)?;
    write_reps(
        &cfg.out_dir,
        "clean",
        &handle.encode_clean(prompt.len())?,
        &mut written,
    )?;
    write_reps(&cfg.out_dir, "mixed", &result.mixed, &mut written)?;
    let sidecar = Sidecar {
        descriptor: &result.descriptor,
        config_hash: handle.config_hash(),
        features: &result.generation.features,
    };
    write_file(
        &cfg.out_dir.join("ite.json"),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    written.push("ite.json".into());

    header_lines(&handle, &prompt, out)?;
    let mask = &result.descriptor.keep_mask;
    w(
        out,
        format!(
            "condition: {} (kept {} of {})",
            condition,
            mask.kept_count(),
            mask.len()
        ),
    )?;
    w(out, format!("seed: {}", cfg.seed))?;
    w(
        out,
        format!("features: {}", fmt_vec(&result.generation.features)),
    )?;
    w(out, format!("wrote: {}", written.join(" ")))
}

/// `a..b` (exclusive), `a..=b` (inclusive) or a single index.
pub fn parse_index_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("`{s}` is not a range like 0..2, 0..=1 or 3"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    if let Some((lo, hi)) = s.split_once("..=") {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).collect())
    } else if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo >= hi {
            return Err(bad());
        }
        Ok((lo..hi).collect())
    } else {
        Ok(vec![num(s)?])
    }
}

fn cmd_idp(a: &IdpArgs, cfg: &CliConfig, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let condition: Condition = a.condition.parse()?;
    let handle = open_backend(cfg, reg)?;
    let prompt = handle.tokenize(&read_prompt_arg(&a.prompt.prompt)?)?;
    let bc = handle.config();
    let mut plan = IdpPlan::new(make_keep_mask(&prompt, condition)?);
    if a.steps_subset.is_some() || a.layers_subset.is_some() {
        let steps = match &a.steps_subset {
            Some(s) => parse_index_range(s)?,
            None => (0..bc.steps).collect(),
        };
        let layers = match &a.layers_subset {
            Some(s) => parse_index_range(s)?,
            None => (0..bc.layers).collect(),
        };
        plan.replace_points = ReplacePoints::product(steps, layers);
    }
    if a.independent_latents {
        plan.latent_policy = LatentPolicy::Independent;
    }
    let result = idp_generate(&handle, &prompt, &plan, cfg.seed)?;
    ensure_dir(&cfg.out_dir)?;
    let mut written = vec!["image.pgm".to_string()];
    write_file(&cfg.out_dir.join("image.pgm"), image_pgm(&result.image))?;
    let descriptor = result
        .descriptor
        .as_ref()
        .ok_or_else(|| Error::Backend("idp result carries no descriptor".into()))?;
    let sidecar = Sidecar {
        descriptor,
        config_hash: handle.config_hash(),
        features: &result.features,
    };
    write_file(
        &cfg.out_dir.join("idp.json"),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    written.push("idp.json".into());
    let leakage = if a.leakage {
        let report = register_leakage_probe(&handle, &prompt, cfg.seed)?;
        write_file(&cfg.out_dir.join("leakage.csv"), report.to_csv())?;
        written.push("leakage.csv".into());
        Some(report)
    } else {
        None
    };

    header_lines(&handle, &prompt, out)?;
    w(
        out,
        format!(
            "condition: {} (kept {} of {})",
            condition,
            plan.keep_mask.kept_count(),
            plan.keep_mask.len()
        ),
    )?;
    let points = match &plan.replace_points {
        ReplacePoints::All => format!("all {}", bc.steps * bc.layers),
        ReplacePoints::Subset(s) => s.len().to_string(),
    };
    w(out, format!("replace points: {points}"))?;
    w(out, format!("seed: {}", cfg.seed))?;
    w(out, format!("features: {}", fmt_vec(&result.features)))?;
    if let Some(l) = leakage {
        w(out, format!("leakage max: {:.9}", l.max()))?;
    }
    w(out, format!("wrote: {}", written.join(" ")))
}

fn token_texts(prompt: &PaddedPrompt) -> Vec<String> {
    let mut words = prompt
        .text()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty());
    prompt
        .segment_map()
        .iter()
        .map(|s| match s {
            Segment::Bos => "<bos>".to_string(),
            Segment::Eos => "<eos>".to_string(),
            Segment::Pad => "<pad>".to_string(),
            Segment::Prompt => words.next().unwrap_or("").to_lowercase(),
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("grid `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn cmd_attn(a: &AttnArgs, cfg: &CliConfig, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let handle = open_backend(cfg, reg)?;
    let prompt = handle.tokenize(&read_prompt_arg(&a.prompt.prompt)?)?;
    let records = record_attention(&handle, &prompt, cfg.seed, None)?;
    let mass = token_attention_mass(&records, &prompt)?;
    let texts = token_texts(&prompt);
    header_lines(&handle, &prompt, out)?;
    w(out, format!("records: {}", records.len()))?;
    let total: f64 = mass.iter().sum();
    w(out, format!("text mass: {total:.9}"))?;
    if let Some(p) = &a.hist {
        write_file(p, histogram_csv(&prompt, &mass, &texts))?;
        w(out, format!("wrote: {}", p.display()))?;
    }
    if let Some(p) = &a.plot {
        let labels: Vec<String> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}:{t}"))
            .collect();
        write_file(
            p,
            plots::bar_chart_svg("Attention mass per token", &labels, &mass),
        )?;
        w(out, format!("wrote: {}", p.display()))?;
    }
    if let (Some(t), Some(p)) = (a.token, &a.map) {
        let grid = match &a.grid {
            Some(g) => parse_grid(g)?,
            None => {
                let n = handle.config().image_tokens;
                let side = (n as f64).sqrt() as usize;
                if side * side != n {
                    return Err(Error::GridMismatch(format!(
                        "{n} image tokens are not a square; pass --grid HxW"
                    )));
                }
                (side, side)
            }
        };
        let map = token_spatial_map(&records, t, grid)?;
        write_file(p, spatial_map_pgm(&map))?;
        w(out, format!("wrote: {}", p.display()))?;
    }
    if let Some(th) = a.trim_middle {
        let idx = trim_middle(&mass, th, 2);
        let list: Vec<String> = idx.iter().map(usize::to_string).collect();
        w(out, format!("trim-middle kept: [{}]", list.join(", ")))?;
    }
    Ok(())
}

fn feature_set(path: &Path) -> Result<FeatureSet> {
    let f = read_features(path)?;
    let rows: Vec<&[f32]> = (0..f.vectors.rows()).map(|i| f.vectors.row(i)).collect();
    FeatureSet::from_f32_rows(rows, Normalizer::None, f.extractor_id)
}

fn cmd_metrics(m: &MetricsCommand, cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    match m {
        MetricsCommand::Kid(a) => {
            let x = feature_set(&a.ref_features)?;
            let y = feature_set(&a.gen_features)?;
            let kc = KidConfig {
                kernel_degree: a.degree,
                kernel_gamma: a
                    .gamma
                    .map_or(KernelGamma::InverseDim, KernelGamma::Explicit),
                kernel_coef0: a.coef0,
                subset_size: a.subset_size,
                n_subsets: a.n_subsets,
                seed: cfg.seed,
            };
            let v = kid(&x, &y, &kc)?;
            w(out, format!("ref: {} x {}", x.len(), x.dim()))?;
            w(out, format!("gen: {} x {}", y.len(), y.dim()))?;
            w(out, format!("kid: {v:.12}"))
        }
        MetricsCommand::Clip(a) => {
            let x = feature_set(&a.image_features)?;
            let y = feature_set(&a.text_features)?;
            if x.len() != y.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} image rows vs {} text rows",
                    x.len(),
                    y.len()
                )));
            }
            let scores = x
                .vectors()
                .iter()
                .zip(y.vectors())
                .map(|(i, t)| {
                    let i = crate::metrics::l2_normalize(i)?;
                    let t = crate::metrics::l2_normalize(t)?;
                    clip_score(&i, &t, a.scale)
                })
                .collect::<Result<Vec<_>>>()?;
            let agg = aggregate(&scores)?;
            w(
                out,
                format!("clip: mean {:.9} std {:.9} n {}", agg.mean, agg.std, agg.n),
            )
        }
        MetricsCommand::Export(a) => {
            let condition: Condition = a.condition.parse()?;
            let manifest = read_manifest(&a.manifest)?;
            let mut cells: Vec<_> = manifest
                .cells
                .iter()
                .filter(|c| c.condition == condition && c.status == CellStatus::Ok)
                .collect();
            cells.sort_by_key(|c| c.index);
            let rows: Vec<Vec<f32>> = cells
                .iter()
                .map(|c| c.image_features.iter().map(|&v| v as f32).collect())
                .collect();
            if rows.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "no completed `{condition}` cells"
                )));
            }
            let file = FeatureFile {
                extractor_id: manifest.header.extractor_id.clone(),
                vectors: Matrix::from_rows(&rows)?,
            };
            write_features(&a.out, &file)?;
            w(
                out,
                format!(
                    "exported {} x {} features for {condition}",
                    rows.len(),
                    rows[0].len()
                ),
            )
        }
    }
}

fn cmd_plan(a: &PlanArgs, cfg: &CliConfig, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let prompts = load_prompts(&a.prompts)?;
    let conditions: Vec<&str> = a
        .conditions
        .split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .collect();
    let mut plan = build_plan(
        &prompts,
        a.seeds_per_prompt,
        &conditions,
        &cfg.backend,
        cfg.seed,
    )?;
    plan.config_hash = Some(reg.get(&cfg.backend)?.config_hash());
    plan.save(&a.out)?;
    w(out, format!("prompts: {}", plan.prompts.len()))?;
    w(out, format!("seeds per prompt: {}", plan.seeds_per_prompt))?;
    let names: Vec<String> = plan.conditions.iter().map(Condition::to_string).collect();
    w(out, format!("conditions: {}", names.join(",")))?;
    w(out, format!("generations: {}", plan.total_generations()))?;
    w(out, format!("plan hash: {}", plan.plan_hash()))
}

fn print_rows(report: &crate::runner::ExperimentReport, out: &mut dyn Write) -> Result<()> {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    w(
        out,
        "condition          clip_text  std        clip_ref   kid_vs_full  n",
    )?;
    for r in &report.rows {
        w(
            out,
            format!(
                "{:<18} {:<10} {:<10} {:<10} {:<12} {}",
                r.condition.to_string(),
                f(r.mean_clip_text),
                f(r.std_clip_text),
                f(r.mean_clip_image_ref),
                f(r.kid_vs_full),
                r.n
            ),
        )?;
    }
    Ok(())
}

fn cmd_run(
    a: &RunArgs,
    cfg: &CliConfig,
    reg: &Registry,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    let method: Method = a.method.parse()?;
    let plan = ExperimentPlan::load(&a.plan)?;
    let handle = reg.open(&plan.backend_id)?;
    let workers = resolve_workers(a.workers, env)?;
    let mut opts = RunOptions::new(&cfg.out_dir);
    opts.workers = workers;
    opts.max_cells = a.max_cells;
    opts.kid.seed = cfg.seed;
    if a.independent_latents {
        opts.latent_policy = LatentPolicy::Independent;
    }
    let outcome = run_plan(&plan, method, &handle, &ToyExtractor, &opts)?;
    let s = &outcome.summary;
    w(out, format!("method: {method}"))?;
    w(
        out,
        format!(
            "cells: {} total, {} skipped, {} executed, {} failed",
            s.cells_total, s.cells_skipped, s.cells_executed, s.cells_failed
        ),
    )?;
    w(out, format!("complete: {}", outcome.report.complete))?;
    print_rows(&outcome.report, out)?;
    w(out, "wrote: manifest.jsonl report.json run_summary.json")
}

fn cmd_report(a: &ReportArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let manifest = read_manifest(&a.manifest)?;
    let report = build_report(&manifest, &KidConfig::default())?;
    let dir = if cfg.out_dir_explicit {
        cfg.out_dir.clone()
    } else {
        a.manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    };
    let opts = EmitOptions {
        kid_display_scale: a.kid_scale.unwrap_or(1.0),
    };
    let paths = emit_report(&report, format, &dir, &opts)?;
    print_rows(&report, out)?;
    let names: Vec<String> = paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    w(out, format!("wrote: {}", names.join(" ")))
}

fn cmd_segments(a: &SegmentsArgs, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let plan = ExperimentPlan::load(&a.plan)?;
    let handle = reg.open(&plan.backend_id)?;
    let rows = segment_report(&plan, a.n, &handle, &ToyExtractor)?;
    w(out, "condition,mean_clip_text,std_clip_text,n")?;
    for r in rows {
        w(
            out,
            format!(
                "{},{:.9},{:.9},{}",
                r.condition.cli_name(),
                r.mean_clip_text,
                r.std_clip_text,
                r.n
            ),
        )?;
    }
    Ok(())
}

fn cmd_conformance(cfg: &CliConfig, reg: &Registry, out: &mut dyn Write) -> Result<()> {
    let handle = open_backend(cfg, reg)?;
    let report = adapter_conformance(&handle);
    w(
        out,
        format!(
            "backend: {} (config {})",
            report.backend_id, report.config_hash
        ),
    )?;
    for e in &report.entries {
        let status = match e.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::NotAdvertised => "n/a",
        };
        w(
            out,
            format!("{status:<5} {:<28} {}", e.capability, e.detail),
        )?;
    }
    if report.all_advertised_pass() {
        Ok(())
    } else {
        Err(Error::Backend(format!(
            "backend `{}` failed conformance",
            report.backend_id
        )))
    }
}
