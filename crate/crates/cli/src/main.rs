//! `mdir`: compare checkpoints, validate the trace tail bound, and generate
//! synthetic related pairs.
//!
//! Exit codes: 0 completed and unrelated, 10 completed and related,
//! 1 runtime error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mdir::detect::{preliminary_screen, DetectConfig, MlpMode};
use mdir::ldt::{
    eigenphase_density_check, estimate_tail, haar_traces, ks_one_sample, standard_normal_cdf,
    TailEstimate, MIN_TAIL_SAMPLES,
};
use mdir::report::{heatmap_name, render_heatmap, HeatmapSpec, ReportDocument};
use mdir::weights::{load_model_auto, parse_container, write_model, ArchSpec, Dtype, NameTemplate};
use mdir::{apply_plan, make_toy_model, run_mdir, sample_plan, Level, VocabMap};

const EXIT_UNRELATED: u8 = 0;
const EXIT_RELATED: u8 = 10;
const EXIT_ERROR: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "mdir", version, about = "Weight-provenance detection for transformer checkpoints")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test whether two checkpoints share weight provenance.
    Compare(CompareArgs),
    /// Monte Carlo check of the Haar trace tail and eigenphase density.
    McValidate(McArgs),
    /// Write a toy model, a transformed copy, and the transform plan.
    Forge(ForgeArgs),
    /// Compare orthogonal-invariant norms of corresponding matrices.
    Screen(ScreenArgs),
    /// List the tensors of a safetensors container.
    Inspect { path: PathBuf },
    /// Print a built-in architecture or naming preset as JSON.
    Preset { name: String },
}

#[derive(Args)]
struct ModelPair {
    #[arg(long, value_name = "PATH")]
    model_a: PathBuf,
    #[arg(long, value_name = "PATH")]
    model_b: PathBuf,
    /// Architecture JSON; defaults to the one embedded in the container.
    #[arg(long, value_name = "FILE")]
    arch_a: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    arch_b: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    models: ModelPair,
    /// Tokenizer vocabulary (vocab.json or tokenizer.json); both or neither.
    #[arg(long, value_name = "FILE", requires = "vocab_b")]
    vocab_a: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "vocab_a")]
    vocab_b: Option<PathBuf>,
    #[arg(long, default_value_t = 2e-23, value_parser = parse_threshold)]
    threshold: f64,
    /// Report JSON path; printed to stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Directory for PPM heatmaps of every stage.
    #[arg(long, value_name = "DIR")]
    heatmaps: Option<PathBuf>,
    /// `all` or a comma-separated list of layer indices.
    #[arg(long, default_value = "all", value_parser = parse_layers)]
    layers: LayerSelection,
    #[arg(long, default_value_t = mdir::assign::DEFAULT_EXACT_CAP)]
    exact_assignment_cap: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::UpOnly)]
    mode: ModeArg,
    /// Match the embedding stage with unsigned permutations only.
    #[arg(long)]
    unsigned_embedding: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "up_only")]
    UpOnly,
    Sum3,
}

#[derive(Clone, Debug)]
struct LayerSelection(Option<Vec<usize>>);

fn parse_layers(s: &str) -> std::result::Result<LayerSelection, String> {
    if s == "all" {
        return Ok(LayerSelection(None));
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("invalid layer index {t:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(|v| LayerSelection(Some(v)))
}

fn parse_threshold(s: &str) -> std::result::Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("invalid number {s:?}"))?;
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err("threshold must lie in (0, 1)".into())
    }
}

#[derive(Args)]
struct McArgs {
    /// Half the matrix order: samples come from SO(2m).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    m: u64,
    #[arg(long, value_parser = parse_r)]
    r: f64,
    #[arg(long, value_parser = parse_samples)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compare the eigenphase histogram with the arcsine law.
    #[arg(long)]
    density_check: bool,
    #[arg(long, default_value_t = 40)]
    bins: usize,
}

fn parse_r(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("invalid number {s:?}"))?;
    if r > 0.0 && r <= 0.5 {
        Ok(r)
    } else {
        Err("r must satisfy 0 < r <= 0.5".into())
    }
}

fn parse_samples(s: &str) -> std::result::Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("invalid count {s:?}"))?;
    if n >= MIN_TAIL_SAMPLES {
        Ok(n)
    } else {
        Err(format!("at least {MIN_TAIL_SAMPLES} samples are required"))
    }
}

#[derive(Args)]
struct ForgeArgs {
    /// Architecture JSON file, or a built-in shape: `toy` or `small`.
    #[arg(long, value_name = "FILE")]
    arch: String,
    /// L1..L5, `pruning` (with --target) or `pruning:N`.
    #[arg(long)]
    level: String,
    /// Kept embedding width for pruning.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F64,
    F32,
    F16,
    Bf16,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F64 => Dtype::F64,
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F16 => Dtype::F16,
            DtypeArg::Bf16 => Dtype::BF16,
        }
    }
}

#[derive(Args)]
struct ScreenArgs {
    #[command(flatten)]
    models: ModelPair,
    /// Rows to print.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

/// Failure carrying its own exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    configure_threads();

    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                eprintln!("error: {u}");
                return ExitCode::from(EXIT_USAGE);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("MDIR_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => log::warn!("ignoring MDIR_THREADS={v:?}; expected a positive integer"),
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Compare(args) => compare(args),
        Command::McValidate(args) => mc_validate(args),
        Command::Forge(args) => forge(args),
        Command::Screen(args) => screen(args),
        Command::Inspect { path } => inspect(&path),
        Command::Preset { name } => preset(&name),
    }
}

fn read_arch(path: &Path) -> Result<ArchSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ArchSpec::from_json(&text).with_context(|| format!("parsing architecture {}", path.display()))
}

fn load_pair(models: &ModelPair) -> Result<(mdir::ModelBundle, mdir::ModelBundle)> {
    let arch_a = models.arch_a.as_deref().map(read_arch).transpose()?;
    let arch_b = models.arch_b.as_deref().map(read_arch).transpose()?;
    let a = load_model_auto(&models.model_a, arch_a.as_ref())
        .with_context(|| format!("loading {}", models.model_a.display()))?;
    let b = load_model_auto(&models.model_b, arch_b.as_ref())
        .with_context(|| format!("loading {}", models.model_b.display()))?;
    Ok((a, b))
}

fn compare(args: CompareArgs) -> Result<u8> {
    let (a, b) = load_pair(&args.models)?;
    let vocabs = match (&args.vocab_a, &args.vocab_b) {
        (Some(pa), Some(pb)) => Some((
            VocabMap::from_path(pa).with_context(|| format!("reading {}", pa.display()))?,
            VocabMap::from_path(pb).with_context(|| format!("reading {}", pb.display()))?,
        )),
        _ => None,
    };
    let cfg = DetectConfig {
        threshold: args.threshold,
        mlp_mode: match args.mode {
            ModeArg::UpOnly => MlpMode::UpOnly,
            ModeArg::Sum3 => MlpMode::Sum3,
        },
        exact_cap: args.exact_assignment_cap,
        layers: args.layers.0.clone(),
        signed_embedding: !args.unsigned_embedding,
        ..DetectConfig::default()
    };
    let report = run_mdir(&a, &b, vocabs.as_ref().map(|(x, y)| (x, y)), &cfg)?;

    let mut heatmaps = Vec::new();
    if let Some(dir) = &args.heatmaps {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for f in &report.findings {
            let path = dir.join(format!("{}.ppm", heatmap_name(&f.stage)));
            let spec = HeatmapSpec::new(f.stage.to_string(), path);
            let written = render_heatmap(&f.u_tilde, &spec)?;
            heatmaps.push(written.display().to_string());
        }
    }

    let doc = ReportDocument::from_report(&report, heatmaps);
    let json = doc.to_json()?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
            print_summary(&doc);
        }
        None => println!("{json}"),
    }
    Ok(if report.related { EXIT_RELATED } else { EXIT_UNRELATED })
}

fn print_summary(doc: &ReportDocument) {
    println!("related: {}", doc.related);
    if let Some(p) = doc.headline_log10_p {
        println!("strongest evidence: p <= 10^{p:.1}");
    }
    for f in doc.findings.iter().filter(|f| f.log10_p.is_some()) {
        println!(
            "  {:<24} trace {:>10.3}  log10 p {:>12.1}{}",
            f.stage.to_string(),
            f.trace,
            f.log10_p.unwrap(),
            if f.significant { "  *" } else { "" }
        );
    }
    for fail in &doc.failures {
        println!("  {:<24} failed: {}", fail.stage.to_string(), fail.error);
    }
}

fn mc_validate(args: McArgs) -> Result<u8> {
    let m = args.m as usize;
    let tail: TailEstimate = estimate_tail(m, args.r, args.samples, args.seed)?;
    let traces = haar_traces(2 * m, args.samples.min(10_000), args.seed ^ 0x4b53, true);
    let ks = ks_one_sample(&traces, standard_normal_cdf);
    let mut out = serde_json::to_value(&tail)?;
    let obj = out.as_object_mut().expect("tail estimate is an object");
    obj.insert("samples".into(), serde_json::json!(tail.sample_count));
    obj.insert("theoretical_rate".into(), serde_json::json!(2.0 * args.r * args.r));
    obj.insert("ks_statistic".into(), serde_json::json!(ks.statistic));
    obj.insert("ks_p_value".into(), serde_json::json!(ks.p_value));
    if args.density_check {
        if m < 4 {
            return Err(Usage("--density-check needs --m >= 4".into()).into());
        }
        if args.bins == 0 {
            return Err(Usage("--bins must be positive".into()).into());
        }
        let density = eigenphase_density_check(m, args.samples.min(10_000), args.seed, args.bins)?;
        obj.insert("density".into(), serde_json::to_value(density)?);
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn forge(args: ForgeArgs) -> Result<u8> {
    let arch = match ArchSpec::preset(&args.arch) {
        Some(a) => a,
        None => read_arch(Path::new(&args.arch))?,
    };
    let level = match (args.level.to_ascii_lowercase().as_str(), args.target) {
        ("pruning", Some(t)) => Level::Pruning { target: t },
        ("pruning", None) => return Err(Usage("--level pruning needs --target".into()).into()),
        (s, _) => s.parse::<Level>().map_err(|e| Usage(e.to_string()))?,
    };
    if let Level::Pruning { target } = level {
        if target == 0 || target > arch.emb_dim {
            return Err(Usage(format!(
                "pruning target {target} must lie in 1..={}",
                arch.emb_dim
            ))
            .into());
        }
    }
    let base = make_toy_model(&arch, args.seed);
    let plan = sample_plan(&arch, level, args.seed)?;
    let derived = apply_plan(&base, &plan)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let dtype = Dtype::from(args.dtype);
    let base_path = args.out.join("base.safetensors");
    let derived_path = args.out.join("derived.safetensors");
    let plan_path = args.out.join("plan.json");
    write_model(&base, &base_path, dtype)?;
    write_model(&derived, &derived_path, dtype)?;
    std::fs::write(&plan_path, serde_json::to_string_pretty(&plan)?)
        .with_context(|| format!("writing {}", plan_path.display()))?;
    for p in [&base_path, &derived_path, &plan_path] {
        println!("{}", p.display());
    }
    Ok(0)
}

fn screen(args: ScreenArgs) -> Result<u8> {
    let (a, b) = load_pair(&args.models)?;
    let entries = preliminary_screen(&a, &b);
    println!("{:<10} {:>6} {:>12} {:>12} {:>12} {:>12}", "role", "layer", "frobenius", "spectral", "ky-fan", "schatten");
    for e in entries.iter().take(args.top) {
        let layer = e.layer.map_or("-".to_string(), |l| l.to_string());
        println!(
            "{:<10} {:>6} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}",
            e.role.to_string(),
            layer,
            e.frobenius,
            e.spectral,
            e.kyfan,
            e.schatten
        );
    }
    Ok(0)
}

fn inspect(path: &Path) -> Result<u8> {
    let refs = parse_container(path)?;
    for t in refs {
        println!("{}\t{}\t{:?}\t{} bytes", t.name, t.dtype.as_str(), t.shape, t.byte_length);
    }
    Ok(0)
}

fn preset(name: &str) -> Result<u8> {
    if let Some(arch) = ArchSpec::preset(name) {
        println!("{}", arch.to_json());
        return Ok(0);
    }
    match NameTemplate::preset(name) {
        Some(t) => {
            println!("{}", serde_json::to_string_pretty(&t)?);
            Ok(0)
        }
        None => bail!(Usage(format!(
            "unknown preset {name}; known: toy, small, {}",
            NameTemplate::PRESETS.join(", ")
        ))),
    }
}
