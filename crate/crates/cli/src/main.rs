//! `mvlab`: train, audit, probe, verify and report.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mvlab_core::audit::{audit_model_scoped, write_audit_csv, AuditBatch, TokenScope};
use mvlab_core::model::load_checkpoint;
use mvlab_core::probe::{default_layers, run_probe, write_probe_csv, ProbeSettings};
use mvlab_core::report::{build_report, AUDIT_FILE};
use mvlab_core::trainer::{run_experiment, run_preset, Preset, RunSummary, SyntheticDataset, TrainConfig, CONFIG_FILE};
use mvlab_core::verify::{run_verify, Mutation};
use mvlab_core::{Error, Model};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_HALTED: u8 = 3;

#[derive(Parser)]
#[command(name = "mvlab", version, about = "Desk-scale DiT residual-stream laboratory")]
struct Cli {
    /// Root directory for outputs written without an explicit `--out`.
    #[arg(long, global = true, env = "MVLAB_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration or every run of a preset.
    Train(TrainArgs),
    /// Alignment audit of a checkpoint's writers.
    Audit(AuditArgs),
    /// Linear probes for the diffusion time on hidden states.
    Probe(ProbeArgs),
    /// Run the exact-identity suite.
    Verify(VerifyArgs),
    /// Turn a run or audit directory into plot-ready CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print progress every this many steps; 0 silences it.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "natural")]
    batch: AuditBatch,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Audit text tokens together with the image tokens.
    #[arg(long)]
    include_text: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated layers; defaults to every `stride`-th layer.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value_t = 200)]
    groups: usize,
    #[arg(long, default_value_t = 4)]
    draws: usize,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the freshly initialized control model.
    #[arg(long)]
    no_control: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Inject a known fault to check that the suite catches it.
    #[arg(long, hide = true)]
    inject_gmd_sign_flip: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

enum Failure {
    Usage(String),
    Verify,
    Halted(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let root = cli.out_root;
    let outcome = match cli.command {
        Command::Train(a) => train(a, &root),
        Command::Audit(a) => audit(a, &root),
        Command::Probe(a) => probe(a, &root),
        Command::Verify(a) => verify(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verify) => ExitCode::from(EXIT_VERIFY),
        Err(Failure::Halted(msg)) => {
            eprintln!("halted: {msg}");
            ExitCode::from(EXIT_HALTED)
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    TrainConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: {} steps, final loss {:.6e}, max TCS {:.4}, collapse {}",
        s.label,
        s.steps_completed,
        s.final_loss,
        s.max_tcs,
        s.collapse_step.map_or("none".to_string(), |c| format!("at step {c}"))
    );
    if let Some(d) = &s.divergence {
        println!("{}: diverged at step {} ({})", s.label, d.step, d.reason);
    }
}

fn train(a: TrainArgs, root: &Path) -> Outcome {
    let mut config = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    config.validate()?;
    let name = match (a.preset, &a.config) {
        (Some(p), _) => p.name().to_string(),
        (None, Some(path)) => path
            .file_stem()
            .map_or("run".into(), |s| s.to_string_lossy().into_owned()),
        (None, None) => "run".into(),
    };
    let out = a.out.unwrap_or_else(|| root.join(format!("{name}-s{}", config.seed)));
    let every = a.log_every;
    let mut log = |label: &str, r: &mvlab_core::trainer::StepReport| {
        if every > 0 && (r.step.is_multiple_of(every) || !r.applied) {
            eprintln!("{label} step {:>6} loss {:.6e} |g| {:.3e}", r.step, r.loss, r.grad_norm);
        }
    };
    let summaries = match a.preset {
        Some(p) => run_preset(p, &config, &out, &mut log)?
            .into_iter()
            .map(|(_, s)| s)
            .collect(),
        None => vec![run_experiment(&config, &out, &name, &mut |r| log(&name, r))?],
    };
    for s in &summaries {
        print_summary(s);
    }
    println!("artifacts: {}", out.display());
    match summaries.iter().find(|s| s.halted) {
        Some(s) => Err(Failure::Halted(format!(
            "{} stopped on a non-finite step after {} steps",
            s.label, s.steps_completed
        ))),
        None => Ok(()),
    }
}

/// The model in `checkpoint` plus the training settings found next to it,
/// which fix the synthetic dataset.
fn load_trained(checkpoint: &Path) -> Result<(Model, TrainConfig), Failure> {
    let (model_config, params) = load_checkpoint(checkpoint)?;
    let resolved = checkpoint.with_file_name(CONFIG_FILE);
    let mut train = if resolved.exists() {
        load_config(&resolved)?
    } else {
        TrainConfig::default()
    };
    train.model = model_config.clone();
    Ok((Model::from_params(model_config, params)?, train))
}

#[derive(Serialize)]
struct AuditSettings<'a> {
    checkpoint: &'a Path,
    batch: &'a str,
    samples: usize,
    seed: u64,
    tokens: TokenScope,
}

fn audit(a: AuditArgs, root: &Path) -> Outcome {
    let (model, train) = load_trained(&a.checkpoint)?;
    let dataset = SyntheticDataset::new(train.seed, train.classes, &model.config)?;
    let tokens = if a.include_text {
        TokenScope::All
    } else {
        TokenScope::Image
    };
    let points = audit_model_scoped(&model, &dataset, a.batch, a.samples, a.seed, tokens)?;
    let out = a
        .out
        .unwrap_or_else(|| root.join(format!("audit-{}-s{}", a.batch.name(), a.seed)));
    fs::create_dir_all(&out)?;
    write_audit_csv(BufWriter::new(fs::File::create(out.join(AUDIT_FILE))?), &points)?;
    let settings = AuditSettings {
        checkpoint: &a.checkpoint,
        batch: a.batch.name(),
        samples: a.samples,
        seed: a.seed,
        tokens,
    };
    fs::write(
        out.join("settings.json"),
        serde_json::to_string_pretty(&settings)? + "\n",
    )?;
    println!("{} audit points written to {}", points.len(), out.display());
    Ok(())
}

fn probe(a: ProbeArgs, root: &Path) -> Outcome {
    let (model, train) = load_trained(&a.checkpoint)?;
    let dataset = SyntheticDataset::new(train.seed, train.classes, &model.config)?;
    let layers = if a.layers.is_empty() {
        default_layers(model.config.depth, a.stride.max(1))
    } else {
        a.layers
    };
    let settings = ProbeSettings {
        groups: a.groups,
        draws: a.draws,
        lambda: a.lambda,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let control = if a.no_control {
        None
    } else {
        Some(Model::new(model.config.clone(), train.seed)?)
    };
    let report = run_probe(&model, control.as_ref(), &dataset, &layers, &settings)?;
    let out = a.out.unwrap_or_else(|| root.join(format!("probe-s{}", a.seed)));
    fs::create_dir_all(&out)?;
    write_probe_csv(BufWriter::new(fs::File::create(out.join("probe.csv"))?), &report)?;
    fs::write(out.join("probe.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(
        out.join("settings.json"),
        serde_json::to_string_pretty(&settings)? + "\n",
    )?;
    println!(
        "input-statistics R² {:.4}; {} layer probes written to {}",
        report.input_r2,
        report.records.len(),
        out.display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Outcome {
    let mutation = a.inject_gmd_sign_flip.then_some(Mutation::GmdSignFlip);
    let report = run_verify(a.seed, mutation)?;
    print!("{report}");
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if report.all_passed() {
        println!("all {} identities hold", report.rows.len());
        Ok(())
    } else {
        println!("failed: {}", report.failed().join(", "));
        Err(Failure::Verify)
    }
}

fn report(a: ReportArgs) -> Outcome {
    let (report, out) = build_report(&a.run)?;
    for flag in &report.flags {
        println!("flag: {flag}");
    }
    println!("{} files written to {}", report.files.len() + 1, out.display());
    Ok(())
}
