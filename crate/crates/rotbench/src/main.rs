use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use rotbench::backend::{BackendConfig, BackendKind};
use rotbench::commands::{cmd_augment, cmd_generate, cmd_report, cmd_run, cmd_score, RunConfig};
use rotbench::format::Manifest;
use rotbench_core::augment::AugmentationPlan;
use rotbench_core::{NoiseLevel, Stage};

/// Measure how robust a model's tool use is to noisy tool catalogs.
#[derive(Debug, Parser)]
#[command(name = "rotbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Clean test-case catalog (JSON).
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,

    /// Comma-separated noise levels.
    #[arg(long, global = true, value_delimiter = ',', default_value = "clean,slight,medium,heavy,union")]
    levels: Vec<NoiseLevel>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = BackendKind::Scripted)]
    backend: BackendKind,

    /// Base URL of an OpenAI-compatible chat-completion service.
    #[arg(long, global = true)]
    endpoint: Option<String>,

    #[arg(long, global = true, default_value = "")]
    model: String,

    /// Maximum requests in flight.
    #[arg(long, global = true, default_value_t = 4)]
    concurrency: usize,

    /// Request timeout in seconds.
    #[arg(long, global = true, default_value_t = 60.0)]
    timeout: f64,

    #[arg(long, global = true, default_value_t = 3)]
    max_retries: u32,

    #[arg(long, global = true, default_value_t = 0.0)]
    temperature: f64,

    /// Environment variable holding the API key.
    #[arg(long, global = true, default_value = "ROTBENCH_API_KEY")]
    api_key_env: String,

    /// Scripted answers (JSON object: case id → output text).
    #[arg(long, global = true)]
    script: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Stage compared across levels by Welch's ANOVA: ts, pi or cf.
    #[arg(long, global = true, default_value = "cf")]
    anova_stage: Stage,

    /// Only use cases from this scenario.
    #[arg(long, global = true)]
    scenario: Option<String>,

    /// Clean-environment trajectories to augment (JSON).
    #[arg(long, global = true)]
    trajectories: Option<PathBuf>,

    /// Trajectories per noisy level as `slight,medium,heavy,union`, or
    /// `standard` for 3000,3000,3000,1500.
    #[arg(long, global = true)]
    plan: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one noisy environment per level.
    Generate,
    /// Collect model outputs for every environment (resumable).
    Run,
    /// Score transcripts and write results.json and report.txt.
    Score,
    /// Sample, rewrite and export augmented training records.
    Augment,
    /// Print the results table, optionally re-aggregated.
    Report,
}

fn parse_plan(s: &str) -> Result<AugmentationPlan> {
    if s.eq_ignore_ascii_case("standard") {
        return Ok(AugmentationPlan::standard());
    }
    let n: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()?;
    let [slight, medium, heavy, union] = n[..] else {
        bail!("--plan takes four counts: slight,medium,heavy,union");
    };
    Ok(AugmentationPlan::new(slight, medium, heavy, union))
}

fn config(cli: &Cli) -> Result<RunConfig> {
    if !(cli.timeout.is_finite() && cli.timeout > 0.0) {
        bail!("--timeout must be a positive number of seconds");
    }
    Ok(RunConfig {
        catalog: cli.catalog.clone(),
        levels: cli.levels.clone(),
        seed: cli.seed,
        backend: BackendConfig {
            kind: cli.backend,
            endpoint: cli.endpoint.clone(),
            model_name: cli.model.clone(),
            timeout: Duration::from_secs_f64(cli.timeout),
            max_retries: cli.max_retries,
            concurrency_limit: cli.concurrency,
            temperature: cli.temperature,
            api_key_env: cli.api_key_env.clone(),
            ..BackendConfig::default()
        },
        script: cli.script.clone(),
        out: cli.out.clone(),
        anova_stage: cli.anova_stage,
        scenario: cli.scenario.clone(),
        trajectories: cli.trajectories.clone(),
        plan: cli.plan.as_deref().map(parse_plan).transpose()?,
    })
}

fn summarize(m: &Manifest) {
    for (k, v) in &m.counts {
        println!("{k}: {v}");
    }
    for e in &m.errors {
        eprintln!("warning: {e}");
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = config(cli)?;
    match cli.command {
        Command::Generate => summarize(&cmd_generate(&config)?),
        Command::Run => summarize(&cmd_run(&config)?),
        Command::Score => {
            let results = cmd_score(&config)?;
            for w in &results.report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", rotbench::report::render_report(&results.report));
        }
        Command::Augment => summarize(&cmd_augment(&config)?),
        Command::Report => print!("{}", cmd_report(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
