use std::path::PathBuf;
use std::process::ExitCode;

use backdoor_lab::config::{trigger_by_name, RunConfig};
use backdoor_lab::data::Family;
use backdoor_lab::pipeline::{Pipeline, PipelineError, Stage, StageOutcome};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdlab", version, about = "Backdoor injection and diagnosis on a toy vision-language model")]
struct Cli {
    /// JSON run configuration; the pinned defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "A")]
    seed_set: String,
    #[arg(long, global = true)]
    family: Option<String>,
    /// Override the family's default trigger.
    #[arg(long, global = true)]
    trigger: Option<String>,
    #[arg(long, global = true)]
    poison_rate: Option<f64>,
    #[arg(long, global = true)]
    k1: Option<usize>,
    #[arg(long, global = true)]
    k2: Option<usize>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Build the frozen model and all datasets.
    Synth,
    /// Clean pre-training followed by poisoned fine-tuning.
    Inject,
    Eval,
    Probe,
    Wlens,
    Surgery,
    Elens,
    Report,
    /// Every stage in order.
    All,
    /// Print the resolved configuration and its hash.
    Config,
}

impl Cmd {
    fn stages(self) -> Vec<Stage> {
        match self {
            Cmd::Synth => vec![Stage::Synth],
            Cmd::Inject => vec![Stage::Inject],
            Cmd::Eval => vec![Stage::Eval],
            Cmd::Probe => vec![Stage::Probe],
            Cmd::Wlens => vec![Stage::Wlens],
            Cmd::Surgery => vec![Stage::Surgery],
            Cmd::Elens => vec![Stage::Elens],
            Cmd::Report => vec![Stage::Report],
            Cmd::All => Stage::ALL.to_vec(),
            Cmd::Config => vec![],
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => RunConfig::pinned(Family::TargetedRefusal, &cli.seed_set)
            .ok_or_else(|| format!("unknown seed set `{}`", cli.seed_set))?,
    };
    if let Some(f) = &cli.family {
        cfg.set_family(f.parse()?);
    }
    if let Some(t) = &cli.trigger {
        cfg.trigger = trigger_by_name(t).ok_or_else(|| format!("unknown trigger `{t}`"))?;
    }
    if let Some(r) = cli.poison_rate {
        cfg.dataset.poison_rate = r;
    }
    if let Some(k) = cli.k1 {
        cfg.analysis.k1 = k;
    }
    if let Some(k) = cli.k2 {
        cfg.analysis.k2 = k;
    }
    if let Some(k) = cli.topk {
        cfg.analysis.topk = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(cli).map_err(PipelineError::Config)?;
    if let Cmd::Config = cli.cmd {
        println!("{}", cfg.hash());
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
        return Ok(());
    }
    let mut p = Pipeline::open(cfg, &cli.out)?;
    for stage in cli.cmd.stages() {
        let outcome = p.run_stage(stage)?;
        let verb = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::Verified => "verified",
        };
        eprintln!("{:<8} {verb}", stage.name());
    }
    println!("{}", p.root().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
