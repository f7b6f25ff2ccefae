use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcfront::frontend::Variant;
use mcfront::train::{self, gradcheck, RunConfig};
use mcfront::Precision;

#[derive(Parser)]
#[command(name = "mcfront", version, about = "Multi-channel attention front-ends: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant; writes the step log and the final checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Step log path (overrides the config).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Additional `VARIANT=PATH` checkpoints for the comparison table.
        #[arg(long = "with", value_name = "VARIANT=PATH")]
        with: Vec<String>,
    },
    /// Finite-difference checks of every primitive and every variant.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full conv-attention model and its four ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the neural beamformer, MHA and conv-attention models.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Render the configured scenes as WAV files.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the tensors of a checkpoint.
    InspectCheckpoint { path: PathBuf },
    /// Print the effective configuration as JSON.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "32" => Ok(Precision::F32),
        "64" => Ok(Precision::F64),
        _ => Err(format!("expected 32 or 64, got {s}")),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("invalid config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.steps {
        cfg.steps = s;
    }
    if let Some(p) = &c.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, log } => {
            let mut cfg = load_config(&common)?;
            if log.is_some() {
                cfg.log = log;
            }
            let r = train::train(&cfg)?;
            println!(
                "{}: initial loss {:.6e}, final loss {:.6e} ({:.1}% of initial), {} skipped steps",
                r.variant.name(),
                r.initial_loss,
                r.final_loss,
                100.0 * r.final_loss / r.initial_loss,
                r.skipped_steps
            );
        }
        Command::Eval { common, with } => {
            let cfg = load_config(&common)?;
            let Some(path) = &cfg.checkpoint else {
                bail!("eval needs --checkpoint");
            };
            let examples = train::build_examples(&cfg)?;
            let mut rows = vec![(cfg.variant, train::evaluate_checkpoint(&cfg, path, &examples)?)];
            for spec in &with {
                let (v, p) = spec.split_once('=').context("--with expects VARIANT=PATH")?;
                let v: Variant = v.parse()?;
                let loss = train::evaluate_checkpoint(&cfg.with_variant(v), p.as_ref(), &examples)?;
                rows.push((v, loss));
            }
            let base = rows.iter().find(|(v, _)| *v == Variant::NeuralBeamformer).map(|r| r.1);
            println!("{:<28} {:>14} {:>22}", "variant", "surrogate loss", "rel. neural_beamformer");
            for (v, loss) in rows {
                let rel = base.map_or("n/a".into(), |b| format!("{:+.1}%", train::relative_change(loss, b)));
                println!("{:<28} {:>14.9e} {:>22}", v.label(), loss, rel);
            }
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            for r in gradcheck::full_suite(seed)? {
                let ok = r.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{} {:<28} max rel err {:.2e}",
                    if ok { "ok  " } else { "FAIL" },
                    r.name,
                    r.report.max_rel_error()
                );
                for f in r.report.failures() {
                    println!("     {} [{}]: analytic {:.6e} numeric {:.6e}", f.name, f.worst_index, f.analytic, f.numeric);
                }
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let (_, table) = train::ablate(&cfg)?;
            print!("{table}");
        }
        Command::Compare { common } => {
            let cfg = load_config(&common)?;
            let examples = train::build_examples(&cfg)?;
            let variants = [Variant::NeuralBeamformer, Variant::Mha, Variant::Conv2d];
            let reports = train::train_variants(&cfg, &variants, &examples)?;
            let rows = train::relative_table(&reports, Variant::NeuralBeamformer);
            print!("{}", train::format_table(&rows, Variant::NeuralBeamformer));
        }
        Command::MakeData { common, out } => {
            let cfg = load_config(&common)?;
            let items = train::make_data(&cfg, &out)?;
            println!("wrote {} scene pairs to {}", items.len(), out.display());
        }
        Command::InspectCheckpoint { path } => print!("{}", train::inspect_checkpoint(&path)?),
        Command::ShowConfig { common } => println!("{}", load_config(&common)?.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
