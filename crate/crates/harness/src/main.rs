use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advpoison_core::engine::Precision;
use advpoison_core::Error;
use advpoison_harness::config::{profile, ExperimentConfig, PROFILE_NAMES};
use advpoison_harness::experiment::{
    default_out, eval_model, eval_poison, poison_command, run_experiment, train_command, Lab,
};
use advpoison_harness::report::{emit_report, AttackReport};
use advpoison_harness::HarnessError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "advpoison",
    version,
    about = "Clean-label poisoning experiments against adversarial training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile: targeted-desk, untargeted-desk or reference.
    #[arg(long)]
    profile: Option<String>,
    /// Output directory; defaults to the config's `output` or runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to the trial with this seed (train: the victim seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train one learner on the clean training set.
    Train(Common),
    /// Craft targeted poison sets.
    PoisonTargeted(Common),
    /// Train a sticker generator and craft sticker poison sets.
    PoisonSticker(Common),
    /// Train a REM generator and craft REM poison sets.
    PoisonRem(Common),
    /// Evaluate a checkpoint, or train paired victims on a saved poison set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "poison")]
        model: Option<PathBuf>,
        #[arg(long)]
        poison: Option<PathBuf>,
    },
    /// Full experiment: surrogate, crafting, paired victims, report.
    Run(Common),
    /// Re-render tables and plots from an existing report directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in profiles, or print one as JSON.
    Profiles { name: Option<String> },
}

fn load(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&c.config, &c.profile) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => profile(name)?,
        (None, None) => return Err(Error::Usage("pass --config <json> or --profile <name>".into())),
    };
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    if let Some(out) = &c.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

fn with_trial(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    if let Some(s) = seed {
        cfg.select_trial(s)?;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn poison(c: &Common, kind: &str) -> Result<(), HarnessError> {
    let cfg = with_trial(load(c)?, c.seed)?;
    if cfg.attack.name() != kind {
        return Err(Error::Config(format!(
            "config {:?} describes a {} attack, not {kind}",
            cfg.name,
            cfg.attack.name()
        ))
        .into());
    }
    let out = default_out(&cfg);
    let lab = Lab::new(cfg)?;
    let summaries = poison_command(&lab, &out)?;
    for s in &summaries {
        println!(
            "{}  rows={}  objective={}",
            s.dir.as_deref().unwrap_or("-"),
            s.poisoned_rows,
            s.final_objective.map_or("-".into(), |v| format!("{v:.6}"))
        );
    }
    Ok(())
}

fn rerender(dir: &Path) -> Result<(), Error> {
    let report = AttackReport::load(dir)?;
    for f in emit_report(&report, dir)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let seed = c.seed.unwrap_or(cfg.victim_seeds[0]);
            let out = default_out(&cfg);
            let lab = Lab::new(cfg)?;
            print_json(&train_command(&lab, seed, &out)?)?;
        }
        Command::PoisonTargeted(c) => poison(&c, "targeted")?,
        Command::PoisonSticker(c) => poison(&c, "sticker")?,
        Command::PoisonRem(c) => poison(&c, "rem")?,
        Command::Eval { common, model, poison } => {
            let lab = Lab::new(load(&common)?)?;
            match (model, poison) {
                (Some(m), _) => print_json(&eval_model(&lab, &m)?)?,
                (None, Some(p)) => print_json(&eval_poison(&lab, &p)?)?,
                (None, None) => return Err(Error::Usage("eval needs --model or --poison".into()).into()),
            }
        }
        Command::Run(c) => {
            let cfg = with_trial(load(&c)?, c.seed)?;
            let out = default_out(&cfg);
            let report = run_experiment(cfg, Some(&out))?;
            for v in &report.summary {
                println!(
                    "{:<9} {:<7} eps={:<8} runs={:<3} d_nat={:+.4} d_rob={:+.4}{}",
                    v.attack,
                    v.mode.map_or("-".to_string(), |m| format!("{m:?}").to_lowercase()),
                    v.epsilon.map_or("-".to_string(), |e| format!("{e:.4}")),
                    v.runs,
                    v.median_delta_best_nat,
                    v.median_delta_best_rob,
                    match (v.nat_success, v.adv_success) {
                        (Some(n), Some(a)) => format!(" nat_succ={n:.2} adv_succ={a:.2}"),
                        _ => String::new(),
                    }
                );
            }
            println!("report: {}", out.display());
        }
        Command::Report { out } => rerender(&out)?,
        Command::Profiles { name: None } => {
            for n in PROFILE_NAMES {
                let p = profile(n)?;
                let kind = p.attack.name();
                let tag = if p.reference_only { " (reference only)" } else { "" };
                println!("{n:<16} {kind}{tag}");
            }
        }
        Command::Profiles { name: Some(n) } => print_json(&profile(&n)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
