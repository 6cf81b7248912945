use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use conic_dispersion::harness::{self, Check, ConfigTree, Experiment, HarnessError, Level};

#[derive(Parser)]
#[command(name = "conic-dispersion", version, about = "Numerical experiments on asymptotically conic model geometries")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file merged over the reference configuration
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set samples=500` or `--set metric.nu=0.5` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root directory for run outputs
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Bicharacteristic flow against the flat straight-line oracle
    Flow,
    /// Scattering map at infinity
    ScatterMap,
    /// Eikonal phase table, residuals and expansion orders
    Eikonal,
    /// Transport amplitude along the flow
    Transport,
    /// Short-time WKB phase
    Wkb,
    /// Oscillatory kernel bounds
    Oscillatory(OscillatoryArgs),
    /// Radial eigenvalue oracles and the Littlewood-Paley square function
    LpCheck,
    /// Weighted resolvent near the real axis
    Resolvent,
    /// Local smoothing ratios
    Smoothing,
    /// Sobolev ratio probe
    Sobolev,
    /// Dispersive decay of the propagator
    Dispersive,
    /// Strichartz ratios across frequency bands
    Strichartz,
    /// Small-data cubic NLS: Picard iteration and scattering
    Nls,
    /// One normal-form step on a radial coefficient
    NormalForm,
    /// Every experiment plus the acceptance summary
    Suite {
        #[arg(long, default_value = "full")]
        level: Level,
    },
    /// Print the merged configuration
    Config,
}

#[derive(Args)]
struct OscillatoryArgs {
    /// all, dispersive, radial_sep, angular_sep or stationary
    #[arg(long)]
    regime: Option<String>,
    /// Comma-separated semiclassical parameters
    #[arg(long, value_delimiter = ',')]
    h_ladder: Option<Vec<f64>>,
    /// Comma-separated values of s/h
    #[arg(long, value_delimiter = ',')]
    s_ladder: Option<Vec<f64>>,
}

fn experiment(c: &Command) -> Option<Experiment> {
    Some(match c {
        Command::Flow => Experiment::Flow,
        Command::ScatterMap => Experiment::ScatterMap,
        Command::Eikonal => Experiment::Eikonal,
        Command::Transport => Experiment::Transport,
        Command::Wkb => Experiment::Wkb,
        Command::Oscillatory(_) => Experiment::Oscillatory,
        Command::LpCheck => Experiment::LpCheck,
        Command::Resolvent => Experiment::Resolvent,
        Command::Smoothing => Experiment::Smoothing,
        Command::Sobolev => Experiment::Sobolev,
        Command::Dispersive => Experiment::Dispersive,
        Command::Strichartz => Experiment::Strichartz,
        Command::Nls => Experiment::Nls,
        Command::NormalForm => Experiment::NormalForm,
        Command::Suite { .. } | Command::Config => return None,
    })
}

fn list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(","))
}

fn load(cli: &Cli) -> Result<ConfigTree, HarnessError> {
    let mut tree = ConfigTree::reference();
    if let Some(p) = &cli.common.config {
        tree.overlay_file(p)?;
    }
    let scope = experiment(&cli.command).map(|e| e.section());
    let mut sets = cli.common.set.clone();
    if let Command::Oscillatory(a) = &cli.command {
        if let Some(r) = &a.regime {
            sets.push(format!("regime={r}"));
        }
        if let Some(h) = &a.h_ladder {
            sets.push(format!("h_ladder={}", list(h)));
        }
        if let Some(s) = &a.s_ladder {
            sets.push(format!("s_over_h={}", list(s)));
        }
    }
    for s in &sets {
        tree.set(s, scope.as_deref())?;
    }
    tree.build()?;
    Ok(tree)
}

fn print_check(c: &Check) {
    println!(
        "{} {:<30} [{}] {} (required {}){}",
        if c.pass { "PASS" } else { "FAIL" },
        c.id,
        c.metric,
        c.observed,
        c.required,
        if c.detail.is_empty() { String::new() } else { format!("  {}", c.detail) }
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let tree = match load(&cli) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli, &tree) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli, tree: &ConfigTree) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Config => {
            print!("{}", tree.to_toml_string());
            Ok(true)
        }
        Command::Suite { level } => {
            let out = harness::run_suite(tree, *level, &cli.common.out).context("suite")?;
            print!("{}", out.summary());
            println!("outputs: {}", out.dir.display());
            Ok(out.pass())
        }
        cmd => {
            let exp = experiment(cmd).expect("experiment subcommand");
            let out = harness::run(exp, tree, &cli.common.out).with_context(|| exp.to_string())?;
            for c in &out.manifest.checks {
                print_check(c);
            }
            println!(
                "{} in {:.1}s on {} threads; outputs: {}",
                exp,
                out.manifest.wall_clock_seconds,
                out.manifest.threads,
                out.dir.display()
            );
            Ok(out.pass())
        }
    }
}
