//! Thin CLI over the xrel library: one subcommand per experiment kind,
//! dispatching to `xrel::cli::run`.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use xrel::cli::{run, ConfigSource, RunArgs};

#[derive(Parser)]
#[command(
    name = "xrel",
    about = "Exact-relation experiments for inhomogeneous media",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML). Exactly one of --config/--preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (see presets/).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (report.json, resolved-config, tables/, fields/).
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: XREL_THREADS env var, then all cores).
    /// Results are identical for any value.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Multialgebra closure check and the maximal source space.
    CheckAlgebra(CommonArgs),
    /// Rank-one lamination trajectories on the manifold.
    Laminate(CommonArgs),
    /// Periodic-grid polarization solve with membership report.
    Solve(CommonArgs),
    /// Point-source kernel experiment with off-diagonal membership.
    Greens(CommonArgs),
    /// Embedded body with exterior source; interior + boundary membership.
    Embed(CommonArgs),
    /// Two-phase rank-one boundary flux equality (bounded FD solve).
    Milgrom(CommonArgs),
    /// Boundary field equalities: surface moments and null-Lagrangians.
    BfeCheck(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::CheckAlgebra(a) => ("check-algebra", a),
        Command::Laminate(a) => ("laminate", a),
        Command::Solve(a) => ("solve", a),
        Command::Greens(a) => ("greens", a),
        Command::Embed(a) => ("embed", a),
        Command::Milgrom(a) => ("milgrom", a),
        Command::BfeCheck(a) => ("bfe-check", a),
    };
    let source = match (&common.config, &common.preset) {
        (Some(path), None) => ConfigSource::Path(path.clone()),
        (None, Some(name)) => ConfigSource::Preset(name.clone()),
        _ => {
            eprintln!("error: provide exactly one of --config <path> or --preset <name>");
            return ExitCode::from(xrel::cli::EXIT_CONFIG as u8);
        }
    };
    let code = run(&RunArgs {
        subcommand: name.to_string(),
        config: source,
        out_dir: common.out.clone(),
        seed: common.seed,
        threads: common.threads,
    });
    ExitCode::from(code as u8)
}
