use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedgraph::pipeline::{Experiment, ExperimentConfig, Preset, Stage};
use fedgraph::{with_precision, Error};

/// Graph-aggregated vertical federated learning experiments.
#[derive(Parser)]
#[command(name = "fedgraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split features and samples across clients.
    Partition(Common),
    /// Train every client network on its local view.
    TrainClients(Common),
    /// Score extractor depths and pick one per client.
    PrivacyScore(Common),
    /// Sweep the cluster size on one client.
    ValidateDelta(Common),
    /// Cluster samples within each sample group.
    Cluster(Common),
    /// Train one server model per clustering method.
    TrainServer(Common),
    /// Test-split accuracy per method and the local baseline.
    Evaluate(Common),
    /// All stages in order, then the report.
    RunAll(Common),
    /// Rebuild the comparison table and figure series from metrics.
    Report(Common),
    /// Print the resolved configuration as JSON.
    ShowConfig(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Master seed; overrides the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory; overrides the configured one and $FEDGRAPH_DATA.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Skip stages whose checkpoints match the configuration (run-all).
    #[arg(long)]
    resume: bool,
}

impl Common {
    fn resolve(&self) -> fedgraph::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::preset(match self.preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            }),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.data {
            cfg.data.dir = dir.clone();
        } else if let Some(dir) = std::env::var_os("FEDGRAPH_DATA") {
            cfg.data.dir = dir.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> fedgraph::Result<()> {
    let (common, stage) = match &command {
        Command::Partition(c) => (c, Some(Stage::Partition)),
        Command::TrainClients(c) => (c, Some(Stage::TrainClients)),
        Command::PrivacyScore(c) => (c, Some(Stage::PrivacyScore)),
        Command::ValidateDelta(c) => (c, Some(Stage::ValidateDelta)),
        Command::Cluster(c) => (c, Some(Stage::Cluster)),
        Command::TrainServer(c) => (c, Some(Stage::TrainServer)),
        Command::Evaluate(c) => (c, Some(Stage::Evaluate)),
        Command::RunAll(c) | Command::Report(c) | Command::ShowConfig(c) => (c, None),
    };
    if let Command::Report(c) = &command {
        let report = fedgraph::pipeline::report(&c.out)?;
        print!("{}", report.table);
        return Ok(());
    }
    let cfg = common.resolve()?;
    if let Command::ShowConfig(_) = &command {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    cfg.validate_paths()?;
    with_precision!(cfg.precision, T => {
        let mut exp = Experiment::<T>::new(cfg, &common.out)?;
        match stage {
            Some(stage) => exp.run_stage(stage)?,
            None => {
                exp.run_all(common.resume)?;
                print!("{}", exp.write_report()?.table);
            }
        }
    });
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
