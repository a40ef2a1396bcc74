use std::path::PathBuf;
use std::process::ExitCode;

use cacenet::config::{Provenance, RunConfig};
use cacenet::error::{Result, EXIT_NUMERIC};
use cacenet::gradcheck::CheckTable;
use cacenet::pipeline;
use cacenet::postproc::SummaryTable;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Retinal boundary segmentation with CACE-Net.
#[derive(Parser, Debug)]
#[command(name = "cacenet", version, about)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic OCT dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of samples to generate.
        #[arg(long)]
        count: Option<usize>,
        /// Overwrite the dataset files in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a network on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Score checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; repeat to compare several side by side.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Segment a single image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grayscale PGM image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Boundary CSV drawn on the overlay and scored against.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Also check the whole network in eval and train mode.
        #[arg(long)]
        network: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.base_width=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attention: Option<Switch>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Switch {
    On,
    Off,
}

impl Common {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.set_pair(kv, Provenance::Flag)?;
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(seed) = self.seed {
            flags.push(("seed", seed.to_string()));
        }
        if let Some(a) = self.attention {
            flags.push((
                "model.attention",
                if matches!(a, Switch::On) { "on" } else { "off" }.into(),
            ));
        }
        if let Some(d) = &self.data {
            flags.push(("paths.data", d.display().to_string()));
        }
        if let Some(o) = &self.out {
            flags.push(("paths.out", o.display().to_string()));
        }
        for (key, value) in flags.iter().chain(extra) {
            cfg.set(key, value, Provenance::Flag)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn joined(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { common, count, force } => {
            let extra: Vec<_> = count.map(|c| ("synth.count", c.to_string())).into_iter().collect();
            let cfg = common.resolve(&extra)?;
            let s = pipeline::cmd_synth(&cfg, force)?;
            println!("{}: {} train, {} test", s.dir.display(), s.train.len(), s.test.len());
        }
        Command::Train { common, max_iter } => {
            let extra: Vec<_> = max_iter
                .map(|m| ("train.max_iter", m.to_string()))
                .into_iter()
                .collect();
            let cfg = common.resolve(&extra)?;
            let s = pipeline::cmd_train(&cfg)?;
            if let Some(last) = s.history.last() {
                println!("final loss {:.6} after {} iterations", last.loss, last.iteration + 1);
            }
            println!("{}", s.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let mut extra = Vec::new();
            if !checkpoint.is_empty() {
                extra.push(("paths.checkpoints", joined(&checkpoint)));
            }
            let cfg = common.resolve(&extra)?;
            let reports = pipeline::cmd_eval(&cfg)?;
            print!("{}", SummaryTable(&reports));
        }
        Command::Predict {
            common,
            checkpoint,
            image,
            ground_truth,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = checkpoint {
                extra.push(("paths.checkpoints", c.display().to_string()));
            }
            if let Some(i) = image {
                extra.push(("paths.image", i.display().to_string()));
            }
            if let Some(g) = ground_truth {
                extra.push(("paths.ground_truth", g.display().to_string()));
            }
            let cfg = common.resolve(&extra)?;
            let p = pipeline::cmd_predict(&cfg)?;
            for path in [&p.mask, &p.boundary, &p.overlay] {
                println!("{}", path.display());
            }
            if let Some(m) = p.mae {
                println!("mae {m:.4}");
            }
        }
        Command::Gradcheck { common, network } => {
            let cfg = common.resolve(&[])?;
            let checks = pipeline::cmd_gradcheck(&cfg, network)?;
            print!("{}", CheckTable(&checks));
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("error: {failed} gradient check(s) failed");
                return Ok(ExitCode::from(EXIT_NUMERIC as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
