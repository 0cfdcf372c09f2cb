//! Command-line driver: CSV ingestion, TOML configuration and report output
//! for the estimators in `miv-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use miv_core::nuisance::TrimPolicy;

pub use commands::Rendered;
pub use config::{AnalysisConfig, Overrides};
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Cross-fitted estimate on a CSV file.
    Estimate,
    /// Monte Carlo study of a simulation design.
    Simulate,
    /// Brute-force truth of a simulation design.
    Oracle,
    /// Misspecification scenarios with closed-form nuisances.
    Robustness,
    /// Ingest a CSV file and report its shape.
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrimArg {
    Floor,
    Drop,
}

/// Value of `--winsorize`: a multiplier, or `None` for "off".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Winsorize(pub Option<f64>);

fn parse_winsorize(s: &str) -> Result<Winsorize, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(Winsorize(None));
    }
    match s.parse::<f64>() {
        Ok(k) if k > 0.0 && k.is_finite() => Ok(Winsorize(Some(k))),
        _ => Err(format!("expected a positive number or 'off', got '{s}'")),
    }
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "miv",
    version,
    about = "Nonrespondent functionals with a multiplicative instrument"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration (format "miv-config/1").
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// CSV data for estimate and validate.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Write the JSON report here and the text summary next to it (.txt).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Cross-fitting repetitions (estimate) or Monte Carlo replications.
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub ci_level: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub trim: Option<TrimArg>,
    /// Winsorize influence values at this many interquartile ranges, or "off".
    #[arg(long, global = true, value_parser = parse_winsorize)]
    pub winsorize: Option<Winsorize>,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            folds: self.folds,
            reps: self.reps,
            ci_level: self.ci_level,
            trim: self.trim.map(|t| match t {
                TrimArg::Floor => TrimPolicy::Floor,
                TrimArg::Drop => TrimPolicy::Drop,
            }),
            winsorize: self.winsorize.map(|w| w.0),
        }
    }

    /// Loaded config with the command-line overrides applied.
    pub fn resolved_config(&self) -> CliResult<AnalysisConfig> {
        let mut cfg = match &self.config {
            Some(p) => AnalysisConfig::load(p)?,
            None => AnalysisConfig::default(),
        };
        cfg.apply(&self.overrides(), self.command == Command::Estimate)?;
        Ok(cfg)
    }

    fn data_path(&self) -> CliResult<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Config("--data is required for this command".into()))
    }

    /// Runs the command on the current rayon pool.
    pub fn run(&self) -> CliResult<Rendered> {
        let cfg = self.resolved_config()?;
        match self.command {
            Command::Estimate => commands::cmd_estimate(&cfg, self.data_path()?),
            Command::Validate => commands::cmd_validate(&cfg, self.data_path()?),
            Command::Simulate => commands::cmd_simulate(&cfg),
            Command::Oracle => commands::cmd_oracle(&cfg),
            Command::Robustness => commands::cmd_robustness(&cfg),
        }
    }

    /// Runs the command on a pool of `--threads` workers when given.
    pub fn execute(&self) -> CliResult<Rendered> {
        match self.threads {
            None => self.run(),
            Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| CliError::Config(format!("cannot start {t} threads: {e}")))?
                .install(|| self.run()),
        }
    }

    /// Writes the report files when `--out` was given.
    pub fn write(&self, rendered: &Rendered) -> CliResult<()> {
        let Some(out) = &self.out else {
            return Ok(());
        };
        let text_path = out.with_extension("txt");
        for (path, body) in [
            (out.as_path(), &rendered.json),
            (text_path.as_path(), &rendered.text),
        ] {
            std::fs::write(path, body).map_err(|source| CliError::Output {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "miv",
            "estimate",
            "--data",
            "d.csv",
            "--folds",
            "3",
            "--trim",
            "drop",
            "--winsorize",
            "off",
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Estimate);
        let o = cli.overrides();
        assert_eq!(o.folds, Some(3));
        assert_eq!(o.trim, Some(TrimPolicy::Drop));
        assert_eq!(o.winsorize, Some(None));
        let cli = Cli::try_parse_from(["miv", "simulate", "--winsorize", "2.5"]).unwrap();
        assert_eq!(cli.overrides().winsorize, Some(Some(2.5)));
        assert!(Cli::try_parse_from(["miv", "simulate", "--winsorize", "-1"]).is_err());
        assert!(Cli::try_parse_from(["miv", "simulate", "--trim", "strict"]).is_err());
    }

    #[test]
    fn estimate_needs_data() {
        let cli = Cli::try_parse_from(["miv", "estimate"]).unwrap();
        assert_eq!(cli.run().unwrap_err().exit_code(), 4);
    }
}
