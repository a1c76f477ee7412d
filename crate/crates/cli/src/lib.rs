//! Config-driven runner for the error-corrected LPV-MPC experiments.

use std::path::{Path, PathBuf};

pub mod artifacts;
pub mod config;
pub mod coverage;
pub mod experiment;
pub mod plot;

pub use config::ExperimentConfig;
pub use experiment::{CaseResult, Experiment};

/// Environment variable that overrides `output.directory`.
pub const OUTPUT_DIR_ENV: &str = "LPVGP_OUTPUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] lpvgp::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        1
    }
}

/// Outcome of `run`: where artifacts went and whether every case completed.
#[derive(Debug)]
pub struct RunOutcome {
    pub directory: PathBuf,
    pub cases: Vec<CaseResult>,
}

impl RunOutcome {
    pub fn infeasible(&self) -> bool {
        self.cases.iter().any(|c| c.trajectory.status != lpvgp::RunStatus::Completed)
    }

    /// 0 when every case completed, 2 when a QP was infeasible.
    pub fn exit_code(&self) -> i32 {
        if self.infeasible() { 2 } else { 0 }
    }
}

pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => config.output.directory.clone(),
    }
}

/// Loads, validates, runs and writes every artifact. Nothing is written when
/// the config is rejected.
pub fn run(config_path: &Path) -> Result<RunOutcome, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    run_config(&config, &output_dir(&config))
}

pub fn run_config(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let exp = Experiment::build(config)?;
    let cases = exp.run_all()?;
    std::fs::create_dir_all(dir)?;
    for case in &cases {
        let case_dir = if case.name.is_empty() { dir.to_path_buf() } else { dir.join(case.name) };
        artifacts::write_case(&exp, case, &case_dir)?;
        warn_on_cost_increase(case);
        log::info!(
            "{} run: {:?}, {} steps in {:.2} s",
            if case.name.is_empty() { "single" } else { case.name },
            case.trajectory.status,
            case.trajectory.records.len(),
            case.elapsed.as_secs_f64()
        );
    }
    if cases.len() > 1 && exp.config.output.wants(config::Format::Json) {
        artifacts::write_comparison(&cases, dir)?;
    }
    if exp.config.output.wants(config::Format::Svg) && exp.config.output.wants(config::Format::Csv) {
        plot::plot_dir(dir, &plot::PlotOptions::default())?;
    }
    Ok(RunOutcome { directory: dir.to_path_buf(), cases })
}

/// Soft check: the optimal cost should not rise once the transient has passed.
fn warn_on_cost_increase(case: &CaseResult) {
    let costs: Vec<f64> = case.trajectory.records.iter().map(|r| r.cost).collect();
    let rises = costs
        .windows(2)
        .enumerate()
        .skip(5)
        .filter(|(_, w)| w[1] > w[0] * (1.0 + 1e-9) + 1e-12)
        .count();
    if rises > 0 {
        log::warn!("{}: optimal cost increased at {rises} step(s) after k = 5", case.name);
    }
}
