//! Experiment configuration, parsed strictly from TOML.
//!
//! Every section is optional. Fields left out take the unbalanced-disk values,
//! so an empty file runs the disk benchmark. [`ExperimentConfig::resolved`]
//! writes those defaults back into the struct so the echoed config in
//! `meta.json` is fully explicit.

use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub mpc: MpcSection,
    pub gp: GpSection,
    pub run: RunSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    UnbalancedDisk,
    Explicit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDomain {
    /// Matrices are continuous-time and get forward-Euler discretized with `ts`.
    #[default]
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ScheduleEntry {
    Sinc { state: usize },
    State { state: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiskSection {
    pub inertia: f64,
    pub mass: f64,
    pub gravity: f64,
    pub length: f64,
    pub tau: f64,
    pub motor_gain: f64,
}

impl Default for DiskSection {
    fn default() -> Self {
        let p = lpvgp::DiskParameters::default();
        Self {
            inertia: p.inertia,
            mass: p.mass,
            gravity: p.gravity,
            length: p.length,
            tau: p.tau,
            motor_gain: p.motor_gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub ts: f64,
    pub time: TimeDomain,
    pub disk: DiskSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a0: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<ScheduleEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_bounds: Option<Vec<[f64; 2]>>,
    /// Scheduling point for the LQR synthesis; defaults to 1 for the disk and
    /// to the midpoint of `p_bounds` otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_nominal: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::UnbalancedDisk,
            ts: 0.01,
            time: TimeDomain::Continuous,
            disk: DiskSection::default(),
            a0: None,
            a: None,
            b: None,
            schedule: None,
            p_bounds: None,
            p_nominal: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputConstraintKind {
    #[default]
    Total,
    MpcOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhatUpdateKind {
    #[default]
    PreviousTruth,
    QpStates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_bounds: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_bounds: Option<Vec<[f64; 2]>>,
    pub input_constraint: InputConstraintKind,
    pub phat_update: PhatUpdateKind,
    pub inner_iterations: usize,
    pub qp_max_iter: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            q: None,
            r: None,
            x_bounds: None,
            u_bounds: None,
            input_constraint: InputConstraintKind::Total,
            phat_update: PhatUpdateKind::PreviousTruth,
            inner_iterations: 1,
            qp_max_iter: lpvgp::QpSettings::default().max_iter,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    SquaredExponential,
    SePeriodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub kernel: KernelKind,
    /// Fixed period of the periodic factor.
    pub period: f64,
    pub window: usize,
    pub refit_every: usize,
    pub starts: usize,
    pub iterations: usize,
    pub standardize_inputs: bool,
    pub prior_std: f64,
    pub log_signal_variance: [f64; 2],
    pub log_lengthscale: [f64; 2],
    pub log_noise_variance: [f64; 2],
    pub log_periodic_lengthscale: [f64; 2],
}

impl Default for GpSection {
    fn default() -> Self {
        let fit = lpvgp::FitOptions::default();
        let bank = lpvgp::BankSettings::default();
        let b = fit.bounds;
        Self {
            kernel: KernelKind::SquaredExponential,
            period: fit.period,
            window: bank.window,
            refit_every: bank.refit_every,
            starts: fit.starts,
            iterations: fit.iterations,
            standardize_inputs: bank.standardize_inputs,
            prior_std: bank.prior_std,
            log_signal_variance: [b.log_sigma2.0, b.log_sigma2.1],
            log_lengthscale: [b.log_lengthscale.0, b.log_lengthscale.1],
            log_noise_variance: [b.log_noise2.0, b.log_noise2.1],
            log_periodic_lengthscale: [b.log_periodic_lengthscale.0, b.log_periodic_lengthscale.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_ref: Option<Vec<f64>>,
    pub error_correction: bool,
    /// Run with and without error correction into `corrected/` and `uncorrected/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<bool>,
    pub zscore: f64,
    /// Seeds the GP multi-start initialization.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            steps: 100,
            x0: None,
            x_ref: None,
            error_correction: true,
            comparison: None,
            zscore: 2.576,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    /// Step whose horizon is drawn in the phase plot.
    pub snapshot_k: usize,
    /// First step counted in coverage.json.
    pub coverage_from_k: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Json, Format::Svg],
            snapshot_k: 15,
            coverage_from_k: 5,
        }
    }
}

impl OutputSection {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    (0..v.len())
        .map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect())
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills every defaulted field with its concrete value.
    pub fn resolved(&self) -> Result<Self, CliError> {
        let mut c = self.clone();
        let disk = c.model.kind == ModelKind::UnbalancedDisk;
        if disk {
            let explicit_only = [
                c.model.a0.is_some(),
                c.model.a.is_some(),
                c.model.b.is_some(),
                c.model.schedule.is_some(),
                c.model.p_bounds.is_some(),
            ];
            if explicit_only.iter().any(|v| *v) {
                return Err(CliError::Config(
                    "a0/a/b/schedule/p_bounds only apply to kind = \"explicit\"".into(),
                ));
            }
            c.model.p_nominal.get_or_insert_with(|| vec![1.0]);
            c.mpc.q.get_or_insert_with(|| diag(&[8.0, 0.1]));
            c.mpc.r.get_or_insert_with(|| diag(&[0.5]));
            c.mpc.x_bounds.get_or_insert_with(|| vec![[-2.0 * PI, 2.0 * PI], [-10.0 * PI, 10.0 * PI]]);
            c.mpc.u_bounds.get_or_insert_with(|| vec![[-10.0, 10.0]]);
            c.run.x0.get_or_insert_with(|| vec![-2.0 * PI, 0.0]);
            c.run.x_ref.get_or_insert_with(|| vec![0.0, 0.0]);
            c.run.comparison.get_or_insert(true);
        } else {
            let missing = |name: &str| CliError::Config(format!("explicit model needs `{name}`"));
            let a0 = c.model.a0.as_ref().ok_or_else(|| missing("model.a0"))?;
            let n_x = a0.len();
            if c.model.b.is_none() {
                return Err(missing("model.b"));
            }
            let bounds = c.model.p_bounds.clone().unwrap_or_default();
            c.model.a.get_or_insert_with(Vec::new);
            c.model.schedule.get_or_insert_with(Vec::new);
            c.model.p_bounds.get_or_insert_with(Vec::new);
            c.model
                .p_nominal
                .get_or_insert_with(|| bounds.iter().map(|b| 0.5 * (b[0] + b[1])).collect());
            let n_u = c.model.b.as_ref().and_then(|b| b.first()).map_or(0, |r| r.len());
            c.mpc.q.get_or_insert_with(|| diag(&vec![1.0; n_x]));
            c.mpc.r.get_or_insert_with(|| diag(&vec![1.0; n_u]));
            if c.mpc.x_bounds.is_none() {
                return Err(missing("mpc.x_bounds"));
            }
            if c.mpc.u_bounds.is_none() {
                return Err(missing("mpc.u_bounds"));
            }
            if c.run.x0.is_none() {
                return Err(missing("run.x0"));
            }
            c.run.x_ref.get_or_insert_with(|| vec![0.0; n_x]);
            c.run.comparison.get_or_insert(false);
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_disk_benchmark() {
        let c = ExperimentConfig::from_toml("").unwrap().resolved().unwrap();
        assert_eq!(c.model.kind, ModelKind::UnbalancedDisk);
        assert_eq!(c.mpc.horizon, 10);
        assert_eq!(c.mpc.q, Some(vec![vec![8.0, 0.0], vec![0.0, 0.1]]));
        assert_eq!(c.mpc.r, Some(vec![vec![0.5]]));
        assert_eq!(c.model.ts, 0.01);
        assert_eq!(c.run.x0, Some(vec![-2.0 * PI, 0.0]));
        assert_eq!(c.run.comparison, Some(true));
        assert_eq!(c.run.zscore, 2.576);
        assert_eq!(c.gp.window, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[run]\nstepz = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[nope]\n").is_err());
        assert!(ExperimentConfig::from_toml("[model.disk]\nmas = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[gp]\nkernel = \"matern\"\n").is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let c = ExperimentConfig::from_toml("[run]\nsteps = 7\nseed = 3\n").unwrap().resolved().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolved().unwrap(), c);
    }

    #[test]
    fn explicit_model_requires_matrices() {
        let err = ExperimentConfig::from_toml("[model]\nkind = \"explicit\"\n").unwrap().resolved();
        assert!(matches!(err, Err(CliError::Config(_))));
        let disk_with_matrix = ExperimentConfig::from_toml("[model]\na0 = [[1.0]]\n").unwrap().resolved();
        assert!(disk_with_matrix.is_err());
    }

    #[test]
    fn explicit_schedule_parses() {
        let text = r#"
[model]
kind = "explicit"
time = "discrete"
a0 = [[1.0, 0.1], [0.0, 1.0]]
a = [[[0.0, 0.0], [0.1, 0.0]]]
b = [[0.0], [0.1]]
schedule = [{ kind = "sinc", state = 0 }]
p_bounds = [[-0.3, 1.0]]

[mpc]
x_bounds = [[-5.0, 5.0], [-5.0, 5.0]]
u_bounds = [[-1.0, 1.0]]

[run]
x0 = [1.0, 0.0]
"#;
        let c = ExperimentConfig::from_toml(text).unwrap().resolved().unwrap();
        assert_eq!(c.model.schedule, Some(vec![ScheduleEntry::Sinc { state: 0 }]));
        assert_eq!(c.model.p_nominal, Some(vec![0.35]));
        assert_eq!(c.run.comparison, Some(false));
    }
}
