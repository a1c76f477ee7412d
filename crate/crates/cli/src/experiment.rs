//! Turns a resolved config into a stabilized model, MPC settings and GP bank,
//! and runs the closed loop.

use std::time::{Duration, Instant};

use lpvgp::model::{unbalanced_disk, ScheduleComponent};
use lpvgp::mpc::run_loop;
use lpvgp::{
    BankSettings, ContinuousModel, DiskParameters, ErrorBank, FitOptions, HyperBounds, InputConstraint,
    Interval, KernelVariant, LpvModel, MpcConfig, PhatUpdateSource, Reference, SchedulingMap,
    StabilizedModel, TrajectoryF64,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{
    ExperimentConfig, InputConstraintKind, KernelKind, ModelKind, PhatUpdateKind, ScheduleEntry, TimeDomain,
};
use crate::CliError;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
        return Err(config_err(format!("`{name}` must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), n_cols, |i, j| rows[i][j]))
}

fn intervals(name: &str, bounds: &[[f64; 2]]) -> Result<Vec<Interval<f64>>, CliError> {
    bounds
        .iter()
        .map(|[lo, hi]| {
            if lo < hi {
                Ok(Interval::new(*lo, *hi))
            } else {
                Err(config_err(format!("`{name}` needs lower < upper, got [{lo}, {hi}]")))
            }
        })
        .collect()
}

/// Everything a run needs, validated.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: StabilizedModel<f64>,
    pub mpc: MpcConfig<f64>,
    pub bank: BankSettings,
    pub x0: DVector<f64>,
    pub reference: Reference<f64>,
    pub steps: usize,
    pub comparison: bool,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub error_correction: bool,
    pub trajectory: TrajectoryF64,
    pub elapsed: Duration,
}

impl Experiment {
    /// Config errors here map to exit code 1; nothing has been written yet.
    pub fn build(config: &ExperimentConfig) -> Result<Self, CliError> {
        let config = config.resolved()?;
        let lpv = build_model(&config)?;
        let n_x = lpv.n_x();

        let q = matrix("mpc.q", config.mpc.q.as_ref().expect("resolved"))?;
        let r = matrix("mpc.r", config.mpc.r.as_ref().expect("resolved"))?;
        let p_nom = DVector::from_vec(config.model.p_nominal.clone().expect("resolved"));
        if p_nom.len() != lpv.n_p() {
            return Err(config_err(format!("p_nominal has {} entries, model has {} scheduling components", p_nom.len(), lpv.n_p())));
        }
        let model = StabilizedModel::synthesize_lqr(&lpv, &q, &r, &p_nom).map_err(config_err)?;

        let x_bounds = intervals("mpc.x_bounds", config.mpc.x_bounds.as_ref().expect("resolved"))?;
        let u_bounds = intervals("mpc.u_bounds", config.mpc.u_bounds.as_ref().expect("resolved"))?;
        let mut mpc = MpcConfig::new(&model, config.mpc.horizon, q, r, x_bounds, u_bounds);
        mpc.zscore = config.run.zscore;
        mpc.error_correction = config.run.error_correction;
        mpc.inner_iterations = config.mpc.inner_iterations;
        mpc.input_constraint = match config.mpc.input_constraint {
            InputConstraintKind::Total => InputConstraint::Total,
            InputConstraintKind::MpcOnly => InputConstraint::MpcOnly,
        };
        mpc.phat_update = match config.mpc.phat_update {
            PhatUpdateKind::PreviousTruth => PhatUpdateSource::PreviousTruth,
            PhatUpdateKind::QpStates => PhatUpdateSource::QpStates,
        };
        mpc.qp.max_iter = config.mpc.qp_max_iter;
        mpc.validate(&model).map_err(config_err)?;

        if let Some(x) = model.base.check_scheduling_bounds(&mpc.x_bounds, 201).map_err(config_err)? {
            log::warn!("rho(x) leaves the scheduling bounds inside the state box, e.g. at {:?}", x.as_slice());
        }

        let g = &config.gp;
        let bounds = HyperBounds {
            log_sigma2: (g.log_signal_variance[0], g.log_signal_variance[1]),
            log_lengthscale: (g.log_lengthscale[0], g.log_lengthscale[1]),
            log_noise2: (g.log_noise_variance[0], g.log_noise_variance[1]),
            log_periodic_lengthscale: (g.log_periodic_lengthscale[0], g.log_periodic_lengthscale[1]),
        };
        for (name, (lo, hi)) in [
            ("log_signal_variance", bounds.log_sigma2),
            ("log_lengthscale", bounds.log_lengthscale),
            ("log_noise_variance", bounds.log_noise2),
            ("log_periodic_lengthscale", bounds.log_periodic_lengthscale),
        ] {
            if !(lo <= hi) {
                return Err(config_err(format!("gp.{name} needs lower <= upper")));
            }
        }
        if g.window < 2 || g.starts == 0 || g.refit_every == 0 || !(g.period > 0.0) || !(g.prior_std >= 0.0) {
            return Err(config_err("gp: window >= 2, starts >= 1, refit_every >= 1, period > 0, prior_std >= 0"));
        }
        let bank = BankSettings {
            window: g.window,
            fit: FitOptions {
                variant: match g.kernel {
                    KernelKind::SquaredExponential => KernelVariant::SquaredExponential,
                    KernelKind::SePeriodic => KernelVariant::SePeriodic,
                },
                bounds,
                starts: g.starts,
                iterations: g.iterations,
                seed: config.run.seed,
                period: g.period,
            },
            refit_every: g.refit_every,
            standardize_inputs: g.standardize_inputs,
            prior_std: g.prior_std,
            parallel: true,
        };

        let vec_of = |name: &str, v: &[f64]| -> Result<DVector<f64>, CliError> {
            if v.len() != n_x {
                return Err(config_err(format!("`{name}` has {} entries, expected {n_x}", v.len())));
            }
            Ok(DVector::from_column_slice(v))
        };
        let x0 = vec_of("run.x0", config.run.x0.as_ref().expect("resolved"))?;
        if x0.iter().zip(&mpc.x_bounds).any(|(v, iv)| !iv.contains(*v)) {
            return Err(config_err("run.x0 lies outside mpc.x_bounds"));
        }
        let reference = Reference::Constant(vec_of("run.x_ref", config.run.x_ref.as_ref().expect("resolved"))?);
        let comparison = config.run.comparison.expect("resolved");

        Ok(Self { steps: config.run.steps, config, model, mpc, bank, x0, reference, comparison })
    }

    /// `(name, error_correction)` pairs this experiment runs.
    pub fn cases(&self) -> Vec<(&'static str, bool)> {
        if self.comparison {
            vec![("corrected", true), ("uncorrected", false)]
        } else {
            vec![("", self.mpc.error_correction)]
        }
    }

    pub fn run_case(&self, name: &'static str, error_correction: bool) -> Result<CaseResult, CliError> {
        let mut cfg = self.mpc.clone();
        cfg.error_correction = error_correction;
        let mut bank = ErrorBank::new(cfg.horizon, self.model.base.n_x(), self.bank.clone(), cfg.zscore)?;
        let start = Instant::now();
        let trajectory = run_loop(&self.model, &cfg, Some(&mut bank), &self.x0, &self.reference, self.steps)?;
        Ok(CaseResult { name, error_correction, trajectory, elapsed: start.elapsed() })
    }

    /// Runs every case; comparison cases run on separate threads.
    pub fn run_all(&self) -> Result<Vec<CaseResult>, CliError> {
        let cases = self.cases();
        std::thread::scope(|s| {
            let handles: Vec<_> = cases
                .iter()
                .map(|(name, ec)| s.spawn(move || self.run_case(name, *ec)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("case thread panicked")).collect()
        })
    }
}

fn build_model(config: &ExperimentConfig) -> Result<LpvModel<f64>, CliError> {
    let m = &config.model;
    if !(m.ts > 0.0) {
        return Err(config_err("model.ts must be positive"));
    }
    match m.kind {
        ModelKind::UnbalancedDisk => {
            let d = &m.disk;
            let params = DiskParameters {
                inertia: d.inertia,
                mass: d.mass,
                gravity: d.gravity,
                length: d.length,
                tau: d.tau,
                motor_gain: d.motor_gain,
            };
            if [params.inertia, params.tau].iter().any(|v| !(*v > 0.0)) {
                return Err(config_err("disk inertia and tau must be positive"));
            }
            unbalanced_disk::<f64>(&params).discretize_euler(m.ts).map_err(config_err)
        }
        ModelKind::Explicit => {
            let a0 = matrix("model.a0", m.a0.as_ref().expect("resolved"))?;
            let a_l = m
                .a
                .as_ref()
                .expect("resolved")
                .iter()
                .enumerate()
                .map(|(l, a)| matrix(&format!("model.a[{l}]"), a))
                .collect::<Result<Vec<_>, _>>()?;
            let b = matrix("model.b", m.b.as_ref().expect("resolved"))?;
            let components = m
                .schedule
                .as_ref()
                .expect("resolved")
                .iter()
                .map(|s| match s {
                    ScheduleEntry::Sinc { state } => ScheduleComponent::Sinc { state: *state },
                    ScheduleEntry::State { state } => ScheduleComponent::State { state: *state },
                })
                .collect::<Vec<_>>();
            let n_x = a0.nrows();
            for s in m.schedule.as_ref().expect("resolved") {
                let (ScheduleEntry::Sinc { state } | ScheduleEntry::State { state }) = s;
                if *state >= n_x {
                    return Err(config_err(format!("schedule refers to state {state}, model has {n_x}")));
                }
            }
            let p_bounds = intervals("model.p_bounds", m.p_bounds.as_ref().expect("resolved"))?;
            let rho = SchedulingMap::new(components);
            match m.time {
                TimeDomain::Discrete => LpvModel::new(a0, a_l, b, rho, p_bounds, m.ts).map_err(config_err),
                TimeDomain::Continuous => ContinuousModel::new(a0, a_l, b, rho, p_bounds)
                    .and_then(|cm| cm.discretize_euler(m.ts))
                    .map_err(config_err),
            }
        }
    }
}
