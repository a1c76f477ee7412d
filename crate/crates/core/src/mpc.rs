//! Error-corrected LPV-MPC: condensed QP over the stacked input sequence and
//! the receding-horizon loop.
//!
//! Predictions use the stabilized model `x_hat_{i+1} = A_c(p_hat_i) x_hat_i +
//! B u_i`; the corrected states are `x_bar_i = x_hat_i + e_hat_i`. The plant is
//! the closed loop `x_{k+1} = A_c(rho(x_k)) x_k + B u_k`, so the physical
//! input is `K x_k + u_k`.

use nalgebra::{DMatrix, DVector};

use crate::errorbank::{ErrorBank, ErrorPrediction};
use crate::model::Interval;
use crate::qp::{self, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::stabilizer::StabilizedModel;
use crate::{linalg, Error, Real, Result};

/// Which input the `u_bounds` box constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputConstraint {
    /// Physical input `K x_bar_i + u_i`.
    Total,
    /// MPC correction `u_i` only.
    MpcOnly,
}

/// Source of the scheduling sequence handed to the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhatUpdateSource {
    /// `p_hat_{i|k+1} = rho(x_{i+1|k})` from the true-model rollout.
    PreviousTruth,
    /// `p_hat_{i|k+1} = rho(x_bar_{i+1|k})` from the QP's corrected states.
    QpStates,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reference<T> {
    Constant(DVector<T>),
    /// Indexed by absolute time; the last entry is held past the end.
    Trajectory(Vec<DVector<T>>),
}

impl<T: Real> Reference<T> {
    pub fn at(&self, k: usize) -> DVector<T> {
        match self {
            Reference::Constant(r) => r.clone(),
            Reference::Trajectory(rs) => rs[k.min(rs.len() - 1)].clone(),
        }
    }

    /// `r_k, ..., r_{k+n}`
    pub fn window(&self, k: usize, n: usize) -> Vec<DVector<T>> {
        (k..=k + n).map(|j| self.at(j)).collect()
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Reference::Constant(r) => Some(r.len()),
            Reference::Trajectory(rs) => rs.first().map(|r| r.len()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MpcConfig<T> {
    pub horizon: usize,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    /// Terminal weight, normally the stabilizer's Lyapunov solution.
    pub p: DMatrix<T>,
    pub x_bounds: Vec<Interval<T>>,
    pub u_bounds: Vec<Interval<T>>,
    pub zscore: T,
    pub error_correction: bool,
    pub phat_update: PhatUpdateSource,
    /// QP solves per step; between solves the scheduling sequence is
    /// refreshed from the latest solution at the same time index.
    pub inner_iterations: usize,
    pub input_constraint: InputConstraint,
    pub qp: QpSettings,
}

impl<T: Real> MpcConfig<T> {
    /// Defaults for everything but the weights and bounds; `p` is taken from `sm`.
    pub fn new(
        sm: &StabilizedModel<T>,
        horizon: usize,
        q: DMatrix<T>,
        r: DMatrix<T>,
        x_bounds: Vec<Interval<T>>,
        u_bounds: Vec<Interval<T>>,
    ) -> Self {
        Self {
            horizon,
            q,
            r,
            p: sm.p.clone(),
            x_bounds,
            u_bounds,
            zscore: T::lit(2.576),
            error_correction: true,
            phat_update: PhatUpdateSource::PreviousTruth,
            inner_iterations: 1,
            input_constraint: InputConstraint::Total,
            qp: QpSettings::default(),
        }
    }

    pub fn validate(&self, sm: &StabilizedModel<T>) -> Result<()> {
        let n = sm.base.n_x();
        let m = sm.base.n_u();
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if self.inner_iterations == 0 {
            return Err(Error::InvalidArgument("inner_iterations must be at least 1".into()));
        }
        for (name, w, d) in [("Q", &self.q, n), ("R", &self.r, m), ("P", &self.p, n)] {
            if w.shape() != (d, d) {
                return Err(Error::Dimension { context: name, expected: d, got: w.nrows() });
            }
        }
        let tol = T::lit(-1e-12);
        if linalg::min_sym_eigenvalue(&self.q) < tol || linalg::min_sym_eigenvalue(&self.p) < tol {
            return Err(Error::InvalidArgument("Q and P must be positive semidefinite".into()));
        }
        if !(linalg::min_sym_eigenvalue(&self.r) > T::zero()) {
            return Err(Error::InvalidArgument("R must be positive definite".into()));
        }
        if self.x_bounds.len() != n {
            return Err(Error::Dimension { context: "state bounds", expected: n, got: self.x_bounds.len() });
        }
        if self.u_bounds.len() != m {
            return Err(Error::Dimension { context: "input bounds", expected: m, got: self.u_bounds.len() });
        }
        if self.x_bounds.iter().chain(&self.u_bounds).any(|iv| !(iv.lo < iv.hi)) {
            return Err(Error::InvalidArgument("bounds need lower < upper".into()));
        }
        if !(self.zscore >= T::zero()) {
            return Err(Error::InvalidArgument("zscore must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Shrinks each state box by `z * sigma_{i,n}` for horizon rows `i = 1..=N`
/// (`e_std` is `N x n_x`). Inverted intervals collapse to their midpoint and
/// set the returned flag.
pub fn tighten<T: Real>(x_bounds: &[Interval<T>], e_std: &DMatrix<T>, zscore: T) -> (Vec<Vec<Interval<T>>>, bool) {
    let mut inverted = false;
    let rows = (0..e_std.nrows())
        .map(|i| {
            x_bounds
                .iter()
                .enumerate()
                .map(|(n, iv)| {
                    let shrink = zscore * e_std[(i, n)];
                    let (lo, hi) = (iv.lo + shrink, iv.hi - shrink);
                    if lo > hi {
                        inverted = true;
                        let mid = iv.midpoint();
                        Interval::new(mid, mid)
                    } else {
                        Interval::new(lo, hi)
                    }
                })
                .collect()
        })
        .collect();
    (rows, inverted)
}

/// The condensed QP together with the prediction matrices it was built from.
#[derive(Clone, Debug)]
pub struct Condensed<T> {
    pub qp: QpProblem<T>,
    /// Stacked `x_hat_{1..N}` = `s_x x_k + s_u u`.
    pub s_x: DMatrix<T>,
    pub s_u: DMatrix<T>,
    /// `p_hat_0..p_hat_{N-1}` after clamping.
    pub p_hat: Vec<DVector<T>>,
    pub tightened: Vec<Vec<Interval<T>>>,
    pub tightening_inverted: bool,
}

pub fn condense<T: Real>(
    sm: &StabilizedModel<T>,
    cfg: &MpcConfig<T>,
    p_hat: &[DVector<T>],
    x_k: &DVector<T>,
    x_ref: &[DVector<T>],
    e_hat: &ErrorPrediction<T>,
) -> Result<Condensed<T>> {
    let n = sm.base.n_x();
    let m = sm.base.n_u();
    let big_n = cfg.horizon;
    if p_hat.len() != big_n {
        return Err(Error::Dimension { context: "scheduling sequence", expected: big_n, got: p_hat.len() });
    }
    if x_k.len() != n {
        return Err(Error::Dimension { context: "state", expected: n, got: x_k.len() });
    }
    if x_ref.len() != big_n + 1 || x_ref.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension { context: "reference window", expected: big_n + 1, got: x_ref.len() });
    }
    if e_hat.mean.shape() != (big_n, n) || e_hat.std.shape() != (big_n, n) {
        return Err(Error::Dimension { context: "error prediction", expected: big_n, got: e_hat.mean.nrows() });
    }

    let mut p_used = p_hat.to_vec();
    for (i, p) in p_used.iter_mut().enumerate() {
        if sm.base.clamp_schedule(p) {
            log::warn!("p_hat_{i} outside scheduling bounds, clamped");
        }
    }

    // s_x block i-1 = A_c(p_{i-1}) ... A_c(p_0); s_u block row i-1 maps u to x_hat_i
    let mut s_x = DMatrix::zeros(big_n * n, n);
    let mut s_u = DMatrix::zeros(big_n * n, big_n * m);
    let mut phi = DMatrix::identity(n, n);
    let mut gamma = DMatrix::zeros(n, big_n * m);
    for (i, p) in p_used.iter().enumerate() {
        let ac = sm.closed_a(p)?;
        phi = &ac * phi;
        gamma = &ac * gamma;
        gamma.view_mut((0, i * m), (n, m)).copy_from(&sm.base.b);
        s_x.view_mut((i * n, 0), (n, n)).copy_from(&phi);
        s_u.view_mut((i * n, 0), (n, big_n * m)).copy_from(&gamma);
    }

    let mut offset = DVector::zeros(big_n * n);
    let mut q_bar = DMatrix::zeros(big_n * n, big_n * n);
    for i in 0..big_n {
        let e = e_hat.mean.row(i).transpose();
        offset.rows_mut(i * n, n).copy_from(&(e - &x_ref[i + 1]));
        let w = if i + 1 == big_n { &cfg.p } else { &cfg.q };
        q_bar.view_mut((i * n, i * n), (n, n)).copy_from(w);
    }
    // x_bar - r = s_u u + d
    let d = &s_x * x_k + &offset;
    let mut r_bar = DMatrix::zeros(big_n * m, big_n * m);
    for i in 0..big_n {
        r_bar.view_mut((i * m, i * m), (m, m)).copy_from(&cfg.r);
    }
    let two = T::lit(2.0);
    let qs = &q_bar * &s_u;
    let hessian = (s_u.transpose() * &qs + r_bar) * two;
    let linear = (qs.transpose() * &d) * two;

    let (tightened, tightening_inverted) = tighten(&cfg.x_bounds, &e_hat.std, cfg.zscore);
    let mut rows: Vec<DVector<T>> = Vec::new();
    let mut rhs: Vec<T> = Vec::new();
    let mut push_box = |row: DVector<T>, base: T, iv: &Interval<T>| {
        // lo <= row.u + base <= hi
        if iv.hi.is_finite() {
            rows.push(row.clone());
            rhs.push(iv.hi - base);
        }
        if iv.lo.is_finite() {
            rows.push(-row);
            rhs.push(base - iv.lo);
        }
    };
    // x_bar_i without the u part: s_x x_k + e_hat
    let xbar_free = |i: usize| -> DVector<T> {
        s_x.rows(i * n, n) * x_k + e_hat.mean.row(i).transpose()
    };
    for i in 0..big_n {
        let free = xbar_free(i);
        for c in 0..n {
            push_box(s_u.row(i * n + c).transpose(), free[c], &tightened[i][c]);
        }
    }
    for i in 0..big_n {
        for c in 0..m {
            let mut row = DVector::zeros(big_n * m);
            row[i * m + c] = T::one();
            let mut base = T::zero();
            if cfg.input_constraint == InputConstraint::Total {
                let k_row = sm.k.row(c);
                if i == 0 {
                    base = (k_row * x_k)[0];
                } else {
                    row += (k_row * s_u.rows((i - 1) * n, n)).transpose();
                    base = (k_row * xbar_free(i - 1))[0];
                }
            }
            push_box(row, base, &cfg.u_bounds[c]);
        }
    }
    let g = DMatrix::from_fn(rows.len(), big_n * m, |r, c| rows[r][c]);
    let qp = QpProblem::new(hessian, linear, g, DVector::from_vec(rhs))?;
    Ok(Condensed { qp, s_x, s_u, p_hat: p_used, tightened, tightening_inverted })
}

/// `A_c(rho(x)) x + B u`, the closed-loop plant.
pub fn plant_step<T: Real>(sm: &StabilizedModel<T>, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
    let mut p = sm.base.schedule(x);
    sm.base.clamp_schedule(&mut p);
    let next = sm.closed_a(&p)? * x + &sm.base.b * u;
    if !linalg::is_finite_vec(&next) {
        return Err(Error::NonFinite("plant state"));
    }
    Ok(next)
}

/// Scheduling-sequence prediction `A_c(p) x + B u`.
fn predict_step<T: Real>(sm: &StabilizedModel<T>, p: &DVector<T>, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
    Ok(sm.closed_a(p)? * x + &sm.base.b * u)
}

#[derive(Clone, Debug)]
pub struct MpcStep<T> {
    pub u_star: Vec<DVector<T>>,
    /// `x_hat_0..x_hat_N`
    pub x_hat: Vec<DVector<T>>,
    /// `x_bar_0..x_bar_N`
    pub x_bar: Vec<DVector<T>>,
    pub p_hat: Vec<DVector<T>>,
    pub qp_diag: QpSolution<T>,
    /// `sum_i |x_bar_i - r_i|_Q^2 + |u_i|_R^2 + |x_bar_N - r_N|_P^2`
    pub cost: T,
    pub tightening_inverted: bool,
}

pub fn solve_step<T: Real>(
    sm: &StabilizedModel<T>,
    cfg: &MpcConfig<T>,
    p_hat: &[DVector<T>],
    x_k: &DVector<T>,
    x_ref: &[DVector<T>],
    e_hat: &ErrorPrediction<T>,
) -> Result<MpcStep<T>> {
    let cond = condense(sm, cfg, p_hat, x_k, x_ref, e_hat)?;
    let sol = qp::solve(&cond.qp, &cfg.qp);
    let m = sm.base.n_u();
    let big_n = cfg.horizon;
    let u_star: Vec<DVector<T>> = (0..big_n).map(|i| sol.z.rows(i * m, m).into_owned()).collect();

    let mut x_hat = Vec::with_capacity(big_n + 1);
    let mut x_bar = Vec::with_capacity(big_n + 1);
    x_hat.push(x_k.clone());
    x_bar.push(x_k.clone());
    for i in 0..big_n {
        let next = predict_step(sm, &cond.p_hat[i], &x_hat[i], &u_star[i])?;
        x_bar.push(&next + e_hat.mean.row(i).transpose());
        x_hat.push(next);
    }

    let quad = |v: &DVector<T>, w: &DMatrix<T>| (v.transpose() * w * v)[0];
    let mut cost = T::zero();
    for i in 0..big_n {
        cost += quad(&(&x_bar[i] - &x_ref[i]), &cfg.q) + quad(&u_star[i], &cfg.r);
    }
    cost += quad(&(&x_bar[big_n] - &x_ref[big_n]), &cfg.p);

    Ok(MpcStep {
        u_star,
        x_hat,
        x_bar,
        p_hat: cond.p_hat,
        qp_diag: sol,
        cost,
        tightening_inverted: cond.tightening_inverted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpDiagnostics {
    pub status: QpStatus,
    pub primal: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    pub iterations: usize,
}

impl<T: Real> From<&QpSolution<T>> for QpDiagnostics {
    fn from(s: &QpSolution<T>) -> Self {
        Self {
            status: s.status,
            primal: s.kkt_primal.to_f64_lossy(),
            stationarity: s.kkt_stationarity.to_f64_lossy(),
            complementarity: s.kkt_complementarity.to_f64_lossy(),
            iterations: s.iterations,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord<T> {
    pub k: usize,
    pub x: DVector<T>,
    pub u_mpc: DVector<T>,
    /// `K x_k + u_mpc`
    pub u_applied: DVector<T>,
    pub p: DVector<T>,
    pub cost: T,
    /// `p_hat_0..p_hat_{N-1}` used by the (last) QP of this step.
    pub p_hat: Vec<DVector<T>>,
    /// True-model rollout `x_{0|k}..x_{N+1|k}`.
    pub x_true: Vec<DVector<T>>,
    /// Scheduled prediction `x_hat_{0|k}..x_hat_{N+1|k}`.
    pub x_hat: Vec<DVector<T>>,
    /// `x_bar_{0|k}..x_bar_{N|k}`
    pub x_bar: Vec<DVector<T>>,
    /// `e_{0|k}..e_{N+1|k}`
    pub errors: Vec<DVector<T>>,
    pub e_hat: ErrorPrediction<T>,
    pub qp: QpDiagnostics,
    pub tightening_inverted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    QpInfeasible { k: usize },
}

#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    /// `x_0..x_K`
    pub states: Vec<DVector<T>>,
    pub records: Vec<StepRecord<T>>,
    pub status: RunStatus,
}

/// Runs the receding-horizon loop for `steps` steps from `x0`.
///
/// `bank` is required when `cfg.error_correction` is on and ignored otherwise.
pub fn run_loop<T: Real>(
    sm: &StabilizedModel<T>,
    cfg: &MpcConfig<T>,
    mut bank: Option<&mut ErrorBank<T>>,
    x0: &DVector<T>,
    reference: &Reference<T>,
    steps: usize,
) -> Result<Trajectory<T>> {
    cfg.validate(sm)?;
    let n = sm.base.n_x();
    let big_n = cfg.horizon;
    if x0.len() != n {
        return Err(Error::Dimension { context: "initial state", expected: n, got: x0.len() });
    }
    if reference.dim() != Some(n) {
        return Err(Error::Dimension { context: "reference", expected: n, got: reference.dim().unwrap_or(0) });
    }
    if x0.iter().zip(&cfg.x_bounds).any(|(v, iv)| !iv.contains(*v)) {
        return Err(Error::InvalidArgument("initial state outside state bounds".into()));
    }
    if cfg.error_correction {
        match bank.as_deref() {
            None => return Err(Error::InvalidArgument("error correction needs an error bank".into())),
            Some(b) if b.horizon() != big_n || b.n_x() != n => {
                return Err(Error::Dimension { context: "error bank horizon", expected: big_n, got: b.horizon() });
            }
            _ => {}
        }
    }

    let mut x = x0.clone();
    let mut p_hat = vec![sm.base.schedule(&x); big_n];
    let mut states = vec![x.clone()];
    let mut records = Vec::with_capacity(steps);

    for k in 0..steps {
        let e_hat = match bank.as_deref_mut() {
            Some(b) if cfg.error_correction => b.predict_errors(k),
            _ => ErrorPrediction::zeros(big_n, n),
        };
        let x_ref = reference.window(k, big_n);

        let mut p_iter = p_hat.clone();
        let mut step = solve_step(sm, cfg, &p_iter, &x, &x_ref, &e_hat)?;
        for _ in 1..cfg.inner_iterations {
            if step.qp_diag.status == QpStatus::Infeasible {
                break;
            }
            p_iter = refreshed_schedule(sm, cfg, &step, &x)?;
            step = solve_step(sm, cfg, &p_iter, &x, &x_ref, &e_hat)?;
        }
        match step.qp_diag.status {
            QpStatus::Infeasible => {
                log::error!("QP infeasible at k = {k}");
                return Ok(Trajectory { states, records, status: RunStatus::QpInfeasible { k } });
            }
            QpStatus::MaxIter => log::warn!("QP at k = {k} not certified optimal"),
            QpStatus::Optimal => {}
        }
        if step.tightening_inverted {
            log::warn!("tightened state box inverted at k = {k}");
        }

        let u0 = step.u_star[0].clone();
        let u_total = &sm.k * &x + &u0;

        // truth and prediction over N+1 steps, both holding u and p_hat at the end
        let mut x_true = vec![x.clone()];
        let mut x_hat = step.x_hat.clone();
        for i in 0..=big_n {
            let u_i = &step.u_star[i.min(big_n - 1)];
            x_true.push(plant_step(sm, &x_true[i], u_i)?);
        }
        x_hat.push(predict_step(sm, &step.p_hat[big_n - 1], &x_hat[big_n], &step.u_star[big_n - 1])?);
        let errors: Vec<DVector<T>> = x_true.iter().zip(&x_hat).map(|(t, h)| t - h).collect();

        if let Some(b) = bank.as_deref_mut() {
            if cfg.error_correction {
                b.record_errors(k, &x_true[1..], &x_hat[1..])?;
            }
        }

        let x_next = x_true[1].clone();
        let next_p: Vec<DVector<T>> = match cfg.phat_update {
            PhatUpdateSource::PreviousTruth => (1..=big_n).map(|i| sm.base.schedule(&x_true[i])).collect(),
            PhatUpdateSource::QpStates => (1..=big_n).map(|i| sm.base.schedule(&step.x_bar[i])).collect(),
        };

        records.push(StepRecord {
            k,
            p: sm.base.schedule(&x),
            x: x.clone(),
            u_mpc: u0,
            u_applied: u_total,
            cost: step.cost,
            p_hat: step.p_hat,
            x_true,
            x_hat,
            x_bar: step.x_bar,
            errors,
            e_hat,
            qp: QpDiagnostics::from(&step.qp_diag),
            tightening_inverted: step.tightening_inverted,
        });
        x = x_next;
        p_hat = next_p;
        states.push(x.clone());
    }
    Ok(Trajectory { states, records, status: RunStatus::Completed })
}

/// Same-time refresh between inner iterations: `p_hat_i = rho(x_i)` along the
/// latest solution.
fn refreshed_schedule<T: Real>(
    sm: &StabilizedModel<T>,
    cfg: &MpcConfig<T>,
    step: &MpcStep<T>,
    x: &DVector<T>,
) -> Result<Vec<DVector<T>>> {
    let big_n = cfg.horizon;
    match cfg.phat_update {
        PhatUpdateSource::QpStates => Ok((0..big_n).map(|i| sm.base.schedule(&step.x_bar[i])).collect()),
        PhatUpdateSource::PreviousTruth => {
            let mut xt = x.clone();
            let mut out = Vec::with_capacity(big_n);
            for u in &step.u_star {
                out.push(sm.base.schedule(&xt));
                xt = plant_step(sm, &xt, u)?;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_unbalanced_disk, sinc_lower_bound, ScheduleComponent, SchedulingMap};
    use crate::{BankSettings, FitOptions, LpvModel};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn disk() -> StabilizedModel<f64> {
        let lpv = make_unbalanced_disk::<f64>().discretize_euler(0.01).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 0.1]));
        let r = DMatrix::from_element(1, 1, 0.5);
        StabilizedModel::synthesize_lqr(&lpv, &q, &r, &DVector::from_element(1, 1.0)).unwrap()
    }

    fn disk_cfg(sm: &StabilizedModel<f64>, horizon: usize) -> MpcConfig<f64> {
        MpcConfig::new(
            sm,
            horizon,
            DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 0.1])),
            DMatrix::from_element(1, 1, 0.5),
            vec![Interval::symmetric(2.0 * PI), Interval::symmetric(10.0 * PI)],
            vec![Interval::symmetric(10.0)],
        )
    }

    fn fast_bank(n: usize) -> ErrorBank<f64> {
        let fit = FitOptions { starts: 2, iterations: 40, ..FitOptions::default() };
        ErrorBank::new(n, 2, BankSettings { fit, ..BankSettings::default() }, 2.576).unwrap()
    }

    fn zero_ref() -> Reference<f64> {
        Reference::Constant(DVector::zeros(2))
    }

    #[test]
    fn tighten_examples() {
        let b = vec![Interval::new(-10.0f64, 10.0)];
        let (t, flag) = tighten(&b, &DMatrix::zeros(3, 1), 2.576);
        assert!(!flag);
        assert!(t.iter().all(|r| r[0] == b[0]));
        let (t, flag) = tighten(&b, &DMatrix::from_element(1, 1, 1.0), 2.576);
        assert!(!flag);
        assert!((t[0][0].hi - 7.424).abs() < 1e-12);
        assert!((t[0][0].lo + 7.424).abs() < 1e-12);
        let (t, flag) = tighten(&[Interval::new(2.0, 4.0)], &DMatrix::from_element(1, 1, 5.0), 1.0);
        assert!(flag);
        assert_eq!(t[0][0], Interval::new(3.0, 3.0));
    }

    #[test]
    fn origin_is_an_unconstrained_optimum() {
        let sm = disk();
        let cfg = disk_cfg(&sm, 10);
        let p = vec![DVector::from_element(1, 1.0); 10];
        let c = condense(&sm, &cfg, &p, &DVector::zeros(2), &zero_ref().window(0, 10), &ErrorPrediction::zeros(10, 2)).unwrap();
        assert!(c.qp.linear.iter().all(|v| *v == 0.0));
        let s = solve_step(&sm, &cfg, &p, &DVector::zeros(2), &zero_ref().window(0, 10), &ErrorPrediction::zeros(10, 2)).unwrap();
        assert!(s.u_star.iter().all(|u| u[0].abs() < 1e-10));
        assert!(s.cost.abs() < 1e-18);
    }

    #[test]
    fn equilibrium_loop_stays_at_zero() {
        let sm = disk();
        let cfg = disk_cfg(&sm, 5);
        let mut bank = fast_bank(5);
        let traj = run_loop(&sm, &cfg, Some(&mut bank), &DVector::zeros(2), &zero_ref(), 8).unwrap();
        assert_eq!(traj.status, RunStatus::Completed);
        for rec in &traj.records {
            assert!(rec.u_applied[0].abs() < 1e-10);
            assert!(rec.errors.iter().all(|e| e.amax() < 1e-12));
        }
        assert!(traj.states.iter().all(|x| x.amax() < 1e-10));
    }

    #[test]
    fn single_step_matches_lqr_formula() {
        let sm = disk();
        let mut cfg = disk_cfg(&sm, 1);
        cfg.x_bounds = vec![Interval::symmetric(1e3); 2];
        cfg.u_bounds = vec![Interval::symmetric(1e3)];
        let x = DVector::from_vec(vec![0.3, -0.5]);
        let p = DVector::from_element(1, 0.7);
        let s = solve_step(&sm, &cfg, &[p.clone()], &x, &zero_ref().window(0, 1), &ErrorPrediction::zeros(1, 2)).unwrap();
        let b = &sm.base.b;
        let lhs = &cfg.r + b.transpose() * &cfg.p * b;
        let rhs = b.transpose() * &cfg.p * sm.closed_a(&p).unwrap() * &x;
        let u = -(rhs[0] / lhs[(0, 0)]);
        assert!((s.u_star[0][0] - u).abs() < 1e-8, "{} vs {u}", s.u_star[0][0]);
        assert_eq!(s.qp_diag.status, QpStatus::Optimal);
    }

    /// Projected gradient on the state-explicit problem, gradients from the
    /// backward costate recursion.
    fn sparse_oracle(
        sm: &StabilizedModel<f64>,
        cfg: &MpcConfig<f64>,
        p: &[DVector<f64>],
        x0: &DVector<f64>,
        e: &DMatrix<f64>,
    ) -> Vec<f64> {
        let n_h = cfg.horizon;
        let a: Vec<_> = p.iter().map(|pi| sm.closed_a(pi).unwrap()).collect();
        let b = &sm.base.b;
        let grad = |u: &[f64], with_affine: bool| -> Vec<f64> {
            let mut xs = vec![if with_affine { x0.clone() } else { DVector::zeros(2) }];
            for i in 0..n_h {
                xs.push(&a[i] * &xs[i] + b * u[i]);
            }
            let xbar = |i: usize| if with_affine && i > 0 { &xs[i] + e.row(i - 1).transpose() } else { xs[i].clone() };
            let mut lam = &cfg.p * xbar(n_h) * 2.0;
            let mut g = vec![0.0; n_h];
            for i in (0..n_h).rev() {
                g[i] = 2.0 * cfg.r[(0, 0)] * u[i] + (b.transpose() * &lam)[0];
                lam = &cfg.q * xbar(i) * 2.0 + a[i].transpose() * &lam;
            }
            g
        };
        // Lipschitz constant by power iteration on the linear part
        let mut v = vec![1.0; n_h];
        let mut lip = 0.0;
        for _ in 0..200 {
            let w = grad(&v, false);
            lip = w.iter().map(|t| t * t).sum::<f64>().sqrt();
            v = w.iter().map(|t| t / lip).collect();
        }
        let lo = cfg.u_bounds[0].lo;
        let hi = cfg.u_bounds[0].hi;
        let mut u = vec![0.0; n_h];
        for _ in 0..200_000 {
            let g = grad(&u, true);
            for i in 0..n_h {
                u[i] = (u[i] - g[i] / lip).clamp(lo, hi);
            }
        }
        u
    }

    proptest! {
        #[test]
        fn tightening_is_nested_in_std(
            half in 0.1f64..5.0,
            center in -2.0f64..2.0,
            s1 in 0.0f64..3.0,
            extra in 0.0f64..3.0,
            z in 0.0f64..4.0,
        ) {
            let xb = [Interval::new(center - half, center + half)];
            let small = DMatrix::from_element(1, 1, s1);
            let large = DMatrix::from_element(1, 1, s1 + extra);
            let (a, _) = tighten(&xb, &small, z);
            let (b, inv_b) = tighten(&xb, &large, z);
            let (a, b) = (a[0][0], b[0][0]);
            prop_assert!(a.lo <= a.hi && b.lo <= b.hi);
            prop_assert!(xb[0].lo <= a.lo && a.hi <= xb[0].hi);
            if !inv_b {
                prop_assert!(a.lo <= b.lo && b.hi <= a.hi);
            } else {
                prop_assert!(b.lo == xb[0].midpoint() && b.hi == b.lo);
            }
            let (same, _) = tighten(&xb, &DMatrix::zeros(1, 1), z);
            prop_assert_eq!(same[0][0], xb[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn condensed_matches_sparse_form(
            theta in -3.0f64..3.0,
            omega in -5.0f64..5.0,
            ps in proptest::collection::vec(-0.2f64..1.0, 4),
            es in proptest::collection::vec(-0.05f64..0.05, 8),
        ) {
            let sm = disk();
            let mut cfg = disk_cfg(&sm, 4);
            cfg.input_constraint = InputConstraint::MpcOnly;
            cfg.u_bounds = vec![Interval::symmetric(3.0)];
            cfg.x_bounds = vec![Interval::symmetric(1e3); 2];
            let p: Vec<_> = ps.iter().map(|v| DVector::from_element(1, *v)).collect();
            let x0 = DVector::from_vec(vec![theta, omega]);
            let e = DMatrix::from_row_slice(4, 2, &es);
            let pred = ErrorPrediction { mean: e.clone(), std: DMatrix::zeros(4, 2), fitted: vec![true; 8] };
            let s = solve_step(&sm, &cfg, &p, &x0, &zero_ref().window(0, 4), &pred).unwrap();
            let oracle = sparse_oracle(&sm, &cfg, &p, &x0, &e);
            for i in 0..4 {
                prop_assert!((s.u_star[i][0] - oracle[i]).abs() < 1e-6, "{i}: {} vs {}", s.u_star[i][0], oracle[i]);
            }
        }
    }

    #[test]
    fn shift_identity_and_truth_consistency() {
        let sm = disk();
        let cfg = disk_cfg(&sm, 10);
        let mut bank = fast_bank(10);
        let x0 = DVector::from_vec(vec![-2.0 * PI, 0.0]);
        let traj = run_loop(&sm, &cfg, Some(&mut bank), &x0, &zero_ref(), 15).unwrap();
        assert_eq!(traj.status, RunStatus::Completed);
        for w in traj.records.windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            for i in 0..10 {
                assert_eq!(cur.p_hat[i], sm.base.schedule(&prev.x_true[i + 1]));
            }
        }
        for rec in &traj.records {
            assert_eq!(traj.states[rec.k + 1], rec.x_true[1]);
            assert!(rec.errors[0].iter().all(|v| *v == 0.0));
            assert_eq!(rec.x_hat[0], rec.x);
            assert_eq!(rec.x_bar[0], rec.x);
        }
    }

    #[test]
    fn initial_schedule_comes_from_x0() {
        let sm = disk();
        let mut cfg = disk_cfg(&sm, 10);
        cfg.error_correction = false;
        let x0 = DVector::from_vec(vec![-2.0 * PI, 0.0]);
        let traj = run_loop(&sm, &cfg, None, &x0, &zero_ref(), 0).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert!(traj.records.is_empty());
        let traj = run_loop(&sm, &cfg, None, &x0, &zero_ref(), 1).unwrap();
        let p0 = sm.base.schedule(&x0);
        assert!(traj.records[0].p_hat.iter().all(|p| *p == p0));
    }

    #[test]
    fn empty_bank_first_step_equals_uncorrected() {
        let sm = disk();
        let mut cfg = disk_cfg(&sm, 10);
        let x0 = DVector::from_vec(vec![-2.0 * PI, 0.0]);
        let mut bank = fast_bank(10);
        let with = run_loop(&sm, &cfg, Some(&mut bank), &x0, &zero_ref(), 2).unwrap();
        cfg.error_correction = false;
        let without = run_loop(&sm, &cfg, None, &x0, &zero_ref(), 2).unwrap();
        assert_eq!(with.records[0].u_mpc, without.records[0].u_mpc);
        assert_eq!(with.states[1], without.states[1]);
    }

    #[test]
    fn infeasible_qp_stops_with_partial_log() {
        let sm = disk();
        let mut cfg = disk_cfg(&sm, 5);
        cfg.error_correction = false;
        // theta_1 = theta_0 + ts omega_0 leaves the box for any input
        cfg.x_bounds = vec![Interval::new(-1.0, 1.0), Interval::symmetric(10.0 * PI)];
        let x0 = DVector::from_vec(vec![0.99, 20.0]);
        let traj = run_loop(&sm, &cfg, None, &x0, &zero_ref(), 5).unwrap();
        assert_eq!(traj.status, RunStatus::QpInfeasible { k: 0 });
        assert!(traj.records.is_empty());
        assert_eq!(traj.states.len(), 1);
    }

    #[test]
    fn config_validation() {
        let sm = disk();
        let mut cfg = disk_cfg(&sm, 10);
        assert!(cfg.validate(&sm).is_ok());
        cfg.horizon = 0;
        assert!(cfg.validate(&sm).is_err());
        let mut cfg = disk_cfg(&sm, 10);
        cfg.u_bounds = vec![Interval::new(1.0, -1.0)];
        assert!(cfg.validate(&sm).is_err());
        let cfg = disk_cfg(&sm, 10);
        let x0 = DVector::from_vec(vec![-7.0, 0.0]);
        assert!(run_loop(&sm, &cfg, None, &x0, &zero_ref(), 1).is_err());
    }

    #[test]
    fn reference_moves_the_equilibrium() {
        // double integrator with a constant schedule
        let a0 = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let rho = SchedulingMap::new(vec![ScheduleComponent::State { state: 0 }]);
        let lpv = LpvModel::new(a0, vec![DMatrix::zeros(2, 2)], b, rho, vec![Interval::symmetric(1e6)], 0.1).unwrap();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 0.1);
        let sm = StabilizedModel::synthesize_lqr(&lpv, &q, &r, &DVector::zeros(1)).unwrap();
        let mut cfg = MpcConfig::new(&sm, 10, q, r, vec![Interval::symmetric(10.0); 2], vec![Interval::symmetric(5.0)]);
        cfg.error_correction = false;
        let r = DVector::from_vec(vec![1.0, 0.0]);
        let traj = run_loop(&sm, &cfg, None, &DVector::zeros(2), &Reference::Constant(r.clone()), 150).unwrap();
        let held = run_loop(&sm, &cfg, None, &DVector::zeros(2), &Reference::Trajectory(vec![r; 3]), 150).unwrap();
        assert_eq!(traj.states, held.states);
        // R weighs the MPC input, not K x + u, so the resting point sits short of r
        let last = traj.states.last().unwrap();
        assert!(last[0] > 0.3 && last[0] < 1.0 && last[1].abs() < 1e-6, "{last}");
        let before = &traj.states[traj.states.len() - 2];
        assert!((last - before).amax() < 1e-5);
    }

    #[test]
    fn disk_scheduling_stays_in_bounds() {
        let sm = disk();
        assert!((sm.base.p_bounds[0].lo - sinc_lower_bound()).abs() < 1e-15);
        let cfg = disk_cfg(&sm, 10);
        assert!(sm.base.check_scheduling_bounds(&cfg.x_bounds, 201).unwrap().is_none());
    }
}
