//! Affine LPV state-space models, scheduling maps and forward-Euler
//! discretization.
//!
//! The discrete LPV model is also the plant: the embedding is exact, so
//! stepping `x_{k+1} = A(rho(x_k)) x_k + B u_k` reproduces the nonlinear
//! dynamics at the sampling instants of the discretized model.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::{linalg, Error, Real, Result};

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Interval<T> {
    pub fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }

    pub fn symmetric(half_width: T) -> Self {
        Self { lo: -half_width, hi: half_width }
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: T) -> T {
        v.max(self.lo).min(self.hi)
    }

    pub fn midpoint(&self) -> T {
        (self.lo + self.hi) * T::lit(0.5)
    }
}

/// Unnormalized cardinal sine, `sin(t)/t` with the removable singularity
/// filled in.
pub fn sinc<T: Real>(t: T) -> T {
    if t == T::zero() {
        T::one()
    } else if t.abs() < T::lit(1e-8) {
        T::one() - t * t / T::lit(6.0)
    } else {
        t.sin() / t
    }
}

/// One component of the scheduling map `rho`.
#[derive(Clone)]
pub enum ScheduleComponent<T> {
    /// `sinc(x[state])`
    Sinc { state: usize },
    /// `x[state]`
    State { state: usize },
    Custom(Arc<dyn Fn(&DVector<T>) -> T + Send + Sync>),
}

impl<T> fmt::Debug for ScheduleComponent<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sinc { state } => write!(f, "Sinc {{ state: {state} }}"),
            Self::State { state } => write!(f, "State {{ state: {state} }}"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// The scheduling map `rho: R^{n_x} -> R^{n_p}`.
#[derive(Clone, Debug)]
pub struct SchedulingMap<T> {
    pub components: Vec<ScheduleComponent<T>>,
}

impl<T: Real> SchedulingMap<T> {
    pub fn new(components: Vec<ScheduleComponent<T>>) -> Self {
        Self { components }
    }

    pub fn sinc_of(state: usize) -> Self {
        Self::new(vec![ScheduleComponent::Sinc { state }])
    }

    pub fn n_p(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            self.components.len(),
            self.components.iter().map(|c| match c {
                ScheduleComponent::Sinc { state } => sinc(x[*state]),
                ScheduleComponent::State { state } => x[*state],
                ScheduleComponent::Custom(f) => f(x),
            }),
        )
    }

    fn max_state_index(&self) -> Option<usize> {
        self.components
            .iter()
            .filter_map(|c| match c {
                ScheduleComponent::Sinc { state } | ScheduleComponent::State { state } => {
                    Some(*state)
                }
                ScheduleComponent::Custom(_) => None,
            })
            .max()
    }
}

fn check_structure<T: Real>(
    a0: &DMatrix<T>,
    a_l: &[DMatrix<T>],
    b: &DMatrix<T>,
    rho: &SchedulingMap<T>,
    p_bounds: &[Interval<T>],
) -> Result<()> {
    let n = a0.nrows();
    if a0.ncols() != n {
        return Err(Error::Dimension { context: "A0 columns", expected: n, got: a0.ncols() });
    }
    for a in a_l {
        if a.shape() != (n, n) {
            return Err(Error::Dimension { context: "A_l rows", expected: n, got: a.nrows() });
        }
    }
    if b.nrows() != n {
        return Err(Error::Dimension { context: "B rows", expected: n, got: b.nrows() });
    }
    if rho.n_p() != a_l.len() {
        return Err(Error::Dimension {
            context: "scheduling map components",
            expected: a_l.len(),
            got: rho.n_p(),
        });
    }
    if p_bounds.len() != a_l.len() {
        return Err(Error::Dimension {
            context: "scheduling bounds",
            expected: a_l.len(),
            got: p_bounds.len(),
        });
    }
    if let Some(idx) = rho.max_state_index() {
        if idx >= n {
            return Err(Error::InvalidArgument(format!(
                "scheduling map reads state {idx} but n_x = {n}"
            )));
        }
    }
    if p_bounds.iter().any(|iv| !(iv.lo <= iv.hi)) {
        return Err(Error::InvalidArgument("scheduling bound with lo > hi".into()));
    }
    Ok(())
}

/// Discrete-time affine LPV model `x+ = (A0 + sum_l p_l A_l) x + B u`,
/// `p = rho(x)`.
#[derive(Clone, Debug)]
pub struct LpvModel<T> {
    pub a0: DMatrix<T>,
    pub a_l: Vec<DMatrix<T>>,
    pub b: DMatrix<T>,
    pub rho: SchedulingMap<T>,
    pub p_bounds: Vec<Interval<T>>,
    /// Sampling time in seconds.
    pub ts: T,
}

impl<T: Real> LpvModel<T> {
    pub fn new(
        a0: DMatrix<T>,
        a_l: Vec<DMatrix<T>>,
        b: DMatrix<T>,
        rho: SchedulingMap<T>,
        p_bounds: Vec<Interval<T>>,
        ts: T,
    ) -> Result<Self> {
        check_structure(&a0, &a_l, &b, &rho, &p_bounds)?;
        if !(ts > T::zero()) {
            return Err(Error::InvalidArgument("sampling time must be positive".into()));
        }
        Ok(Self { a0, a_l, b, rho, p_bounds, ts })
    }

    pub fn n_x(&self) -> usize {
        self.a0.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_p(&self) -> usize {
        self.a_l.len()
    }

    /// `A(p) = A0 + sum_l p[l] A_l`, no clamping.
    pub fn eval_a(&self, p: &DVector<T>) -> Result<DMatrix<T>> {
        if p.len() != self.n_p() {
            return Err(Error::Dimension {
                context: "scheduling vector",
                expected: self.n_p(),
                got: p.len(),
            });
        }
        let mut a = self.a0.clone();
        for (pl, al) in p.iter().zip(&self.a_l) {
            a += al * *pl;
        }
        Ok(a)
    }

    pub fn schedule(&self, x: &DVector<T>) -> DVector<T> {
        self.rho.eval(x)
    }

    /// Clamps each scheduling component into its bounds; returns whether
    /// anything moved.
    pub fn clamp_schedule(&self, p: &mut DVector<T>) -> bool {
        let mut moved = false;
        for (v, iv) in p.iter_mut().zip(&self.p_bounds) {
            let c = iv.clamp(*v);
            if c != *v {
                moved = true;
                *v = c;
            }
        }
        moved
    }

    /// True plant transition `A(rho(x)) x + B u`.
    pub fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        self.check_state_input(x, u)?;
        let a = self.eval_a(&self.schedule(x))?;
        Ok(a * x + &self.b * u)
    }

    /// `[x0, step(x0, u0), ...]`, length `u_seq.len() + 1`.
    pub fn rollout(&self, x0: &DVector<T>, u_seq: &[DVector<T>]) -> Result<Vec<DVector<T>>> {
        if u_seq.is_empty() {
            return Err(Error::InvalidArgument("rollout needs at least one input".into()));
        }
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(x0.clone());
        for u in u_seq {
            let next = self.step(out.last().expect("non-empty"), u)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Samples a regular grid (`per_axis` points per state) of the state box
    /// and checks `rho(x)` against the scheduling bounds. Returns the first
    /// offending state.
    pub fn check_scheduling_bounds(
        &self,
        x_bounds: &[Interval<T>],
        per_axis: usize,
    ) -> Result<Option<DVector<T>>> {
        let n = self.n_x();
        if x_bounds.len() != n {
            return Err(Error::Dimension { context: "state bounds", expected: n, got: x_bounds.len() });
        }
        let per_axis = per_axis.max(2);
        let total = per_axis.checked_pow(n as u32).ok_or_else(|| {
            Error::InvalidArgument("sampling grid too large".into())
        })?;
        let slack = T::lit(1e-9);
        let mut x = DVector::zeros(n);
        for flat in 0..total {
            let mut rem = flat;
            for (d, iv) in x_bounds.iter().enumerate() {
                let j = rem % per_axis;
                rem /= per_axis;
                let frac = T::from_usize(j).unwrap() / T::from_usize(per_axis - 1).unwrap();
                x[d] = iv.lo + (iv.hi - iv.lo) * frac;
            }
            let p = self.schedule(&x);
            let ok = p
                .iter()
                .zip(&self.p_bounds)
                .all(|(v, iv)| *v >= iv.lo - slack && *v <= iv.hi + slack);
            if !ok {
                return Ok(Some(x));
            }
        }
        Ok(None)
    }

    fn check_state_input(&self, x: &DVector<T>, u: &DVector<T>) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::Dimension { context: "state", expected: self.n_x(), got: x.len() });
        }
        if u.len() != self.n_u() {
            return Err(Error::Dimension { context: "input", expected: self.n_u(), got: u.len() });
        }
        if !linalg::is_finite_vec(x) {
            return Err(Error::NonFinite("state"));
        }
        if !linalg::is_finite_vec(u) {
            return Err(Error::NonFinite("input"));
        }
        Ok(())
    }
}

/// Continuous-time affine LPV model `dx/dt = (A0 + sum_l p_l A_l) x + B u`.
#[derive(Clone, Debug)]
pub struct ContinuousModel<T> {
    pub a0: DMatrix<T>,
    pub a_l: Vec<DMatrix<T>>,
    pub b: DMatrix<T>,
    pub rho: SchedulingMap<T>,
    pub p_bounds: Vec<Interval<T>>,
}

impl<T: Real> ContinuousModel<T> {
    pub fn new(
        a0: DMatrix<T>,
        a_l: Vec<DMatrix<T>>,
        b: DMatrix<T>,
        rho: SchedulingMap<T>,
        p_bounds: Vec<Interval<T>>,
    ) -> Result<Self> {
        check_structure(&a0, &a_l, &b, &rho, &p_bounds)?;
        Ok(Self { a0, a_l, b, rho, p_bounds })
    }

    pub fn eval_a(&self, p: &DVector<T>) -> Result<DMatrix<T>> {
        if p.len() != self.a_l.len() {
            return Err(Error::Dimension {
                context: "scheduling vector",
                expected: self.a_l.len(),
                got: p.len(),
            });
        }
        let mut a = self.a0.clone();
        for (pl, al) in p.iter().zip(&self.a_l) {
            a += al * *pl;
        }
        Ok(a)
    }

    /// Vector field `A(rho(x)) x + B u`.
    pub fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.eval_a(&self.rho.eval(x))? * x + &self.b * u)
    }

    pub fn discretize_euler(&self, ts: T) -> Result<LpvModel<T>> {
        discretize_euler(self, ts)
    }
}

/// Forward Euler: `A0 <- I + ts A0`, `A_l <- ts A_l`, `B <- ts B`.
pub fn discretize_euler<T: Real>(cm: &ContinuousModel<T>, ts: T) -> Result<LpvModel<T>> {
    if !(ts > T::zero()) {
        return Err(Error::InvalidArgument("sampling time must be positive".into()));
    }
    let n = cm.a0.nrows();
    let a0 = DMatrix::identity(n, n) + &cm.a0 * ts;
    let a_l = cm.a_l.iter().map(|a| a * ts).collect();
    let b = &cm.b * ts;
    LpvModel::new(a0, a_l, b, cm.rho.clone(), cm.p_bounds.clone(), ts)
}

/// Physical constants of the unbalanced disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskParameters {
    /// kg m^2
    pub inertia: f64,
    /// kg
    pub mass: f64,
    pub gravity: f64,
    /// m
    pub length: f64,
    /// motor time constant
    pub tau: f64,
    /// motor gain
    pub motor_gain: f64,
}

impl Default for DiskParameters {
    fn default() -> Self {
        Self {
            inertia: 2.4e-4,
            mass: 0.076,
            gravity: 9.81,
            length: 0.041,
            tau: 0.4,
            motor_gain: 11.0,
        }
    }
}

impl DiskParameters {
    /// `m g l / I`
    pub fn gravity_coefficient(&self) -> f64 {
        self.mass * self.gravity * self.length / self.inertia
    }
}

/// `min sinc(t)` over `[-2 pi, 2 pi]` on a 1e-6 grid.
pub fn sinc_lower_bound() -> f64 {
    static LOWER: OnceLock<f64> = OnceLock::new();
    *LOWER.get_or_init(|| {
        let span = 2.0 * std::f64::consts::PI;
        let h = 1e-6;
        // sinc is even, so the half-range suffices.
        let steps = (span / h).floor() as usize;
        (0..=steps)
            .map(|j| sinc(j as f64 * h))
            .fold(f64::INFINITY, f64::min)
    })
}

/// Unbalanced disk with the default parameters.
pub fn make_unbalanced_disk<T: Real>() -> ContinuousModel<T> {
    unbalanced_disk(&DiskParameters::default())
}

/// `dtheta = omega`, `domega = (mgl/I) sinc(theta) theta - omega/tau + (K_m/tau) u`,
/// scheduled on `p = sinc(theta)`.
pub fn unbalanced_disk<T: Real>(params: &DiskParameters) -> ContinuousModel<T> {
    let lit = T::lit;
    let a0 = DMatrix::from_row_slice(2, 2, &[T::zero(), T::one(), T::zero(), lit(-1.0 / params.tau)]);
    let a1 = DMatrix::from_row_slice(
        2,
        2,
        &[T::zero(), T::zero(), lit(params.gravity_coefficient()), T::zero()],
    );
    let b = DMatrix::from_column_slice(2, 1, &[T::zero(), lit(params.motor_gain / params.tau)]);
    ContinuousModel {
        a0,
        a_l: vec![a1],
        b,
        rho: SchedulingMap::sinc_of(0),
        p_bounds: vec![Interval::new(lit(sinc_lower_bound()), T::one())],
    }
}
