//! Auxiliary state feedback `u = Kx + u_mpc` and the MPC terminal weight.
//!
//! `K` comes from the discrete Riccati equation at a nominal scheduling
//! point and is then certified on a grid over the scheduling bounds: the
//! closed loop `A(p) + BK` must be Schur stable everywhere on the grid.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{lu_solve_matrix, max_abs, spectral_radius, symmetrize};
use crate::model::LpvModel;
use crate::{Error, Real, Result};

const DARE_MAX_ITER: usize = 10_000;
const DARE_TOL: f64 = 1e-12;
const LYAP_MAX_ITER: usize = 1_000_000;
const LYAP_TOL: f64 = 1e-14;
const GRID_POINTS: usize = 101;
const STABILITY_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct StabilizedModel<T> {
    pub base: LpvModel<T>,
    /// Feedback gain, `n_u x n_x`.
    pub k: DMatrix<T>,
    /// Terminal weight, symmetric positive definite.
    pub p: DMatrix<T>,
    pub p_nominal: DVector<T>,
}

impl<T: Real> StabilizedModel<T> {
    /// DARE gain at `p_nominal`, grid certificate, then the terminal weight.
    pub fn synthesize_lqr(
        model: &LpvModel<T>,
        q: &DMatrix<T>,
        r: &DMatrix<T>,
        p_nominal: &DVector<T>,
    ) -> Result<Self> {
        let n = model.n_x();
        let m = model.n_u();
        if q.shape() != (n, n) {
            return Err(Error::Dimension { context: "Q", expected: n, got: q.nrows() });
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension { context: "R", expected: m, got: r.nrows() });
        }
        let a = model.eval_a(p_nominal)?;
        let s = solve_dare(&a, &model.b, q, r)?;
        let k = lqr_gain(&a, &model.b, r, &s)?;
        let mut sm = Self {
            base: model.clone(),
            k,
            p: DMatrix::zeros(n, n),
            p_nominal: p_nominal.clone(),
        };
        sm.certify_grid(GRID_POINTS)?;
        sm.p = sm.terminal_weight(q, r)?;
        Ok(sm)
    }

    /// Wraps an externally designed gain; only the grid certificate and the
    /// terminal weight are computed here.
    pub fn with_gain(
        model: &LpvModel<T>,
        k: DMatrix<T>,
        q: &DMatrix<T>,
        r: &DMatrix<T>,
        p_nominal: &DVector<T>,
    ) -> Result<Self> {
        if k.shape() != (model.n_u(), model.n_x()) {
            return Err(Error::Dimension { context: "K rows", expected: model.n_u(), got: k.nrows() });
        }
        let mut sm = Self {
            base: model.clone(),
            k,
            p: DMatrix::zeros(model.n_x(), model.n_x()),
            p_nominal: p_nominal.clone(),
        };
        sm.certify_grid(GRID_POINTS)?;
        sm.p = sm.terminal_weight(q, r)?;
        Ok(sm)
    }

    /// `A(p) + BK`
    pub fn closed_a(&self, p: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.base.eval_a(p)? + &self.base.b * &self.k)
    }

    /// Solves `P = Ac' P Ac + Q + K' R K` at `p_nominal`.
    pub fn terminal_weight(&self, q: &DMatrix<T>, r: &DMatrix<T>) -> Result<DMatrix<T>> {
        let ac = self.closed_a(&self.p_nominal)?;
        let w = q + self.k.transpose() * r * &self.k;
        solve_discrete_lyapunov(&ac, &w)
    }

    /// Scheduling grid with `points_per_axis` points per component.
    pub fn scheduling_grid(&self, points_per_axis: usize) -> Vec<DVector<T>> {
        let bounds = &self.base.p_bounds;
        let n_p = bounds.len();
        let per = points_per_axis.max(2);
        let total = per.pow(n_p as u32);
        (0..total)
            .map(|flat| {
                let mut rem = flat;
                DVector::from_iterator(
                    n_p,
                    bounds.iter().map(|iv| {
                        let j = rem % per;
                        rem /= per;
                        let frac = T::from_usize(j).unwrap() / T::from_usize(per - 1).unwrap();
                        iv.lo + (iv.hi - iv.lo) * frac
                    }),
                )
            })
            .collect()
    }

    /// Largest closed-loop spectral radius on the grid, with its location.
    pub fn max_grid_radius(&self, points_per_axis: usize) -> Result<(T, DVector<T>)> {
        let mut worst = (T::zero(), self.p_nominal.clone());
        for p in self.scheduling_grid(points_per_axis) {
            let rad = spectral_radius(&self.closed_a(&p)?);
            if rad > worst.0 {
                worst = (rad, p);
            }
        }
        Ok(worst)
    }

    fn certify_grid(&self, points_per_axis: usize) -> Result<()> {
        let limit = T::one() - T::lit(STABILITY_MARGIN);
        for p in self.scheduling_grid(points_per_axis) {
            let rad = spectral_radius(&self.closed_a(&p)?);
            if !(rad < limit) {
                return Err(Error::UnstableClosedLoop {
                    p: p.iter().map(|v| v.to_f64_lossy()).collect(),
                    radius: rad.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }
}

/// `tol` for f64; coarser scalar types get a few ulps of `scale` instead.
fn precision_floor<T: Real>(tol: T, scale: T) -> T {
    if T::default_epsilon() <= T::lit(f64::EPSILON) {
        return tol;
    }
    let floor = T::default_epsilon() * T::lit(16.0) * (T::one() + scale);
    if floor > tol { floor } else { tol }
}

/// Fixed-point iteration of the Riccati map starting from `S = Q`.
pub fn solve_dare<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut s = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let sa = &s * a;
        let gain = lu_solve_matrix(&(r + &bt * &s * b), &(&bt * &sa), "Riccati gain")?;
        let next = symmetrize(&(&at * &sa - &at * &s * b * gain + q));
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RiccatiNonConvergent(DARE_MAX_ITER));
        }
        let diff = max_abs(&(&next - &s));
        let tol = precision_floor(T::lit(DARE_TOL), max_abs(&next));
        s = next;
        if diff < tol {
            return Ok(s);
        }
    }
    Err(Error::RiccatiNonConvergent(DARE_MAX_ITER))
}

/// `K = -(R + B'SB)^{-1} B'SA`
pub fn lqr_gain<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    r: &DMatrix<T>,
    s: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let bt = b.transpose();
    Ok(-lu_solve_matrix(&(r + &bt * s * b), &(&bt * s * a), "LQR gain")?)
}

/// Max-abs residual of the Riccati equation.
pub fn dare_residual<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    s: &DMatrix<T>,
) -> Result<T> {
    let at = a.transpose();
    let bt = b.transpose();
    let inner = lu_solve_matrix(&(r + &bt * s * b), &(&bt * s * a), "Riccati residual")?;
    Ok(max_abs(&(s - &at * s * a + &at * s * b * inner - q)))
}

/// `P = sum_k (A')^k W A^k`, accumulated until the increment drops below
/// 1e-14 in max-abs (or the precision floor of `T`).
pub fn solve_discrete_lyapunov<T: Real>(a: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>> {
    let at = a.transpose();
    let mut term = w.clone();
    let mut p = DMatrix::zeros(w.nrows(), w.ncols());
    for _ in 0..LYAP_MAX_ITER {
        p += &term;
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if max_abs(&term) < precision_floor(T::lit(LYAP_TOL), max_abs(&p)) {
            return Ok(symmetrize(&p));
        }
        term = &at * &term * a;
        if !term.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    Err(Error::LyapunovNonConvergent(LYAP_MAX_ITER))
}

pub fn lyapunov_residual<T: Real>(a: &DMatrix<T>, w: &DMatrix<T>, p: &DMatrix<T>) -> T {
    max_abs(&(p - a.transpose() * p * a - w))
}
