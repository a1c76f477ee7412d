//! Dense convex QP: minimize `1/2 z'Hz + f'z` subject to `Gz <= h`.
//!
//! ADMM on the split `s = Gz, s <= h` with unit-norm row equilibration and a
//! fixed penalty, followed by an active-set polish that solves the equality
//! KKT system on the detected active set and repairs it (add the most
//! violated row, drop the most negative multiplier) until the certificate
//! holds. A solution is only reported `Optimal` when the KKT certificate
//! passes on the original, unscaled data.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::linalg::{symmetrize, vec_max_abs};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem<T> {
    /// Symmetrized Hessian `H`.
    pub hessian: DMatrix<T>,
    pub linear: DVector<T>,
    /// Constraint matrix `G`, `q x m`.
    pub constraints: DMatrix<T>,
    /// Right-hand side `h`.
    pub bounds: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(
        hessian: DMatrix<T>,
        linear: DVector<T>,
        constraints: DMatrix<T>,
        bounds: DVector<T>,
    ) -> Result<Self> {
        let m = linear.len();
        if hessian.shape() != (m, m) {
            return Err(Error::Dimension { context: "QP Hessian", expected: m, got: hessian.nrows() });
        }
        if constraints.ncols() != m {
            return Err(Error::Dimension {
                context: "QP constraint columns",
                expected: m,
                got: constraints.ncols(),
            });
        }
        if constraints.nrows() != bounds.len() {
            return Err(Error::Dimension {
                context: "QP constraint rows",
                expected: constraints.nrows(),
                got: bounds.len(),
            });
        }
        Ok(Self { hessian: symmetrize(&hessian), linear, constraints, bounds })
    }

    pub fn unconstrained(hessian: DMatrix<T>, linear: DVector<T>) -> Result<Self> {
        let m = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, m), DVector::zeros(0))
    }

    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.bounds.len()
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        (z.transpose() * &self.hessian * z)[(0, 0)] * T::lit(0.5) + self.linear.dot(z)
    }

    /// `(stationarity, primal violation, max |lambda_j (Gz - h)_j|)`.
    pub fn kkt_residuals(&self, z: &DVector<T>, duals: &DVector<T>) -> (T, T, T) {
        let grad = &self.hessian * z + &self.linear + self.constraints.transpose() * duals;
        let slack = &self.constraints * z - &self.bounds;
        let primal = slack.iter().fold(T::zero(), |acc, v| acc.max(*v));
        let comp = slack
            .iter()
            .zip(duals.iter())
            .fold(T::zero(), |acc, (s, l)| acc.max((*s * *l).abs()));
        (vec_max_abs(&grad), primal, comp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution<T> {
    pub z: DVector<T>,
    pub duals: DVector<T>,
    pub status: QpStatus,
    pub kkt_stationarity: T,
    pub kkt_primal: T,
    pub kkt_complementarity: T,
    pub iterations: usize,
    pub polished: bool,
    pub objective: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// ADMM penalty.
    pub rho: f64,
    /// Proximal term on `z`.
    pub sigma: f64,
    /// Added to the Hessian diagonal before factorization.
    pub regularization: f64,
    /// Tikhonov term of the polish KKT solve.
    pub polish_tikhonov: f64,
    pub primal_tol: f64,
    pub stationarity_tol: f64,
    pub complementarity_tol: f64,
    pub infeasibility_tol: f64,
    pub check_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            eps_abs: 1e-9,
            eps_rel: 1e-9,
            rho: 1.0,
            sigma: 1e-6,
            regularization: 1e-10,
            polish_tikhonov: 1e-12,
            primal_tol: 1e-8,
            stationarity_tol: 1e-6,
            complementarity_tol: 1e-6,
            infeasibility_tol: 1e-6,
            check_every: 10,
        }
    }
}

pub fn solve<T: Real>(prob: &QpProblem<T>, settings: &QpSettings) -> QpSolution<T> {
    solve_from(prob, settings, None)
}

/// Solves with an optional initial iterate for ADMM.
pub fn solve_from<T: Real>(
    prob: &QpProblem<T>,
    settings: &QpSettings,
    initial: Option<&DVector<T>>,
) -> QpSolution<T> {
    let m = prob.n_vars();
    let mut h_reg = prob.hessian.clone();
    for i in 0..m {
        h_reg[(i, i)] += T::lit(settings.regularization);
    }

    if prob.n_constraints() == 0 {
        let z = match Cholesky::new(h_reg.clone()) {
            Some(ch) => ch.solve(&-&prob.linear),
            None => h_reg
                .clone()
                .lu()
                .solve(&-&prob.linear)
                .unwrap_or_else(|| DVector::zeros(m)),
        };
        return finish(prob, settings, z, DVector::zeros(0), 0, false, false);
    }

    let scaled = Scaled::new(prob);
    if let Some(j) = scaled.trivially_infeasible() {
        log::debug!("QP row {j} has zero coefficients and negative bound");
        return finish(prob, settings, DVector::zeros(m), DVector::zeros(prob.n_constraints()), 0, false, true);
    }

    let admm = run_admm(prob, &scaled, &h_reg, settings, initial);

    // Polish from the ADMM active set, even when ADMM flagged infeasibility:
    // a certified polish overrides a false alarm.
    let polished = polish(prob, &scaled, settings, &admm.z, &admm.lambda);
    if let Some((z, lam)) = polished {
        let sol = finish(prob, settings, z, scaled.unscale_duals(&lam), admm.iterations, true, false);
        if sol.status == QpStatus::Optimal {
            return sol;
        }
    }
    finish(
        prob,
        settings,
        admm.z.clone(),
        scaled.unscale_duals(&admm.lambda),
        admm.iterations,
        false,
        admm.infeasible,
    )
}

fn finish<T: Real>(
    prob: &QpProblem<T>,
    settings: &QpSettings,
    z: DVector<T>,
    duals: DVector<T>,
    iterations: usize,
    polished: bool,
    infeasible: bool,
) -> QpSolution<T> {
    let duals = duals.map(|v| v.max(T::zero()));
    let (stat, primal, comp) = prob.kkt_residuals(&z, &duals);
    let certified = stat <= T::lit(settings.stationarity_tol)
        && primal <= T::lit(settings.primal_tol)
        && comp <= T::lit(settings.complementarity_tol)
        && z.iter().all(|v| v.is_finite());
    let status = if certified {
        QpStatus::Optimal
    } else if infeasible {
        QpStatus::Infeasible
    } else {
        QpStatus::MaxIter
    };
    let objective = prob.objective(&z);
    QpSolution {
        z,
        duals,
        status,
        kkt_stationarity: stat,
        kkt_primal: primal,
        kkt_complementarity: comp,
        iterations,
        polished,
        objective,
    }
}

/// Row-equilibrated constraint data: `G_hat = D G`, `h_hat = D h`.
struct Scaled<T> {
    g: DMatrix<T>,
    h: DVector<T>,
    row_scale: DVector<T>,
}

impl<T: Real> Scaled<T> {
    fn new(prob: &QpProblem<T>) -> Self {
        let q = prob.n_constraints();
        let row_scale = DVector::from_iterator(
            q,
            prob.constraints.row_iter().map(|row| {
                let n = row.norm();
                if n > T::zero() {
                    T::one() / n
                } else {
                    T::one()
                }
            }),
        );
        let mut g = prob.constraints.clone();
        for (j, mut row) in g.row_iter_mut().enumerate() {
            row *= row_scale[j];
        }
        let h = prob.bounds.component_mul(&row_scale);
        Self { g, h, row_scale }
    }

    fn trivially_infeasible(&self) -> Option<usize> {
        self.g
            .row_iter()
            .zip(self.h.iter())
            .position(|(row, h)| row.iter().all(|v| *v == T::zero()) && *h < T::zero())
    }

    fn unscale_duals(&self, lam: &DVector<T>) -> DVector<T> {
        lam.component_mul(&self.row_scale)
    }
}

struct AdmmResult<T> {
    z: DVector<T>,
    lambda: DVector<T>,
    iterations: usize,
    infeasible: bool,
}

fn run_admm<T: Real>(
    prob: &QpProblem<T>,
    scaled: &Scaled<T>,
    h_reg: &DMatrix<T>,
    settings: &QpSettings,
    initial: Option<&DVector<T>>,
) -> AdmmResult<T> {
    let m = prob.n_vars();
    let rho = T::lit(settings.rho);
    let sigma = T::lit(settings.sigma);
    let eps_abs = T::lit(settings.eps_abs);
    let eps_rel = T::lit(settings.eps_rel);
    let eps_inf = T::lit(settings.infeasibility_tol);
    let gt = scaled.g.transpose();

    let mut kkt = h_reg + &gt * &scaled.g * rho;
    for i in 0..m {
        kkt[(i, i)] += sigma;
    }
    let factor: Box<dyn Fn(&DVector<T>) -> DVector<T>> = match Cholesky::<T, Dyn>::new(kkt.clone()) {
        Some(ch) => Box::new(move |b| ch.solve(b)),
        None => {
            let lu = kkt.lu();
            Box::new(move |b| lu.solve(b).unwrap_or_else(|| b.clone()))
        }
    };

    let mut z = initial.cloned().unwrap_or_else(|| DVector::zeros(m));
    let mut s = (&scaled.g * &z).zip_map(&scaled.h, |v, h| v.min(h));
    let mut lam = DVector::zeros(scaled.h.len());
    let check_every = settings.check_every.max(1);
    let mut iterations = 0;
    let mut infeasible = false;

    for it in 1..=settings.max_iter {
        iterations = it;
        let rhs = &z * sigma - &prob.linear + &gt * (&s * rho - &lam);
        z = factor(&rhs);
        let v = &scaled.g * &z;
        let shifted = &v + &lam / rho;
        s = shifted.zip_map(&scaled.h, |a, h| a.min(h));
        let lam_next = &lam + (&v - &s) * rho;
        let delta = &lam_next - &lam;
        lam = lam_next;

        if it % check_every != 0 {
            continue;
        }
        let r_prim = vec_max_abs(&(&v - &s));
        let hz = &prob.hessian * &z;
        let gl = &gt * &lam;
        let r_dual = vec_max_abs(&(&hz + &prob.linear + &gl));
        let prim_scale = vec_max_abs(&v).max(vec_max_abs(&s));
        let dual_scale = vec_max_abs(&hz).max(vec_max_abs(&prob.linear)).max(vec_max_abs(&gl));
        if r_prim <= eps_abs + eps_rel * prim_scale && r_dual <= eps_abs + eps_rel * dual_scale {
            break;
        }

        let dn = vec_max_abs(&delta);
        if dn > eps_inf {
            let y = &delta / dn;
            let gty = vec_max_abs(&(&gt * &y));
            let hty = scaled.h.dot(&y);
            if gty <= eps_inf && hty < -eps_inf {
                infeasible = true;
                break;
            }
        }
    }
    AdmmResult { z, lambda: lam, iterations, infeasible }
}

/// Equality-constrained KKT solve on a working set, with Tikhonov
/// regularization and two refinement sweeps against the exact system.
fn kkt_solve<T: Real>(
    prob: &QpProblem<T>,
    scaled: &Scaled<T>,
    working: &[usize],
    tikhonov: T,
) -> Option<(DVector<T>, DVector<T>)> {
    let m = prob.n_vars();
    let w = working.len();
    let dim = m + w;
    let mut exact = DMatrix::zeros(dim, dim);
    exact.view_mut((0, 0), (m, m)).copy_from(&prob.hessian);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, m).copy_from(&-&prob.linear);
    for (r, &j) in working.iter().enumerate() {
        for c in 0..m {
            let g = scaled.g[(j, c)];
            exact[(m + r, c)] = g;
            exact[(c, m + r)] = g;
        }
        rhs[m + r] = scaled.h[j];
    }
    let mut reg = exact.clone();
    for i in 0..m {
        reg[(i, i)] += tikhonov;
    }
    for i in m..dim {
        reg[(i, i)] -= tikhonov;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..2 {
        let resid = &rhs - &exact * &sol;
        sol += lu.solve(&resid)?;
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, m).into_owned(), sol.rows(m, w).into_owned()))
}

fn polish<T: Real>(
    prob: &QpProblem<T>,
    scaled: &Scaled<T>,
    settings: &QpSettings,
    z_admm: &DVector<T>,
    lam_admm: &DVector<T>,
) -> Option<(DVector<T>, DVector<T>)> {
    let q = prob.n_constraints();
    let tikhonov = T::lit(settings.polish_tikhonov);
    let lam_scale = T::one().max(vec_max_abs(lam_admm));
    let slack = &scaled.g * z_admm - &scaled.h;
    let mut working: Vec<usize> = (0..q)
        .filter(|&j| lam_admm[j] > T::lit(1e-9) * lam_scale || slack[j] > T::zero())
        .collect();

    let ptol = T::lit(settings.primal_tol * 1e-2);
    let max_rounds = 4 * q + 20;
    for _ in 0..max_rounds {
        let (z, nu) = kkt_solve(prob, scaled, &working, tikhonov)?;
        let v = &scaled.g * &z;
        let mut worst: Option<(usize, T)> = None;
        for j in 0..q {
            if working.contains(&j) {
                continue;
            }
            let viol = v[j] - scaled.h[j];
            let tol = ptol * (T::one() + scaled.h[j].abs());
            if viol > tol && worst.map_or(true, |(_, w)| viol > w) {
                worst = Some((j, viol));
            }
        }
        if let Some((j, _)) = worst {
            working.push(j);
            continue;
        }
        let nu_scale = T::one().max(vec_max_abs(&nu));
        let dtol = T::lit(1e-12) * nu_scale;
        let most_negative = nu
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < -dtol)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal));
        if let Some((r, _)) = most_negative {
            working.remove(r);
            continue;
        }
        let mut lam = DVector::zeros(q);
        for (r, &j) in working.iter().enumerate() {
            lam[j] = nu[r].max(T::zero());
        }
        return Some((z, lam));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn unconstrained_minimum() {
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2), v(&[-1.0, 0.0])).unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-9 && s.z[1].abs() < 1e-12);
    }

    #[test]
    fn single_active_constraint() {
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let p = QpProblem::new(DMatrix::identity(2, 2), v(&[-1.0, 0.0]), g, v(&[0.5])).unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 0.5).abs() < 1e-9);
        assert!(s.z[1].abs() < 1e-9);
        assert!((s.duals[0] - 0.5).abs() < 1e-9);
        assert!(s.polished);
    }

    #[test]
    fn detects_infeasible() {
        // z1 <= -1 and -z1 <= -1
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = QpProblem::new(DMatrix::identity(1, 1), v(&[0.0]), g, v(&[-1.0, -1.0])).unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn degenerate_duplicate_rows() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let p = QpProblem::new(DMatrix::identity(2, 2), v(&[-1.0, -1.0]), g, v(&[0.5, 0.5, 1.0])).unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 0.5).abs() < 1e-9 && (s.z[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let r = QpProblem::new(DMatrix::<f64>::identity(2, 2), v(&[0.0]), DMatrix::zeros(0, 1), v(&[]));
        assert!(r.is_err());
    }

    #[test]
    fn deterministic() {
        let (p, _) = random_problem(7, 6, 12);
        let a = solve(&p, &QpSettings::default());
        let b = solve(&p, &QpSettings::default());
        assert_eq!(a, b);
    }

    /// Random strictly convex QP whose feasible set contains a ball around a
    /// known point.
    fn random_problem(seed: u64, m: usize, q: usize) -> (QpProblem<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(m, m) * 0.1;
        let f = DVector::from_fn(m, |_, _| rng.random_range(-5.0..5.0));
        let g = DMatrix::from_fn(q, m, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::from_fn(m, |_, _| rng.random_range(-0.5..0.5));
        let bounds = &g * &z0 + DVector::from_fn(q, |_, _| rng.random_range(0.05..1.0));
        (QpProblem::new(h, f, g, bounds).unwrap(), z0)
    }

    /// Projected gradient on the dual `max -1/2 (f + G'l)' H^-1 (f + G'l) - h'l`,
    /// `l >= 0`, accelerated; primal recovered as `z = -H^-1 (f + G'l)`.
    fn dual_projected_gradient(p: &QpProblem<f64>, iters: usize) -> DVector<f64> {
        let hinv = p.hessian.clone().try_inverse().unwrap();
        let g = &p.constraints;
        let gram = g * &hinv * g.transpose();
        let lip = gram.symmetric_eigenvalues().amax();
        let q = p.n_constraints();
        let mut lam = DVector::zeros(q);
        let mut y = lam.clone();
        let mut t = 1.0f64;
        for _ in 0..iters {
            let z = -&hinv * (&p.linear + g.transpose() * &y);
            let grad = g * &z - &p.bounds;
            let next = (&y + grad / lip).map(|v| v.max(0.0));
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &lam) * ((t - 1.0) / t_next);
            lam = next;
            t = t_next;
        }
        -&hinv * (&p.linear + g.transpose() * &lam)
    }

    /// Plain projected gradient for box constraints.
    fn box_projected_gradient(h: &DMatrix<f64>, f: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, iters: usize) -> DVector<f64> {
        let lip = h.symmetric_eigenvalues().amax();
        let mut z = DVector::zeros(f.len());
        for _ in 0..iters {
            let grad = h * &z + f;
            z = (&z - grad / lip).zip_zip_map(lo, hi, |v, l, u| v.max(l).min(u));
        }
        z
    }

    #[test]
    fn matches_box_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 10;
        let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(m, m) * 0.5;
        let f = DVector::from_fn(m, |_, _| rng.random_range(-10.0..10.0));
        let lo = DVector::from_element(m, -0.5);
        let hi = DVector::from_element(m, 0.7);
        let mut g = DMatrix::zeros(2 * m, m);
        let mut bounds = DVector::zeros(2 * m);
        for i in 0..m {
            g[(i, i)] = 1.0;
            bounds[i] = hi[i];
            g[(m + i, i)] = -1.0;
            bounds[m + i] = -lo[i];
        }
        let p = QpProblem::new(h.clone(), f.clone(), g, bounds).unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        let oracle = box_projected_gradient(&h, &f, &lo, &hi, 1_000_000);
        assert!((p.objective(&s.z) - p.objective(&oracle)).abs() < 1e-6);
    }

    #[test]
    fn matches_dual_projected_gradient_oracle_on_halfspaces() {
        for seed in 0..3 {
            let (p, _) = random_problem(100 + seed, 10, 20);
            let s = solve(&p, &QpSettings::default());
            assert_eq!(s.status, QpStatus::Optimal);
            let oracle = dual_projected_gradient(&p, 1_000_000);
            let gap = (p.objective(&s.z) - p.objective(&oracle)).abs();
            assert!(gap < 1e-6, "seed {seed}: gap {gap}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn random_instances_are_certified(seed in 0u64..10_000) {
            let (p, _) = random_problem(seed, 6, 14);
            let s = solve(&p, &QpSettings::default());
            prop_assert_eq!(s.status, QpStatus::Optimal);
            prop_assert!(s.kkt_primal <= 1e-8);
            prop_assert!(s.kkt_stationarity <= 1e-6);
            prop_assert!(s.kkt_complementarity <= 1e-6);
            prop_assert!(s.duals.iter().all(|d| *d >= 0.0));
        }

        #[test]
        fn objective_scaling_leaves_minimizer(seed in 0u64..10_000, alpha in 0.01f64..100.0) {
            let (p, _) = random_problem(seed, 5, 10);
            let scaled = QpProblem::new(&p.hessian * alpha, &p.linear * alpha, p.constraints.clone(), p.bounds.clone()).unwrap();
            let a = solve(&p, &QpSettings::default());
            let b = solve(&scaled, &QpSettings::default());
            prop_assert!((a.z - b.z).amax() <= 1e-8);
        }

        #[test]
        fn tightening_never_lowers_optimum(seed in 0u64..10_000, shrink in 0.0f64..0.04) {
            let (p, _) = random_problem(seed, 5, 10);
            let tighter = QpProblem::new(p.hessian.clone(), p.linear.clone(), p.constraints.clone(), p.bounds.map(|h| h - shrink)).unwrap();
            let a = solve(&p, &QpSettings::default());
            let b = solve(&tighter, &QpSettings::default());
            prop_assert_eq!(b.status, QpStatus::Optimal);
            prop_assert!(b.objective >= a.objective - 1e-9);
        }
    }
}
