//! Scalar Gaussian-process regression with exact posterior and
//! marginal-likelihood hyperparameter fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Real, Result};

/// Lower limit on the observation-noise variance.
pub const NOISE_FLOOR: f64 = 1e-10;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelVariant {
    /// `sigma2 exp(-r^2 / (2 l^2))`
    SquaredExponential,
    /// Squared exponential times `exp(-2 sin^2(pi r / period) / l_p^2)`.
    SePeriodic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel<T> {
    pub variant: KernelVariant,
    pub sigma2: T,
    pub lengthscale: T,
    /// Only read by [`KernelVariant::SePeriodic`].
    pub period: T,
    /// Only read by [`KernelVariant::SePeriodic`].
    pub periodic_lengthscale: T,
}

impl<T: Real> Kernel<T> {
    pub fn squared_exponential(sigma2: T, lengthscale: T) -> Self {
        Self {
            variant: KernelVariant::SquaredExponential,
            sigma2,
            lengthscale,
            period: T::one(),
            periodic_lengthscale: T::one(),
        }
    }

    pub fn se_periodic(sigma2: T, lengthscale: T, period: T, periodic_lengthscale: T) -> Self {
        Self { variant: KernelVariant::SePeriodic, sigma2, lengthscale, period, periodic_lengthscale }
    }

    pub fn eval(&self, t: T, t2: T) -> T {
        let r = t - t2;
        let se = (-(r * r) / (T::lit(2.0) * self.lengthscale * self.lengthscale)).exp();
        let base = self.sigma2 * se;
        match self.variant {
            KernelVariant::SquaredExponential => base,
            KernelVariant::SePeriodic => {
                let s = (T::pi() * r / self.period).sin();
                base * (-(T::lit(2.0) * s * s)
                    / (self.periodic_lengthscale * self.periodic_lengthscale))
                    .exp()
            }
        }
    }

    /// Log-space hyperparameters `[log sigma2, log l, (log l_p)]`.
    fn log_params(&self) -> Vec<T> {
        let mut v = vec![self.sigma2.ln(), self.lengthscale.ln()];
        if self.variant == KernelVariant::SePeriodic {
            v.push(self.periodic_lengthscale.ln());
        }
        v
    }
}

/// Boxes on the log-hyperparameters searched by [`GpModel::fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperBounds {
    pub log_sigma2: (f64, f64),
    pub log_lengthscale: (f64, f64),
    pub log_noise2: (f64, f64),
    pub log_periodic_lengthscale: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            log_sigma2: (-8.0, 4.0),
            log_lengthscale: (-4.0, 3.0),
            log_noise2: (-12.0, 0.0),
            log_periodic_lengthscale: (-4.0, 3.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub variant: KernelVariant,
    pub bounds: HyperBounds,
    /// Multi-start count (Latin hypercube over the log box).
    pub starts: usize,
    /// Gradient-ascent iterations per start.
    pub iterations: usize,
    pub seed: u64,
    /// Fixed period of the periodic factor.
    pub period: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            variant: KernelVariant::SquaredExponential,
            bounds: HyperBounds::default(),
            starts: 8,
            iterations: 200,
            seed: 0,
            period: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Real> Posterior<T> {
    pub fn std(&self) -> T {
        self.variance.sqrt()
    }
}

/// Conditioned scalar GP.
#[derive(Clone, Debug, PartialEq)]
pub struct GpModel<T> {
    pub kernel: Kernel<T>,
    pub noise2: T,
    pub x: Vec<T>,
    pub y: Vec<T>,
    /// Lower Cholesky factor of `K(X, X) + noise2 I` (+ jitter, if needed).
    pub chol: DMatrix<T>,
    /// `(K + noise2 I)^{-1} Y`
    pub alpha: DVector<T>,
    pub jitter: T,
    pub log_marginal_likelihood: T,
}

fn gram<T: Real>(kernel: &Kernel<T>, x: &[T]) -> DMatrix<T> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(x[i], x[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `k + (noise2 + jitter) I`, escalating jitter from 1e-10 to 1e-6.
fn factor_with_jitter<T: Real>(k: &DMatrix<T>, noise2: T) -> Result<(Cholesky<T, Dyn>, T)> {
    let n = k.nrows();
    let mut jitter = T::zero();
    loop {
        let mut kt = k.clone();
        for i in 0..n {
            kt[(i, i)] += noise2 + jitter;
        }
        if let Some(ch) = Cholesky::new(kt) {
            return Ok((ch, jitter));
        }
        jitter = if jitter == T::zero() { T::lit(JITTER_START) } else { jitter * T::lit(10.0) };
        if jitter > T::lit(JITTER_MAX) * T::lit(1.0 + 1e-9) {
            return Err(Error::Cholesky);
        }
    }
}

fn check_data<T: Real>(x: &[T], y: &[T]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InsufficientHistory("GP needs at least one training point".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension { context: "GP targets", expected: x.len(), got: y.len() });
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("GP training data"));
    }
    Ok(())
}

fn kernel_from_log<T: Real>(theta: &[T], variant: KernelVariant, period: T) -> (Kernel<T>, T) {
    let sigma2 = theta[0].exp();
    let lengthscale = theta[1].exp();
    let noise2 = theta[2].exp().max(T::lit(NOISE_FLOOR));
    let kernel = match variant {
        KernelVariant::SquaredExponential => Kernel::squared_exponential(sigma2, lengthscale),
        KernelVariant::SePeriodic => Kernel::se_periodic(sigma2, lengthscale, period, theta[3].exp()),
    };
    (kernel, noise2)
}

/// Log-hyperparameter layout: `[log sigma2, log l, log noise2, (log l_p)]`.
pub fn n_hyper(variant: KernelVariant) -> usize {
    match variant {
        KernelVariant::SquaredExponential => 3,
        KernelVariant::SePeriodic => 4,
    }
}

/// Marginal log-likelihood `-1/2 y'K^-1 y - 1/2 log|K| - n/2 log 2pi` and its
/// gradient with respect to the log-hyperparameters.
pub fn log_marginal_likelihood<T: Real>(
    theta: &[T],
    x: &[T],
    y: &[T],
    variant: KernelVariant,
    period: T,
) -> Result<(T, Vec<T>)> {
    check_data(x, y)?;
    if theta.len() != n_hyper(variant) {
        return Err(Error::Dimension {
            context: "GP hyperparameters",
            expected: n_hyper(variant),
            got: theta.len(),
        });
    }
    let (kernel, noise2) = kernel_from_log(theta, variant, period);
    let n = x.len();
    let kf = gram(&kernel, x);
    let (ch, _) = factor_with_jitter(&kf, noise2)?;
    let yv = DVector::from_column_slice(y);
    let alpha = ch.solve(&yv);
    let l = ch.l_dirty();
    let log_det_half = (0..n).fold(T::zero(), |acc, i| acc + l[(i, i)].ln());
    let nf = T::from_usize(n).unwrap();
    let value = -T::lit(0.5) * yv.dot(&alpha) - log_det_half - nf * T::lit(0.5) * T::two_pi().ln();

    // W = alpha alpha' - K^-1; dL/dtheta_j = 1/2 tr(W dK/dtheta_j)
    let w = &alpha * alpha.transpose() - ch.inverse();
    let half = T::lit(0.5);
    let mut g_sigma = T::zero();
    let mut g_len = T::zero();
    let mut g_per = T::zero();
    let l2 = kernel.lengthscale * kernel.lengthscale;
    let lp2 = kernel.periodic_lengthscale * kernel.periodic_lengthscale;
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            g_sigma += wk;
            let r = x[i] - x[j];
            g_len += wk * r * r / l2;
            if variant == KernelVariant::SePeriodic {
                let s = (T::pi() * r / period).sin();
                g_per += wk * T::lit(4.0) * s * s / lp2;
            }
        }
    }
    let g_noise = noise2 * (0..n).fold(T::zero(), |acc, i| acc + w[(i, i)]);
    let mut grad = vec![half * g_sigma, half * g_len, half * g_noise];
    if variant == KernelVariant::SePeriodic {
        grad.push(half * g_per);
    }
    Ok((value, grad))
}

fn log_box(options: &FitOptions) -> Vec<(f64, f64)> {
    let b = &options.bounds;
    let mut v = vec![b.log_sigma2, b.log_lengthscale, b.log_noise2];
    if options.variant == KernelVariant::SePeriodic {
        v.push(b.log_periodic_lengthscale);
    }
    v
}

/// `starts` points of a Latin hypercube over the box.
fn latin_hypercube(bounds: &[(f64, f64)], starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; bounds.len()]; starts];
    for (d, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..starts).collect();
        strata.shuffle(&mut rng);
        for (p, s) in points.iter_mut().zip(strata) {
            let u: f64 = rng.random();
            p[d] = lo + (hi - lo) * (s as f64 + u) / starts as f64;
        }
    }
    points
}

/// Projected gradient ascent with Armijo backtracking inside the box.
fn ascend<T: Real>(
    start: Vec<T>,
    bounds: &[(T, T)],
    iterations: usize,
    eval: &dyn Fn(&[T]) -> Option<(T, Vec<T>)>,
) -> Option<(Vec<T>, T)> {
    let project = |theta: &mut [T]| {
        for (v, (lo, hi)) in theta.iter_mut().zip(bounds) {
            *v = v.max(*lo).min(*hi);
        }
    };
    let mut theta = start;
    project(&mut theta);
    let (mut value, mut grad) = eval(&theta)?;
    let mut step = T::one();
    let armijo = T::lit(1e-4);
    for _ in 0..iterations {
        let mut accepted = None;
        let mut t = step;
        for _ in 0..40 {
            let mut cand: Vec<T> = theta.iter().zip(&grad).map(|(a, g)| *a + t * *g).collect();
            project(&mut cand);
            let ascent: T = cand
                .iter()
                .zip(&theta)
                .zip(&grad)
                .fold(T::zero(), |acc, ((c, a), g)| acc + (*c - *a) * *g);
            if ascent <= T::zero() {
                break;
            }
            if let Some((v, g)) = eval(&cand) {
                if v >= value + armijo * ascent {
                    accepted = Some((cand, v, g));
                    break;
                }
            }
            t *= T::lit(0.5);
        }
        let Some((cand, v, g)) = accepted else { break };
        let moved = cand
            .iter()
            .zip(&theta)
            .fold(T::zero(), |acc, (c, a)| acc.max((*c - *a).abs()));
        let gain = v - value;
        theta = cand;
        value = v;
        grad = g;
        step = (t * T::lit(2.0)).min(T::lit(10.0));
        if moved < T::lit(1e-6) || gain < T::lit(1e-9) * (T::one() + value.abs()) {
            break;
        }
    }
    Some((theta, value))
}

impl<T: Real> GpModel<T> {
    /// Conditions on data with fixed hyperparameters.
    pub fn condition(kernel: Kernel<T>, noise2: T, x: Vec<T>, y: Vec<T>) -> Result<Self> {
        check_data(&x, &y)?;
        let noise2 = noise2.max(T::lit(NOISE_FLOOR));
        let kf = gram(&kernel, &x);
        let (ch, jitter) = factor_with_jitter(&kf, noise2)?;
        let yv = DVector::from_column_slice(&y);
        let alpha = ch.solve(&yv);
        let chol = ch.l();
        let n = x.len();
        let log_det_half = (0..n).fold(T::zero(), |acc, i| acc + chol[(i, i)].ln());
        let log_marginal_likelihood = -T::lit(0.5) * yv.dot(&alpha)
            - log_det_half
            - T::from_usize(n).unwrap() * T::lit(0.5) * T::two_pi().ln();
        Ok(Self { kernel, noise2, x, y, chol, alpha, jitter, log_marginal_likelihood })
    }

    /// Maximizes the marginal likelihood over the log box, then conditions.
    pub fn fit(x: Vec<T>, y: Vec<T>, options: &FitOptions) -> Result<Self> {
        check_data(&x, &y)?;
        let bounds = log_box(options);
        let tbounds: Vec<(T, T)> = bounds.iter().map(|(a, b)| (T::lit(*a), T::lit(*b))).collect();
        let period = T::lit(options.period);
        let eval = |theta: &[T]| log_marginal_likelihood(theta, &x, &y, options.variant, period).ok();

        let mut best: Option<(Vec<T>, T)> = None;
        for start in latin_hypercube(&bounds, options.starts.max(1), options.seed) {
            let start: Vec<T> = start.into_iter().map(T::lit).collect();
            if let Some((theta, value)) = ascend(start, &tbounds, options.iterations, &eval) {
                if best.as_ref().map_or(true, |(_, b)| value > *b) {
                    best = Some((theta, value));
                }
            }
        }
        let (theta, _) = best.ok_or(Error::Cholesky)?;
        let (kernel, noise2) = kernel_from_log(&theta, options.variant, period);
        Self::condition(kernel, noise2, x, y)
    }

    /// Re-conditions on new data keeping the current hyperparameters.
    pub fn recondition(&self, x: Vec<T>, y: Vec<T>) -> Result<Self> {
        Self::condition(self.kernel, self.noise2, x, y)
    }

    /// Log-space hyperparameters in the [`log_marginal_likelihood`] layout.
    pub fn log_hyperparameters(&self) -> Vec<T> {
        let mut p = self.kernel.log_params();
        p.insert(2, self.noise2.ln());
        p
    }

    pub fn predict(&self, t_star: T) -> Posterior<T> {
        let (mean, var) = self.predict_raw(t_star);
        Posterior { mean, variance: var.max(T::zero()) }
    }

    /// Mean and unclamped variance.
    pub fn predict_raw(&self, t_star: T) -> (T, T) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| self.kernel.eval(t_star, *xi)));
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        (mean, self.kernel.eval(t_star, t_star) - v.dot(&v))
    }
}
