//! History of forward errors `e_{i|k}` and the `N x n_x` bank of scalar GPs
//! that predicts them one step ahead.
//!
//! Column `k` holds the errors measured after the MPC step at time `k`, for
//! horizon rows `i = 1..=N+1` (`e_{0|k}` is identically zero and never
//! stored). `GP_{i,n}` learns the map `e^{(n)}_{i+1|j} -> e^{(n)}_{i|j+1}`
//! from consecutive columns; both sides refer to the same absolute time
//! `j + i + 1`. At time `k` it is queried at `e^{(n)}_{i+1|k-1}` to predict
//! `e^{(n)}_{i|k}`.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::gp::{FitOptions, GpModel};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BankSettings {
    /// Maximum number of retained columns.
    pub window: usize,
    pub fit: FitOptions,
    /// Hyperparameters are re-optimized when `k % refit_every == 0`; other
    /// steps only re-condition on the new data.
    pub refit_every: usize,
    /// Standardize GP inputs to zero mean and unit variance.
    pub standardize_inputs: bool,
    /// Standard deviation reported where no GP could be trained.
    pub prior_std: f64,
    pub parallel: bool,
}

impl Default for BankSettings {
    fn default() -> Self {
        Self {
            window: 20,
            fit: FitOptions::default(),
            refit_every: 1,
            standardize_inputs: false,
            prior_std: 0.0,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Column<T> {
    k: usize,
    /// Row `r` is horizon index `r + 1`.
    errors: DMatrix<T>,
}

/// Affine input transform applied before a GP sees its inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
struct InputScale<T> {
    shift: T,
    scale: T,
}

impl<T: Real> InputScale<T> {
    fn identity() -> Self {
        Self { shift: T::zero(), scale: T::one() }
    }

    fn fit(xs: &[T]) -> Self {
        let n = T::from_usize(xs.len()).unwrap();
        let mean = xs.iter().fold(T::zero(), |a, v| a + *v) / n;
        let var = xs.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) / n;
        let sd = var.sqrt();
        Self { shift: mean, scale: if sd > T::zero() { sd } else { T::one() } }
    }

    fn apply(&self, v: T) -> T {
        (v - self.shift) / self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedGp<T> {
    pub gp: GpModel<T>,
    scale: InputScale<T>,
}

/// One-step-ahead error prediction for horizon rows `1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorPrediction<T> {
    /// Row `i - 1` holds `e_hat_{i|k}`.
    pub mean: DMatrix<T>,
    pub std: DMatrix<T>,
    /// Row-major `(i - 1) * n_x + n`; true where a GP produced the entry.
    pub fitted: Vec<bool>,
}

impl<T: Real> ErrorPrediction<T> {
    pub fn zeros(horizon: usize, n_x: usize) -> Self {
        Self::prior(horizon, n_x, T::zero())
    }

    pub fn prior(horizon: usize, n_x: usize, std: T) -> Self {
        Self {
            mean: DMatrix::zeros(horizon, n_x),
            std: DMatrix::from_element(horizon, n_x, std),
            fitted: vec![false; horizon * n_x],
        }
    }

    pub fn horizon(&self) -> usize {
        self.mean.nrows()
    }

    /// Mean for horizon index `i` (1-based).
    pub fn mean_at(&self, i: usize) -> DVector<T> {
        self.mean.row(i - 1).transpose()
    }

    pub fn std_at(&self, i: usize) -> DVector<T> {
        self.std.row(i - 1).transpose()
    }

    pub fn is_fitted(&self, i: usize, n: usize) -> bool {
        self.fitted[(i - 1) * self.mean.ncols() + n]
    }
}

#[derive(Clone, Debug)]
pub struct ErrorBank<T> {
    horizon: usize,
    n_x: usize,
    columns: VecDeque<Column<T>>,
    gps: Vec<Option<TrainedGp<T>>>,
    pub settings: BankSettings,
    /// Confidence multiplier used by consumers of the predicted std.
    pub zscore: T,
}

impl<T: Real> ErrorBank<T> {
    pub fn new(horizon: usize, n_x: usize, settings: BankSettings, zscore: T) -> Result<Self> {
        if horizon == 0 || n_x == 0 {
            return Err(Error::InvalidArgument("error bank needs N >= 1 and n_x >= 1".into()));
        }
        if settings.window < 2 {
            return Err(Error::InvalidArgument("error bank window must be at least 2".into()));
        }
        Ok(Self {
            horizon,
            n_x,
            columns: VecDeque::with_capacity(settings.window),
            gps: vec![None; horizon * n_x],
            settings,
            zscore,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn latest_k(&self) -> Option<usize> {
        self.columns.back().map(|c| c.k)
    }

    /// `N * n_x` slots, one per (horizon row, state component).
    pub fn gps(&self) -> &[Option<TrainedGp<T>>] {
        &self.gps
    }

    /// Recorded `e^{(n)}_{i|k}`; `i = 0` is identically zero.
    pub fn error(&self, k: usize, i: usize, n: usize) -> Option<T> {
        if i == 0 {
            return self.columns.iter().any(|c| c.k == k).then(T::zero);
        }
        self.columns
            .iter()
            .find(|c| c.k == k)
            .and_then(|c| (i <= self.horizon + 1).then(|| c.errors[(i - 1, n)]))
    }

    /// Stores `e_{i|k} = x_true[i-1] - x_pred[i-1]` for `i = 1..=N+1`.
    pub fn record_errors(&mut self, k: usize, x_true: &[DVector<T>], x_pred: &[DVector<T>]) -> Result<()> {
        let rows = self.horizon + 1;
        if x_true.len() != rows {
            return Err(Error::Dimension { context: "true horizon states", expected: rows, got: x_true.len() });
        }
        if x_pred.len() != rows {
            return Err(Error::Dimension { context: "predicted horizon states", expected: rows, got: x_pred.len() });
        }
        let mut errors = DMatrix::zeros(rows, self.n_x);
        for (r, (t, p)) in x_true.iter().zip(x_pred).enumerate() {
            if t.len() != self.n_x || p.len() != self.n_x {
                return Err(Error::Dimension { context: "horizon state", expected: self.n_x, got: t.len() });
            }
            errors.row_mut(r).copy_from(&(t - p).transpose());
        }
        self.record_column(k, errors)
    }

    /// Stores an already-differenced column (`(N+1) x n_x`, row `r` is `i = r+1`).
    pub fn record_column(&mut self, k: usize, errors: DMatrix<T>) -> Result<()> {
        if errors.shape() != (self.horizon + 1, self.n_x) {
            return Err(Error::Dimension { context: "error column", expected: self.horizon + 1, got: errors.nrows() });
        }
        if let Some(last) = self.latest_k() {
            if k <= last {
                return Err(Error::InvalidArgument(format!("column {k} recorded after column {last}")));
            }
        }
        self.columns.push_back(Column { k, errors });
        while self.columns.len() > self.settings.window {
            self.columns.pop_front();
        }
        Ok(())
    }

    /// Training pairs for `GP_{i,n}` (`i` 1-based in `1..=N`, `n` 0-based):
    /// inputs `e_{i+1|j}`, targets `e_{i|j+1}` over consecutive retained
    /// columns `j, j+1`.
    pub fn build_training(&self, i: usize, n: usize) -> Result<(Vec<T>, Vec<T>)> {
        if i == 0 || i > self.horizon || n >= self.n_x {
            return Err(Error::InvalidArgument(format!("no GP for (i = {i}, n = {n})")));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (prev, next) in self.columns.iter().zip(self.columns.iter().skip(1)) {
            if next.k != prev.k + 1 {
                continue;
            }
            // same absolute time on both sides of the pair
            debug_assert_eq!(prev.k + (i + 1), next.k + i);
            inputs.push(prev.errors[(i, n)]);
            targets.push(next.errors[(i - 1, n)]);
        }
        if inputs.is_empty() {
            return Err(Error::InsufficientHistory(format!(
                "{} column(s) recorded, no consecutive pair",
                self.columns.len()
            )));
        }
        Ok((inputs, targets))
    }

    /// Predicts `e_hat_{i|k}` for `i = 1..=N` from column `k - 1`.
    ///
    /// Falls back to zero mean and `prior_std` where no GP can be trained
    /// (fewer than two columns, missing column `k - 1`, or a failed fit).
    pub fn predict_errors(&mut self, k: usize) -> ErrorPrediction<T> {
        let prior = T::lit(self.settings.prior_std);
        let mut out = ErrorPrediction::prior(self.horizon, self.n_x, prior);
        let Some(latest) = self.columns.back() else { return out };
        if k == 0 || latest.k != k - 1 || self.columns.len() < 2 {
            return out;
        }
        let query_col = latest.errors.clone();
        let refit = self.settings.refit_every <= 1 || k % self.settings.refit_every == 0;

        let tasks: Vec<usize> = (0..self.horizon * self.n_x).collect();
        let work = |idx: usize| -> (usize, Result<(TrainedGp<T>, T, T)>) {
            let i = idx / self.n_x + 1;
            let n = idx % self.n_x;
            let result = self.train_one(i, n, idx, refit).map(|trained| {
                let query = trained.scale.apply(query_col[(i, n)]);
                let post = trained.gp.predict(query);
                (trained, post.mean, post.std())
            });
            (idx, result)
        };
        let results: Vec<_> = if self.settings.parallel {
            tasks.into_par_iter().map(work).collect()
        } else {
            tasks.into_iter().map(work).collect()
        };

        for (idx, result) in results {
            let (r, c) = (idx / self.n_x, idx % self.n_x);
            match result {
                Ok((trained, mean, std)) => {
                    out.mean[(r, c)] = mean;
                    out.std[(r, c)] = std;
                    out.fitted[idx] = true;
                    self.gps[idx] = Some(trained);
                }
                Err(e) => {
                    log::warn!("GP ({}, {}) at k = {k} fell back to prior: {e}", r + 1, c);
                }
            }
        }
        out
    }

    fn train_one(&self, i: usize, n: usize, idx: usize, refit: bool) -> Result<TrainedGp<T>> {
        let (inputs, targets) = self.build_training(i, n)?;
        let scale = if self.settings.standardize_inputs {
            InputScale::fit(&inputs)
        } else {
            InputScale::identity()
        };
        let inputs: Vec<T> = inputs.into_iter().map(|v| scale.apply(v)).collect();
        let cached = self.gps[idx]
            .as_ref()
            .filter(|t| t.gp.kernel.variant == self.settings.fit.variant);
        let gp = match cached {
            Some(prev) if !refit => prev.gp.recondition(inputs, targets)?,
            _ => {
                let mut fit = self.settings.fit.clone();
                fit.seed = mix_seed(fit.seed, idx as u64);
                GpModel::fit(inputs, targets, &fit)?
            }
        };
        Ok(TrainedGp { gp, scale })
    }

    /// Retained columns as `k,i,n,error` rows, `i = 1..=N+1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,i,n,error")?;
        for col in &self.columns {
            for r in 0..col.errors.nrows() {
                for n in 0..self.n_x {
                    writeln!(w, "{},{},{},{:.16e}", col.k, r + 1, n, col.errors[(r, n)])?;
                }
            }
        }
        Ok(())
    }
}

/// splitmix64 of `seed ^ salt`.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = (seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
