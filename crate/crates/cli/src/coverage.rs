//! Empirical coverage of the predicted error intervals `e_hat_mean +- z e_hat_std`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// One `(k, i, n)` entry of `horizon_snapshots.csv` as far as coverage needs it.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRow {
    pub k: usize,
    pub i: usize,
    pub n: usize,
    pub e: f64,
    /// `None` where no GP prediction existed.
    pub e_hat_mean: Option<f64>,
    pub e_hat_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub eligible: usize,
    pub inside: usize,
    /// `inside / eligible`; null when nothing was eligible.
    pub coverage: Option<f64>,
}

impl Counts {
    fn new(eligible: usize, inside: usize) -> Self {
        let coverage = (eligible > 0).then(|| inside as f64 / eligible as f64);
        Self { eligible, inside, coverage }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateCoverage {
    pub state: usize,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub zscore: f64,
    pub from_k: usize,
    pub states: Vec<StateCoverage>,
    pub overall: Counts,
}

/// Rows with a prediction and `e_hat_std > 0` at `k >= from_k` are eligible.
pub fn coverage_report(rows: &[SnapshotRow], zscore: f64, from_k: usize) -> CoverageReport {
    let n_states = rows.iter().map(|r| r.n + 1).max().unwrap_or(0);
    let mut eligible = vec![0usize; n_states];
    let mut inside = vec![0usize; n_states];
    for r in rows.iter().filter(|r| r.k >= from_k) {
        let (Some(mean), Some(std)) = (r.e_hat_mean, r.e_hat_std) else { continue };
        if !(std > 0.0) {
            continue;
        }
        eligible[r.n] += 1;
        if (r.e - mean).abs() <= zscore * std {
            inside[r.n] += 1;
        }
    }
    let states = (0..n_states)
        .map(|n| StateCoverage { state: n, counts: Counts::new(eligible[n], inside[n]) })
        .collect();
    CoverageReport {
        zscore,
        from_k,
        states,
        overall: Counts::new(eligible.iter().sum(), inside.iter().sum()),
    }
}

fn parse_opt(field: &str) -> Result<Option<f64>, CliError> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| CliError::Input(format!("bad number `{field}`")))
}

/// Reads the coverage-relevant columns of `horizon_snapshots.csv`.
pub fn read_snapshot_rows(path: &Path) -> Result<Vec<SnapshotRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("{}: missing column `{name}`", path.display())))
    };
    let (ck, ci, cn, ce, cm, cs) = (col("k")?, col("i")?, col("n")?, col("e")?, col("e_hat_mean")?, col("e_hat_std")?);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let int = |c: usize| rec[c].parse::<usize>().map_err(|_| CliError::Input(format!("bad index `{}`", &rec[c])));
        rows.push(SnapshotRow {
            k: int(ck)?,
            i: int(ci)?,
            n: int(cn)?,
            e: parse_opt(&rec[ce])?.ok_or_else(|| CliError::Input("empty error column".into()))?,
            e_hat_mean: parse_opt(&rec[cm])?,
            e_hat_std: parse_opt(&rec[cs])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn row(n: usize, e: f64, mean: f64, std: f64) -> SnapshotRow {
        SnapshotRow { k: 10, i: 1, n, e, e_hat_mean: Some(mean), e_hat_std: Some(std) }
    }

    #[test]
    fn exact_predictions_cover_everything() {
        let rows: Vec<_> = (0..20).map(|j| row(j % 2, j as f64, j as f64, 0.1)).collect();
        let rep = coverage_report(&rows, 2.576, 0);
        assert_eq!(rep.overall.coverage, Some(1.0));
        assert_eq!(rep.states[0].counts.eligible, 10);
    }

    #[test]
    fn zero_std_and_missing_rows_excluded() {
        let rows = vec![
            row(0, 1.0, 0.0, 0.0),
            row(0, 0.0, 0.0, 1.0),
            SnapshotRow { k: 10, i: 0, n: 0, e: 0.0, e_hat_mean: None, e_hat_std: None },
            SnapshotRow { k: 2, i: 1, n: 0, e: 5.0, e_hat_mean: Some(0.0), e_hat_std: Some(1.0) },
        ];
        let rep = coverage_report(&rows, 2.576, 5);
        assert_eq!(rep.overall, Counts { eligible: 1, inside: 1, coverage: Some(1.0) });
    }

    #[test]
    fn empty_set_reports_null() {
        let rep = coverage_report(&[row(0, 0.0, 0.0, 0.0)], 2.576, 0);
        assert_eq!(rep.overall.eligible, 0);
        assert_eq!(rep.overall.coverage, None);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"coverage\":null"));
    }

    #[test]
    fn gaussian_errors_hit_nominal_coverage() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<_> = (0..10_000)
            .map(|j| {
                let sigma = 0.5 + (j % 7) as f64 * 0.3;
                let mean = (j as f64 * 0.01).sin();
                row(0, mean + sigma * normal.sample(&mut rng), mean, sigma)
            })
            .collect();
        let c = coverage_report(&rows, 2.576, 0).overall.coverage.unwrap();
        assert!((c - 0.99).abs() <= 0.01, "{c}");
    }
}
