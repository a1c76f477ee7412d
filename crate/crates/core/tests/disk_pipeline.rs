use lpvgp::model::make_unbalanced_disk;
use lpvgp::mpc::run_loop;
use lpvgp::{
    BankSettings, ErrorBankF64, FitOptions, Interval, MpcConfigF64, QpStatus, Reference, RunStatus,
    StabilizedModelF64, StabilizedModelF32,
};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

fn disk() -> (StabilizedModelF64, MpcConfigF64) {
    let lpv = make_unbalanced_disk::<f64>().discretize_euler(0.01).unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 0.1]));
    let r = DMatrix::from_element(1, 1, 0.5);
    let sm = StabilizedModelF64::synthesize_lqr(&lpv, &q, &r, &DVector::from_element(1, 1.0)).unwrap();
    let xb = vec![Interval::symmetric(2.0 * PI), Interval::symmetric(10.0 * PI)];
    let ub = vec![Interval::symmetric(10.0)];
    let cfg = MpcConfigF64::new(&sm, 10, q, r, xb, ub);
    (sm, cfg)
}

#[test]
fn short_corrected_run_stays_feasible() {
    let (sm, cfg) = disk();
    let settings = BankSettings {
        fit: FitOptions { starts: 2, iterations: 60, ..FitOptions::default() },
        ..BankSettings::default()
    };
    let mut bank = ErrorBankF64::new(cfg.horizon, 2, settings, cfg.zscore).unwrap();
    let x0 = DVector::from_vec(vec![-2.0 * PI, 0.0]);
    let reference = Reference::Constant(DVector::zeros(2));
    let traj = run_loop(&sm, &cfg, Some(&mut bank), &x0, &reference, 30).unwrap();

    assert_eq!(traj.status, RunStatus::Completed);
    assert_eq!(traj.states.len(), 31);
    assert!(bank.n_columns() > 2);
    for rec in &traj.records {
        assert_eq!(rec.qp.status, QpStatus::Optimal);
        assert!(rec.errors[0].iter().all(|e| *e == 0.0));
        assert!(rec.u_applied[0].abs() <= 10.0 + 1e-9);
        let fitted = (0..2).any(|n| rec.e_hat.is_fitted(1, n));
        assert_eq!(fitted, rec.k >= 2, "k = {}", rec.k);
    }
    for x in &traj.states {
        assert!(x[0].abs() <= 2.0 * PI + 1e-9 && x[1].abs() <= 10.0 * PI + 1e-9);
    }
    // heading toward the origin
    assert!(traj.states[30].norm() < traj.states[0].norm());
}

#[test]
fn uncorrected_run_matches_empty_bank() {
    let (sm, mut cfg) = disk();
    let x0 = DVector::from_vec(vec![-1.0, 0.0]);
    let reference = Reference::Constant(DVector::zeros(2));
    cfg.error_correction = false;
    let plain = run_loop(&sm, &cfg, None, &x0, &reference, 15).unwrap();
    let mut bank = ErrorBankF64::new(cfg.horizon, 2, BankSettings::default(), cfg.zscore).unwrap();
    let with_bank = run_loop(&sm, &cfg, Some(&mut bank), &x0, &reference, 15).unwrap();
    assert_eq!(plain.states, with_bank.states);
}

#[test]
fn single_precision_stabilizer_agrees() {
    let lpv = make_unbalanced_disk::<f32>().discretize_euler(0.01).unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![8.0f32, 0.1]));
    let r = DMatrix::from_element(1, 1, 0.5f32);
    let sm = StabilizedModelF32::synthesize_lqr(&lpv, &q, &r, &DVector::from_element(1, 1.0)).unwrap();
    let (wide, _) = disk();
    for j in 0..2 {
        let rel = (sm.k[(0, j)] as f64 - wide.k[(0, j)]).abs() / wide.k[(0, j)].abs();
        assert!(rel < 1e-3, "{rel}");
    }
}
