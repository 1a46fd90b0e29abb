//! Campaign bookkeeping: cost accounting, resumption, pinned rates and
//! determinism.

use std::sync::atomic::{AtomicUsize, Ordering};

use stacking_design::benchmarks::{Evaluation, Simulator, SyntheticFamily};
use stacking_design::designs::Domain;
use stacking_design::error::{Error, Result};
use stacking_design::stacking::{write_stages_csv, Campaign, StackingConfig};

fn poisson_config(eps: f64) -> StackingConfig {
    let mut cfg = StackingConfig::new(eps, Domain::new(vec![-1.0], vec![1.0]).unwrap());
    cfg.xi0 = 0.4;
    cfg
}

#[test]
fn ledger_total_equals_sum_of_runs_times_costs() {
    let fam = SyntheticFamily::poisson_like();
    let mut c = Campaign::new(poisson_config(1e-4)).unwrap();
    c.run(&fam).unwrap();
    let em = c.emulator.as_ref().unwrap();
    let expected: f64 = em.levels.iter().map(|lv| lv.n() as f64 * lv.cost).sum();
    assert!((c.total_cost() - expected).abs() <= 1e-9 * expected);
    for lv in &em.levels {
        assert_eq!(c.ledger.runs_at(lv.level), lv.n());
    }
    assert!(c.ledger.is_duplicate_free());
    assert_eq!(c.stages.last().unwrap().cumulative_cost, c.total_cost());
}

#[test]
fn currin_ledger_matches_geometric_costs() {
    let fam = SyntheticFamily::currin();
    let cfg = StackingConfig {
        epsilon: 4.0,
        ..StackingConfig::currin()
    };
    let mut c = Campaign::new(cfg).unwrap();
    c.run(&fam).unwrap();
    let sizes = c.emulator.as_ref().unwrap().sample_sizes();
    let expected: f64 = sizes.iter().enumerate().map(|(i, &n)| n as f64 * 4f64.powi(i as i32 + 1)).sum();
    assert_eq!(c.total_cost(), expected);
}

#[test]
fn resume_only_adds_points() {
    let fam = SyntheticFamily::poisson_like();
    let mut c = Campaign::new(poisson_config(1e-4)).unwrap();
    c.run(&fam).unwrap();
    let before = c.emulator.as_ref().unwrap().sample_sizes();
    let values_before = c.level_values().to_vec();
    let calls_before = c.ledger.calls().len();

    c.resume(&fam, 2e-5).unwrap();
    let after = c.emulator.as_ref().unwrap().sample_sizes();
    assert!(after.len() >= before.len());
    for (b, a) in before.iter().zip(&after) {
        assert!(a >= b);
    }
    for (old, new) in values_before.iter().zip(c.level_values()) {
        assert_eq!(&new[..old.len()], old.as_slice());
    }
    assert!(c.ledger.calls().len() > calls_before);
    assert!(c.ledger.is_duplicate_free());
    assert!(c.converged);
    let last = c.stages.last().unwrap();
    assert!(last.emulation_bound <= 1e-5 && last.simulation_bound.unwrap() <= 1e-5);
}

#[test]
fn resume_rejects_bad_tolerance() {
    let fam = SyntheticFamily::poisson_like();
    let mut c = Campaign::new(poisson_config(1e-3)).unwrap();
    c.run(&fam).unwrap();
    assert!(matches!(c.resume(&fam, 0.0), Err(Error::InvalidParameter { .. })));
}

#[test]
fn pinned_rate_allows_stopping_at_two_levels() {
    let fam = SyntheticFamily::poisson_like();
    let mut cfg = poisson_config(0.05);
    cfg.alpha = Some(2.0);
    let mut c = Campaign::new(cfg).unwrap();
    c.run(&fam).unwrap();
    let first_with_bound = c.stages.iter().find(|s| s.simulation_bound.is_some()).unwrap();
    assert_eq!(first_with_bound.stage, 2);
    assert_eq!(first_with_bound.alpha_hat, Some(2.0));
}

#[test]
fn estimated_rate_needs_three_levels() {
    let fam = SyntheticFamily::poisson_like();
    let mut c = Campaign::new(poisson_config(1e-3)).unwrap();
    c.run(&fam).unwrap();
    assert!(c.stages.len() >= 3);
    assert!(c.stages[..2].iter().all(|s| s.alpha_hat.is_none() && s.simulation_bound.is_none()));
    assert!((c.stages.last().unwrap().alpha_hat.unwrap() - 2.0).abs() < 1e-9);
}

#[test]
fn every_stage_meets_the_emulation_target() {
    let fam = SyntheticFamily::poisson_like();
    for eps in [1e-2, 1e-3, 1e-4] {
        let mut c = Campaign::new(poisson_config(eps)).unwrap();
        c.run(&fam).unwrap();
        assert!(c.stages.iter().all(|s| s.emulation_bound <= eps / 2.0));
    }
}

#[test]
fn identical_runs_give_identical_reports() {
    let fam = SyntheticFamily::currin();
    let csv = || {
        let cfg = StackingConfig {
            epsilon: 2.0,
            ..StackingConfig::currin()
        };
        let mut c = Campaign::new(cfg).unwrap();
        c.run(&fam).unwrap();
        let mut buf = Vec::new();
        write_stages_csv(&c.stages, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(), csv());
}

/// Wraps a family and fails after a fixed number of calls.
struct Flaky {
    inner: SyntheticFamily,
    budget: usize,
    calls: AtomicUsize,
}

impl Simulator for Flaky {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn max_level(&self) -> usize {
        self.inner.max_level()
    }
    fn cost(&self, level: usize) -> Option<f64> {
        self.inner.cost(level)
    }
    fn evaluate(&self, level: usize, x: &[f64]) -> Result<Evaluation> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(Error::SimulatorCrash("out of licences".into()));
        }
        self.inner.evaluate(level, x)
    }
}

#[test]
fn simulator_failure_carries_stage_context() {
    let sim = Flaky {
        inner: SyntheticFamily::poisson_like(),
        budget: 25,
        calls: AtomicUsize::new(0),
    };
    let mut c = Campaign::new(poisson_config(1e-4)).unwrap();
    let err = c.run(&sim).unwrap_err();
    assert!(err.is_simulator_failure());
    match err {
        Error::Stage { stage, level, .. } => assert!(stage >= 1 && level >= 1 && level <= stage),
        other => panic!("expected stage context, got {other}"),
    }
}

#[test]
fn level_limit_is_reported() {
    let fam = SyntheticFamily::currin();
    let cfg = StackingConfig {
        max_levels: 2,
        ..StackingConfig::currin()
    };
    let mut c = Campaign::new(cfg).unwrap();
    assert!(matches!(c.run(&fam), Err(Error::MaxLevelsExceeded(2))));
    assert_eq!(c.stages.len(), 2);
    assert!(!c.converged);
}

#[test]
fn dimension_mismatch_is_caught_up_front() {
    let mut c = Campaign::new(StackingConfig::currin()).unwrap();
    let err = c.run(&SyntheticFamily::poisson_like()).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 1 }));
}
