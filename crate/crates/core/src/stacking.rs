//! Stacking designs: per-level sample sizes from the power-function bound, the
//! `mu` search, rate estimation, the extrapolation stopping rule, and the
//! batch-sequential campaign that adds one fidelity level per stage.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{CostLedger, FidelityLadder, Simulator};
use crate::designs::{Domain, Sobol};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::multilevel::{LevelState, MultiLevelEmulator};
use crate::norms::{NormEstimator, NormKind};
use crate::rkhs::{fit_hyperparameters, Interpolant, LengthscaleSearch, DEFAULT_NU_GRID};

/// Schema tag written into campaign reports.
pub const REPORT_SCHEMA: &str = "stacking-design/report/v1";

/// Settings of a stacking campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingConfig {
    pub epsilon: f64,
    pub norm: NormKind,
    pub n0: usize,
    #[serde(rename = "T")]
    pub t: u32,
    pub xi0: f64,
    pub max_levels: usize,
    pub nu_grid: Vec<f64>,
    /// Nodes for norm estimates; defaults to 2000 (L2) or 4096 (L-infinity).
    pub mc_budget: Option<usize>,
    pub seed: u64,
    /// Known convergence rate; estimated from data when absent.
    pub alpha: Option<f64>,
    /// Relative closeness to `epsilon/2` at which the `mu` search stops.
    pub mu_rel_tol: f64,
    pub max_total_points: usize,
    /// Largest design at any single level; dense factorizations beyond this are impractical.
    #[serde(default = "default_max_level_points")]
    pub max_level_points: usize,
    pub domain: Domain,
    /// Lengthscale search region; derived from the domain when absent.
    pub search: Option<LengthscaleSearch>,
    /// How kernels of existing levels follow new data.
    #[serde(default)]
    pub kernel_update: KernelUpdate,
    /// Use the smoothness selected on the first level's pilot for every level.
    #[serde(default = "default_true")]
    pub shared_smoothness: bool,
}

fn default_true() -> bool {
    true
}

fn default_max_level_points() -> usize {
    4096
}

/// Kernel re-selection for levels that already have data beyond their pilot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelUpdate {
    /// Keep the kernel selected on the pilot design.
    Frozen,
    /// Keep the pilot smoothness, re-select lengthscales on all data.
    #[default]
    Lengthscales,
    /// Re-select smoothness and lengthscales on all data.
    Full,
}

impl StackingConfig {
    pub fn new(epsilon: f64, domain: Domain) -> Self {
        Self {
            epsilon,
            norm: NormKind::L2,
            n0: 10,
            t: 2,
            xi0: 1.0,
            max_levels: 10,
            nu_grid: DEFAULT_NU_GRID.to_vec(),
            mc_budget: None,
            seed: 0,
            alpha: None,
            mu_rel_tol: 0.01,
            max_total_points: 1_000_000,
            max_level_points: default_max_level_points(),
            domain,
            search: None,
            kernel_update: KernelUpdate::default(),
            shared_smoothness: true,
        }
    }

    /// The Currin setup: `eps = 1` in L2, `T = 2`, `xi0 = 16`, `n0 = 10` on the unit square.
    pub fn currin() -> Self {
        Self {
            xi0: 16.0,
            ..Self::new(1.0, Domain::unit(2))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if self.n0 < 1 {
            return Err(Error::invalid("n0", "must be at least 1"));
        }
        FidelityLadder::new(self.xi0, self.t)?;
        if self.max_levels < 1 {
            return Err(Error::invalid("max_levels", "must be at least 1"));
        }
        if self.nu_grid.is_empty() || self.nu_grid.iter().any(|nu| !(*nu > 0.0)) {
            return Err(Error::invalid("nu_grid", "needs at least one positive smoothness"));
        }
        if self.mc_budget == Some(0) {
            return Err(Error::invalid("mc_budget", "must be at least 1"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::invalid("alpha", format!("must be positive, got {a}")));
            }
        }
        if self.max_level_points == 0 || self.max_total_points == 0 {
            return Err(Error::invalid("max_level_points", "point caps must be positive"));
        }
        if !(self.mu_rel_tol > 0.0 && self.mu_rel_tol < 1.0) {
            return Err(Error::invalid("mu_rel_tol", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn ladder(&self) -> FidelityLadder {
        FidelityLadder {
            xi0: self.xi0,
            t: self.t,
        }
    }

    pub fn norm_budget(&self) -> usize {
        self.mc_budget.unwrap_or(match self.norm {
            NormKind::L2 => 2000,
            NormKind::Linf => 4096,
        })
    }

    pub fn norm_estimator(&self) -> Result<NormEstimator> {
        NormEstimator::new(self.norm, &self.domain, self.norm_budget(), self.seed)
    }

    /// Smallest admissible sample size at the newest level.
    pub fn pilot_size(&self) -> usize {
        self.n0.max(self.domain.dim() + 1).max(3)
    }

    fn search(&self) -> LengthscaleSearch {
        self.search
            .clone()
            .unwrap_or_else(|| LengthscaleSearch::for_domain(&self.domain))
    }
}

/// Per-level row of a stage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub xi: f64,
    pub cost: f64,
    pub n: usize,
    pub nu: f64,
    pub lengthscales: Vec<f64>,
    pub norm_estimate: f64,
}

/// Outcome of one stage `L` of the campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    #[serde(rename = "L")]
    pub stage: usize,
    pub levels: Vec<LevelReport>,
    /// Rate used in the stopping rule (estimated or prescribed).
    pub alpha_hat: Option<f64>,
    pub simulation_bound: Option<f64>,
    /// Emulation bound of the allocation chosen by the `mu` search.
    pub emulation_bound: f64,
    pub mu_star: f64,
    pub cumulative_cost: f64,
    pub converged: bool,
}

/// Writes stage rows with columns `L,l,xi_l,C_l,n_l,alpha_hat,sim_bound,emu_bound,cum_cost,converged`.
pub fn write_stages_csv<W: Write>(stages: &[StageReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "L", "l", "xi_l", "C_l", "n_l", "alpha_hat", "sim_bound", "emu_bound", "cum_cost",
        "converged",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in stages {
        for lv in &s.levels {
            w.write_record([
                s.stage.to_string(),
                lv.level.to_string(),
                lv.xi.to_string(),
                lv.cost.to_string(),
                lv.n.to_string(),
                opt(s.alpha_hat),
                opt(s.simulation_bound),
                s.emulation_bound.to_string(),
                s.cumulative_cost.to_string(),
                s.converged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `r_l = (||Theta_l^-1||^nu_l * norm_l / C_l)^(d/(nu_min + d))` for `(spec, cost, norm)` triples.
pub fn allocation_ratios(levels: &[(KernelSpec, f64, f64)], d: usize) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Ok(Vec::new());
    }
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    let nu_min = levels.iter().map(|(s, _, _)| s.nu).fold(f64::INFINITY, f64::min);
    let exponent = d as f64 / (nu_min + d as f64);
    levels
        .iter()
        .map(|(spec, cost, norm)| {
            if !(*cost > 0.0 && cost.is_finite()) {
                return Err(Error::invalid("cost", format!("must be positive, got {cost}")));
            }
            if !(*norm >= 0.0) {
                return Err(Error::invalid("norm_estimate", format!("must be nonnegative, got {norm}")));
            }
            let base = spec.inverse_lengthscale_norm().powf(spec.nu) * norm / cost;
            Ok(base.powf(exponent))
        })
        .collect()
}

/// Allocation selected by [`find_mu`].
#[derive(Debug, Clone, PartialEq)]
pub struct MuSearch {
    pub mu: f64,
    pub sizes: Vec<usize>,
    pub bound: f64,
}

/// Inputs of the `mu` search apart from the power-function norms.
#[derive(Debug, Clone, PartialEq)]
pub struct MuProblem<'a> {
    pub ratios: &'a [f64],
    pub norms: &'a [f64],
    /// Per-level lower bounds (points already evaluated).
    pub floors: &'a [usize],
    /// Lower bound on the newest level's size.
    pub min_top: usize,
    pub target: f64,
    pub rel_tol: f64,
    pub max_total_points: usize,
    pub max_level_points: usize,
}

impl MuProblem<'_> {
    /// `n_l = max(floor(mu r_l), floor_l)`, then `n_L >= min_top` and a
    /// non-increasing sweep from the top level down.
    pub fn realize(&self, mu: f64) -> Vec<usize> {
        let cap = self.max_total_points as f64 + 1.0;
        let mut n: Vec<usize> = self
            .ratios
            .iter()
            .zip(self.floors)
            .map(|(r, f)| ((mu * r).floor().min(cap) as usize).max(*f))
            .collect();
        if let Some(top) = n.last_mut() {
            *top = (*top).max(self.min_top);
        }
        for l in (0..n.len().saturating_sub(1)).rev() {
            n[l] = n[l].max(n[l + 1]);
        }
        n
    }
}

/// Smallest `mu` (to search tolerance) whose realized allocation satisfies
/// `sum_l sigma(l, n_l) * norm_l <= target`.
///
/// `sigma(l, n)` is the power-function norm of level `l` (0-based) on the first
/// `n` design points and must be non-increasing in `n`.
pub fn find_mu(
    problem: &MuProblem<'_>,
    mut sigma: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<MuSearch> {
    let levels = problem.ratios.len();
    if levels == 0 || problem.norms.len() != levels || problem.floors.len() != levels {
        return Err(Error::invalid("ratios", "ratios, norms and floors must have equal nonzero length"));
    }
    if problem.ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::invalid("ratios", "must be finite and nonnegative"));
    }
    let mut bound_of = |sizes: &[usize]| -> Result<f64> {
        let mut b = 0.0;
        for (l, (&n, &norm)) in sizes.iter().zip(problem.norms).enumerate() {
            if norm > 0.0 {
                b += sigma(l, n)? * norm;
            }
        }
        Ok(b)
    };
    let infeasible = |bound: f64, sizes: &[usize]| {
        let per_level = sizes.iter().any(|&n| n > problem.max_level_points);
        Error::BudgetInfeasible {
            bound,
            target: problem.target,
            cap: if per_level { problem.max_level_points } else { problem.max_total_points },
            scope: if per_level { "per level" } else { "in total" },
        }
    };

    let floor_sizes = problem.realize(0.0);
    let floor_bound = bound_of(&floor_sizes)?;
    if floor_bound <= problem.target {
        return Ok(MuSearch {
            mu: 0.0,
            sizes: floor_sizes,
            bound: floor_bound,
        });
    }
    let r_max = problem.ratios.iter().copied().fold(0.0, f64::max);
    if r_max <= 0.0 {
        return Err(infeasible(floor_bound, &floor_sizes));
    }

    let mut lo = 0.0;
    let mut hi = 1.0 / r_max;
    let (mut hi_sizes, mut hi_bound);
    let mut last_bound = floor_bound;
    loop {
        hi_sizes = problem.realize(hi);
        let too_big = hi_sizes.iter().sum::<usize>() > problem.max_total_points
            || hi_sizes.iter().any(|&n| n > problem.max_level_points);
        if too_big {
            return Err(infeasible(last_bound, &hi_sizes));
        }
        hi_bound = bound_of(&hi_sizes)?;
        log::debug!("mu search: mu={hi:e} sizes={hi_sizes:?} bound={hi_bound:e}");
        if hi_bound <= problem.target {
            break;
        }
        last_bound = hi_bound;
        lo = hi;
        hi *= 2.0;
    }

    let mut lo_sizes = problem.realize(lo);
    for _ in 0..200 {
        if hi_bound >= (1.0 - problem.rel_tol) * problem.target || hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let sizes = problem.realize(mid);
        if sizes == hi_sizes {
            hi = mid;
            continue;
        }
        if sizes == lo_sizes {
            lo = mid;
            continue;
        }
        let b = bound_of(&sizes)?;
        if b <= problem.target {
            hi = mid;
            hi_sizes = sizes;
            hi_bound = b;
        } else {
            lo = mid;
            lo_sizes = sizes;
        }
    }
    Ok(MuSearch {
        mu: hi,
        sizes: hi_sizes,
        bound: hi_bound,
    })
}

/// Average log-ratio rate estimate over levels `3..=L`.
///
/// `level_evals[l-1]` holds `f_l` on the nested design `X_l` (a prefix of
/// `X_{l-1}`), so `f_{l-1}` and `f_{l-2}` are known at every point of `X_l`.
pub fn estimate_alpha(level_evals: &[Vec<f64>], t: u32) -> Result<f64> {
    let big_l = level_evals.len();
    if big_l < 3 {
        return Err(Error::RateEstimate(format!("needs at least 3 levels, got {big_l}")));
    }
    if t < 2 {
        return Err(Error::invalid("T", format!("must be >= 2, got {t}")));
    }
    let log_t = (t as f64).ln();
    let mut total = 0.0;
    for l in 3..=big_l {
        let (f2, f1, f0) = (&level_evals[l - 3], &level_evals[l - 2], &level_evals[l - 1]);
        if f0.len() > f1.len() || f1.len() > f2.len() {
            return Err(Error::RateEstimate(format!("designs are not nested at level {l}")));
        }
        let mut sum = 0.0;
        let mut used = 0usize;
        for i in 0..f0.len() {
            let fine = f0[i] - f1[i];
            let coarse = f1[i] - f2[i];
            let tiny = |v: f64, f: f64| v.abs() < 1e-12 * (1.0 + f.abs());
            if tiny(fine, f0[i]) || tiny(coarse, f1[i]) {
                continue;
            }
            sum += (coarse / fine).abs().ln();
            used += 1;
        }
        if used == 0 {
            return Err(Error::RateEstimate(format!("every refinement at level {l} vanishes")));
        }
        total += sum / (used as f64 * log_t);
    }
    Ok(total / (big_l - 2) as f64)
}

/// `||P_L|| / (T^alpha - 1)`.
pub fn simulation_error_bound(top: &Interpolant, t: u32, alpha: f64, est: &NormEstimator) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
    }
    if t < 2 {
        return Err(Error::invalid("T", format!("must be >= 2, got {t}")));
    }
    Ok(top.prediction_norm(est) / ((t as f64).powf(alpha) - 1.0))
}

/// Which end of the fidelity ladder dominates the optimal budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    LowFidelityDominated,
    Balanced,
    HighFidelityDominated,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::LowFidelityDominated => "low-fidelity-dominated",
            Regime::Balanced => "balanced",
            Regime::HighFidelityDominated => "high-fidelity-dominated",
        })
    }
}

/// Cost growth `eps^exponent * |log eps|^log_power` as `eps -> 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRate {
    pub exponent: f64,
    pub log_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalAllocation {
    /// Unnormalized `n_l`.
    pub proportions: Vec<f64>,
    pub regime: Regime,
    pub multilevel_cost: CostRate,
    pub single_fidelity_exponent: f64,
}

/// Asymptotically optimal allocation `n_l ~ xi_l^((alpha + 2 beta) d / (2 (nu + d)))`
/// with its cost regime and the single-fidelity comparison rate.
pub fn theoretical_allocation(
    alpha: f64,
    beta: f64,
    nu: f64,
    d: usize,
    xi: &[f64],
) -> Result<TheoreticalAllocation> {
    for (name, v) in [("alpha", alpha), ("beta", beta), ("nu", nu)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(name, format!("must be positive, got {v}")));
        }
    }
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    if let Some(bad) = xi.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::invalid("xi", format!("must be positive, got {bad}")));
    }
    let df = d as f64;
    let power = (alpha + 2.0 * beta) * df / (2.0 * (nu + df));
    let proportions = xi.iter().map(|x| x.powf(power)).collect();
    // Compare alpha d against 2 beta nu rather than the two ratios.
    let gap = alpha * df - 2.0 * beta * nu;
    let scale = (alpha * df).abs().max(2.0 * beta * nu);
    let regime = if gap.abs() <= 1e-12 * scale {
        Regime::Balanced
    } else if gap > 0.0 {
        Regime::LowFidelityDominated
    } else {
        Regime::HighFidelityDominated
    };
    let base = -df / nu;
    let multilevel_cost = match regime {
        Regime::LowFidelityDominated => CostRate {
            exponent: base,
            log_power: 0.0,
        },
        Regime::Balanced => CostRate {
            exponent: base,
            log_power: 1.0 + df / nu,
        },
        Regime::HighFidelityDominated => CostRate {
            exponent: base + gap / (2.0 * alpha * (nu + df)),
            log_power: 0.0,
        },
    };
    Ok(TheoreticalAllocation {
        proportions,
        regime,
        multilevel_cost,
        single_fidelity_exponent: -beta / alpha - df / (2.0 * nu),
    })
}

/// Nested design stream: the Sobol' sequence without its origin, mapped to the domain.
#[derive(Debug, Clone)]
struct DesignStream {
    sobol: Sobol,
    domain: Domain,
    points: Vec<Vec<f64>>,
}

impl DesignStream {
    fn new(domain: &Domain) -> Result<Self> {
        Ok(Self {
            sobol: Sobol::new(domain.dim())?,
            domain: domain.clone(),
            points: Vec::new(),
        })
    }

    fn prefix(&mut self, n: usize) -> &[Vec<f64>] {
        while self.points.len() < n {
            let u = self.sobol.point(self.points.len() as u64 + 1);
            self.points.push(self.domain.map_unit(&u));
        }
        &self.points[..n]
    }
}

/// Power-function norms per `(level, n)`, cached for one set of stage kernels.
struct SigmaCache<'a> {
    specs: &'a [KernelSpec],
    est: &'a NormEstimator,
    values: HashMap<(usize, usize), f64>,
}

impl SigmaCache<'_> {
    fn get(&mut self, stream: &mut DesignStream, level: usize, n: usize) -> Result<f64> {
        if let Some(v) = self.values.get(&(level, n)) {
            return Ok(*v);
        }
        let design = stream.prefix(n);
        let interp = Interpolant::fit(&self.specs[level], design, &vec![0.0; n])?;
        let v = interp.power_function_norm(self.est);
        for (&(l, m), &w) in &self.values {
            let violated = (m < n && v > w * (1.0 + 1e-6) + 1e-9) || (m > n && w > v * (1.0 + 1e-6) + 1e-9);
            if l == level && violated {
                log::warn!(
                    "power-function norm of level {} not monotone: n={m} -> {w:e}, n={n} -> {v:e}",
                    level + 1
                );
            }
        }
        self.values.insert((level, n), v);
        Ok(v)
    }
}

/// A stacking campaign: accumulated simulator runs, stage kernels and reports.
///
/// Run with [`Campaign::run`]; a finished campaign can be continued at a
/// tighter tolerance with [`Campaign::resume`], which only adds points.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: StackingConfig,
    pub stages: Vec<StageReport>,
    pub ledger: CostLedger,
    pub emulator: Option<MultiLevelEmulator>,
    pub converged: bool,
    values: Vec<Vec<f64>>,
    specs: Vec<KernelSpec>,
    stream: DesignStream,
    est: NormEstimator,
}

impl Campaign {
    pub fn new(config: StackingConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stream: DesignStream::new(&config.domain)?,
            est: config.norm_estimator()?,
            config,
            stages: Vec::new(),
            ledger: CostLedger::default(),
            emulator: None,
            converged: false,
            values: Vec::new(),
            specs: Vec::new(),
        })
    }

    /// Simulator outputs `f_l` on `X_l`, one vector per level.
    pub fn level_values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Shared design stream prefix of length `n`.
    pub fn design(&mut self, n: usize) -> Vec<Vec<f64>> {
        self.stream.prefix(n).to_vec()
    }

    pub fn total_cost(&self) -> f64 {
        self.ledger.total_cost()
    }

    /// Runs stages until both error halves are below `epsilon/2`.
    pub fn run(&mut self, sim: &dyn Simulator) -> Result<()> {
        if sim.dim() != self.config.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.config.domain.dim(),
                got: sim.dim(),
            });
        }
        let mut big_l = self.values.len().max(1);
        loop {
            let max = self.config.max_levels.min(sim.max_level());
            if big_l > max {
                return Err(Error::MaxLevelsExceeded(max));
            }
            let report = self.stage(sim, big_l)?;
            let done = report.converged;
            log::info!(
                "stage L={big_l}: n={:?} emu={:.4} sim={:?} alpha={:?}",
                report.levels.iter().map(|l| l.n).collect::<Vec<_>>(),
                report.emulation_bound,
                report.simulation_bound,
                report.alpha_hat
            );
            self.stages.push(report);
            if done {
                self.converged = true;
                return Ok(());
            }
            big_l += 1;
        }
    }

    /// Continues at a new tolerance from the current number of levels.
    pub fn resume(&mut self, sim: &dyn Simulator, epsilon: f64) -> Result<()> {
        self.config.epsilon = epsilon;
        self.config.validate()?;
        self.converged = false;
        self.run(sim)
    }

    fn evaluate_missing(&mut self, sim: &dyn Simulator, stage: usize, sizes: &[usize]) -> Result<()> {
        let mut jobs = Vec::new();
        for (l, &n) in sizes.iter().enumerate() {
            let have = self.values.get(l).map_or(0, Vec::len);
            jobs.extend((have..n).map(|i| (l + 1, i)));
        }
        if jobs.is_empty() {
            return Ok(());
        }
        let n_max = sizes.iter().copied().max().unwrap_or(0);
        let points = self.stream.prefix(n_max).to_vec();
        let run = |&(level, i): &(usize, usize)| {
            sim.evaluate(level, &points[i]).map_err(|e| Error::Stage {
                stage,
                level,
                source: Box::new(e),
            })
        };
        let results: Vec<Result<_>> = if sim.concurrency_safe() {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        };
        for (&(level, i), r) in jobs.iter().zip(results) {
            let e = r?;
            if self.values.len() < level {
                self.values.push(Vec::new());
            }
            debug_assert_eq!(self.values[level - 1].len(), i);
            self.values[level - 1].push(e.value);
            self.ledger.record(level, i, e.cost);
        }
        Ok(())
    }

    fn refinement(&self, level: usize, n: usize) -> Vec<f64> {
        let fine = &self.values[level - 1][..n];
        if level == 1 {
            return fine.to_vec();
        }
        let coarse = &self.values[level - 2][..n];
        fine.iter().zip(coarse).map(|(a, b)| a - b).collect()
    }

    fn cost_of(&self, sim: &dyn Simulator, level: usize) -> Result<f64> {
        let c = sim
            .cost(level)
            .or_else(|| self.ledger.mean_cost(level))
            .ok_or_else(|| Error::invalid("costs", format!("no cost known for level {level}")))?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("cost", format!("level {level} cost must be positive, got {c}")));
        }
        Ok(c)
    }

    fn stage(&mut self, sim: &dyn Simulator, big_l: usize) -> Result<StageReport> {
        let cfg = self.config.clone();
        let d = cfg.domain.dim();
        let pilot = cfg.pilot_size();
        let ladder = cfg.ladder();

        if self.values.len() < big_l {
            let mut sizes: Vec<usize> = self.values.iter().map(Vec::len).collect();
            sizes.push(pilot);
            self.evaluate_missing(sim, big_l, &sizes)?;
        }

        // Smoothness is fixed on pilot data (shared across levels by default);
        // lengthscales follow `kernel_update`. Norms always use the latest data.
        let search = cfg.search();
        self.specs.truncate(big_l);
        let mut specs: Vec<KernelSpec> = Vec::with_capacity(big_l);
        let mut norms = Vec::with_capacity(big_l);
        let mut costs = Vec::with_capacity(big_l);
        for l in 1..=big_l {
            let n = self.values[l - 1].len();
            let z = self.refinement(l, n);
            let design = self.stream.prefix(n).to_vec();
            let grid = match specs.first() {
                Some(first) if cfg.shared_smoothness => vec![first.nu],
                _ => cfg.nu_grid.clone(),
            };
            let spec = match (self.specs.get(l - 1), cfg.kernel_update) {
                (Some(spec), KernelUpdate::Frozen) => spec.clone(),
                (Some(spec), KernelUpdate::Lengthscales) => {
                    fit_hyperparameters(&design, &z, &[spec.nu], &search)?.spec
                }
                _ => fit_hyperparameters(&design, &z, &grid, &search)?.spec,
            };
            let interp = Interpolant::fit(&spec, &design, &z)?;
            norms.push(interp.rkhs_norm_estimate());
            specs.push(spec);
            costs.push(self.cost_of(sim, l)?);
        }
        self.specs = specs.clone();

        let triples: Vec<(KernelSpec, f64, f64)> = specs
            .iter()
            .zip(&costs)
            .zip(&norms)
            .map(|((s, c), n)| (s.clone(), *c, *n))
            .collect();
        let ratios = allocation_ratios(&triples, d)?;
        log::debug!("stage L={big_l}: specs={specs:?} norms={norms:?} costs={costs:?} ratios={ratios:?}");
        let floors: Vec<usize> = self.values.iter().map(Vec::len).collect();
        let problem = MuProblem {
            ratios: &ratios,
            norms: &norms,
            floors: &floors,
            min_top: pilot,
            target: cfg.epsilon / 2.0,
            rel_tol: cfg.mu_rel_tol,
            max_total_points: cfg.max_total_points,
            max_level_points: cfg.max_level_points,
        };
        let mut cache = SigmaCache {
            specs: &specs,
            est: &self.est,
            values: HashMap::new(),
        };
        let stream = &mut self.stream;
        let mu = find_mu(&problem, |l, n| cache.get(stream, l, n))?;
        assert!(
            mu.bound <= cfg.epsilon / 2.0,
            "allocation bound {} exceeds epsilon/2 = {}",
            mu.bound,
            cfg.epsilon / 2.0
        );
        let sigma_at: Vec<f64> = (0..big_l)
            .map(|l| cache.get(&mut self.stream, l, mu.sizes[l]))
            .collect::<Result<_>>()?;

        self.evaluate_missing(sim, big_l, &mu.sizes)?;

        let mut levels = Vec::with_capacity(big_l);
        for l in 1..=big_l {
            let n = mu.sizes[l - 1];
            let z = self.refinement(l, n);
            let design = self.stream.prefix(n).to_vec();
            let interpolant = Interpolant::fit(&specs[l - 1], &design, &z)?;
            levels.push(LevelState {
                level: l,
                xi: ladder.xi(l),
                cost: costs[l - 1],
                values: self.values[l - 1].clone(),
                norm_estimate: interpolant.rkhs_norm_estimate(),
                sigma_norm: sigma_at[l - 1],
                interpolant,
            });
        }

        let alpha_ready = big_l >= 3 || (cfg.alpha.is_some() && big_l >= 2);
        let (alpha_hat, simulation_bound) = if alpha_ready {
            let alpha = match cfg.alpha {
                Some(a) => Some(a),
                None => match estimate_alpha(&self.values, cfg.t) {
                    Ok(a) if a > 0.0 && a.is_finite() => Some(a),
                    Ok(a) => {
                        log::warn!("rate estimate {a} is not positive; stopping rule skipped");
                        None
                    }
                    Err(e) => {
                        log::warn!("{e}; stopping rule skipped");
                        None
                    }
                },
            };
            let top = &levels[big_l - 1];
            // A top refinement that vanishes on its whole design makes the bound
            // zero for every rate, so the rule applies even without one.
            let vanished = top
                .z()
                .iter()
                .zip(&top.values)
                .all(|(z, f)| z.abs() < 1e-12 * (1.0 + f.abs()));
            let bound = match alpha {
                Some(a) => Some(simulation_error_bound(&top.interpolant, cfg.t, a, &self.est)?),
                None if vanished => Some(0.0),
                None => None,
            };
            (alpha, bound)
        } else {
            (None, None)
        };
        let converged = simulation_bound.is_some_and(|b| b <= cfg.epsilon / 2.0);

        let report = StageReport {
            stage: big_l,
            levels: levels
                .iter()
                .map(|lv| LevelReport {
                    level: lv.level,
                    xi: lv.xi,
                    cost: lv.cost,
                    n: lv.n(),
                    nu: lv.interpolant.spec().nu,
                    lengthscales: lv.interpolant.spec().lengthscales.clone(),
                    norm_estimate: norms[lv.level - 1],
                })
                .collect(),
            alpha_hat,
            simulation_bound,
            emulation_bound: mu.bound,
            mu_star: mu.mu,
            cumulative_cost: self.ledger.total_cost(),
            converged,
        };
        self.emulator = Some(MultiLevelEmulator::new(
            levels,
            ladder,
            cfg.norm,
            cfg.domain.clone(),
            alpha_hat,
        )?);
        Ok(report)
    }

    /// Serializable summary of the campaign.
    pub fn report(&self) -> CampaignReport {
        CampaignReport {
            schema: REPORT_SCHEMA.to_string(),
            config: self.config.clone(),
            stages: self.stages.clone(),
            converged: self.converged,
            final_level: self.values.len(),
            sample_sizes: self
                .emulator
                .as_ref()
                .map(MultiLevelEmulator::sample_sizes)
                .unwrap_or_default(),
            total_cost: self.ledger.total_cost(),
            simulator_calls: self.ledger.calls().len(),
        }
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema: String,
    pub config: StackingConfig,
    pub stages: Vec<StageReport>,
    pub converged: bool,
    pub final_level: usize,
    pub sample_sizes: Vec<usize>,
    pub total_cost: f64,
    pub simulator_calls: usize,
}

/// Runs a fresh campaign and returns the final emulator with its stage reports.
pub fn run_stacking(
    sim: &dyn Simulator,
    config: StackingConfig,
) -> Result<(MultiLevelEmulator, Vec<StageReport>)> {
    let mut campaign = Campaign::new(config)?;
    campaign.run(sim)?;
    let emulator = campaign.emulator.take().expect("a converged campaign has an emulator");
    Ok((emulator, campaign.stages))
}
