//! Simulators: the evaluation interface, analytic multi-fidelity families with
//! known limits, the call ledger, and a JSON-lines subprocess bridge.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::designs::Domain;
use crate::error::{Error, Result};

/// One simulator run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub cost: f64,
}

/// A multi-fidelity simulator `f_l(x)`, `l = 1..=max_level`.
///
/// Implementations must be deterministic: repeated calls with the same
/// level and point return the same value.
pub trait Simulator: Send + Sync {
    fn dim(&self) -> usize;

    fn max_level(&self) -> usize;

    /// Cost per run at `level` if known before running it.
    fn cost(&self, level: usize) -> Option<f64>;

    fn evaluate(&self, level: usize, x: &[f64]) -> Result<Evaluation>;

    /// Whether `evaluate` may be called from several threads at once.
    fn concurrency_safe(&self) -> bool {
        false
    }

    /// The limiting response `f_inf(x)` when it is known analytically.
    fn limit(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn name(&self) -> String {
        "simulator".into()
    }
}

/// Per-run cost as a function of level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// `C_l = first * ratio^(l-1)`.
    Geometric { first: f64, ratio: f64 },
    /// `C_l = scale * xi_l^(-beta)`.
    PowerOfXi { scale: f64, beta: f64 },
    /// `C_l = costs[l-1]`.
    Explicit(Vec<f64>),
}

impl CostModel {
    pub fn cost(&self, level: usize, xi: f64) -> Option<f64> {
        match self {
            CostModel::Geometric { first, ratio } => Some(first * ratio.powi(level as i32 - 1)),
            CostModel::PowerOfXi { scale, beta } => Some(scale * xi.powf(-beta)),
            CostModel::Explicit(v) => v.get(level.checked_sub(1)?).copied(),
        }
    }
}

/// Geometric fidelity ladder `xi_l = xi0 * T^(-l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityLadder {
    pub xi0: f64,
    pub t: u32,
}

impl FidelityLadder {
    pub fn new(xi0: f64, t: u32) -> Result<Self> {
        if !(xi0 > 0.0 && xi0.is_finite()) {
            return Err(Error::invalid("xi0", format!("must be positive, got {xi0}")));
        }
        if t < 2 {
            return Err(Error::invalid("T", format!("must be an integer >= 2, got {t}")));
        }
        Ok(Self { xi0, t })
    }

    pub fn xi(&self, level: usize) -> f64 {
        self.xi0 / (self.t as f64).powi(level as i32)
    }
}

type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `f_l(x) = f_inf(x) + xi_l^alpha g(x)` on a box, with a cost model.
#[derive(Clone)]
pub struct SyntheticFamily {
    name: String,
    domain: Domain,
    limit: ScalarField,
    discrepancy: ScalarField,
    pub alpha: f64,
    pub ladder: FidelityLadder,
    pub costs: CostModel,
    pub max_level: usize,
}

impl std::fmt::Debug for SyntheticFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticFamily")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("alpha", &self.alpha)
            .field("ladder", &self.ladder)
            .field("costs", &self.costs)
            .finish()
    }
}

impl SyntheticFamily {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        limit: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        discrepancy: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        alpha: f64,
        ladder: FidelityLadder,
        costs: CostModel,
        max_level: usize,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
        }
        Ok(Self {
            name: name.into(),
            domain,
            limit: Arc::new(limit),
            discrepancy: Arc::new(discrepancy),
            alpha,
            ladder,
            costs,
            max_level,
        })
    }

    /// The two-dimensional multi-fidelity Currin family on `[0,1]^2` with
    /// `alpha = 1`, `xi_l = 16 * 2^-l` and `C_l = 4^l`.
    pub fn currin() -> Self {
        Self::currin_with(1.0, 16.0, 2)
    }

    pub fn currin_with(alpha: f64, xi0: f64, t: u32) -> Self {
        Self::new(
            "currin",
            Domain::unit(2),
            |x| currin_limit(x[0], x[1]),
            currin_discrepancy,
            alpha,
            FidelityLadder { xi0, t },
            CostModel::Geometric {
                first: 4.0,
                ratio: 4.0,
            },
            30,
        )
        .expect("valid Currin parameters")
    }

    /// One-dimensional family on `[-1,1]` whose limit is the closed-form
    /// integral response `2(e^x + 1)/(x^2 + pi^2)`, with a smooth discrepancy
    /// of exact order `alpha = 2` in `xi_l = 0.4 * 2^-l` and `C_l = xi_l^-1`.
    pub fn poisson_like() -> Self {
        Self::new(
            "poissonlike",
            Domain::new(vec![-1.0], vec![1.0]).expect("valid interval"),
            |x| poisson_limit(x[0]),
            |x| (1.0 + x[0]) * (2.0 * x[0]).cos() - 0.5,
            2.0,
            FidelityLadder { xi0: 0.4, t: 2 },
            CostModel::PowerOfXi {
                scale: 1.0,
                beta: 1.0,
            },
            30,
        )
        .expect("valid Poisson-like parameters")
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn xi(&self, level: usize) -> f64 {
        self.ladder.xi(level)
    }

    pub fn level_value(&self, level: usize, x: &[f64]) -> f64 {
        (self.limit)(x) + self.xi(level).powf(self.alpha) * (self.discrepancy)(x)
    }

    pub fn limit_value(&self, x: &[f64]) -> f64 {
        (self.limit)(x)
    }

    pub fn discrepancy_value(&self, x: &[f64]) -> f64 {
        (self.discrepancy)(x)
    }
}

impl Simulator for SyntheticFamily {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn max_level(&self) -> usize {
        self.max_level
    }

    fn cost(&self, level: usize) -> Option<f64> {
        self.costs.cost(level, self.xi(level))
    }

    fn evaluate(&self, level: usize, x: &[f64]) -> Result<Evaluation> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if level == 0 || level > self.max_level {
            return Err(Error::invalid("level", format!("{level} outside 1..={}", self.max_level)));
        }
        let cost = self
            .cost(level)
            .ok_or_else(|| Error::invalid("costs", format!("no cost for level {level}")))?;
        Ok(Evaluation {
            value: self.level_value(level, x),
            cost,
        })
    }

    fn concurrency_safe(&self) -> bool {
        true
    }

    fn limit(&self, x: &[f64]) -> Option<f64> {
        Some(self.limit_value(x))
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

/// Currin's test function on `[0,1]^2`; the exponential bracket is taken as 1 at `x2 = 0`.
pub fn currin_limit(x1: f64, x2: f64) -> f64 {
    let bracket = if x2 <= 0.0 {
        1.0
    } else {
        1.0 - (-1.0 / (2.0 * x2)).exp()
    };
    let num = ((2300.0 * x1 + 1900.0) * x1 + 2092.0) * x1 + 60.0;
    let den = ((100.0 * x1 + 500.0) * x1 + 4.0) * x1 + 20.0;
    bracket * num / den
}

/// `exp(-1.4 x1) cos(3.5 pi x2)`
pub fn currin_discrepancy(x: &[f64]) -> f64 {
    (-1.4 * x[0]).exp() * (3.5 * std::f64::consts::PI * x[1]).cos()
}

/// `f_l` of the Currin family at the default ladder.
pub fn currin_level(level: usize, x: &[f64], alpha: f64, xi0: f64, t: u32) -> f64 {
    let xi = xi0 / (t as f64).powi(level as i32);
    currin_limit(x[0], x[1]) + xi.powf(alpha) * currin_discrepancy(x)
}

pub fn poisson_limit(x: f64) -> f64 {
    use std::f64::consts::PI;
    2.0 * (x.exp() + 1.0) / (x * x + PI * PI)
}

/// One logged simulator call, keyed by level and index in the design stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub level: usize,
    pub index: usize,
    pub cost: f64,
}

/// Append-only log of simulator calls.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    calls: Vec<CallRecord>,
}

impl CostLedger {
    pub fn record(&mut self, level: usize, index: usize, cost: f64) {
        self.calls.push(CallRecord { level, index, cost });
    }

    pub fn calls(&self) -> &[CallRecord] {
        &self.calls
    }

    pub fn total_cost(&self) -> f64 {
        self.calls.iter().map(|c| c.cost).sum()
    }

    pub fn runs_at(&self, level: usize) -> usize {
        self.calls.iter().filter(|c| c.level == level).count()
    }

    /// Mean observed cost per run at `level`.
    pub fn mean_cost(&self, level: usize) -> Option<f64> {
        let (n, s) = self
            .calls
            .iter()
            .filter(|c| c.level == level)
            .fold((0usize, 0.0), |(n, s), c| (n + 1, s + c.cost));
        (n > 0).then(|| s / n as f64)
    }

    /// True when no `(level, index)` pair was evaluated twice.
    pub fn is_duplicate_free(&self) -> bool {
        let mut keys: Vec<(usize, usize)> = self.calls.iter().map(|c| (c.level, c.index)).collect();
        keys.sort_unstable();
        keys.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Debug, Serialize)]
struct Request<'a> {
    level: usize,
    xi: f64,
    x: &'a [f64],
}

#[derive(Debug, Deserialize)]
struct Response {
    y: f64,
    cost: f64,
}

/// Launch and protocol settings for [`SubprocessSimulator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub dim: usize,
    pub ladder: FidelityLadder,
    pub max_level: usize,
    /// Known per-run costs; when absent the engine uses observed costs.
    pub costs: Option<CostModel>,
    pub timeout: Duration,
    /// Restarts allowed after a crash before giving up.
    pub max_retries: usize,
}

impl SubprocessConfig {
    pub fn new(command: Vec<String>, dim: usize, ladder: FidelityLadder) -> Self {
        Self {
            command,
            dim,
            ladder,
            max_level: 10,
            costs: None,
            timeout: Duration::from_secs(600),
            max_retries: 2,
        }
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::invalid("command", "empty command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::SimulatorCrash(format!("failed to start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Attempt {
    Done(Evaluation),
    Crashed(String),
}

/// External simulator speaking one JSON object per line on stdin/stdout.
///
/// Requests are `{"level": l, "xi": xi_l, "x": [..]}` and responses
/// `{"y": value, "cost": cost}`, strictly one response per request in order.
/// A crashed process is restarted up to `max_retries` times per request.
pub struct SubprocessSimulator {
    config: SubprocessConfig,
    worker: Mutex<Option<Worker>>,
}

impl SubprocessSimulator {
    pub fn new(config: SubprocessConfig) -> Result<Self> {
        if config.command.is_empty() {
            return Err(Error::invalid("command", "empty command"));
        }
        Ok(Self {
            config,
            worker: Mutex::new(None),
        })
    }

    fn attempt(&self, slot: &mut Option<Worker>, level: usize, x: &[f64]) -> Result<Attempt> {
        if slot.is_none() {
            *slot = Some(Worker::spawn(&self.config.command)?);
        }
        let worker = slot.as_mut().expect("worker just spawned");
        let request = serde_json::to_string(&Request {
            level,
            xi: self.config.ladder.xi(level),
            x,
        })?;
        if let Err(e) = writeln!(worker.stdin, "{request}").and_then(|_| worker.stdin.flush()) {
            return Ok(Attempt::Crashed(format!("write failed: {e}")));
        }
        match worker.lines.recv_timeout(self.config.timeout) {
            Ok(Ok(line)) => {
                let trimmed = line.trim();
                let resp: Response =
                    serde_json::from_str(trimmed).map_err(|e| Error::Protocol {
                        message: e.to_string(),
                        line: trimmed.to_string(),
                    })?;
                if !resp.y.is_finite() || !(resp.cost >= 0.0) {
                    return Err(Error::Protocol {
                        message: "non-finite value or negative cost".into(),
                        line: trimmed.to_string(),
                    });
                }
                Ok(Attempt::Done(Evaluation {
                    value: resp.y,
                    cost: resp.cost,
                }))
            }
            Ok(Err(e)) => Ok(Attempt::Crashed(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Disconnected) => {
                Ok(Attempt::Crashed("process closed its output".into()))
            }
            Err(RecvTimeoutError::Timeout) => {
                if let Some(w) = slot.take() {
                    w.kill();
                }
                Err(Error::Timeout(self.config.timeout))
            }
        }
    }
}

impl Simulator for SubprocessSimulator {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_level(&self) -> usize {
        self.config.max_level
    }

    fn cost(&self, level: usize) -> Option<f64> {
        self.config
            .costs
            .as_ref()
            .and_then(|c| c.cost(level, self.config.ladder.xi(level)))
    }

    fn evaluate(&self, level: usize, x: &[f64]) -> Result<Evaluation> {
        if x.len() != self.config.dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.dim,
                got: x.len(),
            });
        }
        let mut slot = self.worker.lock().unwrap_or_else(|p| p.into_inner());
        let mut last = String::new();
        for _ in 0..=self.config.max_retries {
            match self.attempt(&mut slot, level, x) {
                Ok(Attempt::Done(e)) => return Ok(e),
                Ok(Attempt::Crashed(why)) => {
                    log::warn!("simulator process crashed ({why}); restarting");
                    if let Some(w) = slot.take() {
                        w.kill();
                    }
                    last = why;
                }
                Err(e) => {
                    if matches!(e, Error::Protocol { .. }) {
                        if let Some(w) = slot.take() {
                            w.kill();
                        }
                    }
                    return Err(e);
                }
            }
        }
        Err(Error::SimulatorCrash(format!(
            "{} attempts failed, last: {last}",
            self.config.max_retries + 1
        )))
    }

    fn name(&self) -> String {
        format!("cmd:{}", self.config.command.join(" "))
    }
}

impl Drop for SubprocessSimulator {
    fn drop(&mut self) {
        if let Some(w) = self.worker.get_mut().ok().and_then(Option::take) {
            w.kill();
        }
    }
}

/// Builds a subprocess simulator (`f(x)` from a command line).
pub fn subprocess_simulator(config: SubprocessConfig) -> Result<SubprocessSimulator> {
    SubprocessSimulator::new(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn currin_limit_examples() {
        assert_eq!(currin_limit(0.0, 0.0), 3.0);
        assert_relative_eq!(
            currin_limit(0.0, 0.5),
            (1.0 - (-1.0f64).exp()) * 3.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(currin_limit(0.0, 0.5), 1.89636, epsilon = 1e-5);
        assert_relative_eq!(currin_limit(1.0, 0.0), 6352.0 / 624.0, max_relative = 1e-14);
        assert_relative_eq!(currin_limit(1.0, 0.0), 10.17949, epsilon = 1e-5);
    }

    #[test]
    fn currin_level_examples() {
        assert_eq!(currin_level(1, &[0.0, 0.0], 1.0, 16.0, 2), 11.0);
        let x = [0.3, 1.0 / 7.0];
        for l in 1..6 {
            assert!((currin_level(l, &x, 1.0, 16.0, 2) - currin_limit(x[0], x[1])).abs() < 1e-13);
        }
        let y = [0.6, 0.2];
        let gap = |l| (currin_level(l, &y, 1.0, 16.0, 2) - currin_limit(y[0], y[1])).abs();
        assert!(gap(20) < 1e-4 && gap(20) < gap(10));
    }

    #[test]
    fn currin_costs_and_ladder() {
        let c = SyntheticFamily::currin();
        assert_eq!(c.xi(1), 8.0);
        assert_eq!(c.xi(4), 1.0);
        assert_eq!(c.cost(1), Some(4.0));
        assert_eq!(c.cost(4), Some(256.0));
        let e = c.evaluate(1, &[0.0, 0.0]).unwrap();
        assert_eq!(e, Evaluation { value: 11.0, cost: 4.0 });
        assert!(c.evaluate(0, &[0.0, 0.0]).is_err());
        assert!(c.evaluate(1, &[0.0]).is_err());
    }

    #[test]
    fn synthetic_error_model_is_exact() {
        let c = SyntheticFamily::currin();
        let grid: Vec<[f64; 2]> = (0..100)
            .flat_map(|i| (0..100).map(move |j| [i as f64 / 99.0, j as f64 / 99.0]))
            .collect();
        let sup_g = grid.iter().map(|x| currin_discrepancy(x).abs()).fold(0.0, f64::max);
        for l in 1..5 {
            let sup = grid
                .iter()
                .map(|x| (c.level_value(l, x) - c.limit_value(x)).abs())
                .fold(0.0, f64::max);
            assert_relative_eq!(sup, sup_g * c.xi(l), max_relative = 1e-10);
        }
    }

    #[test]
    fn poisson_like_family() {
        let p = SyntheticFamily::poisson_like();
        assert_relative_eq!(p.xi(1), 0.2);
        assert!(p.cost(2).unwrap() > p.cost(1).unwrap());
        let x = [0.3];
        let r = (p.level_value(2, &x) - p.level_value(1, &x)) / (p.level_value(3, &x) - p.level_value(2, &x));
        assert_relative_eq!(r, 4.0, max_relative = 1e-9);
        assert_relative_eq!(poisson_limit(0.0), 4.0 / (std::f64::consts::PI.powi(2)), max_relative = 1e-15);
    }

    #[test]
    fn ledger_accounting() {
        let mut l = CostLedger::default();
        l.record(1, 0, 4.0);
        l.record(1, 1, 4.0);
        l.record(2, 0, 16.0);
        assert_eq!(l.total_cost(), 24.0);
        assert_eq!(l.runs_at(1), 2);
        assert_eq!(l.mean_cost(2), Some(16.0));
        assert_eq!(l.mean_cost(3), None);
        assert!(l.is_duplicate_free());
        l.record(2, 0, 16.0);
        assert!(!l.is_duplicate_free());
    }

    #[test]
    fn cost_models() {
        assert_eq!(CostModel::Explicit(vec![1.0, 5.0]).cost(2, 0.1), Some(5.0));
        assert_eq!(CostModel::Explicit(vec![1.0]).cost(3, 0.1), None);
        assert_eq!(CostModel::PowerOfXi { scale: 2.0, beta: 1.0 }.cost(1, 0.5), Some(4.0));
        assert!(FidelityLadder::new(1.0, 1).is_err());
        assert!(FidelityLadder::new(0.0, 2).is_err());
    }
}
