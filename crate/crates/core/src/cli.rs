//! Command-line driver behind the `stacking` binary.
//!
//! ```text
//! stacking run     --sim currin --epsilon 1 --out out/
//! stacking sweep   --sim currin --epsilons 4,2,1 --out sweep/
//! stacking predict --emulator out/emulator.json --points pts.csv
//! ```
//!
//! Exit codes: `0` success, `1` other failure, `2` configuration or schema
//! error, `3` no convergence within the level limit, `4` simulator failure,
//! `5` emulation target out of reach within the point budget.
//!
//! `--sim cmd:PROGRAM ARGS..` runs an external simulator speaking one JSON
//! object per line: requests `{"level": l, "xi": xi_l, "x": [..]}` on stdin,
//! responses `{"y": value, "cost": cost}` on stdout, in order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::benchmarks::{subprocess_simulator, FidelityLadder, Simulator, SubprocessConfig, SyntheticFamily};
use crate::designs::{Domain, Sobol};
use crate::error::{Error, Result};
use crate::multilevel::MultiLevelEmulator;
use crate::norms::{NormEstimator, NormKind};
use crate::stacking::{write_stages_csv, Campaign, StackingConfig, StageReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MAX_LEVELS: i32 = 3;
pub const EXIT_SIMULATOR: i32 = 4;
pub const EXIT_BUDGET: i32 = 5;

/// Exit code for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_simulator_failure() => EXIT_SIMULATOR,
        Error::Stage { source, .. } => exit_code(source),
        Error::MaxLevelsExceeded(_) => EXIT_MAX_LEVELS,
        Error::BudgetInfeasible { .. } => EXIT_BUDGET,
        Error::InvalidParameter { .. }
        | Error::DimensionMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::UnsupportedDimension(_)
        | Error::Schema(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "stacking", version, about = "Stacking designs for multi-fidelity emulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one campaign and write report.json, stages.csv and emulator.json.
    Run(ExperimentArgs),
    /// Run a fresh campaign per tolerance and write sweep.csv.
    Sweep(ExperimentArgs),
    /// Predict with a saved emulator at points read from CSV.
    Predict(PredictArgs),
    /// Line-protocol test double used by the test suite.
    #[command(hide = true)]
    TestSim(TestSimArgs),
}

/// Experiment flags; each overrides the matching field of `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// JSON file with any of the experiment fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    /// Tolerances for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub epsilons: Option<Vec<f64>>,
    /// `l2` or `linf`.
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long = "T")]
    pub t: Option<u32>,
    #[arg(long)]
    pub xi0: Option<f64>,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub max_levels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `currin`, `poissonlike` or `cmd:PROGRAM ARGS..`.
    #[arg(long)]
    pub sim: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Known convergence rate; estimated when absent.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mc_budget: Option<usize>,
    /// Lower domain bounds for external simulators, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub upper: Option<Vec<f64>>,
    /// Per-run timeout in seconds for external simulators.
    #[arg(long)]
    pub timeout: Option<f64>,
}

/// Experiment description as read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sim: Option<String>,
    pub epsilon: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub norm: Option<NormKind>,
    #[serde(rename = "T")]
    pub t: Option<u32>,
    pub xi0: Option<f64>,
    pub n0: Option<usize>,
    pub max_levels: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub mc_budget: Option<usize>,
    pub nu_grid: Option<Vec<f64>>,
    pub max_level_points: Option<usize>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub timeout: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    /// Config file contents (if any) with command-line flags applied on top.
    pub fn from_args(args: &ExperimentArgs) -> Result<Self> {
        let mut c = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if args.$f.is_some() { c.$f = args.$f.clone(); } )* };
        }
        take!(sim, epsilon, epsilons, t, xi0, n0, max_levels, seed, alpha, mc_budget, lower, upper, out, timeout);
        if let Some(n) = &args.norm {
            c.norm = Some(n.parse()?);
        }
        Ok(c)
    }

    fn sim_name(&self) -> &str {
        self.sim.as_deref().unwrap_or("currin")
    }

    /// Campaign settings at tolerance `epsilon`, with family defaults for the built-ins.
    pub fn stacking_config(&self, epsilon: f64) -> Result<StackingConfig> {
        let mut cfg = match self.sim_name() {
            "currin" => StackingConfig::currin(),
            "poissonlike" => {
                let mut c = StackingConfig::new(1.0, Domain::new(vec![-1.0], vec![1.0])?);
                c.xi0 = 0.4;
                c
            }
            s if s.starts_with("cmd:") => {
                let domain = match (&self.lower, &self.upper) {
                    (Some(l), Some(u)) => Domain::new(l.clone(), u.clone())?,
                    (None, None) => Domain::unit(1),
                    _ => return Err(Error::invalid("domain", "give both --lower and --upper")),
                };
                StackingConfig::new(1.0, domain)
            }
            other => return Err(Error::invalid("sim", format!("unknown simulator `{other}`"))),
        };
        cfg.epsilon = epsilon;
        if let Some(v) = self.norm {
            cfg.norm = v;
        }
        if let Some(v) = self.t {
            cfg.t = v;
        }
        if let Some(v) = self.xi0 {
            cfg.xi0 = v;
        }
        if let Some(v) = self.n0 {
            cfg.n0 = v;
        }
        if let Some(v) = self.max_levels {
            cfg.max_levels = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.nu_grid {
            cfg.nu_grid = v.clone();
        }
        if let Some(v) = self.max_level_points {
            cfg.max_level_points = v;
        }
        cfg.alpha = self.alpha.or(cfg.alpha);
        cfg.mc_budget = self.mc_budget.or(cfg.mc_budget);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The selected simulator, with its ladder matched to `cfg`.
    pub fn simulator(&self, cfg: &StackingConfig) -> Result<Box<dyn Simulator>> {
        let ladder = FidelityLadder::new(cfg.xi0, cfg.t)?;
        match self.sim_name() {
            "currin" => {
                let mut f = SyntheticFamily::currin();
                f.ladder = ladder;
                Ok(Box::new(f))
            }
            "poissonlike" => {
                let mut f = SyntheticFamily::poisson_like();
                f.ladder = ladder;
                Ok(Box::new(f))
            }
            s => {
                let command: Vec<String> = s["cmd:".len()..].split_whitespace().map(String::from).collect();
                if command.is_empty() {
                    return Err(Error::invalid("sim", "empty command after `cmd:`"));
                }
                let mut sc = SubprocessConfig::new(command, cfg.domain.dim(), ladder);
                sc.max_level = cfg.max_levels;
                if let Some(t) = self.timeout {
                    if !(t > 0.0 && t.is_finite()) {
                        return Err(Error::invalid("timeout", format!("must be positive, got {t}")));
                    }
                    sc.timeout = Duration::from_secs_f64(t);
                }
                Ok(Box::new(subprocess_simulator(sc)?))
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub emulator: PathBuf,
    /// CSV with one point per row; an optional header row is skipped.
    #[arg(long)]
    pub points: PathBuf,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Rate used for error intervals; defaults to the stored estimate.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TestSimArgs {
    /// `echo` (y = x[0]), `malformed`, `crash`, `crash-once`, `sleep`.
    #[arg(long, default_value = "echo")]
    pub mode: String,
    /// Marker file used by `crash-once`.
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub cost: f64,
    #[arg(long, default_value_t = 5000)]
    pub sleep_ms: u64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::TestSim(a) => test_sim(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Table of stage rows: one line per stage and level.
pub fn stage_table(stages: &[StageReport]) -> String {
    let mut s = String::from(" L  l     xi_l        C_l    n_l  alpha   sim_bound  emu_bound\n");
    for st in stages {
        for lv in &st.levels {
            s += &format!(
                "{:2} {:2} {:8.4} {:10} {:6}  {:>5}  {:>9}  {:9.4}\n",
                st.stage,
                lv.level,
                lv.xi,
                lv.cost,
                lv.n,
                st.alpha_hat.map(|a| format!("{a:.3}")).unwrap_or_default(),
                st.simulation_bound.map(|b| format!("{b:.4}")).unwrap_or_default(),
                st.emulation_bound
            );
        }
    }
    s
}

fn out_dir(c: &ExperimentConfig) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_campaign(dir: &Path, campaign: &Campaign) -> Result<()> {
    let report = serde_json::to_string_pretty(&campaign.report())?;
    fs::write(dir.join("report.json"), report + "\n")?;
    write_stages_csv(&campaign.stages, fs::File::create(dir.join("stages.csv"))?)?;
    if let Some(em) = campaign.emulator.as_ref().filter(|_| campaign.converged) {
        fs::write(dir.join("emulator.json"), em.to_json()? + "\n")?;
    }
    Ok(())
}

pub fn cmd_run(args: &ExperimentArgs) -> Result<i32> {
    let c = ExperimentConfig::from_args(args)?;
    let epsilon = c.epsilon.ok_or_else(|| Error::invalid("epsilon", "required"))?;
    let cfg = c.stacking_config(epsilon)?;
    let dir = out_dir(&c)?;
    let sim = c.simulator(&cfg)?;
    let mut campaign = Campaign::new(cfg)?;
    let outcome = campaign.run(sim.as_ref());
    write_campaign(&dir, &campaign)?;
    print!("{}", stage_table(&campaign.stages));
    outcome?;
    println!(
        "converged at L={} with total cost {}",
        campaign.stages.len(),
        campaign.total_cost()
    );
    Ok(EXIT_OK)
}

/// Achieved error of `em` against the simulator's limit, if it has one:
/// 10^4 uniform points in L2, a 256-per-axis grid (or 65 536 Sobol points
/// beyond two dimensions) in L-infinity.
pub fn achieved_error(em: &MultiLevelEmulator, sim: &dyn Simulator, cfg: &StackingConfig) -> Result<Option<f64>> {
    let dom = &cfg.domain;
    let nodes = match cfg.norm {
        NormKind::L2 => NormEstimator::new(NormKind::L2, dom, 10_000, cfg.seed)?.nodes().to_vec(),
        NormKind::Linf => match dom.dim() {
            1 => (0..65_536).map(|i| dom.map_unit(&[i as f64 / 65_535.0])).collect(),
            2 => (0..256 * 256)
                .map(|k| dom.map_unit(&[(k % 256) as f64 / 255.0, (k / 256) as f64 / 255.0]))
                .collect(),
            d => Sobol::new(d)?.prefix(65_536).iter().map(|u| dom.map_unit(u)).collect(),
        },
    };
    let Some(truth) = nodes.iter().map(|x| sim.limit(x)).collect::<Option<Vec<f64>>>() else {
        return Ok(None);
    };
    let pred = em.predict_many(&nodes)?;
    let err: Vec<f64> = truth.iter().zip(&pred).map(|(t, p)| t - p).collect();
    Ok(Some(match cfg.norm {
        NormKind::L2 => (dom.volume() * err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64).sqrt(),
        NormKind::Linf => err.iter().fold(0.0, |m, e| m.max(e.abs())),
    }))
}

/// One sweep row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub achieved_error: Option<f64>,
    pub total_cost: f64,
    pub final_level: usize,
    pub sample_sizes: Vec<usize>,
}

pub fn cmd_sweep(args: &ExperimentArgs) -> Result<i32> {
    let c = ExperimentConfig::from_args(args)?;
    let eps = match (&c.epsilons, c.epsilon) {
        (Some(list), _) => list.clone(),
        (None, Some(e)) => vec![e],
        (None, None) => return Err(Error::invalid("epsilons", "required")),
    };
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::invalid("epsilons", "every tolerance must be positive"));
    }
    let dir = out_dir(&c)?;
    let mut rows = Vec::new();
    let mut code = EXIT_OK;
    let oracle = matches!(c.sim_name(), "currin" | "poissonlike");
    if !oracle {
        log::warn!("simulator has no known limit; achieved_error column omitted");
    }
    for &e in &eps {
        let run = || -> Result<SweepRow> {
            let cfg = c.stacking_config(e)?;
            let sim = c.simulator(&cfg)?;
            let mut campaign = Campaign::new(cfg.clone())?;
            campaign.run(sim.as_ref())?;
            let em = campaign.emulator.as_ref().expect("converged");
            Ok(SweepRow {
                epsilon: e,
                achieved_error: achieved_error(em, sim.as_ref(), &cfg)?,
                total_cost: campaign.total_cost(),
                final_level: em.num_levels(),
                sample_sizes: em.sample_sizes(),
            })
        };
        match run() {
            Ok(row) => {
                println!(
                    "eps={} L={} cost={} error={}",
                    row.epsilon,
                    row.final_level,
                    row.total_cost,
                    row.achieved_error.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
                );
                rows.push(row);
            }
            Err(err) => {
                eprintln!("error at eps={e}: {err}");
                if code == EXIT_OK {
                    code = exit_code(&err);
                }
            }
        }
    }
    write_sweep_csv(&rows, oracle, fs::File::create(dir.join("sweep.csv"))?)?;
    Ok(code)
}

/// `epsilon,[achieved_error,]total_cost,L_final,n_l` with `n_l` joined by `;`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], with_error: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epsilon"];
    if with_error {
        header.push("achieved_error");
    }
    header.extend(["total_cost", "L_final", "n_l"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.epsilon.to_string()];
        if with_error {
            rec.push(r.achieved_error.map(|v| v.to_string()).unwrap_or_default());
        }
        rec.push(r.total_cost.to_string());
        rec.push(r.final_level.to_string());
        rec.push(r.sample_sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(";"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads points from CSV; a first row that does not parse as numbers is a header.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Schema(format!("row {}: {e}", points.len()))),
        }
    }
    Ok(points)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.emulator)?;
    let em = MultiLevelEmulator::from_json(&text)?;
    let points = read_points(&args.points)?;
    if let Some(i) = points.iter().position(|p| p.len() != em.dim()) {
        return Err(Error::Schema(format!(
            "row {i} has {} coordinates, emulator expects {}",
            points[i].len(),
            em.dim()
        )));
    }
    let alpha = args.alpha.or(em.alpha_hat).filter(|_| em.num_levels() >= 2);
    let sink: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    if points.is_empty() {
        return Ok(EXIT_OK);
    }
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = (1..=em.dim()).map(|j| format!("x{j}")).collect();
    header.extend(["prediction", "lower", "upper"].map(String::from));
    w.write_record(&header)?;
    for p in &points {
        let mut rec: Vec<String> = p.iter().map(f64::to_string).collect();
        match alpha {
            Some(a) => {
                let (center, half) = em.interval_parts(p, a)?;
                rec.extend([center, center - half, center + half].map(|v| v.to_string()));
            }
            None => {
                rec.push(em.predict(p)?.to_string());
                rec.extend([String::new(), String::new()]);
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct TestRequest {
    #[allow(dead_code)]
    level: usize,
    #[allow(dead_code)]
    xi: f64,
    x: Vec<f64>,
}

/// Reference implementation of the simulator side of the line protocol.
fn test_sim(args: &TestSimArgs) -> Result<i32> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: TestRequest = serde_json::from_str(&line)?;
        match args.mode.as_str() {
            "malformed" => writeln!(out, "this is not json")?,
            "crash" => std::process::exit(9),
            "crash-once" => {
                let marker = args.state.as_ref().ok_or_else(|| Error::invalid("state", "required"))?;
                if !marker.exists() {
                    fs::write(marker, b"crashed")?;
                    std::process::exit(9);
                }
            }
            "sleep" => std::thread::sleep(Duration::from_millis(args.sleep_ms)),
            _ => {}
        }
        if args.mode != "malformed" {
            let y = req.x.first().copied().unwrap_or(0.0);
            writeln!(out, "{}", serde_json::json!({ "y": y, "cost": args.cost }))?;
        }
        out.flush()?;
    }
    Ok(EXIT_OK)
}
