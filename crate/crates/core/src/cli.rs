//! Command-line front end.
//!
//! Every command returns its report as text so it can be tested without a
//! process boundary; [`main_with_args`] prints it and maps errors to exit
//! codes (0 success, 1 configuration error, 2 runtime error).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, MixingVariant, Prepared};
use crate::engine::{first_below, run, sample_devices, write_metrics_csv, MetricsRecord};
use crate::error::{Error, Result};
use crate::mixing::{sample_mixing, validate_mixing};
use crate::objectives::MuMethod;
use crate::rng::{self, StreamTag};
use crate::theory::{
    estimate_lambda, iteration_complexity, lyapunov_check, rate_report, stepsize_bound, RateParams,
};

/// Suboptimality thresholds reported by `sweep`.
pub const THRESHOLDS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Parser)]
#[command(name = "ppds", version, about = "Decentralized optimization with device sampling on directed graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Configuration file (`key = value` lines); defaults apply otherwise.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output CSV for `run`, output directory for `sweep`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Concurrent sweep points.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Override one configuration key, e.g. `--set sampling.S=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    StepsizeGrid,
    SampleSize,
    MixingDegree,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::StepsizeGrid => "stepsize-grid",
            Axis::SampleSize => "sample-size",
            Axis::MixingDegree => "mixing-degree",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    /// `key=value` lines.
    #[default]
    Kv,
    /// Header plus one data row.
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct RateArgs {
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long = "L", default_value_t = 1.0)]
    pub l: f64,
    #[arg(long = "M", default_value_t = 100)]
    pub m: usize,
    #[arg(long = "S", default_value_t = 20)]
    pub s: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Stepsize; defaults to the theoretical bound.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Target accuracy for the iteration count.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its metrics CSV.
    Run(CommonArgs),
    /// Run one experiment per axis value plus a cost-to-accuracy summary.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; the stepsize axis defaults to the
        /// coarse-to-fine grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Stepsize bound, rate, complexity and certificate margins.
    Rate(RateArgs),
    /// Monte-Carlo contraction factor of the configured mixing strategy.
    Lambda {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = Format::Kv)]
        format: Format,
    },
    /// Check mixing matrices and assumptions for a configuration.
    Validate(CommonArgs),
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok((text, ok)) => {
            print!("{text}");
            if ok {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        1
    } else {
        2
    }
}

fn dispatch(cmd: &Command) -> Result<(String, bool)> {
    match cmd {
        Command::Run(common) => {
            let cfg = load_config(common)?;
            Ok((cmd_run(&cfg)?.text, true))
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load_config(common)?;
            let dir = common.out.clone().unwrap_or_else(|| cfg.output.with_extension(""));
            let report = cmd_sweep(&cfg, *axis, values, &dir, common.jobs)?;
            Ok((report.text, true))
        }
        Command::Rate(args) => Ok((cmd_rate(args)?, true)),
        Command::Lambda { common, format } => {
            let cfg = load_config(common)?;
            Ok((cmd_lambda(&cfg, *format)?, true))
        }
        Command::Validate(common) => {
            let cfg = load_config(common)?;
            cmd_validate(&cfg)
        }
    }
}

/// File (or defaults), then `--set` overrides, then the dedicated flags.
pub fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config("--set", format!("expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = common.iters {
        cfg.iterations = iters;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct RunReport {
    pub eta: f64,
    pub records: Vec<MetricsRecord>,
    pub text: String,
}

fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    write_metrics_csv(records, std::io::BufWriter::new(file))
}

/// Runs the configured experiment and writes its CSV to `cfg.output`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let prep = Prepared::new(cfg)?;
    let eta = prep.resolve_eta(cfg)?;
    let records = run(&prep.experiment(cfg, eta))?;
    write_csv(&cfg.output, &records)?;
    let last = records.last().expect("a run records t = 0");
    let mut text = String::new();
    let _ = writeln!(text, "algorithm={}", cfg.algorithm.name());
    let _ = writeln!(text, "eta={eta:e}");
    let _ = writeln!(text, "iterations={}", last.t);
    let _ = writeln!(text, "comm_cost={}", last.cum_comm);
    let _ = writeln!(text, "grad_count={}", last.cum_grads);
    let _ = writeln!(text, "consensus={:e}", last.consensus);
    let _ = writeln!(text, "subopt={:e}", last.subopt);
    let _ = writeln!(text, "output={}", cfg.output.display());
    Ok(RunReport { eta, records, text })
}

/// One sweep point: its axis value, CSV path and cost-to-threshold numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub eta: f64,
    pub csv: PathBuf,
    pub final_subopt: f64,
    /// `(cum_comm, cum_grads)` at the first record at or below each of
    /// [`THRESHOLDS`].
    pub costs: [Option<(u64, u64)>; 3],
}

pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub best: usize,
    pub summary: PathBuf,
    pub text: String,
}

fn sweep_key(cfg: &ExperimentConfig, axis: Axis) -> &'static str {
    match axis {
        Axis::StepsizeGrid => "eta",
        Axis::SampleSize => "sampling.S",
        Axis::MixingDegree if cfg.mixing == MixingVariant::Broadcast => "mixing.targets",
        Axis::MixingDegree => "mixing.neighbors",
    }
}

fn run_points(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<Vec<SweepPoint>> {
    let key = sweep_key(base, axis);
    let configs: Vec<(String, ExperimentConfig)> = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            cfg.output = dir.join(format!("{}_{v}.csv", axis.name()));
            cfg.validate()?;
            Ok((v.clone(), cfg))
        })
        .collect::<Result<_>>()?;
    pool.install(|| {
        configs
            .par_iter()
            .map(|(value, cfg)| {
                let prep = Prepared::new(cfg)?;
                let eta = prep.resolve_eta(cfg)?;
                let records = run(&prep.experiment(cfg, eta))?;
                write_csv(&cfg.output, &records)?;
                Ok(SweepPoint {
                    value: value.clone(),
                    eta,
                    csv: cfg.output.clone(),
                    final_subopt: records.last().map_or(f64::INFINITY, |r| r.subopt),
                    costs: THRESHOLDS.map(|th| first_below(&records, th).map(|r| (r.cum_comm, r.cum_grads))),
                })
            })
            .collect()
    })
}

fn best_index(points: &[SweepPoint]) -> usize {
    let score = |p: &SweepPoint| if p.final_subopt.is_finite() { p.final_subopt } else { f64::INFINITY };
    (0..points.len())
        .min_by(|&a, &b| score(&points[a]).total_cmp(&score(&points[b])))
        .expect("sweep has points")
}

/// Runs one experiment per value of `axis`, writing `<axis>_<value>.csv`
/// per point and `summary.csv` into `dir`. An empty `values` on the
/// stepsize axis runs `10^-k, k = 2..=5` and then `η₁·2^k, k = ±1, ±2`
/// around the best coarse value `η₁`.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    dir: &Path,
    jobs: usize,
) -> Result<SweepReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    fs::create_dir_all(dir)?;
    let points = if values.is_empty() {
        if axis != Axis::StepsizeGrid {
            return Err(Error::config("--values", format!("required for the {} axis", axis.name())));
        }
        let coarse: Vec<String> = ["1e-2", "1e-3", "1e-4", "1e-5"].iter().map(|s| s.to_string()).collect();
        let mut points = run_points(cfg, axis, &coarse, dir, &pool)?;
        let eta1 = points[best_index(&points)].eta;
        let fine: Vec<String> = [-2, -1, 1, 2].iter().map(|&k| format!("{:e}", eta1 * 2f64.powi(k))).collect();
        points.extend(run_points(cfg, axis, &fine, dir, &pool)?);
        points
    } else {
        run_points(cfg, axis, values, dir, &pool)?
    };
    let best = best_index(&points);
    let summary = dir.join("summary.csv");
    fs::write(&summary, summary_csv(&points, best))?;
    let mut text = String::new();
    for p in &points {
        let _ = writeln!(text, "value={} eta={:e} final_subopt={:e}", p.value, p.eta, p.final_subopt);
    }
    let _ = writeln!(text, "best={}", points[best].value);
    let _ = writeln!(text, "summary={}", summary.display());
    Ok(SweepReport { points, best, summary, text })
}

pub fn summary_csv(points: &[SweepPoint], best: usize) -> String {
    let mut out = String::from("value,eta,final_subopt");
    for th in THRESHOLDS {
        let _ = write!(out, ",comm_to_{th:e},grads_to_{th:e}");
    }
    out.push_str(",best\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(out, "{},{:e},{:e}", p.value, p.eta, p.final_subopt);
        for c in &p.costs {
            match c {
                Some((comm, grads)) => {
                    let _ = write!(out, ",{comm},{grads}");
                }
                None => out.push_str(",NA,NA"),
            }
        }
        let _ = writeln!(out, ",{}", u8::from(i == best));
    }
    out
}

fn emit(format: Format, pairs: &[(&str, String)]) -> String {
    match format {
        Format::Kv => pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect(),
        Format::Csv => {
            let header: Vec<&str> = pairs.iter().map(|(k, _)| *k).collect();
            let row: Vec<&str> = pairs.iter().map(|(_, v)| v.as_str()).collect();
            format!("{}\n{}\n", header.join(","), row.join(","))
        }
    }
}

pub fn cmd_rate(args: &RateArgs) -> Result<String> {
    let mut p = RateParams {
        mu: args.mu,
        l: args.l,
        m: args.m,
        s: args.s,
        lambda: args.lambda,
        eta: 1.0,
    };
    let bound = stepsize_bound(&p);
    p.eta = args.eta.unwrap_or(bound);
    p.check()?;
    let report = rate_report(&p);
    let cert = lyapunov_check(&p);
    let mut pairs = vec![
        ("stepsize_bound", format!("{bound:e}")),
        ("eta", format!("{:e}", p.eta)),
        ("within_bound", report.within_bound.to_string()),
        ("rho", format!("{}", report.rho)),
        ("iteration_complexity", format!("{:e}", iteration_complexity(&p, args.epsilon))),
        ("vq_le_rho_v", cert.vq_le_rho_v.to_string()),
        ("vq_nonpositive", cert.vq_nonpositive.to_string()),
    ];
    let names = ["margin_col1", "margin_col2", "margin_col3", "margin_col4", "margin_bias"];
    for (name, m) in names.iter().zip(cert.margins) {
        pairs.push((name, format!("{m:e}")));
    }
    let mut out = String::new();
    if !report.within_bound {
        out.push_str("warning: eta exceeds stepsize_bound; the rate is not guaranteed\n");
    }
    out.push_str(&emit(args.format, &pairs));
    Ok(out)
}

pub fn cmd_lambda(cfg: &ExperimentConfig, format: Format) -> Result<String> {
    let graph = crate::topology::build_rgg(cfg.nodes, cfg.radius, cfg.graph_seed())?;
    let strategy = cfg.mixing_strategy(&graph)?;
    let est = estimate_lambda(&strategy, &cfg.sampling_plan(), &graph, cfg.lambda_samples, cfg.seed)?;
    Ok(emit(
        format,
        &[
            ("lambda", format!("{}", est.lambda)),
            ("stderr", format!("{}", est.stderr)),
            ("samples", est.samples.to_string()),
        ],
    ))
}

/// Draws 200 rounds of the configured sampling and mixing and checks every
/// pair; reports objective constants and, when `λ` is defined, whether the
/// stepsize respects the theoretical bound. The flag is false when a pair
/// fails the basic stochasticity or graph checks.
pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<(String, bool)> {
    const ROUNDS: usize = 200;
    let prep = Prepared::new(cfg)?;
    let m = cfg.nodes;
    let mut sampling = rng::tagged_stream(cfg.seed, StreamTag::Sampling);
    let mut mixing = rng::tagged_stream(cfg.seed, StreamTag::Mixing);
    let mut row_a = true;
    let mut col_b = true;
    let mut graph_ok = true;
    let mut doubly = true;
    for _ in 0..ROUNDS {
        let active = sample_devices(&prep.plan, m, &mut sampling)?;
        let pair = sample_mixing(&prep.strategy, &prep.graph, &active, &mut mixing)?;
        let r = validate_mixing(&pair, &prep.graph, 0.0);
        row_a &= r.row_stochastic_a;
        col_b &= r.col_stochastic_b;
        graph_ok &= r.graph_compatible || cfg.mixing == MixingVariant::Mean;
        doubly &= r.doubly_stochastic_a && r.doubly_stochastic_b;
    }
    let mut text = String::new();
    let _ = writeln!(text, "rounds={ROUNDS}");
    let _ = writeln!(text, "row_stochastic_a={row_a}");
    let _ = writeln!(text, "col_stochastic_b={col_b}");
    let _ = writeln!(text, "graph_compatible={graph_ok}");
    let _ = writeln!(text, "doubly_stochastic={doubly}");
    let _ = writeln!(text, "L={:e}", prep.constants.l);
    let _ = writeln!(text, "mu={:e}", prep.constants.mu);
    let method = match prep.constants.mu_method {
        MuMethod::InversePowerIteration => "inverse_power_iteration",
        MuMethod::RegularizerBound => "regularizer_bound",
    };
    let _ = writeln!(text, "mu_method={method}");
    if doubly {
        let est = estimate_lambda(&prep.strategy, &prep.plan, &prep.graph, cfg.lambda_samples, cfg.seed)?;
        let _ = writeln!(text, "lambda={}", est.lambda);
        if est.lambda < 1.0 {
            let s = cfg.effective_sample_size();
            let eta = prep.resolve_eta(cfg)?;
            let bound = stepsize_bound(&RateParams {
                mu: prep.constants.mu,
                l: prep.constants.l,
                m,
                s,
                lambda: est.lambda,
                eta,
            });
            let _ = writeln!(text, "stepsize_bound={bound:e}");
            let _ = writeln!(text, "eta_within_bound={}", eta <= bound);
        }
    }
    Ok((text, row_a && col_b && graph_ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rate(args: &[&str]) -> RateArgs {
        let mut full = vec!["ppds", "rate"];
        full.extend_from_slice(args);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Rate(r) => r,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rate_defaults_print_rho() {
        let args = rate(&[]);
        let out = cmd_rate(&args).unwrap();
        let mut p = RateParams { mu: 1.0, l: 1.0, m: 100, s: 20, lambda: 0.5, eta: 1.0 };
        p.eta = stepsize_bound(&p);
        let rho = crate::theory::convergence_rate(&p);
        assert!(out.contains(&format!("rho={rho}\n")), "{out}");
        assert!(!out.contains("warning"));
        assert!(out.contains("vq_le_rho_v=true"));
    }

    #[test]
    fn rate_above_bound_warns() {
        let out = cmd_rate(&rate(&["--lambda", "0", "--eta", "1"])).unwrap();
        assert!(out.starts_with("warning:"));
        assert!(out.contains("vq_nonpositive=false"));
        let csv = cmd_rate(&rate(&["--format", "csv"])).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(cmd_rate(&rate(&["--S", "200"])).is_err());
    }

    #[test]
    fn lambda_for_mean_is_zero() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("mixing.variant", "mean").unwrap();
        cfg.set("graph.M", "10").unwrap();
        cfg.set("graph.radius", "0.7").unwrap();
        cfg.set("sampling.S", "3").unwrap();
        let out = cmd_lambda(&cfg, Format::Kv).unwrap();
        assert!(out.starts_with("lambda=0\n"), "{out}");
    }

    #[test]
    fn config_errors_map_to_exit_one() {
        assert_eq!(main_with_args(["ppds", "run", "--set", "sampling.S=1000"]), 1);
        assert_eq!(main_with_args(["ppds", "run", "--set", "nonsense"]), 1);
        assert_eq!(main_with_args(["ppds", "frobnicate"]), 1);
        assert_eq!(main_with_args(["ppds", "run", "--config", "/nonexistent/cfg"]), 1);
        assert_eq!(main_with_args(["ppds", "--help"]), 0);
    }

    #[test]
    fn summary_layout() {
        let p = SweepPoint {
            value: "0.01".into(),
            eta: 0.01,
            csv: PathBuf::from("x.csv"),
            final_subopt: 1e-5,
            costs: [Some((10, 20)), Some((30, 40)), None],
        };
        let s = summary_csv(&[p], 0);
        assert_eq!(
            s,
            "value,eta,final_subopt,comm_to_1e-2,grads_to_1e-2,comm_to_1e-3,grads_to_1e-3,comm_to_1e-4,grads_to_1e-4,best\n\
             0.01,1e-2,1e-5,10,20,30,40,NA,NA,1\n"
        );
    }
}
