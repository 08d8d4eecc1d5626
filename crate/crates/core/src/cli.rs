//! Command-line front end: `run`, `sweep`, `factor`, `plot`, `list`,
//! `verify`.
//!
//! Exit codes: 0 success, 2 parse/usage error, 3 divergence, 4 internal
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::analysis::{
    e0_norms, post_transient_start, scaling_report, sweep_runs, MatchingOracle, ScalingReport, SWEEP_EPSILON,
};
use crate::closed_loop::{run, RunError, Scenario};
use crate::factorization::{dplus_abs, find_dplus, gamma_threshold, ldu_factor, sdu_from_ldu};
use crate::output::{plot_svg, read_trace_file, write_trace_file};
use crate::scenario::{builtin_files, resolve};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Environment variable capping sweep concurrency.
pub const THREADS_ENV: &str = "LSMRAC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lsmrac", version, about = "Least-squares MIMO model-reference adaptive control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace CSV.
    Run {
        /// Built-in name (see `list`) or scenario file path.
        scenario: String,
        /// Output CSV path.
        output: PathBuf,
        /// Override the integration step.
        #[arg(long)]
        h: Option<f64>,
        /// Override the final time.
        #[arg(long)]
        duration: Option<f64>,
        /// Override the record stride.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Run a least-squares scenario over several gains with R(0) = c*gamma*I.
    Sweep {
        scenario: String,
        /// Comma- or space-separated gains, strictly increasing, at least 4.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        gamma: Vec<f64>,
        #[arg(long, default_value_t = 0.4)]
        c: f64,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Leading minors, LDU and SDU factors of a square gain matrix.
    Factor {
        /// Inline rows ("1 2; -2 1") or a file with one row per line.
        matrix: String,
        /// Reference-model poles a_i (A_m = -diag(a)); enables the d+ search.
        #[arg(long)]
        am: Option<String>,
    },
    /// Static SVG line chart of trace columns.
    Plot {
        trace: PathBuf,
        /// Column names or prefixes (`e0` selects every `e0_i`).
        #[arg(long, short, value_delimiter = ',', num_args = 1..)]
        channels: Vec<String>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// List built-in scenarios.
    List,
    /// Check the matching parameters of a first-order diagonal scenario.
    Verify { scenario: String },
}

/// Parses `args` (program name first) and executes the command.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            output,
            h,
            duration,
            stride,
        } => cmd_run(&scenario, &output, h, duration, stride, out),
        Command::Sweep { scenario, gamma, c, out: dir } => cmd_sweep(&scenario, &gamma, c, &dir, out),
        Command::Factor { matrix, am } => cmd_factor(&matrix, am.as_deref(), out),
        Command::Plot { trace, channels, output } => cmd_plot(&trace, &channels, &output),
        Command::List => cmd_list(out),
        Command::Verify { scenario } => cmd_verify(&scenario, out),
    };
    match result {
        Ok(code) => code,
        Err(CliError(code, msg)) => {
            let _ = writeln!(err, "error: {msg}");
            code
        }
    }
}

#[derive(Debug)]
struct CliError(i32, String);

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError(EXIT_USAGE, msg.to_string())
}

fn internal(msg: impl std::fmt::Display) -> CliError {
    CliError(EXIT_INTERNAL, msg.to_string())
}

type CmdResult = Result<i32, CliError>;

fn io(e: std::io::Error) -> CliError {
    internal(e)
}

fn load(name: &str) -> Result<Scenario, CliError> {
    resolve(name).map_err(usage)
}

fn cmd_run(
    name: &str,
    output: &Path,
    h: Option<f64>,
    duration: Option<f64>,
    stride: Option<usize>,
    out: &mut dyn Write,
) -> CmdResult {
    let mut s = load(name)?;
    if let Some(h) = h {
        s.integration.h = h;
    }
    if let Some(d) = duration {
        s.integration.duration = d;
    }
    if let Some(k) = stride {
        s.integration.stride = k;
    }
    let started = Instant::now();
    match run(&s) {
        Ok(trace) => {
            write_trace_file(&trace, output).map_err(internal)?;
            let k = trace.len() - 1;
            let e0 = e0_norms(&trace)[k];
            writeln!(out, "scenario     {}", s.label).map_err(io)?;
            writeln!(out, "samples      {}", trace.len()).map_err(io)?;
            writeln!(out, "final |e0|   {}", fmt(e0)).map_err(io)?;
            if let Ok(params) = MatchingOracle::from_scenario(&s, None).and_then(|o| o.matching_params()) {
                let star = params.stacked();
                let err: f64 = trace.theta.row(k).iter().zip(&star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                writeln!(out, "final |Theta - Theta*|  {}  (D+ = |Dp|)", fmt(err)).map_err(io)?;
            }
            writeln!(out, "runtime      {:.3} s", started.elapsed().as_secs_f64()).map_err(io)?;
            writeln!(out, "wrote        {}", output.display()).map_err(io)?;
            Ok(EXIT_OK)
        }
        Err(RunError::Invalid(msg)) => Err(usage(msg)),
        Err(e @ RunError::Diverged { .. }) => {
            if let Some(partial) = e.partial_trace().filter(|t| !t.is_empty()) {
                write_trace_file(partial, output).map_err(internal)?;
            }
            Err(CliError(EXIT_DIVERGED, e.to_string()))
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

/// Thread count from the environment, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n: &usize| *n > 0)
}

fn cmd_sweep(name: &str, gammas: &[f64], c: f64, dir: &Path, out: &mut dyn Write) -> CmdResult {
    if gammas.len() < 4 {
        return Err(usage(format!("sweep needs at least 4 gamma values, got {}", gammas.len())));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(usage(format!("--c must be > 0, got {c}")));
    }
    let base = load(name)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(internal)?;
    let runs = pool.install(|| sweep_runs(&base, gammas, c)).map_err(usage)?;

    std::fs::create_dir_all(dir).map_err(io)?;
    let mut worst = EXIT_OK;
    let mut traces = Vec::new();
    for (g, (s, result)) in gammas.iter().zip(&runs) {
        let path = dir.join(format!("{}.csv", s.label));
        match result {
            Ok(tr) => {
                write_trace_file(tr, &path).map_err(internal)?;
                traces.push(tr);
            }
            Err(e) => {
                worst = worst.max(EXIT_DIVERGED);
                writeln!(out, "gamma = {g}: {e}").map_err(io)?;
                if let Some(p) = e.partial_trace().filter(|t| !t.is_empty()) {
                    write_trace_file(p, &path).map_err(internal)?;
                }
            }
        }
    }
    if worst != EXIT_OK {
        return Ok(worst);
    }
    let report = scaling_report(&base, gammas, c, &traces).map_err(usage)?;
    let path = dir.join("scaling.csv");
    std::fs::write(&path, scaling_csv(&report)).map_err(io)?;
    for row in &report.rows {
        writeln!(
            out,
            "gamma {:>8}  l2sq {}  linf_post {}  t_eps {}",
            row.gamma,
            fmt(row.l2sq),
            fmt(row.linf_post),
            fmt(row.t_eps)
        )
        .map_err(io)?;
    }
    writeln!(
        out,
        "slopes: l2sq {:.4}  linf_post {:.4}  t_eps {:.4}  (post-transient from {:.3} s at the smallest gamma)",
        report.l2sq_fit.slope,
        report.linf_fit.slope,
        report.t_eps_fit.slope,
        post_transient_start(&base, gammas[0])
    )
    .map_err(io)?;
    writeln!(out, "wrote {}", path.display()).map_err(io)?;
    Ok(EXIT_OK)
}

/// `scaling.csv`: one row per gain, fitted slopes in `#` footer lines.
pub fn scaling_csv(r: &ScalingReport) -> String {
    let mut s = String::from("gamma,l2sq,linf_post,t_eps\n");
    for row in &r.rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            crate::output::format_f64(row.gamma),
            crate::output::format_f64(row.l2sq),
            crate::output::format_f64(row.linf_post),
            crate::output::format_f64(row.t_eps)
        ));
    }
    s.push_str(&format!("# c = {}\n", r.c));
    s.push_str(&format!("# epsilon = {SWEEP_EPSILON}\n"));
    for (name, fit) in [("l2sq", r.l2sq_fit), ("linf_post", r.linf_fit), ("t_eps", r.t_eps_fit)] {
        s.push_str(&format!("# slope_{name} = {:.6} (rms residual {:.3e})\n", fit.slope, fit.residual));
    }
    s
}

/// Parses `"1 2; -2 1"` (rows split by `;` or newlines, entries by spaces
/// or commas).
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = text
        .split([';', '\n'])
        .map(str::trim)
        .filter(|r| !r.is_empty() && !r.starts_with('#'))
        .map(parse_list)
        .collect::<Result<_, _>>()?;
    let n = rows.len();
    if n == 0 {
        return Err("empty matrix".into());
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != rows[0].len()) {
        return Err(format!("row {} has {} entries, expected {}", i + 1, r.len(), rows[0].len()));
    }
    Ok(DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j]))
}

pub fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

fn write_matrix(out: &mut dyn Write, name: &str, m: &DMatrix<f64>) -> Result<(), CliError> {
    writeln!(out, "{name} =").map_err(io)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:>14.6e}", m[(i, j)])).collect();
        writeln!(out, "  [{}]", row.join(" ")).map_err(io)?;
    }
    Ok(())
}

fn cmd_factor(matrix: &str, am: Option<&str>, out: &mut dyn Write) -> CmdResult {
    let text = if Path::new(matrix).is_file() {
        std::fs::read_to_string(matrix).map_err(usage)?
    } else {
        matrix.to_string()
    };
    let k = parse_matrix(&text).map_err(usage)?;
    let ldu = ldu_factor(&k).map_err(usage)?;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ");
    writeln!(out, "minors = [{}]", list(&ldu.minors)).map_err(io)?;
    write_matrix(out, "Lp", &ldu.lp)?;
    write_matrix(out, "Dp", &ldu.dp)?;
    write_matrix(out, "Up", &ldu.up)?;
    let sdu = sdu_from_ldu(&ldu, &dplus_abs(&ldu)).map_err(internal)?;
    writeln!(out, "SDU at D+ = |Dp|:").map_err(io)?;
    write_matrix(out, "S", &sdu.s)?;
    write_matrix(out, "D", &sdu.d)?;
    write_matrix(out, "U", &sdu.u)?;
    if let Some(am) = am {
        let a = parse_list(am).map_err(usage)?;
        let diag: Vec<f64> = a.iter().map(|v| -v.abs()).collect();
        if a.iter().any(|v| *v == 0.0) {
            return Err(usage("reference-model poles must be nonzero"));
        }
        let cert = find_dplus(&k, &diag).map_err(usage)?;
        writeln!(out, "certified d+ = {}", cert.d_plus).map_err(io)?;
        write_matrix(out, "S", &cert.sdu.s)?;
        write_matrix(out, "D", &cert.sdu.d)?;
        write_matrix(out, "U", &cert.sdu.u)?;
        let ev = SymmetricEigen::new(cert.q.clone()).eigenvalues;
        writeln!(out, "Q eigenvalues in [{:.6e}, {:.6e}]", ev.min(), ev.max()).map_err(io)?;
    }
    writeln!(out, "gamma threshold = {}", gamma_threshold(&ldu)).map_err(io)?;
    Ok(EXIT_OK)
}

fn cmd_plot(trace: &Path, channels: &[String], output: &Path) -> CmdResult {
    if channels.is_empty() {
        return Err(usage("at least one channel is required"));
    }
    let table = read_trace_file(trace).map_err(usage)?;
    let svg = plot_svg(&table, channels).map_err(usage)?;
    std::fs::write(output, svg).map_err(io)?;
    Ok(EXIT_OK)
}

fn cmd_list(out: &mut dyn Write) -> CmdResult {
    for f in builtin_files() {
        let s = f.to_scenario().map_err(internal)?;
        writeln!(
            out,
            "{:<12} law={:<9} m={} nu={} params={:<3} T={} s",
            s.label,
            s.controller.law.name(),
            s.m(),
            s.controller.dims.nu,
            s.controller.dims.param_count(),
            s.integration.duration
        )
        .map_err(io)?;
    }
    Ok(EXIT_OK)
}

fn cmd_verify(name: &str, out: &mut dyn Write) -> CmdResult {
    let s = load(name)?;
    let oracle = MatchingOracle::from_scenario(&s, None).map_err(usage)?;
    let params = oracle.matching_params().map_err(internal)?;
    let dev = oracle.frequency_check(&params.blocks, 20);
    for (i, b) in params.blocks.iter().enumerate() {
        let v: Vec<String> = b.iter().map(|x| format!("{x:.6}")).collect();
        writeln!(out, "Theta*_{} = [{}]", i + 1, v.join(", ")).map_err(io)?;
    }
    let norm = DVector::from_vec(params.stacked()).norm();
    writeln!(out, "|Theta*| = {norm:.6}").map_err(io)?;
    writeln!(out, "max relative deviation from the reference model over 20 frequencies: {dev:.3e}").map_err(io)?;
    Ok(if dev <= 1e-8 { EXIT_OK } else { EXIT_INTERNAL })
}
