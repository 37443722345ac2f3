//! Command-line front end. Every subcommand writes JSON (and CSV for scans)
//! into the output directory; each artifact carries the resolved config.

use std::path::{Path, PathBuf};

use anyhow::Context;
use beamkam_core::dense;
use beamkam_core::linop::assemble;
use beamkam_core::measure::{bad_theta_cover, scan_lambda, CoverMode, ScanSettings};
use beamkam_core::multiscale;
use beamkam_core::nashmoser::{solve, NashMoserError, Status};
use beamkam_core::sobolev::FourierField;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{ConfigError, CoverModeName, Resolved, RunConfig};
use crate::io;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_CANTOR: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "beamkam", version, about = "Quasi-periodic solutions of the forced beam equation")]
pub struct Cli {
    /// JSON run configuration; the built-in reference instance when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads (falls back to BEAMKAM_THREADS, then the core count).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Exact,
    Sweep,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Nash-Moser scheme and write the certificate and solution.
    Solve,
    /// Membership of a λ-grid in the first-Melnikov, invertibility and N-good sets.
    ScanLambda {
        #[arg(long = "N")]
        n: Option<u32>,
        #[arg(long)]
        grid: Option<usize>,
        /// Skip the N-good test.
        #[arg(long)]
        no_good: bool,
    },
    /// Cover of the θ where the box operator has a small eigenvalue.
    BadTheta {
        #[arg(long = "N")]
        n: u32,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        j0: Option<Vec<i32>>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Linearize at this solution instead of `u = 0`.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Multiscale inverse of a supplied matrix or of the box operator.
    Invert {
        /// Matrix file `{sites: [{l, j}], entries: [[i, j, re, im]]}`.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Box radius of the generated operator.
        #[arg(long = "N", default_value_t = 8)]
        n: u32,
        /// Inner scale; defaults to ⌈√N⌉.
        #[arg(long)]
        inner: Option<u32>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        j0: Option<Vec<i32>>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Randomized lemma and property suite.
    Verify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
}

/// A failed run with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    fn validation(e: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            error: e.into(),
        }
    }

    fn numerical(e: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_NUMERICAL,
            error: e.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::validation(e)
    }
}

fn nm_failure(e: NashMoserError) -> Failure {
    match e {
        NashMoserError::EpsilonBudget { .. } | NashMoserError::NotTorus | NashMoserError::Params(_) => {
            Failure::validation(e)
        }
        _ => Failure::numerical(e),
    }
}

/// Runs `f` inside a rayon pool of the requested size.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let n = match threads {
        Some(n) => n,
        None => match std::env::var("BEAMKAM_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("BEAMKAM_THREADS = {v:?} is not a thread count"))?,
            Err(_) => 0,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
    Ok(pool.install(f))
}

/// Parses `argv`, runs the command and returns the exit status. Messages go
/// to stdout and errors to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    match with_threads(threads, move || execute(&cli)) {
        Ok(Ok(msg)) => {
            print!("{msg}");
            EXIT_OK
        }
        Ok(Err(f)) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_VALIDATION
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::reference()),
    }
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::validation)?;
    Ok(dir)
}

fn write(path: &Path, v: &Value) -> Result<(), Failure> {
    io::write_json(path, v).map_err(Failure::numerical)
}

fn config_json(r: &Resolved) -> Value {
    serde_json::to_value(&r.config).expect("config serializes")
}

/// Executes a parsed command; `Ok` carries the text printed on success.
pub fn execute(cli: &Cli) -> Result<String, Failure> {
    if let Command::Verify { trials } = cli.command {
        return run_verify(cli, trials);
    }
    let cfg = load_config(&cli.config)?;
    let resolved = cfg.resolve()?;
    let dir = out_dir(cli, &resolved.config)?;
    match &cli.command {
        Command::Solve => run_solve(&resolved, &dir),
        Command::ScanLambda { n, grid, no_good } => run_scan(&resolved, &dir, *n, *grid, !*no_good),
        Command::BadTheta { n, j0, mode, solution } => {
            run_bad_theta(&resolved, &dir, *n, j0.as_deref(), *mode, solution.as_deref())
        }
        Command::Invert {
            matrix,
            n,
            inner,
            j0,
            theta,
            solution,
        } => run_invert(&resolved, &dir, matrix.as_deref(), *n, *inner, j0.as_deref(), *theta, solution.as_deref()),
        Command::Verify { .. } => unreachable!(),
    }
}

fn run_solve(r: &Resolved, dir: &Path) -> Result<String, Failure> {
    let sol = solve(&r.problem, &r.settings).map_err(nm_failure)?;
    let config = config_json(r);
    let cert = io::certificate_to_json(&sol.certificate, &config);
    write(&dir.join("certificate.json"), &cert)?;
    write(
        &dir.join("solution.json"),
        &json!({
            "N": sol.big_n,
            "u": io::field_to_json(&sol.u),
            "config": config,
        }),
    )?;
    let c = &sol.certificate;
    let mut msg = format!(
        "status: {}\nsteps: {}\nfinal residual (s1): {:.3e}\n",
        io::status_name(&c.status),
        c.steps.len(),
        c.final_residual
    );
    for s in &c.steps {
        msg.push_str(&format!(
            "  step {} N={} residual={:.3e} increment={:.3e} path={}\n",
            s.n,
            s.big_n,
            s.residual(),
            s.increment_s1,
            s.inversion_path.name()
        ));
    }
    match c.status {
        Status::Converged => Ok(msg),
        Status::CantorExcluded(_) => Err(Failure {
            code: EXIT_CANTOR,
            error: anyhow::anyhow!("{}", io::status_name(&c.status)),
        }),
        Status::MaxSteps => Err(Failure::numerical(anyhow::anyhow!(
            "no convergence within {} steps (residual {:.3e})",
            r.settings.max_steps,
            c.final_residual
        ))),
    }
}

fn run_scan(r: &Resolved, dir: &Path, n: Option<u32>, grid: Option<usize>, good: bool) -> Result<String, Failure> {
    let cfg = &r.config;
    let st = ScanSettings {
        grid: grid.unwrap_or(cfg.frequency.lambda_grid),
        gamma: r.settings.gamma,
        n0: r.settings.n0,
        tau1: r.settings.ms.tau1,
        n: n.unwrap_or(cfg.measure.scan_n),
        tau: r.settings.ms.tau,
        check_good: good && cfg.measure.check_good,
    };
    if st.grid == 0 || st.n == 0 {
        return Err(Failure::validation(anyhow::anyhow!("--grid and --N must be positive")));
    }
    let base = r.problem.operator(r.problem.zero());
    let rep = scan_lambda(&r.ctx, &base, &st);
    let csv = io::scan_csv(&rep).map_err(Failure::numerical)?;
    std::fs::write(dir.join("scan.csv"), csv)
        .context("writing scan.csv")
        .map_err(Failure::numerical)?;
    let mut summary = io::scan_summary(&rep);
    summary["N"] = json!(st.n);
    summary["N0"] = json!(st.n0);
    summary["gamma"] = io::num(st.gamma);
    summary["config"] = config_json(r);
    write(&dir.join("scan.json"), &summary)?;
    Ok(format!(
        "grid {} at N = {}: excluded U {:.4}, U_N {:.4}, G0_N {}\n",
        st.grid,
        st.n,
        rep.excluded_u,
        rep.excluded_u_n,
        rep.excluded_good.map_or_else(|| String::from("-"), |x| format!("{x:.4}"))
    ))
}

fn linearization(r: &Resolved, solution: Option<&Path>) -> Result<FourierField, Failure> {
    let Some(path) = solution else {
        return r.problem.f.derivative(&r.problem.zero()).map_err(Failure::numerical);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::validation)?;
    let v: Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not JSON", path.display()))
        .map_err(Failure::validation)?;
    let u = io::field_from_json(&r.ctx.geom, &v["u"])
        .with_context(|| format!("{}: field u", path.display()))
        .map_err(Failure::validation)?;
    r.problem.f.derivative(&u).map_err(Failure::numerical)
}

fn j0_or_origin(r: &Resolved, j0: Option<&[i32]>) -> Result<Vec<i32>, Failure> {
    let dim = r.ctx.geom.r;
    match j0 {
        None => Ok(vec![0; dim]),
        Some(v) if v.len() == dim => Ok(v.to_vec()),
        Some(v) => Err(Failure::validation(anyhow::anyhow!(
            "--j0 has {} components, expected {dim}",
            v.len()
        ))),
    }
}

fn run_bad_theta(
    r: &Resolved,
    dir: &Path,
    n: u32,
    j0: Option<&[i32]>,
    mode: Option<ModeArg>,
    solution: Option<&Path>,
) -> Result<String, Failure> {
    if n == 0 {
        return Err(Failure::validation(anyhow::anyhow!("--N must be positive")));
    }
    let j0 = j0_or_origin(r, j0)?;
    let a = linearization(r, solution)?;
    let p = r.problem.operator(a);
    let tau = r.settings.ms.tau;
    let mb = &r.config.measure;
    let range = mb.theta_range.unwrap_or((-3.0 * n as f64, 3.0 * n as f64));
    let sweep = match mode {
        Some(ModeArg::Sweep) => true,
        Some(ModeArg::Exact) => false,
        None => mb.mode == CoverModeName::Sweep,
    };
    let cmode = if sweep {
        CoverMode::Sweep {
            resolution: mb.resolution_fraction * (n as f64).powf(-tau),
        }
    } else {
        CoverMode::Exact
    };
    let rep = bad_theta_cover(&r.ctx, &p, n, &j0, Some(range), tau, cmode);
    let mut v = io::cover_to_json(&rep, n, &j0);
    v["mode"] = json!(if sweep { "sweep" } else { "exact" });
    v["theta_range"] = json!([io::num(range.0), io::num(range.1)]);
    v["tau"] = io::num(tau);
    v["config"] = config_json(r);
    write(&dir.join("bad_theta.json"), &v)?;
    Ok(format!(
        "{} intervals, measure {:.4e}, within budget: {}\n",
        rep.cover.len(),
        rep.cover.total_measure(),
        rep.cover.within_budget()
    ))
}

#[allow(clippy::too_many_arguments)]
fn run_invert(
    r: &Resolved,
    dir: &Path,
    matrix: Option<&Path>,
    n: u32,
    inner: Option<u32>,
    j0: Option<&[i32]>,
    theta: f64,
    solution: Option<&Path>,
) -> Result<String, Failure> {
    let a = match matrix {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(Failure::validation)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let file: io::MatrixFile = serde_path_to_error::deserialize(de)
                .map_err(|e| Failure::validation(anyhow::anyhow!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
            io::matrix_from_file(&r.ctx, &file).map_err(Failure::validation)?
        }
        None => {
            if n == 0 {
                return Err(Failure::validation(anyhow::anyhow!("--N must be positive")));
            }
            let j0 = j0_or_origin(r, j0)?;
            let p = r.problem.operator(linearization(r, solution)?).with_theta(theta);
            let l0 = vec![0; r.ctx.geom.nu];
            assemble(&r.ctx, &p, n, &l0, &j0)
        }
    };
    let inner = inner.unwrap_or_else(|| (n as f64).sqrt().ceil().max(1.0) as u32);
    let (inv, diag) = multiscale::invert(&a, inner, n, &r.settings.ms).map_err(Failure::numerical)?;
    let ad = a.to_dense();
    let id = inv.to_dense();
    let mut check = json!(null);
    if ad.nrows() <= r.settings.assemble_limit {
        let prod = dense::matmul(&id, &ad);
        let mut res = prod.clone();
        for i in 0..res.nrows() {
            res[(i, i)] -= beamkam_core::Complex64::new(1.0, 0.0);
        }
        let reference = dense::inverse(&ad);
        let rel = reference.map(|d| {
            let diff = &id - &d;
            dense::op_norm(&diff) / dense::op_norm(&d)
        });
        check = json!({
            "residual_op": io::num(dense::op_norm(&res)),
            "relative_error_vs_dense": rel.map(io::num),
        });
    }
    let mut v = json!({
        "dim": ad.nrows(),
        "inner": inner,
        "N": n,
        "diagnostics": io::diagnostics_to_json(&diag),
        "dense_check": check,
        "config": config_json(r),
    });
    if matrix.is_some() {
        v["source"] = json!("file");
    } else {
        v["source"] = json!("box operator");
        v["theta"] = io::num(theta);
    }
    write(&dir.join("invert.json"), &v)?;
    Ok(format!(
        "dim {}: {} regular, {} box-good, {} bad sites; dense check {}\n",
        diag.dim, diag.regular, diag.box_good, diag.bad, v["dense_check"]
    ))
}

fn run_verify(cli: &Cli, trials: usize) -> Result<String, Failure> {
    let cfg = load_config(&cli.config)?;
    let resolved = cfg.resolve()?;
    let dir = out_dir(cli, &resolved.config)?;
    let mut rows = verify::lemma_suite(cli.seed, trials);
    rows.push(verify::covariance_suite(cli.seed, 100));
    rows.push(verify::lipschitz_suite(cli.seed, 1000));
    rows.push(verify::cluster_suite(cli.seed, 100));
    let table = verify::format_table(&rows);
    let v = json!({
        "seed": cli.seed,
        "trials": trials,
        "checks": rows,
        "config": config_json(&resolved),
    });
    write(&dir.join("verify.json"), &v)?;
    if rows.iter().all(|r| r.passed) {
        Ok(table)
    } else {
        print!("{table}");
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(Failure::numerical(anyhow::anyhow!("failed checks: {}", failed.join(", "))))
    }
}
