//! The `trajguide` command line: single runs, ablations, λ sweeps, oracle
//! suites, plot data and the HTTP service.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trajguide_core::ablation::{lambda_variants, run_ablation, AblationTable, Variant};
use trajguide_core::formats::artifacts::Manifest;
use trajguide_core::formats::{demo_config, load_run_config, write_run_artifacts, AttentionTrace, RunConfig};
use trajguide_core::verify::{self, Corruption, EdtReport, GradReport};
use trajguide_core::{embed_tokens, guided_sample, Error, ErrorClass, Mode, SandboxModel};

pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const THREADS_ENV: &str = "TRAJGUIDE_THREADS";
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 1.0, 5.0, 10.0, 20.0, 100.0];

#[derive(Debug, Parser)]
#[command(name = "trajguide", version, about = "Trajectory-guided sampling in a sandbox diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags that override the loaded config.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    /// Total denoising steps T.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Guided steps K from the start.
    #[arg(long, global = true)]
    pub guided_steps: Option<usize>,
    /// Guidance updates G per guided step.
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the built-in two-object scene and write its run directory.
    Demo {
        #[arg(long)]
        trace: bool,
    },
    /// Run one config.
    Run {
        config: PathBuf,
        /// Also store the attention trace (`trace.atrc`).
        #[arg(long)]
        trace: bool,
    },
    /// Mean DTL per guidance mode over the config's scenes.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Mode>>,
    },
    /// Mean DTL per λ over the config's scenes.
    SweepLambda {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Option<Vec<f64>>,
    },
    /// Finite-difference gradient checks.
    VerifyGrad {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long = "check-seed", default_value_t = 0)]
        check_seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Distance transform against brute force.
    VerifyEdt {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long = "check-seed", default_value_t = 0)]
        check_seed: u64,
        #[arg(long, default_value_t = 64)]
        max_dim: usize,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Turn a run or table directory into plot-ready series.
    RenderPlots { run_dir: PathBuf },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Runtime => EXIT_DIVERGED,
            ErrorClass::Io => EXIT_IO,
        };
        Self {
            code,
            message: format!("{} error: {e}", class_name(e.class())),
        }
    }
}

fn class_name(c: ErrorClass) -> &'static str {
    match c {
        ErrorClass::Config => "config",
        ErrorClass::Runtime => "runtime",
        ErrorClass::Io => "io",
    }
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: format!("config error: {}", message.into()),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    Error::io(path, e).into()
}

pub type CliResult<T> = Result<T, CliError>;

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        let g = &mut cfg.guidance;
        if let Some(v) = self.seed {
            g.seed = v;
        }
        if let Some(v) = self.mode {
            g.mode = v;
        }
        if let Some(v) = self.lambda {
            g.lambda = v;
        }
        if let Some(v) = self.eta {
            g.eta = v;
        }
        if let Some(v) = self.steps {
            g.total_steps = v;
        }
        if let Some(v) = self.guided_steps {
            g.guided_steps = v;
        }
        if let Some(v) = self.repeats {
            g.repeats_per_step = v;
        }
        cfg.validate()?;
        Ok(())
    }

    fn out_dir(&self, cfg: Option<&RunConfig>, default: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from(default))
    }
}

/// Loads a config; any failure to read or parse it is a config error.
pub fn load_config(path: &Path, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = load_run_config(path).map_err(|e| match e {
        Error::Io { .. } => config_error(e.to_string()),
        other => CliError::from(other),
    })?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

/// Worker pool capped by `TRAJGUIDE_THREADS` when set.
pub fn worker_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_error(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| config_error(e.to_string()))
}

pub fn thread_cap() -> CliResult<usize> {
    Ok(worker_pool()?.current_num_threads())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub dtl: Option<f64>,
}

pub fn execute_run(cfg: &RunConfig, dir: &Path, trace: bool) -> CliResult<RunOutcome> {
    let model = SandboxModel::new(cfg.model)?;
    let tokens = embed_tokens(&cfg.prompt, cfg.model.d_k, cfg.model.seed)?;
    let result = guided_sample(&model, &tokens, &cfg.trajectories, &cfg.guidance)?;
    let manifest = write_run_artifacts(&result, dir, trace)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
        dtl: result.dtl(),
    })
}

pub fn cmd_run(config: &Path, overrides: &Overrides, trace: bool) -> CliResult<RunOutcome> {
    let cfg = load_config(config, overrides)?;
    let dir = overrides.out_dir(Some(&cfg), "trajguide-out/run");
    execute_run(&cfg, &dir, trace)
}

pub fn cmd_demo(overrides: &Overrides, trace: bool) -> CliResult<RunOutcome> {
    let mut cfg = demo_config();
    overrides.apply(&mut cfg)?;
    let dir = overrides.out_dir(None, "trajguide-out/demo");
    execute_run(&cfg, &dir, trace)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializes").as_bytes())
}

fn evaluate(cfg: &RunConfig, variants: &[Variant]) -> CliResult<AblationTable> {
    let pool = worker_pool()?;
    Ok(run_ablation(&cfg.model, &cfg.scenes(), variants, &cfg.guidance, Some(&pool))?)
}

pub fn cmd_ablate(config: &Path, overrides: &Overrides, modes: Option<&[Mode]>) -> CliResult<AblationTable> {
    let cfg = load_config(config, overrides)?;
    let modes = modes.unwrap_or(&Mode::ALL);
    if modes.is_empty() {
        return Err(config_error("no variants given"));
    }
    let variants: Vec<Variant> = modes.iter().map(|&m| Variant::mode(m)).collect();
    let table = evaluate(&cfg, &variants)?;
    let dir = overrides.out_dir(Some(&cfg), "trajguide-out/ablation");
    write_file(&dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    write_json(&dir.join("ablation.json"), &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Series {
    pub x_label: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn cmd_sweep_lambda(config: &Path, overrides: &Overrides, values: &[f64]) -> CliResult<AblationTable> {
    if values.is_empty() {
        return Err(config_error("--values needs at least one λ"));
    }
    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(config_error(format!("λ value {bad} must be a finite number >= 0")));
    }
    let mut cfg = load_config(config, overrides)?;
    cfg.guidance.mode = Mode::Full;
    let table = evaluate(&cfg, &lambda_variants(values))?;
    let dir = overrides.out_dir(Some(&cfg), "trajguide-out/lambda-sweep");
    write_file(&dir.join("lambda_sweep.csv"), table.to_csv().as_bytes())?;
    write_json(&dir.join("lambda_sweep.json"), &table)?;
    write_json(&dir.join("lambda_series.json"), &lambda_series(&table))?;
    Ok(table)
}

pub fn lambda_series(table: &AblationTable) -> Series {
    Series {
        x_label: "lambda".into(),
        y_label: "mean_dtl".into(),
        x: table.rows.iter().map(|r| r.lambda).collect(),
        y: table.rows.iter().map(|r| r.mean_dtl).collect(),
    }
}

#[derive(Debug)]
pub struct VerifyOutcome<R> {
    pub report: R,
    pub dump: Option<PathBuf>,
}

impl<R> VerifyOutcome<R> {
    pub fn exit_code(&self) -> i32 {
        if self.dump.is_some() {
            EXIT_VERIFY_FAILED
        } else {
            0
        }
    }
}

fn dump_trace(dir: &Path, name: &str, trace: &AttentionTrace) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    trace.write(&path)?;
    Ok(path)
}

fn corruption(flag: bool) -> Corruption {
    if flag {
        Corruption::Seeded
    } else {
        Corruption::None
    }
}

pub fn cmd_verify_grad(cases: usize, seed: u64, corrupt: bool, overrides: &Overrides) -> CliResult<VerifyOutcome<GradReport>> {
    let report = verify::verify_grad(cases, seed, corruption(corrupt))?;
    println!(
        "attention-side max rel err {:.3e} (tol {:.0e}) {}",
        report.attention_max_rel,
        verify::ATTENTION_GRAD_TOL,
        pass(report.attention_max_rel <= verify::ATTENTION_GRAD_TOL)
    );
    println!(
        "end-to-end max rel err {:.3e} (tol {:.0e}) {}",
        report.latent_max_rel,
        verify::LATENT_GRAD_TOL,
        pass(report.latent_max_rel <= verify::LATENT_GRAD_TOL)
    );
    let dump = if report.passed {
        None
    } else {
        let dir = overrides.out_dir(None, "trajguide-out/verify");
        let path = dump_trace(&dir, "verify-grad-worst.atrc", &report.worst_trace)?;
        println!("worst instance written to {}", path.display());
        Some(path)
    };
    Ok(VerifyOutcome { report, dump })
}

pub fn cmd_verify_edt(
    cases: usize,
    seed: u64,
    max_dim: usize,
    corrupt: bool,
    overrides: &Overrides,
) -> CliResult<VerifyOutcome<EdtReport>> {
    if max_dim == 0 {
        return Err(config_error("--max-dim must be >= 1"));
    }
    let report = verify::verify_edt(cases, seed, max_dim, corruption(corrupt))?;
    println!(
        "distance transform max abs err {:.3e} over {} grids (tol {:.0e}) {}",
        report.max_abs_err,
        report.cases,
        verify::EDT_TOL,
        pass(report.passed)
    );
    let dump = if report.passed {
        None
    } else {
        let dir = overrides.out_dir(None, "trajguide-out/verify");
        let path = dump_trace(&dir, "verify-edt-worst.atrc", &report.worst_trace)?;
        println!("worst instance (grid {}) written to {}", report.worst_case, path.display());
        Some(path)
    };
    Ok(VerifyOutcome { report, dump })
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EnergySeries {
    pub step: Vec<usize>,
    pub e_control: Vec<Option<f64>>,
    pub e_movement: Vec<Option<f64>>,
    pub e_total: Vec<Option<f64>>,
    pub latent_norm: Vec<f64>,
}

fn parse_energies(text: &str) -> Option<EnergySeries> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (step, ec, em, et, norm) = (
        col("step")?,
        col("e_control")?,
        col("e_movement")?,
        col("e_total")?,
        col("latent_norm")?,
    );
    let mut s = EnergySeries {
        step: Vec::new(),
        e_control: Vec::new(),
        e_movement: Vec::new(),
        e_total: Vec::new(),
        latent_norm: Vec::new(),
    };
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        s.step.push(f.get(step)?.parse().ok()?);
        s.e_control.push(f.get(ec)?.parse().ok());
        s.e_movement.push(f.get(em)?.parse().ok());
        s.e_total.push(f.get(et)?.parse().ok());
        s.latent_norm.push(f.get(norm)?.parse().ok()?);
    }
    Some(s)
}

/// Writes plot data for whatever the directory holds: a run's energies and
/// final attention, and ablation or λ-sweep tables. Returns the files
/// written, all under `<dir>/plots`.
pub fn cmd_render_plots(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(config_error(format!("{} is not a directory", dir.display())));
    }
    let plots = dir.join("plots");
    let mut written = Vec::new();

    let energies = dir.join("energies.csv");
    if energies.exists() {
        let text = fs::read_to_string(&energies).map_err(|e| io_error(&energies, e))?;
        let series = parse_energies(&text).ok_or_else(|| config_error(format!("{} is malformed", energies.display())))?;
        let path = plots.join("energy_series.json");
        write_json(&path, &series)?;
        written.push(path);
    }

    let trace = dir.join("trace.atrc");
    if trace.exists() {
        let t = AttentionTrace::read(&trace)?;
        if t.steps > 0 {
            let last = t.slice(t.steps - 1, t.layers - 1);
            for token in 0..t.tokens {
                let mut csv = String::new();
                for r in 0..t.dims.height {
                    let row: Vec<String> = (0..t.dims.width)
                        .map(|c| last[t.dims.index(r, c) * t.tokens + token].to_string())
                        .collect();
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
                let path = plots.join(format!("attention_final_token{token}.csv"));
                write_file(&path, csv.as_bytes())?;
                written.push(path);
            }
        }
    }

    for (table, name, x_label) in [
        ("ablation.json", "ablation_series.json", "variant_index"),
        ("lambda_sweep.json", "lambda_series.json", "lambda"),
    ] {
        let path = dir.join(table);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        let t: AblationTable = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let series = if x_label == "lambda" {
            lambda_series(&t)
        } else {
            Series {
                x_label: x_label.into(),
                y_label: "mean_dtl".into(),
                x: (0..t.rows.len()).map(|i| i as f64).collect(),
                y: t.rows.iter().map(|r| r.mean_dtl).collect(),
            }
        };
        let out = plots.join(name);
        write_json(&out, &series)?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(config_error(format!("nothing to plot in {}", dir.display())));
    }
    Ok(written)
}

pub fn cmd_serve(port: u16, overrides: &Overrides) -> CliResult<()> {
    let cfg = trajguide_service::ServiceConfig {
        run_slots: thread_cap()?,
        artifact_root: Some(overrides.out_dir(None, "trajguide-out/service")),
        ..trajguide_service::ServiceConfig::default()
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError {
        code: EXIT_IO,
        message: e.to_string(),
    })?;
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    runtime
        .block_on(trajguide_service::serve(addr, cfg))
        .map_err(|e| CliError {
            code: EXIT_IO,
            message: format!("serve: {e}"),
        })
}

fn print_table(table: &AblationTable) {
    for r in &table.rows {
        println!(
            "{:<20} mean DTL {:.4}  ({} scenes, {} failed)",
            r.variant, r.mean_dtl, r.scenes, r.failures
        );
    }
}

fn print_run(o: &RunOutcome) {
    match o.dtl {
        Some(d) => println!("DTL {d:.6}"),
        None => println!("DTL n/a (no trajectories)"),
    }
    println!("run directory {}", o.dir.display());
}

/// Runs one parsed invocation and returns the process exit code.
pub fn dispatch(cli: Cli) -> CliResult<i32> {
    let o = &cli.overrides;
    match cli.command {
        Command::Demo { trace } => print_run(&cmd_demo(o, trace)?),
        Command::Run { config, trace } => print_run(&cmd_run(&config, o, trace)?),
        Command::Ablate { config, variants } => print_table(&cmd_ablate(&config, o, variants.as_deref())?),
        Command::SweepLambda { config, values } => {
            print_table(&cmd_sweep_lambda(&config, o, values.as_deref().unwrap_or(&DEFAULT_LAMBDAS))?)
        }
        Command::VerifyGrad {
            cases,
            check_seed,
            corrupt,
        } => return Ok(cmd_verify_grad(cases, check_seed, corrupt, o)?.exit_code()),
        Command::VerifyEdt {
            cases,
            check_seed,
            max_dim,
            corrupt,
        } => return Ok(cmd_verify_edt(cases, check_seed, max_dim, corrupt, o)?.exit_code()),
        Command::RenderPlots { run_dir } => {
            for p in cmd_render_plots(&run_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Serve { port } => cmd_serve(port, o)?,
    }
    Ok(0)
}
