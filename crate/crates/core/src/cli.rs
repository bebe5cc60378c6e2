//! `editedid` command line: config resolution, subcommands and result files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};

use crate::align::align_inversion;
use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::experiments::{bench_solver, dpm_range_row, lambda_row, round_trip, DpmRangeRow, LambdaRow};
use crate::gating::{best_point, what_sweep, SweepPoint, SweepScenario};
use crate::metrics::StabilityReport;
use crate::nulltext::EmbeddingSchedule;
use crate::pipeline::{
    build_scenario, run_alignment_and_nulltext, run_editedid, run_parallel_batch, PipelineResult, Stage, StageError,
};
use crate::plot::{emit_plot, Plot};
use crate::schedule::IndexConvention;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "editedid",
    version,
    about = "Dual-source inversion and attention-gated generation on Gaussian oracles"
)]
pub struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Results directory (default `results/<subcommand>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed override; takes precedence over EDITEDID_SEED.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=crate::config::MAX_SEED))]
    pub seed: Option<u64>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Overwrite an existing results directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Continue a sweep in an existing results directory, skipping finished points.
    #[arg(long, global = true)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PlanArgs {
    /// Number of sampling steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub s1: Option<usize>,
    #[arg(long)]
    pub s2: Option<usize>,
    /// `from_data` or `from_noise`.
    #[arg(long)]
    pub convention: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the hybrid timestep grid as CSV.
    Schedule(PlanArgs),
    /// Invert source 1 to the noise end.
    Invert(PlanArgs),
    /// Invert and reconstruct source 1 without null-text optimization.
    Reconstruct(PlanArgs),
    /// Aligned inversion of both sources.
    Align(PlanArgs),
    /// Aligned inversion plus per-identity null-text optimization.
    Nulltext(PlanArgs),
    /// Full run with gating forced on.
    Entangle(PlanArgs),
    /// Full run as configured.
    Pipeline(PlanArgs),
    /// Reconstruction PSNR against the initial mixing weight.
    SweepLambda {
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.04,0.06,0.08,0.1,0.3,0.5")]
        values: Vec<f64>,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Reconstruction PSNR against the DPM window, given as `s1:s2` pairs.
    SweepDpmRange {
        #[arg(long, value_delimiter = ',', default_value = "0:3,1:3,1:4,0:4,1:5,0:5")]
        ranges: Vec<String>,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long)]
        convention: Option<String>,
    },
    /// Overlap weight sweep on a synthetic two-source layout.
    SweepWhat {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        values: Vec<f64>,
        /// `co-existence` or `layer-coverage`.
        #[arg(long, default_value = "co-existence")]
        scenario: String,
        /// Opacity of the top element for `layer-coverage`.
        #[arg(long, default_value_t = 0.7)]
        opacity: f64,
        #[arg(long, default_value_t = 12)]
        side: usize,
    },
    /// Round-trip stability of DDIM-only, DPM-only, fragmented and global plans.
    BenchSolver(PlanArgs),
    /// Independent pipeline runs on a worker pool.
    Batch {
        /// Config files, one item each.
        #[arg(long, value_delimiter = ',')]
        configs: Vec<PathBuf>,
        /// Seeds applied to the base config, one item each.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Schedule(_) => "schedule",
            Command::Invert(_) => "invert",
            Command::Reconstruct(_) => "reconstruct",
            Command::Align(_) => "align",
            Command::Nulltext(_) => "nulltext",
            Command::Entangle(_) => "entangle",
            Command::Pipeline(_) => "pipeline",
            Command::SweepLambda { .. } => "sweep-lambda",
            Command::SweepDpmRange { .. } => "sweep-dpm-range",
            Command::SweepWhat { .. } => "sweep-what",
            Command::BenchSolver(_) => "bench-solver",
            Command::Batch { .. } => "batch",
        }
    }
}

/// A failure with its exit code and the stage named in the `ERROR` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub stage: String,
    pub message: String,
}

impl Failure {
    fn new(code: i32, stage: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code, stage: stage.into(), message: message.into() }
    }

    pub fn line(&self) -> String {
        format!("ERROR {} {}", self.stage, self.message)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let code = match (&e.stage, &e.error) {
            (Stage::Config, _) | (_, Error::Config { .. }) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        Failure::new(code, e.stage.to_string(), e.error.to_string())
    }
}

fn io_failure(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_RUNTIME, "io", e.to_string())
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse `argv`, run, and return the exit status. Failures print one
/// `ERROR <stage> <message>` line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    eprintln!("ERROR usage {first}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.line());
            f.code
        }
    }
}

fn validation(e: Error) -> Failure {
    match e {
        Error::Config { key, message } => Failure::new(EXIT_VALIDATION, "config", format!("{key}: {message}")),
        other => Failure::new(EXIT_VALIDATION, "config", other.to_string()),
    }
}

fn base_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::new(EXIT_VALIDATION, "config", format!("{} not found", p.display())));
            }
            ExperimentConfig::load(p).map_err(validation)?
        }
        None => ExperimentConfig::default(),
    };
    let mut cfg = cfg.with_env_seed().map_err(validation)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_plan(cfg: &mut ExperimentConfig, p: &PlanArgs) -> CliResult<()> {
    if let Some(t) = p.steps {
        cfg.plan.steps = t;
    }
    if let Some(s) = p.s1 {
        cfg.plan.s1 = s;
    }
    if let Some(s) = p.s2 {
        cfg.plan.s2 = s;
    }
    if let Some(c) = &p.convention {
        cfg.plan.convention = c.parse::<IndexConvention>().map_err(validation)?;
    }
    Ok(())
}

fn resolved_config(cli: &Cli, plan: Option<&PlanArgs>) -> CliResult<ExperimentConfig> {
    let mut cfg = base_config(cli)?;
    if let Some(p) = plan {
        apply_plan(&mut cfg, p)?;
    }
    cfg.validate().map_err(validation)?;
    Ok(cfg)
}

const RESOLVED: &str = "config_resolved.toml";

/// Create the results directory, refusing to reuse a non-empty one unless
/// forced or resuming, and write the resolved config snapshot.
fn prepare_out(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("results").join(cli.command.name()));
    let occupied = dir.is_dir() && fs::read_dir(&dir).map_err(io_failure)?.next().is_some();
    let snapshot = cfg.to_toml();
    if occupied {
        if cli.resume {
            let previous = fs::read_to_string(dir.join(RESOLVED)).unwrap_or_default();
            if previous != snapshot {
                return Err(Failure::new(
                    EXIT_VALIDATION,
                    "io",
                    format!("{} holds results of a different config; use --force to start over", dir.display()),
                ));
            }
        } else if cli.force {
            fs::remove_dir_all(&dir).map_err(io_failure)?;
        } else {
            return Err(Failure::new(
                EXIT_VALIDATION,
                "io",
                format!("{} exists; pass --force to overwrite or --resume to continue", dir.display()),
            ));
        }
    }
    fs::create_dir_all(&dir).map_err(io_failure)?;
    write(&dir.join(RESOLVED), &snapshot)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_failure(format!("{}: {e}", path.display())))
}

fn vector_text(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Schedule(p) => cmd_schedule(cli, p),
        Command::Invert(p) => cmd_invert(cli, p),
        Command::Reconstruct(p) => cmd_reconstruct(cli, p),
        Command::Align(p) => cmd_align(cli, p),
        Command::Nulltext(p) => cmd_nulltext(cli, p),
        Command::Entangle(p) => cmd_pipeline(cli, p, true),
        Command::Pipeline(p) => cmd_pipeline(cli, p, false),
        Command::SweepLambda { values, plan } => cmd_sweep_lambda(cli, values, plan),
        Command::SweepDpmRange { ranges, steps, convention } => {
            cmd_sweep_dpm(cli, ranges, *steps, convention.as_deref())
        }
        Command::SweepWhat { values, scenario, opacity, side } => {
            cmd_sweep_what(cli, values, scenario, *opacity, *side)
        }
        Command::BenchSolver(p) => cmd_bench(cli, p),
        Command::Batch { configs, seeds, workers } => cmd_batch(cli, configs, seeds, *workers),
    }
}

fn cmd_schedule(cli: &Cli, p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let csv = cfg.plan.build().map_err(validation)?.to_csv();
    print!("{csv}");
    if cli.out.is_some() {
        let dir = prepare_out(cli, &cfg)?;
        write(&dir.join("schedule.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_invert(cli: &Cli, p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let dir = prepare_out(cli, &cfg)?;
    let sc = build_scenario(&cfg).map_err(validation)?;
    let (inv, _) =
        round_trip(&sc, &sc.plan.intervals()).map_err(|e| Failure::new(EXIT_RUNTIME, "invert", e.to_string()))?;
    let z_t = inv.final_latent().expect("non-empty plan");
    write(&dir.join("trajectory_inversion.csv"), &inv.to_csv())?;
    write(&dir.join("latent_noise.txt"), &vector_text(z_t))?;
    let l2 = z_t.iter().map(|x| x * x).sum::<f64>().sqrt();
    write(
        &dir.join("summary.txt"),
        &format!("config_hash {}\nsteps {}\nl2_noise_latent {l2}\n", cfg.hash(), inv.steps.len()),
    )?;
    Ok(())
}

fn stability_csv(rows: &[(String, StabilityReport)]) -> String {
    let mut s = format!("name,{}\n", StabilityReport::CSV_HEADER);
    for (name, r) in rows {
        s.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    s
}

fn cmd_reconstruct(cli: &Cli, p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let dir = prepare_out(cli, &cfg)?;
    let sc = build_scenario(&cfg).map_err(validation)?;
    let fail = |e: Error| Failure::new(EXIT_RUNTIME, "reconstruct", e.to_string());
    let (inv, rec) = round_trip(&sc, &sc.plan.intervals()).map_err(fail)?;
    let report = crate::metrics::stability_report(&inv, &rec, &sc.sources[0], cfg.metrics.psnr_peak).map_err(fail)?;
    write(&dir.join("trajectory_inversion.csv"), &inv.to_csv())?;
    write(&dir.join("trajectory_reconstruction.csv"), &rec.to_csv())?;
    write(&dir.join("metrics.csv"), &stability_csv(&[("identity_1".into(), report)]))?;
    write(&dir.join("summary.txt"), &format!("config_hash {}\n{}", cfg.hash(), report.summary()))?;
    Ok(())
}

fn cmd_align(cli: &Cli, p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let dir = prepare_out(cli, &cfg)?;
    let sc = build_scenario(&cfg).map_err(validation)?;
    let n = sc.plan.len();
    let embs = [
        EmbeddingSchedule::conditional_only(sc.conds[0].clone(), n),
        EmbeddingSchedule::conditional_only(sc.conds[1].clone(), n),
    ];
    let pair = align_inversion(
        &sc.plan,
        &sc.schedule,
        &sc.oracles[0],
        &sc.oracles[1],
        &sc.sources[0],
        &sc.sources[1],
        &embs[0],
        &embs[1],
        &cfg.align,
    )
    .map_err(|e| Failure::new(EXIT_RUNTIME, "align", e.to_string()))?;
    write(&dir.join("alignment.csv"), &pair.to_csv())?;
    write(&dir.join("trajectory_inversion_1.csv"), &pair.traj_1.to_csv())?;
    write(&dir.join("trajectory_inversion_2.csv"), &pair.traj_2.to_csv())?;
    write(&dir.join("latent_shared.txt"), &vector_text(&pair.z_shared))?;
    let mut summary = format!(
        "config_hash {}\nmerge_step {}\nfinal_lambda {}\n",
        cfg.hash(),
        pair.merge_step,
        pair.lambda_history.last().unwrap_or(&0.0)
    );
    for w in &pair.warnings {
        summary.push_str(&format!("warning {w:?}\n"));
    }
    write(&dir.join("summary.txt"), &summary)?;
    let steps: Vec<f64> = (0..pair.lambda_history.len()).map(|j| j as f64).collect();
    let series = vec![pair.lambda_history.clone()];
    plot(&dir.join("alignment.svg"), "mixing weight", "inversion step", "lambda", &steps, &series, &["lambda"])?;
    Ok(())
}

fn loss_csv(traces: &[&Vec<Vec<f64>>]) -> String {
    let mut s = String::from("identity,step,iteration,loss\n");
    for (i, t) in traces.iter().enumerate() {
        for (step, trace) in t.iter().enumerate() {
            for (k, l) in trace.iter().enumerate() {
                s.push_str(&format!("{},{step},{k},{l}\n", i + 1));
            }
        }
    }
    s
}

fn cmd_nulltext(cli: &Cli, p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let dir = prepare_out(cli, &cfg)?;
    let (_, out) = run_alignment_and_nulltext(&cfg)?;
    for i in 0..2 {
        write(&dir.join(format!("embeddings_{}.txt", i + 1)), &out.identities[i].schedule.to_text())?;
        write(&dir.join(format!("trajectory_reconstruction_{}.csv", i + 1)), &out.reconstructions[i].to_csv())?;
    }
    write(
        &dir.join("nulltext_loss.csv"),
        &loss_csv(&[&out.identities[0].loss_traces, &out.identities[1].loss_traces]),
    )?;
    let rows = vec![("identity_1".to_string(), out.stability[0]), ("identity_2".to_string(), out.stability[1])];
    write(&dir.join("metrics.csv"), &stability_csv(&rows))?;
    let mut summary = format!("config_hash {}\n", cfg.hash());
    for (i, id) in out.identities.iter().enumerate() {
        summary.push_str(&format!("\n[identity {}]\n{}", i + 1, out.stability[i].summary()));
        for r in &id.reports {
            summary.push_str(&format!("warning step {} residual {:e}\n", r.step, r.residual));
        }
    }
    write(&dir.join("summary.txt"), &summary)?;
    Ok(())
}

/// Write every artifact of a pipeline run into `dir`.
pub fn write_pipeline_outputs(dir: &Path, r: &PipelineResult) -> std::result::Result<(), Failure> {
    let o = &r.outputs;
    write(&dir.join("metrics.csv"), &r.metrics_csv())?;
    write(&dir.join("summary.txt"), &r.summary())?;
    write(&dir.join("alignment.csv"), &o.pair.aligned.to_csv())?;
    write(&dir.join("trajectory_inversion_1.csv"), &o.pair.aligned.traj_1.to_csv())?;
    write(&dir.join("trajectory_inversion_2.csv"), &o.pair.aligned.traj_2.to_csv())?;
    for (i, t) in o.streams.iter().enumerate() {
        write(&dir.join(format!("trajectory_stream_{}.csv", i + 1)), &t.to_csv())?;
    }
    for i in 0..2 {
        write(&dir.join(format!("embeddings_{}.txt", i + 1)), &o.pair.identities[i].schedule.to_text())?;
    }
    write(&dir.join("target.txt"), &vector_text(&o.target))?;
    let steps: Vec<f64> = (0..o.pair.aligned.loss_history.len()).map(|j| j as f64).collect();
    let series = vec![o.pair.aligned.lambda_history.clone(), o.pair.aligned.loss_history.clone()];
    plot(&dir.join("alignment.svg"), "alignment", "inversion step", "value", &steps, &series, &["lambda", "loss"])
}

fn cmd_pipeline(cli: &Cli, p: &PlanArgs, force_gating: bool) -> CliResult<()> {
    let mut cfg = base_config(cli)?;
    apply_plan(&mut cfg, p)?;
    if force_gating {
        cfg.entangle.enabled = true;
    }
    cfg.validate().map_err(validation)?;
    let dir = prepare_out(cli, &cfg)?;
    let t = Instant::now();
    let r = run_editedid(&cfg)?;
    log(cli, format!("pipeline finished in {:.2}s", t.elapsed().as_secs_f64()));
    write_pipeline_outputs(&dir, &r)
}

fn plot(
    path: &Path,
    title: &str,
    xl: &str,
    yl: &str,
    x: &[f64],
    series: &[Vec<f64>],
    labels: &[&str],
) -> CliResult<()> {
    let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let p = Plot { title, x_label: xl, y_label: yl, x, series, labels: &labels };
    emit_plot(&p, path).map_err(|e| io_failure(format!("{}: {e}", path.display())))
}

/// Sweep rows already on disk, for `--resume`.
fn read_rows<R: DeserializeOwned>(path: &Path) -> CliResult<Vec<R>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_path(path).map_err(io_failure)?;
    rd.deserialize().collect::<std::result::Result<Vec<R>, _>>().map_err(io_failure)
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_failure)?;
    for r in rows {
        w.serialize(r).map_err(io_failure)?;
    }
    w.flush().map_err(io_failure)
}

/// Run a restartable sweep: points whose key is already in `file` are kept,
/// the rest are computed and the file is rewritten after each point.
fn run_sweep<K: PartialEq + std::fmt::Debug, R: Serialize + DeserializeOwned + Clone>(
    cli: &Cli,
    path: &Path,
    keys: &[K],
    key_of: impl Fn(&R) -> K,
    compute: impl Fn(&K) -> CliResult<R>,
) -> CliResult<Vec<R>> {
    let existing: Vec<R> = if cli.resume { read_rows(path)? } else { Vec::new() };
    let mut rows: Vec<R> = Vec::with_capacity(keys.len());
    for k in keys {
        if let Some(r) = existing.iter().find(|r| key_of(r) == *k) {
            log(cli, format!("skip {k:?}"));
            rows.push(r.clone());
            continue;
        }
        log(cli, format!("run {k:?}"));
        rows.push(compute(k)?);
        write_rows(path, &rows)?;
    }
    write_rows(path, &rows)?;
    Ok(rows)
}

fn cmd_sweep_lambda(cli: &Cli, values: &[f64], p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let dir = prepare_out(cli, &cfg)?;
    let rows: Vec<LambdaRow> = run_sweep(
        cli,
        &dir.join("sweep_lambda.csv"),
        values,
        |r: &LambdaRow| r.init_lambda,
        |&v| Ok(lambda_row(&cfg, v)?),
    )?;
    let x: Vec<f64> = rows.iter().map(|r| r.init_lambda).collect();
    let series = vec![rows.iter().map(|r| r.psnr_1).collect(), rows.iter().map(|r| r.psnr_2).collect()];
    plot(
        &dir.join("sweep_lambda.svg"),
        "reconstruction PSNR",
        "initial lambda",
        "PSNR (dB)",
        &x,
        &series,
        &["identity 1", "identity 2"],
    )
}

fn parse_range(s: &str) -> CliResult<(usize, usize)> {
    let bad = || Failure::new(EXIT_USAGE, "usage", format!("range {s:?} is not s1:s2"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn cmd_sweep_dpm(cli: &Cli, ranges: &[String], steps: Option<usize>, convention: Option<&str>) -> CliResult<()> {
    let plan = PlanArgs { steps, convention: convention.map(str::to_string), ..Default::default() };
    let cfg = resolved_config(cli, Some(&plan))?;
    let keys = ranges.iter().map(|r| parse_range(r)).collect::<CliResult<Vec<_>>>()?;
    let dir = prepare_out(cli, &cfg)?;
    let rows: Vec<DpmRangeRow> = run_sweep(
        cli,
        &dir.join("sweep_dpm_range.csv"),
        &keys,
        |r: &DpmRangeRow| (r.s1, r.s2),
        |&(a, b)| Ok(dpm_range_row(&cfg, a, b)?),
    )?;
    for r in &rows {
        if let Some(e) = &r.error {
            log(cli, format!("[{}, {}] invalid: {e}", r.s1, r.s2));
        }
    }
    Ok(())
}

fn cmd_sweep_what(cli: &Cli, values: &[f64], scenario: &str, opacity: f64, side: usize) -> CliResult<()> {
    let scenario = match scenario {
        "co-existence" => SweepScenario::CoExistence,
        "layer-coverage" => SweepScenario::LayerCoverage { top_opacity: opacity },
        other => return Err(Failure::new(EXIT_USAGE, "usage", format!("unknown scenario {other:?}"))),
    };
    let cfg = resolved_config(cli, None)?;
    let dir = prepare_out(cli, &cfg)?;
    let seed = cfg.seed;
    let rows: Vec<SweepPoint> = run_sweep(
        cli,
        &dir.join("sweep_what.csv"),
        values,
        |r: &SweepPoint| r.w_hat,
        |&v| {
            what_sweep(scenario, &[v], side, seed)
                .map(|mut p| p.remove(0))
                .map_err(|e| Failure::new(EXIT_VALIDATION, "gating", e.to_string()))
        },
    )?;
    if let Some(b) = best_point(&rows) {
        write(&dir.join("summary.txt"), &format!("best_w_hat {}\nbest_score {}\n", b.w_hat, b.score))?;
    }
    let x: Vec<f64> = rows.iter().map(|r| r.w_hat).collect();
    let series = vec![rows.iter().map(|r| r.score).collect()];
    plot(&dir.join("sweep_what.svg"), "overlap weight sweep", "w_hat", "score", &x, &series, &["score"])
}

fn cmd_bench(cli: &Cli, p: &PlanArgs) -> CliResult<()> {
    let cfg = resolved_config(cli, Some(p))?;
    let dir = prepare_out(cli, &cfg)?;
    let rows = bench_solver(&cfg)?;
    let mut s = format!("variant,{},boundary_jump\n", StabilityReport::CSV_HEADER);
    for r in &rows {
        s.push_str(&format!("{},{},{}\n", r.variant, r.report.csv_row(), r.boundary_jump));
    }
    write(&dir.join("bench_solver.csv"), &s)?;
    print!("{s}");
    Ok(())
}

fn cmd_batch(cli: &Cli, configs: &[PathBuf], seeds: &[u64], workers: usize) -> CliResult<()> {
    let mut items = Vec::new();
    for p in configs {
        if !p.exists() {
            return Err(Failure::new(EXIT_VALIDATION, "config", format!("{} not found", p.display())));
        }
        let mut c = ExperimentConfig::load(p).map_err(validation)?.with_env_seed().map_err(validation)?;
        if let Some(s) = cli.seed {
            c.seed = s;
        }
        items.push(c);
    }
    if !seeds.is_empty() {
        let base = base_config(cli)?;
        items.extend(seeds.iter().map(|&s| ExperimentConfig { seed: s, ..base.clone() }));
    }
    if items.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "usage", "batch needs --configs or --seeds"));
    }
    let dir = prepare_out(cli, &base_config(cli)?)?;
    let t = Instant::now();
    let results = run_parallel_batch(&items, workers).map_err(|e| Failure::new(EXIT_USAGE, "usage", e.to_string()))?;
    log(cli, format!("batch of {} finished in {:.2}s", items.len(), t.elapsed().as_secs_f64()));
    let mut table = String::from("item,status,config_hash,psnr_1,psnr_2,error\n");
    let mut first_failure = None;
    for (k, (cfg, r)) in items.iter().zip(&results).enumerate() {
        let sub = dir.join(format!("item_{k:02}"));
        fs::create_dir_all(&sub).map_err(io_failure)?;
        write(&sub.join(RESOLVED), &cfg.to_toml())?;
        match r {
            Ok(res) => {
                write_pipeline_outputs(&sub, res)?;
                let s = &res.outputs.stability;
                table.push_str(&format!("{k},ok,{},{},{},\n", res.config_hash, s[0].psnr_db, s[1].psnr_db));
            }
            Err(e) => {
                let f = Failure::from(e.clone());
                eprintln!("{}", f.line());
                table.push_str(&format!("{k},error,{},,,{}\n", cfg.hash(), e.to_string().replace(',', ";")));
                first_failure.get_or_insert(f);
            }
        }
    }
    write(&dir.join("batch.csv"), &table)?;
    match first_failure {
        Some(f) => Err(Failure::new(
            f.code,
            "batch",
            format!("{} of {} items failed", results.iter().filter(|r| r.is_err()).count(), results.len()),
        )),
        None => Ok(()),
    }
}
