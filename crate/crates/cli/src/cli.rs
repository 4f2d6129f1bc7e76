//! `lumenforge` subcommands.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lumenforge::designgen::{
    generate_database, read_database, summarize, write_entry, DatabaseOptions, DbEntry, DesignRecord, LmOptions,
    SamplingPlan, TargetSpec,
};
use lumenforge::optics::{evaluate_design, write_irradiance_csv, write_pgm, ScenarioKind};
use lumenforge::surrogate::{infer_design, load_model, save_model, train_on_records, MlpTopology, TrainOptions};
use lumenforge::{Error, Result};

use crate::sweep::{run_sweep, write_sweep_csv, SweepPlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lumenforge", version, about = "Freeform illumination design with neural surrogates")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Rays per evaluation trace.
    #[arg(long, global = true)]
    pub rays: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a design database (JSON Lines).
    GenDb(GenDbArgs),
    /// Train a surrogate on a database.
    Train(TrainArgs),
    /// Predict one design.
    Infer(InferArgs),
    /// Raytrace model predictions over a sweep; writes CSV.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDbArgs {
    /// reflector_offset or lens_rect
    #[arg(long)]
    pub scenario: String,
    /// Uniform random targets in the training box.
    #[arg(long, conflicts_with = "grid")]
    pub random: Option<usize>,
    /// Grid counts such as 5x5x4.
    #[arg(long)]
    pub grid: Option<String>,
    /// Keep records already in the output file.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub refine_iter: Option<usize>,
    #[arg(long)]
    pub ray_grid: Option<usize>,
    #[arg(long)]
    pub no_warm_start: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// reflector, lens, or sizes like 3-9-18-36 (default: scenario preset)
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    pub holdout: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Target parameters, e.g. w=3000,h=2500,d=1200 or x=100,y=200
    #[arg(long)]
    pub target: String,
    /// Also raytrace the design.
    #[arg(long)]
    pub evaluate: bool,
    /// Irradiance CSV path (implies --evaluate).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Irradiance PGM path (implies --evaluate).
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sweep such as w=1000:8000:8,h=1000:8000:8,d=1200
    #[arg(long, conflicts_with = "db")]
    pub sweep: Option<String>,
    /// Evaluate at the targets of a database instead.
    #[arg(long)]
    pub db: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address (env LUMENFORGE_ADDR).
    #[arg(long)]
    pub addr: Option<String>,
    /// Comma-separated model files (env LUMENFORGE_MODELS).
    #[arg(long)]
    pub models: Option<String>,
    /// Ray cap per trace request (env LUMENFORGE_MAX_RAYS).
    #[arg(long)]
    pub max_rays: Option<usize>,
    /// Directory served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::Schema(_) => EXIT_IO,
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::ScenarioMismatch { .. } | Error::DegenerateTarget(_) => {
            EXIT_USAGE
        }
        Error::Domain(_) | Error::NonPositiveRadius { .. } | Error::SingularPole | Error::EmptyMap | Error::Divergence(_) => {
            EXIT_NUMERICAL
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::GenDb(a) => gen_db(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Infer(a) => infer(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Serve(a) => serve(&cli, a),
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn parse_grid(s: &str) -> Result<Vec<usize>> {
    s.split(['x', 'X'])
        .map(|c| c.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad grid {s:?}"))))
        .collect()
}

fn gen_db(cli: &Cli, a: &GenDbArgs) -> Result<i32> {
    let kind = ScenarioKind::parse(&a.scenario)?;
    let scenario = kind.scenario();
    let plan = match (a.random, &a.grid) {
        (Some(n), None) => SamplingPlan::random(kind, n),
        (None, Some(g)) => SamplingPlan::grid(kind, parse_grid(g)?),
        _ => return Err(Error::InvalidArgument("give exactly one of --random or --grid".into())),
    };
    let out = require_out(cli)?;
    let mut opts = DatabaseOptions::for_scenario(kind);
    if let Some(r) = cli.rays {
        opts.eval_rays = r;
    }
    opts.warm_start = !a.no_warm_start;
    let defaults = LmOptions::for_scenario(kind);
    opts.lm.max_iter = a.max_iter.unwrap_or(defaults.max_iter);
    opts.lm.refine_iter = a.refine_iter.unwrap_or(defaults.refine_iter);
    opts.lm.ray_grid_n = a.ray_grid.unwrap_or(defaults.ray_grid_n);

    let existing = if a.resume && out.exists() {
        let entries = read_database(BufReader::new(File::open(out)?))?;
        if entries.iter().any(|e| e.scenario() != kind) {
            return Err(Error::InvalidArgument("existing database is for another scenario".into()));
        }
        entries
    } else {
        Vec::new()
    };
    let file = OpenOptions::new().create(true).write(true).append(a.resume).truncate(!a.resume).open(out)?;
    let mut w = BufWriter::new(file);
    let entries = generate_database(&scenario, &plan, cli.seed, &opts, &existing, |e| {
        write_entry(e, &mut w)?;
        w.flush()?;
        if let DbEntry::Failed(f) = e {
            eprintln!("warning: target {} failed: {}", f.meta.index, f.error);
        }
        Ok(())
    })?;
    w.flush()?;
    let s = summarize(&entries);
    println!(
        "records: {} succeeded: {} mean_nonuniformity_pct: {:.3} max_nonuniformity_pct: {:.3}",
        s.total, s.succeeded, s.mean_nonuniformity, s.max_nonuniformity
    );
    Ok(if s.total == 0 || s.succeeded * 10 >= s.total * 9 { EXIT_OK } else { EXIT_NUMERICAL })
}

fn load_records(path: &Path) -> Result<Vec<DesignRecord>> {
    let entries = read_database(BufReader::new(File::open(path)?))?;
    Ok(entries.iter().filter_map(DbEntry::design).cloned().collect())
}

/// `model.json` -> `model.report.json`
pub fn report_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model.with_file_name(format!("{stem}.report.json"))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let out = require_out(cli)?;
    let records = load_records(&a.db)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no successful designs", a.db.display())));
    }
    let topology = a.topology.as_deref().map(MlpTopology::parse_preset).transpose()?;
    let opts = TrainOptions { max_epochs: a.epochs, seed: cli.seed, holdout: a.holdout, ..Default::default() };
    let (model, report) = train_on_records(&records, topology, &opts)?;
    save_model(&model, out)?;
    let mut rw = BufWriter::new(File::create(report_path(out))?);
    serde_json::to_writer_pretty(&mut rw, &report)?;
    rw.write_all(b"\n")?;
    rw.flush()?;
    eprintln!(
        "trained {:?} on {} samples: {} epochs, mse {:.3e}, stop {:?}",
        model.topology.sizes(),
        report.n_train,
        report.epochs,
        report.final_mse,
        report.stop
    );
    if report.stop == lumenforge::lm::StopReason::LambdaCap {
        eprintln!("warning: damping reached its cap; returning the best model found");
    }
    Ok(EXIT_OK)
}

/// Parses `w=3000,h=2500,d=1200` into a target of the given kind.
pub fn parse_target(kind: ScenarioKind, s: &str) -> Result<TargetSpec> {
    let names = TargetSpec::param_names(kind);
    let mut vals = vec![None; names.len()];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("expected name=value, got {part:?}")))?;
        let i = names
            .iter()
            .position(|n| *n == k.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {k:?} for {kind}")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad number {v:?}")))?;
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{k} must be finite")));
        }
        vals[i] = Some(v);
    }
    let p: Vec<f64> = vals
        .into_iter()
        .zip(names)
        .map(|(v, n)| v.ok_or_else(|| Error::InvalidArgument(format!("missing parameter {n}"))))
        .collect::<Result<_>>()?;
    TargetSpec::from_params(kind, &p)
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let kind = model.scenario.ok_or_else(|| Error::Format("model has no scenario tag".into()))?;
    let target = parse_target(kind, &a.target)?;
    if model.extrapolates(&target.params()) {
        eprintln!("warning: target lies outside the training box; extrapolating");
    }
    let surface = infer_design(&model, &target)?;
    let text = serde_json::to_string_pretty(&surface)?;
    match &cli.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    if a.evaluate || a.csv.is_some() || a.pgm.is_some() {
        let sc = kind.scenario();
        let ev = evaluate_design(&sc, &surface, &target, cli.rays.unwrap_or(lumenforge::optics::DEFAULT_RAYS), cli.seed)?;
        eprintln!("nonuniformity_pct: {:.3} spill: {:.4} lost: {:.4}", ev.nonuniformity_pct, ev.spill_fraction, ev.loss_fraction);
        if let Some(p) = &a.csv {
            let mut w = BufWriter::new(File::create(p)?);
            write_irradiance_csv(&ev.smoothed, &mut w)?;
            w.flush()?;
        }
        if let Some(p) = &a.pgm {
            let mut w = BufWriter::new(File::create(p)?);
            write_pgm(&ev.smoothed, &mut w)?;
            w.flush()?;
        }
    }
    Ok(EXIT_OK)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    let kind = model.scenario.ok_or_else(|| Error::Format("model has no scenario tag".into()))?;
    let targets = match (&a.sweep, &a.db) {
        (Some(s), None) => SweepPlan::parse(kind, s)?.targets()?,
        (None, Some(db)) => {
            let recs = load_records(db)?;
            if recs.iter().any(|r| r.scenario != kind) {
                return Err(Error::ScenarioMismatch { model: kind.to_string(), request: "database".into() });
            }
            recs.iter().map(|r| r.target).collect()
        }
        _ => return Err(Error::InvalidArgument("give exactly one of --sweep or --db".into())),
    };
    let rows = run_sweep(&model, &targets, cli.rays.unwrap_or(lumenforge::optics::DEFAULT_RAYS), cli.seed);
    match &cli.out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            write_sweep_csv(kind, &rows, &mut w)?;
            w.flush()?;
        }
        None => write_sweep_csv(kind, &rows, std::io::stdout().lock())?,
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} sweep points produced invalid surfaces", rows.len());
    }
    Ok(EXIT_OK)
}

fn serve(_cli: &Cli, a: &ServeArgs) -> Result<i32> {
    let mut cfg = crate::service::ServiceConfig::from_env()?;
    if let Some(addr) = &a.addr {
        cfg.addr = addr.clone();
    }
    if let Some(m) = &a.models {
        cfg.models = crate::service::split_list(m);
    }
    if let Some(r) = a.max_rays {
        cfg.max_rays = r;
    }
    if let Some(d) = &a.static_dir {
        cfg.static_dir = Some(d.clone());
    }
    crate::service::serve_blocking(cfg)?;
    Ok(EXIT_OK)
}
