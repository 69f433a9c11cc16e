//! Command-line front end: `gen-data`, `train`, `eval`, `ablate` and
//! `spectrum`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format
//! error, 4 training divergence, 5 incompatible inputs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::ablation::{default_grid, run_sweep, threads_from_env, SweepConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfigFile;
use crate::data::{export_csv, generate_synthetic, import_csv, load_dataset, save_dataset, Dataset, Split};
use crate::error::{DivaError, Result};
use crate::eval::{evaluate, spectrum, Spectrum};
use crate::model::{ensemble, parse_task_list, task_list_label, TaskKind};
use crate::trainer::Trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

/// Exit code reported for an error.
pub fn exit_code(err: &DivaError) -> i32 {
    match err {
        DivaError::Config(_) | DivaError::BatchSpec(_) | DivaError::Mining(_) | DivaError::Domain(_) | DivaError::Json(_) => {
            EXIT_CONFIG
        }
        DivaError::Io(_) | DivaError::Format { .. } | DivaError::Csv(_) => EXIT_IO,
        DivaError::Divergence(_) | DivaError::DegenerateVector { .. } => EXIT_DIVERGED,
        DivaError::Incompatible(_) | DivaError::Dimension(_) | DivaError::Contract(_) => EXIT_INCOMPATIBLE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "diva", version, about = "Multi-task deep metric learning on precomputed features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, history and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run the task-combination sweep.
    Ablate(AblateArgs),
    /// Write the singular-value spectrum of test embeddings.
    Spectrum(SpectrumArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration (JSON); only its `data` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; a `.csv` extension writes the CSV dialect instead.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file (binary, or CSV by extension).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Active tasks, e.g. `D,S,I,Da`. Must include `D`.
    #[arg(long)]
    pub tasks: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh; its stored
    /// configuration is used.
    #[arg(long, conflicts_with_all = ["config", "tasks", "seed"])]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in total (default: the configured count).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Suppress per-step progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `summary.csv`, `runs.csv` and `ablation.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds per cell; seeds are `train.seed + 0..k`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second checkpoint drawn in the same plot, e.g. a disc-only baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output stem; `<stem>.csv` and `<stem>.svg` are written (plus
    /// `<stem>.baseline.csv` with `--baseline`).
    #[arg(long)]
    pub out: PathBuf,
    /// Use one head (`disc`, `shared`, `intra`, `dance`) instead of the
    /// ensemble.
    #[arg(long)]
    pub head: Option<TaskKind>,
}

/// Loads a dataset, choosing the reader by extension.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        import_csv(path)
    } else {
        load_dataset(path)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile::default()),
    }
}

fn gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.data;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ds = generate_synthetic(&cfg)?;
    if args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        export_csv(&ds, &args.out)?;
    } else {
        save_dataset(&ds, &args.out)?;
    }
    let (train, test) = ds.classes_by_split();
    writeln!(
        out,
        "wrote {} samples, {} features, {} train / {} test classes to {}",
        ds.len(),
        ds.feature_dim(),
        train.len(),
        test.len(),
        args.out.display()
    )?;
    Ok(())
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(p) => load_checkpoint(p)?,
        None => {
            let file = load_config(args.config.as_deref())?;
            let tasks = args.tasks.as_deref().map(parse_task_list).transpose()?;
            Trainer::new(file.train_config(tasks.as_deref(), args.seed)?)?
        }
    };
    if let Some(e) = args.epochs {
        trainer.config.epochs = e;
        trainer.config.validate()?;
    }
    let ds = read_dataset(&args.data)?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("config.json"), &trainer.config)?;
    let progress: Option<&mut dyn Write> = if args.quiet { None } else { Some(out) };
    let result = trainer.run(&ds, progress);
    // Keep the last good state even when training stops early.
    save_checkpoint(&trainer, &args.out.join("checkpoint.bin"))?;
    write_json(&args.out.join("history.json"), &trainer.history)?;
    result?;
    let report = evaluate(&trainer.model, &ds, &trainer.config.eval)?;
    write_json(&args.out.join("report.json"), &report)?;
    Ok(())
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let ds = read_dataset(&args.data)?;
    let report = evaluate(&trainer.model, &ds, &trainer.config.eval)?;
    write_json(&args.out, &report)?;
    let e = &report.ensemble;
    writeln!(
        out,
        "ensemble recall@1 {:.4} nmi {:.4} spectral_decay {:.4}",
        e.recall_at(1).unwrap_or(f64::NAN),
        e.nmi,
        e.spectral_decay
    )?;
    Ok(())
}

fn ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    if args.seeds == 0 {
        return Err(DivaError::config("--seeds must be >= 1"));
    }
    let threads = threads_from_env()?;
    let ds = read_dataset(&args.data)?;
    let base = file.train_config(None, None)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.seed + i).collect();
    let cfg = SweepConfig {
        eval: base.eval.clone(),
        base,
        embed_budget: file.embed_budget,
        cells: default_grid(),
        seeds,
        threads,
    };
    fs::create_dir_all(&args.out)?;
    let log = Mutex::new(io::stderr());
    let progress = |cell: &crate::ablation::Cell, seed: u64, r: &std::result::Result<_, String>, secs: f64| {
        let line = match r {
            Ok(m) => {
                let m: &crate::ablation::RunMetrics = m;
                format!("{cell} seed {seed}: recall@1 {:.4} ({secs:.1}s)", m.recall_at_1)
            }
            Err(e) => format!("{cell} seed {seed}: failed: {e}"),
        };
        let _ = writeln!(log.lock().expect("stderr lock"), "{line}");
    };
    let report = run_sweep(&ds, &cfg, Some(&progress))?;
    report.write_summary_csv(fs::File::create(args.out.join("summary.csv"))?)?;
    report.write_runs_csv(fs::File::create(args.out.join("runs.csv"))?)?;
    write_json(&args.out.join("ablation.json"), &report)?;
    report.write_summary_csv(&mut *out)?;
    Ok(())
}

fn spectrum_of(ckpt: &Path, ds: &Dataset, head: Option<TaskKind>) -> Result<(String, Spectrum)> {
    let trainer = load_checkpoint(ckpt)?;
    let model = &trainer.model;
    if ds.feature_dim() != model.input_dim() {
        return Err(DivaError::Incompatible(format!(
            "dataset has {} features, model expects {}",
            ds.feature_dim(),
            model.input_dim()
        )));
    }
    let (x, _) = ds.split_data(Split::Test);
    let per_head = model.embed_batch(&x)?;
    let emb = match head {
        Some(k) => per_head.get(&k).cloned().ok_or_else(|| DivaError::config(format!("head {k} is not active")))?,
        None => ensemble(&per_head, &model.default_ensemble_weights())?,
    };
    Ok((task_list_label(model.tasks()), spectrum(&emb)?))
}

fn write_spectrum_csv(path: &Path, s: &Spectrum) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "singular_value_normalized"])?;
    for (i, v) in s.normalized.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Static line plot of normalized spectra, one polyline per curve.
pub fn spectrum_svg(curves: &[(String, &Spectrum)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let n = curves.iter().map(|(_, s)| s.normalized.len()).max().unwrap_or(1).max(2);
    let top = curves.iter().flat_map(|(_, s)| s.normalized.iter().copied()).fold(0.0f64, f64::max).max(1e-12);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / top;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">singular value index</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(svg, r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">normalized singular value</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{top:.3}</text>"#, PAD - 4.0, PAD + 4.0);
    for (c, (label, s)) in curves.iter().enumerate() {
        let color = COLORS[c % COLORS.len()];
        let points: Vec<String> = s.normalized.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, points.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}" text-anchor="end">{label} (decay {:.3})</text>"#,
            W - PAD,
            PAD + 16.0 * c as f64,
            s.decay
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let base = match stem.extension().and_then(|e| e.to_str()) {
        Some("csv" | "svg") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let mut s: OsString = base.into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn spectrum_cmd(args: &SpectrumArgs, out: &mut dyn Write) -> Result<()> {
    let ds = read_dataset(&args.data)?;
    let mut curves = vec![spectrum_of(&args.checkpoint, &ds, args.head)?];
    write_spectrum_csv(&with_suffix(&args.out, ".csv"), &curves[0].1)?;
    if let Some(b) = &args.baseline {
        let (label, s) = spectrum_of(b, &ds, args.head)?;
        write_spectrum_csv(&with_suffix(&args.out, ".baseline.csv"), &s)?;
        curves.push((format!("{label} baseline"), s));
    }
    let refs: Vec<(String, &Spectrum)> = curves.iter().map(|(l, s)| (l.clone(), s)).collect();
    fs::write(with_suffix(&args.out, ".svg"), spectrum_svg(&refs))?;
    for (label, s) in &curves {
        writeln!(out, "{label}: spectral_decay {:.6}", s.decay)?;
    }
    Ok(())
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::Spectrum(a) => spectrum_cmd(a, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to standard error.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os())
}
