//! Task-combination sweeps.
//!
//! A sweep trains every [`Cell`] of a grid once per seed on a fixed dataset
//! and reports test-split metrics of the ensemble embedding. Runs are
//! independent and may execute on several threads; results do not depend
//! on the thread count. A failing run is recorded with its error and the
//! sweep carries on.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::split_budget;
use crate::data::Dataset;
use crate::error::{DivaError, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{task_list_label, TaskKind};
use crate::objectives::Contrastive;
use crate::trainer::{fit, TrainConfig};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DIVA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    /// Decorrelation weight forced to zero.
    NoDecorrelation,
    /// One encoder per head, ensembled at test time.
    SeparateEncoders,
    /// Contrastive head trained with unweighted NCE over queue negatives
    /// only.
    PlainNce,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::NoDecorrelation => "no-decorrelation",
            Variant::SeparateEncoders => "separate-encoders",
            Variant::PlainNce => "plain-nce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub tasks: Vec<TaskKind>,
    pub variant: Variant,
}

impl Cell {
    pub fn new(tasks: &[TaskKind], variant: Variant) -> Self {
        let mut tasks = tasks.to_vec();
        tasks.sort();
        tasks.dedup();
        Cell { tasks, variant }
    }

    pub fn label(&self) -> String {
        match self.variant {
            Variant::Standard => task_list_label(&self.tasks),
            v => format!("{} {}", task_list_label(&self.tasks), v.name()),
        }
    }

    /// Training configuration of this cell for one seed. With a budget the
    /// per-head width is `budget / heads`.
    pub fn config(&self, base: &TrainConfig, budget: Option<usize>, seed: u64) -> Result<TrainConfig> {
        let mut cfg = base.clone().with_tasks(&self.tasks);
        if let Some(b) = budget {
            cfg.model.embed_dim = split_budget(b, self.tasks.len())?;
        }
        cfg.seed = seed;
        cfg.eval_every = 0;
        match self.variant {
            Variant::Standard => {}
            Variant::NoDecorrelation => cfg.loss.rho_dec = 0.0,
            Variant::SeparateEncoders => cfg.model.separate_encoders = true,
            Variant::PlainNce => {
                cfg.loss.contrastive = Contrastive::Nce;
                cfg.loss.nce_include_positive = false;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The eight task subsets that contain the discriminative task.
pub fn task_combinations() -> Vec<Vec<TaskKind>> {
    use TaskKind::*;
    vec![
        vec![Disc],
        vec![Disc, Shared],
        vec![Disc, Intra],
        vec![Disc, Dance],
        vec![Disc, Shared, Intra],
        vec![Disc, Shared, Dance],
        vec![Disc, Intra, Dance],
        vec![Disc, Shared, Intra, Dance],
    ]
}

/// All subsets, then the full model without decorrelation and with
/// separate encoders, then disc with plain NCE.
pub fn default_grid() -> Vec<Cell> {
    let mut cells: Vec<Cell> = task_combinations().iter().map(|t| Cell::new(t, Variant::Standard)).collect();
    cells.push(Cell::new(&TaskKind::ALL, Variant::NoDecorrelation));
    cells.push(Cell::new(&TaskKind::ALL, Variant::SeparateEncoders));
    cells.push(Cell::new(&[TaskKind::Disc, TaskKind::Dance], Variant::PlainNce));
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub recall_at_1: f64,
    pub nmi: f64,
    pub spectral_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: Vec<RunResult>,
}

/// Mean and sample standard deviation; `None` when `xs` is empty.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

impl CellSummary {
    pub fn succeeded(&self) -> Vec<(u64, &RunMetrics)> {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().ok().map(|m| (r.seed, m))).collect()
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn recall_at_1(&self) -> Vec<f64> {
        self.succeeded().iter().map(|(_, m)| m.recall_at_1).collect()
    }

    pub fn spectral_decay(&self) -> Vec<f64> {
        self.succeeded().iter().map(|(_, m)| m.spectral_decay).collect()
    }

    /// Mean and standard deviation of Recall@1 over successful seeds.
    pub fn recall_stats(&self) -> Option<(f64, f64)> {
        mean_std(&self.recall_at_1())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
}

impl AblationReport {
    pub fn cell(&self, tasks: &[TaskKind], variant: Variant) -> Option<&CellSummary> {
        let key = Cell::new(tasks, variant);
        self.cells.iter().find(|c| c.cell == key)
    }

    /// One row per cell: label, tasks, variant, seeds, failures, then mean
    /// and standard deviation of Recall@1 and means of NMI and spectral
    /// decay over the successful seeds. Empty fields mark cells without a
    /// single successful run.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cell",
            "tasks",
            "variant",
            "seeds",
            "failed",
            "recall@1_mean",
            "recall@1_std",
            "nmi_mean",
            "spectral_decay_mean",
        ])?;
        for c in &self.cells {
            let ok = c.succeeded();
            let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            let stats = c.recall_stats();
            let nmi = mean_std(&ok.iter().map(|(_, m)| m.nmi).collect::<Vec<_>>()).map(|s| s.0);
            let rho = mean_std(&c.spectral_decay()).map(|s| s.0);
            w.write_record([
                c.cell.label(),
                task_list_label(&c.cell.tasks),
                c.cell.variant.name().to_string(),
                c.runs.len().to_string(),
                c.failures().to_string(),
                fmt(stats.map(|s| s.0)),
                fmt(stats.map(|s| s.1)),
                fmt(nmi),
                fmt(rho),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (cell, seed) with status `ok` or `failed: <reason>`.
    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell", "seed", "status", "recall@1", "nmi", "spectral_decay"])?;
        for c in &self.cells {
            for r in &c.runs {
                let row = match &r.outcome {
                    Ok(m) => [
                        c.cell.label(),
                        r.seed.to_string(),
                        "ok".into(),
                        format!("{:.6}", m.recall_at_1),
                        format!("{:.6}", m.nmi),
                        format!("{:.6}", m.spectral_decay),
                    ],
                    Err(e) => {
                        [c.cell.label(), r.seed.to_string(), format!("failed: {e}"), String::new(), String::new(), String::new()]
                    }
                };
                w.write_record(row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub base: TrainConfig,
    /// Total embedding width shared by the heads of each cell.
    pub embed_budget: Option<usize>,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    /// Worker threads; `None` uses [`THREADS_ENV`] or all cores.
    pub threads: Option<usize>,
}

/// Parses [`THREADS_ENV`]. Unset means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(DivaError::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Trains and evaluates one cell for one seed.
pub fn run_cell(dataset: &Dataset, cfg: &SweepConfig, cell: &Cell, seed: u64) -> Result<RunMetrics> {
    let train = cell.config(&cfg.base, cfg.embed_budget, seed)?;
    let trainer = fit(dataset, train, None)?;
    let report = evaluate(&trainer.model, dataset, &cfg.eval)?;
    let e = &report.ensemble;
    Ok(RunMetrics {
        recall_at_1: e.recall_at(1).ok_or_else(|| DivaError::config("eval.ks must contain 1"))?,
        nmi: e.nmi,
        spectral_decay: e.spectral_decay,
    })
}

/// Called once per finished run with its cell, seed, outcome and wall time
/// in seconds.
pub type ProgressFn<'a> = dyn Fn(&Cell, u64, &std::result::Result<RunMetrics, String>, f64) + Sync + 'a;

/// Runs the full grid. `progress`, when given, receives one line per
/// finished run in completion order.
pub fn run_sweep(
    dataset: &Dataset,
    cfg: &SweepConfig,
    progress: Option<&ProgressFn<'_>>,
) -> Result<AblationReport> {
    if cfg.cells.is_empty() || cfg.seeds.is_empty() {
        return Err(DivaError::config("a sweep needs at least one cell and one seed"));
    }
    let threads = match cfg.threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let jobs: Vec<(usize, u64)> = (0..cfg.cells.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let work = || {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let t0 = Instant::now();
                let outcome = run_cell(dataset, cfg, &cfg.cells[c], seed).map_err(|e| e.to_string());
                if let Some(p) = progress {
                    p(&cfg.cells[c], seed, &outcome, t0.elapsed().as_secs_f64());
                }
                (c, RunResult { seed, outcome })
            })
            .collect::<Vec<_>>()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| DivaError::config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut cells: Vec<CellSummary> = cfg.cells.iter().map(|c| CellSummary { cell: c.clone(), runs: Vec::new() }).collect();
    for (c, r) in results {
        cells[c].runs.push(r);
    }
    Ok(AblationReport { seeds: cfg.seeds.clone(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::mining::BatchSpec;
    use crate::model::EncoderConfig;

    #[test]
    fn grid_shape() {
        let grid = default_grid();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid.iter().filter(|c| c.variant == Variant::Standard).count(), 8);
        assert!(grid.iter().all(|c| c.tasks.contains(&TaskKind::Disc)));
        assert_eq!(grid[8].label(), "D,S,I,Da no-decorrelation");
    }

    #[test]
    fn cell_configs() {
        let base = TrainConfig::default();
        let c = Cell::new(&TaskKind::ALL, Variant::NoDecorrelation).config(&base, Some(128), 3).unwrap();
        assert_eq!((c.loss.rho_dec, c.model.embed_dim, c.seed), (0.0, 32, 3));
        let c = Cell::new(&[TaskKind::Disc], Variant::Standard).config(&base, Some(128), 0).unwrap();
        assert_eq!(c.model.embed_dim, 128);
        assert!(c.model.pairs.is_empty());
        let c = Cell::new(&[TaskKind::Disc, TaskKind::Dance], Variant::PlainNce).config(&base, None, 0).unwrap();
        assert_eq!(c.loss.contrastive, Contrastive::Nce);
        assert!(!c.loss.nce_include_positive);
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sweep_is_thread_count_independent_and_marks_failures() {
        let ds = generate_synthetic(&SynthConfig {
            n_train_classes: 4,
            n_test_classes: 3,
            samples_per_class: 6,
            feature_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let base = TrainConfig {
            model: crate::model::ModelConfig {
                encoder: EncoderConfig { input_dim: 8, hidden_dims: vec![12], feature_dim: 10 },
                ..Default::default()
            },
            batch: BatchSpec { n_classes: 3, m_per_class: 3 },
            epochs: 2,
            lr: 1e-3,
            queue_capacity: 8,
            ..TrainConfig::default()
        };
        let mut cfg = SweepConfig {
            base,
            embed_budget: Some(12),
            cells: vec![Cell::new(&[TaskKind::Disc], Variant::Standard), Cell::new(&TaskKind::ALL, Variant::Standard)],
            seeds: vec![0, 1],
            eval: EvalConfig::default(),
            threads: Some(1),
        };
        let one = run_sweep(&ds, &cfg, None).unwrap();
        cfg.threads = Some(3);
        let three = run_sweep(&ds, &cfg, None).unwrap();
        assert_eq!(one, three);
        assert!(one.cells.iter().all(|c| c.failures() == 0));

        // A budget too small for four heads fails that cell only.
        cfg.embed_budget = Some(3);
        let r = run_sweep(&ds, &cfg, None).unwrap();
        assert_eq!(r.cells[0].failures(), 0);
        assert_eq!(r.cells[1].failures(), 2);
        let mut buf = Vec::new();
        r.write_runs_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("failed: invalid config"));
        let mut buf = Vec::new();
        r.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with(",,,,"));
    }
}
