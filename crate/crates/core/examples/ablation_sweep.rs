//! A reduced task-combination sweep: the eight task subsets plus the
//! no-decorrelation, separate-encoder and plain-NCE variants, two seeds
//! each, printed as CSV. Set DIVA_THREADS to cap parallelism.
//!
//! ```bash
//! cargo run --release --example ablation_sweep [seeds] [epochs]
//! ```

use diva::ablation::{default_grid, run_sweep, SweepConfig};
use diva::config::RunConfigFile;
use diva::data::generate_synthetic;

fn main() -> diva::error::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let seeds = args.next().flatten().unwrap_or(2) as u64;
    let epochs = args.next().flatten().unwrap_or(20);

    let mut run = RunConfigFile::desk();
    run.train.epochs = epochs;
    run.train.lr_decay_epochs = vec![epochs * 3 / 4];
    let ds = generate_synthetic(&run.data)?;
    let base = run.train_config(None, None)?;
    let cfg = SweepConfig {
        eval: base.eval.clone(),
        base,
        embed_budget: run.embed_budget,
        cells: default_grid(),
        seeds: (0..seeds).collect(),
        threads: None,
    };
    let progress = |cell: &diva::ablation::Cell, seed: u64, r: &Result<diva::ablation::RunMetrics, String>, secs: f64| {
        match r {
            Ok(m) => eprintln!("{cell} seed {seed}: recall@1 {:.3} ({secs:.1}s)", m.recall_at_1),
            Err(e) => eprintln!("{cell} seed {seed}: failed: {e}"),
        }
    };
    let report = run_sweep(&ds, &cfg, Some(&progress))?;
    report.write_summary_csv(std::io::stdout())?;
    Ok(())
}
