//! Train the disc-only baseline and the full four-task model with the desk
//! preset and compare them on the held-out classes.
//!
//! ```bash
//! cargo run --release --example train_baseline_vs_full [seed]
//! ```

use diva::config::RunConfigFile;
use diva::data::generate_synthetic;
use diva::eval::evaluate;
use diva::model::{parse_task_list, TaskKind};
use diva::trainer::fit;

fn main() -> diva::error::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let run = RunConfigFile::desk();
    let ds = generate_synthetic(&run.data)?;

    for tasks in ["D", "D,S,I,Da"] {
        let cfg = run.train_config(Some(&parse_task_list(tasks)?), Some(seed))?;
        let t0 = std::time::Instant::now();
        let trainer = fit(&ds, cfg, None)?;
        let report = evaluate(&trainer.model, &ds, &trainer.config.eval)?;
        let e = &report.ensemble;
        println!(
            "{tasks:<9} recall@1 {:.3}  recall@4 {:.3}  nmi {:.3}  spectral decay {:.3}  ({:.1}s)",
            e.recall_at(1).unwrap_or(f64::NAN),
            e.recall_at(4).unwrap_or(f64::NAN),
            e.nmi,
            e.spectral_decay,
            t0.elapsed().as_secs_f64()
        );
        for (head, m) in &report.heads {
            println!("    {head:<7} recall@1 {:.3}", m.recall_at(1).unwrap_or(f64::NAN));
        }
        if let Some(b) = trainer.model.beta(TaskKind::Disc) {
            println!("    learned disc margin boundary {b:.4}");
        }
    }
    Ok(())
}
