//! Interrupt training, save a checkpoint, resume from it and confirm the
//! result matches an uninterrupted run bit for bit.
//!
//! ```bash
//! cargo run --release --example checkpoint_resume
//! ```

use diva::checkpoint::{load_checkpoint, save_checkpoint};
use diva::config::RunConfigFile;
use diva::data::generate_synthetic;
use diva::trainer::Trainer;

fn main() -> diva::error::Result<()> {
    let mut run = RunConfigFile::desk();
    run.train.epochs = 4;
    run.train.lr_decay_epochs = vec![2];
    let ds = generate_synthetic(&run.data)?;
    let cfg = run.train_config(None, Some(7))?;

    let mut straight = Trainer::new(cfg.clone())?;
    straight.run(&ds, None)?;

    let mut first = Trainer::new(cfg)?;
    let spe = first.steps_per_epoch(&ds);
    while first.epoch < 2 {
        first.step_once(&ds, spe)?;
    }
    let path = std::env::temp_dir().join("diva-resume-example.ckpt");
    save_checkpoint(&first, &path)?;
    println!("saved after {} steps to {} ({} bytes)", first.global_step, path.display(), std::fs::metadata(&path)?.len());

    let mut resumed = load_checkpoint(&path)?;
    resumed.run(&ds, None)?;
    println!("steps: straight {} resumed {}", straight.global_step, resumed.global_step);
    println!("identical final state: {}", straight == resumed);
    println!("last loss {:.6}", resumed.history.steps.last().map_or(f64::NAN, |s| s.total));
    Ok(())
}
