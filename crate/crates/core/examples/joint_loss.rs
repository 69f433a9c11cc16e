//! One training step by hand: mine triplets, embed augmented views with
//! the shadow, evaluate the joint loss and print every term.
//!
//! ```bash
//! cargo run --example joint_loss
//! ```

use diva::config::RunConfigFile;
use diva::data::generate_synthetic;
use diva::model::TaskKind;
use diva::trainer::Trainer;

fn main() -> diva::error::Result<()> {
    let run = RunConfigFile::desk();
    let ds = generate_synthetic(&run.data)?;
    let mut trainer = Trainer::new(run.train_config(None, Some(0))?)?;

    let inputs = trainer.sample_inputs(&ds)?;
    for (kind, t) in &inputs.triplets {
        println!("{kind}: {} triplets", t.len());
    }
    println!("queue snapshot {:?}", inputs.negatives.shape());
    let b = trainer.batch_loss(&inputs)?;
    for k in TaskKind::ALL {
        println!("{k:<7} {:?}", b.task(k));
    }
    for ((a, c), v) in &b.decorrelation {
        println!("c({a},{c}) {v:.5}");
    }
    println!("total {:.6}", b.total);

    println!("epoch step L_disc L_shared L_intra L_dance c_sum total");
    let spe = trainer.steps_per_epoch(&ds);
    for _ in 0..5 {
        println!("{}", trainer.step_once(&ds, spe)?.progress_line());
    }
    Ok(())
}
