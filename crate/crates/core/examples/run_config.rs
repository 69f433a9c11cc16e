//! Run configuration files: defaults, the desk preset, overrides, the
//! per-head width under an embedding budget, and positioned parse errors.
//!
//! ```bash
//! cargo run --example run_config
//! ```

use diva::config::RunConfigFile;
use diva::model::TaskKind;

fn main() -> diva::error::Result<()> {
    let text = r#"{
        "data": { "n_train_classes": 10, "n_test_classes": 10 },
        "train": { "epochs": 30, "lr": 0.001, "loss": { "rho_dec": 0.3 } },
        "tasks": ["D", "S", "Da"],
        "embed_budget": 96
    }"#;
    let cfg = RunConfigFile::from_json(text)?;
    let train = cfg.train_config(None, Some(11))?;
    println!("tasks {:?}, per-head width {}, pairs {:?}", train.model.tasks, train.model.embed_dim, train.model.pairs);
    let disc_only = cfg.train_config(Some(&[TaskKind::Disc]), None)?;
    println!("disc only: width {}, pairs {:?}", disc_only.model.embed_dim, disc_only.model.pairs);

    for bad in ["{\"train\": {\"epochs\": 30,}}", "{\"trian\": {}}", "{\"tasks\": [\"S\", \"I\"]}"] {
        println!("{bad:<32} -> {}", RunConfigFile::from_json(bad).unwrap_err());
    }
    println!("desk preset:\n{}", RunConfigFile::desk().to_json());
    Ok(())
}
