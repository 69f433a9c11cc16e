//! Train a baseline and the full model briefly, then write their
//! singular-value spectra as CSV and an overlaid SVG plot.
//!
//! ```bash
//! cargo run --release --example spectrum_plot
//! ```

use diva::cli::spectrum_svg;
use diva::config::RunConfigFile;
use diva::data::{generate_synthetic, Split};
use diva::eval::spectrum;
use diva::model::{ensemble, parse_task_list};
use diva::trainer::fit;

fn main() -> diva::error::Result<()> {
    let mut run = RunConfigFile::desk();
    run.train.epochs = 20;
    run.train.lr_decay_epochs = vec![15];
    let ds = generate_synthetic(&run.data)?;
    let (x, _) = ds.split_data(Split::Test);
    let dir = std::env::temp_dir().join("diva-spectrum-example");
    std::fs::create_dir_all(&dir)?;

    let mut curves = Vec::new();
    for tasks in ["D,S,I,Da", "D"] {
        let trainer = fit(&ds, run.train_config(Some(&parse_task_list(tasks)?), None)?, None)?;
        let m = &trainer.model;
        let emb = ensemble(&m.embed_batch(&x)?, &m.default_ensemble_weights())?;
        let s = spectrum(&emb)?;
        println!("{tasks}: spectral decay {:.4}, top value {:.4}", s.decay, s.normalized[0]);
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", tasks.replace(',', "_"))))?;
        w.write_record(["index", "singular_value_normalized"])?;
        for (i, v) in s.normalized.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        curves.push((tasks.to_string(), s));
    }
    let refs: Vec<_> = curves.iter().map(|(l, s)| (l.clone(), s)).collect();
    let svg = dir.join("spectrum.svg");
    std::fs::write(&svg, spectrum_svg(&refs))?;
    println!("wrote {}", svg.display());
    Ok(())
}
