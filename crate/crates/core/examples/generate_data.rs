//! Generate the synthetic benchmark, save it in the binary format, read it
//! back, and export the CSV dialect accepted by `import_csv`.
//!
//! ```bash
//! cargo run --release --example generate_data
//! ```

use diva::data::{export_csv, generate_synthetic, import_csv, load_dataset, save_dataset, Split, SynthConfig};
use diva::eval::recall_at_k;

fn main() -> diva::error::Result<()> {
    let cfg = SynthConfig::default();
    let ds = generate_synthetic(&cfg)?;
    let (train, test) = ds.classes_by_split();
    println!("{} samples x {} features, {} train / {} test classes", ds.len(), ds.feature_dim(), train.len(), test.len());

    // Raw features already carry some class signal; training should beat this.
    let (x, y) = ds.split_data(Split::Test);
    let raw = recall_at_k(&x, &y, &[1, 4])?;
    println!("raw-feature recall on test classes: {raw:?}");

    let dir = std::env::temp_dir().join("diva-generate-data");
    std::fs::create_dir_all(&dir)?;
    let bin = dir.join("synthetic.bin");
    save_dataset(&ds, &bin)?;
    assert_eq!(load_dataset(&bin)?, ds);
    println!("binary: {} ({} bytes)", bin.display(), std::fs::metadata(&bin)?.len());

    let csv = dir.join("synthetic.csv");
    export_csv(&ds, &csv)?;
    assert_eq!(import_csv(&csv)?, ds);
    println!("csv:    {}", csv.display());
    Ok(())
}
