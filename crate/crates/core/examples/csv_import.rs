//! Bring your own features: write a small CSV (features, label, split
//! flag), import it, and see the validation errors for bad files.
//!
//! ```bash
//! cargo run --example csv_import
//! ```

use diva::data::{import_csv, Split};

fn main() -> diva::error::Result<()> {
    let dir = std::env::temp_dir().join("diva-csv-example");
    std::fs::create_dir_all(&dir)?;

    let good = dir.join("good.csv");
    std::fs::write(&good, "0.1,0.2,0.3,0,0\n0.2,0.1,0.4,0,0\n-0.5,0.9,0.0,1,1\n")?;
    let ds = import_csv(&good)?;
    println!("{} samples, {} features, class 1 is {:?}", ds.len(), ds.feature_dim(), ds.split_of(1));
    assert_eq!(ds.split_of(0), Split::Train);

    for (name, body) in [
        ("ragged.csv", "0.1,0.2,0,0\n0.1,0.2,0.3,1,1\n"),
        ("straddling.csv", "0.1,0.2,0,0\n0.3,0.4,0,1\n"),
        ("bad_flag.csv", "0.1,0.2,0,2\n"),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        println!("{name}: {}", import_csv(&p).unwrap_err());
    }
    Ok(())
}
