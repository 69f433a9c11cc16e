//! Retrieval and clustering metrics on hand-made embeddings: Recall@k,
//! k-means with NMI, and the singular-value spectrum.
//!
//! ```bash
//! cargo run --example evaluate_metrics
//! ```

use diva::eval::{kmeans, nmi, recall_at_k, spectrum};
use diva::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> diva::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (classes, per, dim) = (5, 20, 6);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            rows.push(centre.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
            labels.push(c as u32);
        }
    }
    let x = Tensor::from_rows(&rows)?;

    for (k, r) in recall_at_k(&x, &labels, &[1, 2, 4, 8])? {
        println!("recall@{k} {r:.3}");
    }
    let km = kmeans(&x, classes, 0, 100)?;
    println!("k-means inertia by iteration {:.1?}", km.inertia_history);
    println!("nmi {:.4}", nmi(&labels, &km.assignment)?);
    let s = spectrum(&x)?;
    println!("normalized singular values {:.3?}", s.normalized);
    println!("spectral decay {:.4}", s.decay);
    Ok(())
}
