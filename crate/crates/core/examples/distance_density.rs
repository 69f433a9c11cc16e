//! Pairwise distances of uniform points on the unit sphere follow q(d).
//! Compare a histogram against the analytic density and print the
//! inverse-density sampling weights used for mining.
//!
//! ```bash
//! cargo run --release --example distance_density [dim]
//! ```

use diva::mining::{q_density, sampling_weight};
use diva::queue::random_unit_vector;
use diva::tensor::sq_dist;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diva::error::Result<()> {
    let dim: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs = 100_000;
    let bins = 20;
    let mut hist = vec![0usize; bins];
    for _ in 0..pairs {
        let a = random_unit_vector(dim, &mut rng);
        let b = random_unit_vector(dim, &mut rng);
        let d = sq_dist(&a, &b).sqrt();
        hist[((d / 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
    }
    // Normalize q numerically over [0, 2].
    let grid = 20_000;
    let z: f64 = (0..grid).map(|i| q_density((i as f64 + 0.5) * 2.0 / grid as f64, dim).unwrap() * 2.0 / grid as f64).sum();
    println!("dim {dim}: bin centre, empirical density, q(d)/Z, weight min(1, 1/q)");
    let width = 2.0 / bins as f64;
    for (i, &h) in hist.iter().enumerate() {
        let d = (i as f64 + 0.5) * width;
        let emp = h as f64 / pairs as f64 / width;
        println!("{d:5.2}  {emp:7.4}  {:7.4}  {:9.4}", q_density(d, dim)? / z, sampling_weight(d, dim, 1.0));
    }
    Ok(())
}
