//! NCE and its distance-adapted variant on the same anchors, positives and
//! queue. With unit weights the two coincide exactly; with inverse-density
//! weights, negatives at atypical distances count more.
//!
//! ```bash
//! cargo run --example contrastive_losses
//! ```

use diva::autodiff::Tape;
use diva::objectives::{dance_loss, nce_loss, NegativeWeighting};
use diva::queue::random_unit_vector;
use diva::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_rows(&(0..n).map(|_| random_unit_vector(d, rng)).collect::<Vec<_>>()).unwrap()
}

fn main() -> diva::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, c, d) = (8, 64, 16);
    let anchors = unit_rows(b, d, &mut rng);
    let positives = unit_rows(b, d, &mut rng);
    let queue = unit_rows(c, d, &mut rng);

    let eval = |weighting: Option<NegativeWeighting>| -> diva::error::Result<f64> {
        let mut t = Tape::new();
        let (a, p, n) = (t.param(anchors.clone()), t.constant(positives.clone()), t.constant(queue.clone()));
        let l = match weighting {
            None => nce_loss(&mut t, a, p, n, 0.1, true)?,
            Some(w) => dance_loss(&mut t, a, p, n, 0.1, true, w)?,
        };
        Ok(t.value(l).item())
    };
    let nce = eval(None)?;
    let unit = eval(Some(NegativeWeighting::Unit))?;
    println!("nce {nce:.6}  dance(w=1) {unit:.6}  identical bits: {}", nce.to_bits() == unit.to_bits());
    for lambda in [0.5, 1.0, 4.0] {
        println!("dance(λ={lambda}) {:.6}", eval(Some(NegativeWeighting::InverseDensity { lambda }))?);
    }
    Ok(())
}
