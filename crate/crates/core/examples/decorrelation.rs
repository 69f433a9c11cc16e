//! The decorrelation score between two heads and the effect of gradient
//! reversal: ψ is pushed to increase the score while the embeddings feeding
//! it are pushed to decrease it.
//!
//! ```bash
//! cargo run --example decorrelation
//! ```

use diva::autodiff::Tape;
use diva::model::{Mlp, ModelConfig, ModelState, TaskKind};
use diva::objectives::decorrelation_score;
use diva::queue::random_unit_vector;
use diva::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diva::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let rows = |rng: &mut ChaCha8Rng| Tensor::from_rows(&(0..4).map(|_| random_unit_vector(d, rng)).collect::<Vec<_>>());
    let (a, b) = (rows(&mut rng)?, rows(&mut rng)?);

    // ψ lives inside a model; borrow the disc-dance map of a small one.
    let cfg = ModelConfig { embed_dim: d, tasks: vec![TaskKind::Disc, TaskKind::Dance], pairs: vec![(TaskKind::Disc, TaskKind::Dance)], ..ModelConfig::default() };
    let model = ModelState::new(cfg, &mut rng)?;
    let psi: &Mlp = &model.decorrelators[0].1;
    println!("ψ layers: {:?}", psi.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect::<Vec<_>>());

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (va, vb) = (tape.param(a), tape.param(b));
    let c = decorrelation_score(&mut tape, va, vb, bound.decorrelator((TaskKind::Disc, TaskKind::Dance)).unwrap())?;
    let c_mean = tape.mean(c);
    println!("per-sample c {:.4?}", tape.value(c).data());
    let grads = tape.backward(c_mean)?;

    // Reversal negates what reaches the embeddings: a step against this
    // gradient moves φa so that c grows, which the outer `−ρ·c` turns into
    // decorrelation pressure.
    let ga = grads.get(va).unwrap();
    let dot: f64 = ga.data().iter().zip(tape.value(va).data()).map(|(g, x)| g * x).sum();
    println!("gradient reaching φa, projected on φa: {dot:.4}");
    let first_psi = bound.decorrelators[0].1.layers[0].weight;
    let gpsi = grads.get(first_psi).unwrap();
    println!("‖d c / d ψ‖ = {:.4}", gpsi.data().iter().map(|g| g * g).sum::<f64>().sqrt());
    Ok(())
}
