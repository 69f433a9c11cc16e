//! The negative queue and the momentum shadow that fills it.
//!
//! ```bash
//! cargo run --example memory_queue
//! ```

use diva::model::{momentum_update, ModelConfig, ModelState};
use diva::queue::MemoryQueue;
use diva::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diva::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // FIFO: capacity 4, three pushes of two vectors keep the last four.
    let mut q = MemoryQueue::init(4, 3, &mut rng)?;
    for i in 0..3 {
        let a = i as f64;
        let rows = vec![vec![1.0, 0.0, 0.0], vec![(a + 1.0).cos(), (a + 1.0).sin(), 0.0]];
        q.push(&Tensor::from_rows(&rows)?)?;
        println!("after push {i}: cursor {} fill {}", q.cursor(), q.fill_count());
    }
    for row in q.ordered() {
        println!("    {row:.3?}");
    }

    // Momentum endpoints: μ=1 freezes the shadow, μ=0 copies the live value.
    let live = Tensor::vector(vec![1.0, 2.0]);
    let mut s = Tensor::vector(vec![0.0, 0.0]);
    momentum_update(&mut s, &live, 1.0)?;
    println!("μ=1 -> {:?}", s.data());
    momentum_update(&mut s, &live, 0.0)?;
    println!("μ=0 -> {:?}", s.data());

    // The shadow of a fresh model embeds like the live contrastive head.
    let model = ModelState::new(ModelConfig { embed_dim: 8, ..ModelConfig::default() }, &mut rng)?;
    let x = Tensor::matrix(2, 64, (0..128).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let keys = model.shadow.as_ref().expect("dance head active").embed(&x)?;
    let live = &model.embed_batch(&x)?[&diva::model::TaskKind::Dance];
    println!("shadow == live at init: {}", &keys == live);
    Ok(())
}
