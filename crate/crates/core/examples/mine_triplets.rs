//! Draw a class-balanced batch and mine triplets for the three ranking
//! tasks on freshly initialized embeddings.
//!
//! ```bash
//! cargo run --example mine_triplets
//! ```

use diva::data::{generate_synthetic, SynthConfig};
use diva::mining::{build_batch, mine_triplets, BatchSpec};
use diva::model::{ModelConfig, ModelState, TaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diva::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = BatchSpec { n_classes: 4, m_per_class: 3 };
    let rows = build_batch(&ds, &spec, &mut rng)?;
    let (x, labels) = ds.select(&rows);
    println!("batch labels {labels:?}");

    let model = ModelState::new(ModelConfig { embed_dim: 16, ..ModelConfig::default() }, &mut rng)?;
    let emb = model.embed_batch(&x)?;
    for kind in TaskKind::RANKING {
        let triplets = mine_triplets(kind, &emb[&kind], &labels, 1.0, &mut rng)?;
        println!("{kind}: {} triplets", triplets.len());
        for t in triplets.iter().take(3) {
            println!(
                "    anchor {} (class {}), positive {} (class {}), negative {} (class {})",
                t.anchor, labels[t.anchor], t.positive, labels[t.positive], t.negative, labels[t.negative]
            );
        }
    }
    Ok(())
}
