//! Learn a k-means codebook from local descriptors, then turn an image's
//! descriptors into (visual word, region) tokens on a 2x2 grid.

use nadetopic::quantizer::{kmeans_fit, DescriptorSet};
use nadetopic::seeded_rng;
use rand::Rng;

fn main() -> nadetopic::Result<()> {
    let mut rng = seeded_rng(3, 0);
    let dim = 8;
    let centers: Vec<f32> = (0..5 * dim).map(|_| rng.random_range(-4.0..4.0)).collect();
    let n = 600;
    let data: Vec<f32> = (0..n)
        .flat_map(|i| {
            let c = i % 5;
            (0..dim)
                .map(|k| centers[c * dim + k] + rng.random_range(-0.5..0.5))
                .collect::<Vec<_>>()
        })
        .collect();
    let image = DescriptorSet {
        dim,
        positions: (0..n).map(|_| (rng.random_range(0.0..320.0), rng.random_range(0.0..240.0))).collect(),
        image_sizes: vec![(320.0, 240.0); n],
        data,
    };
    image.validate()?;

    // k-means++ can still settle in a local optimum, so keep the best of a few seeds
    let data = image.to_f64();
    let mut best = None;
    for seed in 0..4 {
        let cb = kmeans_fit(&data, dim, 5, seed, 100, 1e-6)?;
        println!("seed {seed}: objective {:.2} after {} iterations", cb.objective, cb.history.len());
        if best.as_ref().is_none_or(|b: &nadetopic::quantizer::Codebook| cb.objective < b.objective) {
            best = Some(cb);
        }
    }
    let cb = best.expect("at least one seed");
    println!("objective per iteration of the kept codebook:");
    for (i, o) in cb.history.iter().enumerate() {
        println!("  {i:>2}: {o:.4}");
    }

    let tokens = image.tokenize(&cb, 2, 2)?;
    let mut hist = vec![[0usize; 4]; cb.k];
    for &(w, r) in &tokens {
        hist[w][r] += 1;
    }
    println!("word x region counts:");
    for (w, row) in hist.iter().enumerate() {
        println!("  word {w}: {row:?}");
    }
    Ok(())
}
