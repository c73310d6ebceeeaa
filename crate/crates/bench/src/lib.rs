//! Shared fixtures for the criterion benchmarks under `benches/`.

use ritual_core::{ImageBuffer, Rng, TokenDistribution};

/// A random normalized distribution over `vocab` tokens.
pub fn random_distribution(vocab: usize, rng: &mut Rng) -> TokenDistribution {
    let logits: Vec<f64> = (0..vocab).map(|_| 4.0 * rng.standard_normal()).collect();
    TokenDistribution::from_log_weights(logits)
        .and_then(|d| d.normalize())
        .expect("finite logits")
}

/// Smooth gradient with some texture, `size` x `size`.
pub fn synthetic_image(size: u32) -> ImageBuffer {
    ImageBuffer::from_fn(size, size, |x, y| {
        let r = (x * 255 / size.max(1)) as u8;
        let g = (y * 255 / size.max(1)) as u8;
        let b = ((x ^ y) & 0xff) as u8;
        [r, g, b]
    })
}
