//! Benchmark fixtures; the benchmarks themselves live in `benches/`.

use olens::{build_classifier, build_unet, Network, RngStream, Tensor};

/// Deterministic pseudo-image with values in [0, 1).
pub fn image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect())
        .expect("shape matches data")
}

pub fn unet(size: usize) -> Network {
    build_unet(8, 0.1, [1, size, size], 1).expect("valid U-Net")
}

pub fn classifier(size: usize) -> Network {
    build_classifier(4, [1, size, size], 0.2, 3).expect("valid classifier")
}
