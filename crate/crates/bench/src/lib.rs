//! Benchmark fixtures.

use hedunet::raster::Mask;
use hedunet::rng::Rng;
use hedunet::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).expect("shape matches data")
}

/// Sparse random feature mask with roughly `density` of the pixels set.
pub fn random_mask(size: usize, density: f64, seed: u64) -> Mask {
    let mut rng = Rng::new(seed);
    let data = (0..size * size).map(|_| rng.uniform() < density).collect();
    Mask::new(size, size, data).expect("square mask")
}
