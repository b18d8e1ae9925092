//! Random fixtures at desk scale for the benchmarks.

use ccdc_core::data::LoadedCase;
use ccdc_core::extractors::{MagnificationLevel, PatchBag};
use ccdc_core::model::ModelConfig;
use ccdc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `n` cases with random CT patches and, if `paired`, bags of `bag_size`
/// patches spread over the magnification levels.
pub fn random_cases(model: &ModelConfig, n: usize, paired: bool, bag_size: usize, seed: u64) -> Vec<LoadedCase> {
    let mut side = vec![3];
    side.extend(&model.pathological.input_extents);
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64 * 100);
            let bag = paired.then(|| {
                let patches = (0..bag_size).map(|j| random_tensor(&side, s + 1 + j as u64)).collect();
                let mags = (0..bag_size).map(|j| MagnificationLevel::ALL[j % 4]).collect();
                PatchBag::new(format!("b{i}"), patches, mags).unwrap()
            });
            LoadedCase {
                case_id: format!("b{i}"),
                target: (i % 2) as f64,
                ct: random_tensor(&model.radiological.input_extents, s),
                bag,
            }
        })
        .collect()
}
