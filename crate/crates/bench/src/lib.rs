//! Shared fixtures for the criterion benches.

use geoshift::mean_teacher::{attach_multiwarp, sample_homography_set, FusionKind, SamplingRanges};
use geoshift::{DetectorConfig, Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Smooth deterministic feature maps of shape `[n, c, h, w]`.
pub fn maps(n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| {
        ((x as f32 * 0.37 + ch as f32).sin() * (y as f32 * 0.21 + b as f32).cos()) * 0.5 + 0.5
    })
}

/// Default detector with an `n`-way learned front end and a random homography set.
pub fn multiwarp_model(n: usize) -> Model {
    let mut rng = rng();
    let base = Model::new(DetectorConfig::default(), &mut rng).expect("default config is valid");
    let mut model = attach_multiwarp(&base, n, FusionKind::Learned, &mut rng).expect("plain base");
    model.warp.as_mut().expect("attached").set =
        sample_homography_set(n, &SamplingRanges::default(), &mut rng).expect("valid ranges");
    model
}
