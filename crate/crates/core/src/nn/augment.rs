use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng;
use crate::sim::ImageTensor;

/// Training-time photometric augmentation. Contrast is expressed as an
/// offset from 1, so the all-zero config is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub brightness: [f64; 2],
    pub contrast_delta: [f64; 2],
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        noise_std: 0.0,
        brightness: [0.0, 0.0],
        contrast_delta: [0.0, 0.0],
    };
}

fn draw<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// `clamp(c·(i − 0.5) + 0.5 + b + n)`, one contrast `c` and brightness `b`
/// per image, independent gaussian `n` per value.
pub fn augment(image: &ImageTensor, cfg: &AugmentConfig, seed: u64) -> ImageTensor {
    let mut r = rng::stream(seed, rng::domain::AUGMENT, 0);
    let contrast = 1.0 + draw(&mut r, cfg.contrast_delta);
    let brightness = draw(&mut r, cfg.brightness);
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("finite std"));
    let mut out = image.clone();
    for v in &mut out.data {
        let mut x = contrast * (*v as f64 - 0.5) + 0.5 + brightness;
        if let Some(n) = &noise {
            x += n.sample(&mut r);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    out
}
