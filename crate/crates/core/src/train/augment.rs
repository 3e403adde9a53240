//! Augmentation of unified poses, applied before descriptors are computed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::hot::Coords;
use crate::pose_io::coco::MIRROR;

/// Negate x and swap left/right joints.
pub fn flip_frame(frame: &Coords) -> Coords {
    std::array::from_fn(|i| {
        let [x, y] = frame[MIRROR[i]];
        [-x, y]
    })
}

/// Flip the whole clip with probability `p`.
pub fn augment_flip(frames: &mut [Coords], p: f64, rng: &mut impl Rng) {
    if p > 0.0 && rng.random_bool(p.min(1.0)) {
        for f in frames.iter_mut() {
            *f = flip_frame(f);
        }
    }
}

/// Per keypoint, with probability `p`, add Gaussian noise of standard
/// deviation `sigma` to both coordinates.
pub fn augment_noise(frames: &mut [Coords], p: f64, sigma: f64, rng: &mut impl Rng) {
    if p <= 0.0 || sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for f in frames.iter_mut() {
        for kp in f.iter_mut() {
            if rng.random_bool(p.min(1.0)) {
                kp[0] += normal.sample(rng);
                kp[1] += normal.sample(rng);
            }
        }
    }
}
