use image::{imageops, RgbImage};
use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which label-preserving transforms to apply. Flips come first, then a
/// clockwise rotation by `quarter_turns * 90` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraws {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl AugmentDraws {
    /// Each transform fires independently with probability 0.5; a firing
    /// rotation picks 90, 180 or 270 degrees uniformly.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let quarter_turns = if rng.random_bool(0.5) {
            rng.random_range(1..=3)
        } else {
            0
        };
        Self {
            hflip,
            vflip,
            quarter_turns,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.quarter_turns.is_multiple_of(4)
    }
}

/// Augments an RGB image with transforms drawn from `seed`.
pub fn augment(image: &RgbImage, seed: u64) -> RgbImage {
    apply_to_image(image, AugmentDraws::from_seed(seed))
}

pub fn apply_to_image(image: &RgbImage, draws: AugmentDraws) -> RgbImage {
    let mut out = image.clone();
    if draws.hflip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    if draws.vflip {
        imageops::flip_vertical_in_place(&mut out);
    }
    match draws.quarter_turns % 4 {
        1 => imageops::rotate90(&out),
        2 => imageops::rotate180(&out),
        3 => imageops::rotate270(&out),
        _ => out,
    }
}

/// Same transforms on a (C, H, W) tensor.
pub fn augment_tensor(x: &Array3<f32>, draws: AugmentDraws) -> Array3<f32> {
    let mut out = x.view();
    if draws.hflip {
        out = out.slice_move(s![.., .., ..;-1]);
    }
    if draws.vflip {
        out = out.slice_move(s![.., ..;-1, ..]);
    }
    for _ in 0..draws.quarter_turns % 4 {
        // clockwise: out[c, i, j] = in[c, H - 1 - j, i]
        out = out.slice_move(s![.., ..;-1, ..]);
        out.swap_axes(1, 2);
    }
    out.as_standard_layout().into_owned()
}
