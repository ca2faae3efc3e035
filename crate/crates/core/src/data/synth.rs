use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{format_filename, Label, Magnification, Subtype};
use crate::error::{Error, Result};

/// Parameters of a synthetic dataset: benign images are smooth
/// low-frequency blobs, malignant images are per-pixel speckle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Images per class and magnification.
    pub n_per_class: usize,
    pub magnifications: Vec<Magnification>,
    pub seed: u64,
    pub patients_per_class: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            magnifications: vec![Magnification::X40],
            seed: 0,
            patients_per_class: 6,
            width: 112,
            height: 84,
        }
    }
}

const BASE: [f32; 3] = [196.0, 148.0, 188.0];

fn benign_image<R: Rng + ?Sized>(w: u32, h: u32, rng: &mut R) -> RgbImage {
    let n_blobs = rng.random_range(3..=5);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..n_blobs)
        .map(|_| {
            let cx = rng.random_range(0.0..w as f32);
            let cy = rng.random_range(0.0..h as f32);
            let sigma = rng.random_range(w as f32 / 6.0..w as f32 / 3.0);
            let amp = rng.random_range(-55.0..55.0f32);
            let tint = [amp, amp * 0.8, amp * 0.6];
            (cx, cy, sigma, tint)
        })
        .collect();
    RgbImage::from_fn(w, h, |x, y| {
        let mut px = BASE;
        for &(cx, cy, sigma, tint) in &blobs {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            let g = (-d2 / (2.0 * sigma * sigma)).exp();
            for c in 0..3 {
                px[c] += tint[c] * g;
            }
        }
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn malignant_image<R: Rng + ?Sized>(w: u32, h: u32, rng: &mut R) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| {
        let v = rng.random_range(-60.0..60.0f32);
        Rgb([BASE[0] + v, BASE[1] + 0.8 * v, BASE[2] + 0.6 * v]
            .map(|p| p.round().clamp(0.0, 255.0) as u8))
    })
}

fn patient_id(label: Label, index: usize) -> String {
    let base = match label {
        Label::Benign => 1000,
        Label::Malignant => 5000,
    };
    format!("90-{}", base + index)
}

/// Writes a synthetic dataset under `root` using the public release's
/// directory layout. Returns the written paths relative to `root`, in
/// generation order.
pub fn synth_dataset(root: &Path, spec: &SynthSpec) -> Result<Vec<PathBuf>> {
    if spec.n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if spec.patients_per_class < 4 {
        return Err(Error::invalid(
            "synthetic datasets need at least 4 patients per class",
        ));
    }
    if spec.magnifications.is_empty() {
        return Err(Error::invalid("at least one magnification is required"));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let subtypes = |label: Label| -> Vec<Subtype> {
        Subtype::ALL
            .into_iter()
            .filter(|s| s.label() == label)
            .collect()
    };
    let mut written = Vec::new();
    let mut stream = 0u64;
    for label in [Label::Benign, Label::Malignant] {
        let class_subtypes = subtypes(label);
        for &mag in &spec.magnifications {
            let mut sequence = vec![0u32; spec.patients_per_class];
            for k in 0..spec.n_per_class {
                let p = k % spec.patients_per_class;
                sequence[p] += 1;
                let subtype = class_subtypes[p % class_subtypes.len()];
                let pid = patient_id(label, p);
                let code = match label {
                    Label::Benign => "B",
                    Label::Malignant => "M",
                };
                let rel = PathBuf::from(label.as_str())
                    .join("SOB")
                    .join(subtype.dir_name())
                    .join(format!("SOB_{code}_{}_{pid}", subtype.code()))
                    .join(format!("{}X", mag.value()))
                    .join(format_filename(subtype, &pid, mag, sequence[p]));
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(stream);
                stream += 1;
                let img = match label {
                    Label::Benign => benign_image(spec.width, spec.height, &mut rng),
                    Label::Malignant => malignant_image(spec.width, spec.height, &mut rng),
                };
                let path = root.join(&rel);
                let dir = path.parent().expect("file has a parent");
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                img.save(&path).map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(&path, io),
                    other => Error::Image(other),
                })?;
                written.push(rel);
            }
        }
    }
    Ok(written)
}
