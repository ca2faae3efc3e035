use std::path::Path;

use image::DynamicImage;
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_INPUT_SIZE: usize = 212;

/// ImageNet channel statistics (RGB, on the [0, 1] scale).
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Size of the resized image and its offset inside the `target` square:
/// `(width, height, left, top)`.
pub fn letterbox_geometry(
    width: usize,
    height: usize,
    target: usize,
) -> (usize, usize, usize, usize) {
    let (w, h) = if width >= height {
        (target, height * target / width)
    } else {
        (width * target / height, target)
    };
    let (w, h) = (w.max(1), h.max(1));
    (w, h, (target - w) / 2, (target - h) / 2)
}

/// For each output index, the source indices it overlaps and the fraction of
/// the output pixel each one covers.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let start = i as f64 * scale;
            let end = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut j = start.floor() as usize;
            while (j as f64) < end && j < src {
                let overlap = end.min(j as f64 + 1.0) - start.max(j as f64);
                if overlap > 1e-12 {
                    taps.push((j, overlap / scale));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Area-interpolating resize of an (H, W, C) image: every output pixel is
/// the overlap-weighted mean of the source pixels it covers.
pub fn resize_area(src: &Array3<f32>, new_height: usize, new_width: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    if (h, w) == (new_height, new_width) {
        return src.clone();
    }
    let wx = area_weights(w, new_width);
    let wy = area_weights(h, new_height);
    let mut tmp = Array3::<f64>::zeros((h, new_width, c));
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            for &(sx, wt) in taps {
                for ch in 0..c {
                    tmp[[y, ox, ch]] += wt * src[[y, sx, ch]] as f64;
                }
            }
        }
    }
    let mut out = Array3::<f32>::zeros((new_height, new_width, c));
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..new_width {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(sy, wt)| wt * tmp[[sy, ox, ch]]).sum();
                out[[oy, ox, ch]] = v as f32;
            }
        }
    }
    out
}

fn to_rgb_array(image: &DynamicImage) -> Result<Array3<f32>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!(
            "image has a zero dimension ({w}x{h})"
        )));
    }
    match image {
        DynamicImage::ImageRgb8(img) => Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32
        })),
        DynamicImage::ImageRgba8(img) => Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32
        })),
        other => Err(Error::InvalidImage(format!(
            "expected an 8-bit RGB image, got {:?}",
            other.color()
        ))),
    }
}

/// Resizes so the longer side equals `target` (area interpolation, aspect
/// ratio kept), zero-pads to a `target` square with any odd remainder at the
/// bottom/right, scales to [0, 1] and standardizes with the ImageNet
/// statistics. Returns a (3, target, target) tensor.
pub fn preprocess_image(image: &DynamicImage, target: usize) -> Result<Array3<f32>> {
    if target == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let src = to_rgb_array(image)?;
    let (h, w, _) = src.dim();
    let (nw, nh, left, top) = letterbox_geometry(w, h, target);
    let resized = resize_area(&src, nh, nw);
    let mut out = Array3::<f32>::zeros((3, target, target));
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (mean, std) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        plane.fill((0.0 - mean) / std);
        for y in 0..nh {
            for x in 0..nw {
                plane[[top + y, left + x]] = (resized[[y, x, c]] / 255.0 - mean) / std;
            }
        }
    }
    Ok(out)
}

/// Opens an image file and preprocesses it.
pub fn load_tensor(path: &Path, target: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::InvalidImage(format!("{}: {other}", path.display())),
    })?;
    preprocess_image(&img, target)
}
