//! Synthetic piecewise-constant test images and box downsampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::harness::noise::{rng_for, STREAM_PHANTOM};

enum Shape {
    Disk {
        cy: f64,
        cx: f64,
        r: f64,
        level: f64,
    },
    Rect {
        top: f64,
        left: f64,
        bottom: f64,
        right: f64,
        level: f64,
    },
}

/// Background with a gentle ramp plus two to four disks and rectangles.
/// Values lie in `[0, 1]`.
pub fn phantom(size: usize, seed: u64, index: u64) -> Image {
    let mut rng = rng_for(seed, STREAM_PHANTOM, index);
    let s = size as f64;
    let background = rng.random_range(0.1..0.3);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let slope = rng.random_range(0.0..0.2);
    let count = rng.random_range(2..=4);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let level = rng.random_range(0.35..0.95);
            if rng.random_bool(0.5) {
                Shape::Disk {
                    cy: rng.random_range(0.2..0.8) * s,
                    cx: rng.random_range(0.2..0.8) * s,
                    r: rng.random_range(0.1..0.3) * s,
                    level,
                }
            } else {
                let (h, w) = (
                    rng.random_range(0.2..0.5) * s,
                    rng.random_range(0.2..0.5) * s,
                );
                let (top, left) = (
                    rng.random_range(0.05..0.6) * s,
                    rng.random_range(0.05..0.6) * s,
                );
                Shape::Rect {
                    top,
                    left,
                    bottom: top + h,
                    right: left + w,
                    level,
                }
            }
        })
        .collect();

    Image::from_fn(size, size, |row, col| {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        let t = (x * angle.cos() + y * angle.sin()) / s;
        let mut v = background + slope * (t + 1.0) / 2.0;
        for shape in &shapes {
            match *shape {
                Shape::Disk { cy, cx, r, level } => {
                    if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
                        v = level;
                    }
                }
                Shape::Rect {
                    top,
                    left,
                    bottom,
                    right,
                    level,
                } => {
                    if y >= top && y < bottom && x >= left && x < right {
                        v = level;
                    }
                }
            }
        }
        v.clamp(0.0, 1.0)
    })
}

pub fn phantom_set(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count).map(|i| phantom(size, seed, i as u64)).collect()
}

/// Averages non-overlapping `factor x factor` blocks.
pub fn box_downsample(x: &Image, factor: usize) -> Result<Image> {
    let (w, h) = x.shape();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::InvalidImage(format!(
            "{w}x{h} image cannot be box-downsampled by {factor}"
        )));
    }
    let area = (factor * factor) as f64;
    Ok(Image::from_fn(w / factor, h / factor, |r, c| {
        let mut s = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                s += x.get(r * factor + dr, c * factor + dc);
            }
        }
        s / area
    }))
}

/// Brings a square image to `size x size` by box averaging with an integer factor.
pub fn fit_to_size(x: &Image, size: usize) -> Result<Image> {
    let (w, h) = x.shape();
    if w != h || size == 0 || w % size != 0 {
        return Err(Error::InvalidImage(format!(
            "{w}x{h} image cannot be reduced to {size}x{size} by box averaging"
        )));
    }
    if w == size {
        return Ok(x.clone());
    }
    box_downsample(x, w / size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_deterministic_and_in_range() {
        let a = phantom(32, 5, 0);
        assert_eq!(a, phantom(32, 5, 0));
        assert_ne!(a, phantom(32, 5, 1));
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
        // piecewise constant with edges
        assert!(crate::grid::total_variation(&a) > 1.0);
        assert_eq!(phantom_set(3, 16, 2).len(), 3);
    }

    #[test]
    fn downsample_averages_blocks() {
        let x = Image::new(4, 2, vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 0.0, 4.0]).unwrap();
        let d = box_downsample(&x, 2).unwrap();
        assert_eq!(d.shape(), (2, 1));
        assert_eq!(d.values(), &[4.0, 1.0]);
        assert!(box_downsample(&x, 3).is_err());
        assert!(box_downsample(&x, 0).is_err());
    }

    #[test]
    fn downsample_preserves_mean() {
        let x = phantom(32, 1, 0);
        let d = fit_to_size(&x, 8).unwrap();
        assert!((d.mean() - x.mean()).abs() < 1e-12);
        assert_eq!(fit_to_size(&x, 32).unwrap(), x);
        assert!(fit_to_size(&x, 12).is_err());
    }
}
