use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::rng::{self, tag};

/// Training-time augmentation; attack generators never apply it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    /// Random horizontal flip with probability one half.
    #[serde(default)]
    pub flip: bool,
    /// Random translation by up to this many pixels per axis, zero-filled.
    #[serde(default)]
    pub translate: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.translate == 0
    }

    /// Augment one image in place using the stream `(seed, epoch, row)`.
    pub fn apply(&self, img: &mut [f64], shape: ImageShape, seed: u64, epoch: usize, row: usize) {
        if self.is_identity() {
            return;
        }
        let mut r = rng::stream(seed, &[tag::AUGMENT, epoch as u64, row as u64]);
        let flip = self.flip && r.random::<bool>();
        let t = self.translate as i64;
        let (dy, dx) = if t > 0 {
            (r.random_range(-t..=t), r.random_range(-t..=t))
        } else {
            (0, 0)
        };
        let (h, w) = (shape.height as i64, shape.width as i64);
        let src = img.to_vec();
        for c in 0..shape.channels {
            let plane = &src[c * shape.pixels()..(c + 1) * shape.pixels()];
            for row_i in 0..h {
                for col in 0..w {
                    let sy = row_i - dy;
                    let mut sx = col - dx;
                    if flip {
                        sx = w - 1 - sx;
                    }
                    let v = if (0..h).contains(&sy) && (0..w).contains(&sx) {
                        plane[(sy * w + sx) as usize]
                    } else {
                        0.0
                    };
                    img[c * shape.pixels() + (row_i * w + col) as usize] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_image_alone() {
        let mut img = vec![0.1, 0.2, 0.3, 0.4];
        Augment::default().apply(&mut img, ImageShape::new(1, 2, 2), 0, 0, 0);
        assert_eq!(img, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn flips_are_permutations() {
        let aug = Augment {
            flip: true,
            translate: 0,
        };
        let shape = ImageShape::new(1, 2, 3);
        let orig = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        for row in 0..8 {
            let mut img = orig.clone();
            aug.apply(&mut img, shape, 3, 0, row);
            assert!(img == orig || img == vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        }
    }
}
