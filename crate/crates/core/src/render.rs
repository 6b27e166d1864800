//! Colour-coded error maps comparing a prediction with its label.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::save_rgb_png;
use crate::error::{Error, Result};
use crate::metrics::BinaryMap;

pub const TP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
pub const FP_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const TN_COLOR: Rgb<u8> = Rgb([0, 0, 0]);
pub const FN_COLOR: Rgb<u8> = Rgb([0, 0, 255]);

/// White true positives, red false positives, black true negatives and
/// blue false negatives.
pub fn error_map(pred: &BinaryMap, label: &BinaryMap) -> Result<RgbImage> {
    if (pred.height, pred.width) != (label.height, label.width) {
        return Err(Error::shape(format!(
            "prediction {}×{} vs label {}×{}",
            pred.height, pred.width, label.height, label.width
        )));
    }
    Ok(RgbImage::from_fn(pred.width as u32, pred.height as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        match (pred.get(r, c), label.get(r, c)) {
            (1, 1) => TP_COLOR,
            (1, _) => FP_COLOR,
            (_, 1) => FN_COLOR,
            _ => TN_COLOR,
        }
    }))
}

pub fn save_error_map(pred: &BinaryMap, label: &BinaryMap, path: &Path) -> Result<()> {
    save_rgb_png(&error_map(pred, label)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_outcome_has_its_colour() {
        let pred = BinaryMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let label = BinaryMap::new(1, 4, vec![1, 0, 0, 1]).unwrap();
        let img = error_map(&pred, &label).unwrap();
        assert_eq!(*img.get_pixel(0, 0), TP_COLOR);
        assert_eq!(*img.get_pixel(1, 0), FP_COLOR);
        assert_eq!(*img.get_pixel(2, 0), TN_COLOR);
        assert_eq!(*img.get_pixel(3, 0), FN_COLOR);
    }

    #[test]
    fn size_mismatch_rejected() {
        let pred = BinaryMap::zeros(2, 2);
        let label = BinaryMap::zeros(2, 3);
        assert!(matches!(error_map(&pred, &label), Err(Error::Shape(_))));
    }
}
