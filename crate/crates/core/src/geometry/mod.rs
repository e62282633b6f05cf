//! Planar geometry: homography application and estimation (weighted DLT,
//! RANSAC), rotary relative-position encoding, cross-view relative positions
//! via tracks, and reprojection/corner error metrics.

mod homography;
mod rotary;

use serde::{Deserialize, Serialize};

pub use homography::{
    apply_homography, corner_error, dlt_homography, ransac_homography,
    symmetric_reprojection_error, symmetric_reprojection_error_with_inverse, Homography,
};
pub use rotary::{rotary_matrix_apply, RotaryBasis};

use crate::tracks::GroupTracks;

/// A 2-D pixel position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PixelPoint { x, y }
    }

    pub fn distance(&self, other: PixelPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn sub(&self, other: PixelPoint) -> PixelPoint {
        PixelPoint::new(self.x - other.x, self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Cross-view relative position between point `u` of image `i` and point `v`
/// of image `j`: the tracks give u's projection p_w in image j, and the
/// result is p_w − p_v. Without a track entry the relative position is zero,
/// leaving the attention score to depend on feature similarity alone.
pub fn relative_position(
    u: usize,
    v: usize,
    image_i: usize,
    image_j: usize,
    tracks: &GroupTracks,
    keypoints_j: &[PixelPoint],
) -> PixelPoint {
    match tracks.partner(image_i, u, image_j) {
        Some(w) => keypoints_j[w].sub(keypoints_j[v]),
        None => PixelPoint::new(0.0, 0.0),
    }
}
