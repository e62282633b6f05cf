//! Data model and I/O for keypoints and descriptors, the synthetic
//! planar-scene generator, and ground-truth match labeling.

mod io;
mod synth;

pub use io::{
    read_features_jsonl, read_scene_bundle, write_features_jsonl, write_scene_bundle, SceneBundle,
};
pub use synth::{generate_scene, SceneConfig, SyntheticScene, WorldPoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{symmetric_reprojection_error_with_inverse, Homography, PixelPoint};
use crate::numeric::{Scalar, Tensor2};

/// Keypoints plus L2-normalized descriptor rows for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub keypoints: Vec<PixelPoint>,
    pub descriptors: Tensor2,
}

impl ImageFeatures {
    /// Validate invariants: keypoints inside the frame, one descriptor row
    /// per keypoint, rows unit-normalized within 1e-6.
    pub fn validate(&self) -> Result<()> {
        if self.descriptors.rows() != self.keypoints.len() {
            return Err(Error::InvalidData(format!(
                "{}: {} keypoints but {} descriptor rows",
                self.image_id,
                self.keypoints.len(),
                self.descriptors.rows()
            )));
        }
        for (i, p) in self.keypoints.iter().enumerate() {
            if !p.is_finite() || p.x < 0.0 || p.x > self.width || p.y < 0.0 || p.y > self.height {
                return Err(Error::InvalidData(format!(
                    "{}: keypoint {i} at ({}, {}) outside [0, {}]x[0, {}]",
                    self.image_id, p.x, p.y, self.width, self.height
                )));
            }
        }
        for r in 0..self.descriptors.rows() {
            let norm: Scalar = self
                .descriptors
                .row(r)
                .iter()
                .map(|v| v * v)
                .sum::<Scalar>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidData(format!(
                    "{}: descriptor row {r} has norm {norm}, expected 1",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }
}

/// Ground-truth supervision for one (source, target) pair: matched index
/// pairs, definite non-matches on both sides; anything else is in the dead
/// zone and excluded from both sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtLabels {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_source: Vec<usize>,
    pub unmatched_target: Vec<usize>,
}

impl GtLabels {
    /// Check the no-overlap invariant between matches and unmatched sets.
    pub fn validate(&self, n_source: usize, n_target: usize) -> Result<()> {
        for &(u, x) in &self.matches {
            if u >= n_source || x >= n_target {
                return Err(Error::InvalidData(format!(
                    "label ({u},{x}) out of range {n_source}x{n_target}"
                )));
            }
            if self.unmatched_source.contains(&u) || self.unmatched_target.contains(&x) {
                return Err(Error::InvalidData(format!(
                    "index of match ({u},{x}) also marked unmatched"
                )));
            }
        }
        Ok(())
    }
}

/// Dual-threshold ground-truth labeling for the pair (i, t) of a scene.
///
/// A pair of keypoints is a match when both observe the same world point and
/// their symmetric reprojection error under the ground-truth homography
/// chain is at most `inlier_px`. A keypoint is a definite non-match when no
/// keypoint of the other image lands within `outlier_px` of it; keypoints
/// between the thresholds stay unlabeled.
pub fn gt_labels(
    scene: &SyntheticScene,
    i: usize,
    t: usize,
    inlier_px: f64,
    outlier_px: f64,
) -> Result<GtLabels> {
    if i == t || i >= scene.images.len() || t >= scene.images.len() {
        return Err(Error::InvalidData(format!(
            "gt_labels: bad image pair ({i}, {t}) for {} images",
            scene.images.len()
        )));
    }
    let h_it = scene.pair_homography(i, t)?;
    let h_ti = h_it.inverse()?;
    let src = &scene.images[i];
    let tgt = &scene.images[t];

    let mut matches = Vec::new();
    let mut min_err_src = vec![f64::INFINITY; src.len()];
    let mut min_err_tgt = vec![f64::INFINITY; tgt.len()];
    for u in 0..src.len() {
        for x in 0..tgt.len() {
            let err = match symmetric_reprojection_error_with_inverse(
                &h_it,
                &h_ti,
                src.keypoints[u],
                tgt.keypoints[x],
            ) {
                Ok(e) => e,
                Err(Error::PointAtInfinity { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            min_err_src[u] = min_err_src[u].min(err);
            min_err_tgt[x] = min_err_tgt[x].min(err);
            if err <= inlier_px && scene.point_labels[i][u] == scene.point_labels[t][x] {
                matches.push((u, x));
            }
        }
    }
    let unmatched_source = (0..src.len())
        .filter(|&u| min_err_src[u] > outlier_px)
        .collect();
    let unmatched_target = (0..tgt.len())
        .filter(|&x| min_err_tgt[x] > outlier_px)
        .collect();
    Ok(GtLabels {
        matches,
        unmatched_source,
        unmatched_target,
    })
}

/// Mutual nearest-neighbor matching on descriptor similarity (dot product of
/// normalized rows). A pair is kept when each side is the other's argmax and
/// the similarity clears `min_similarity`. Argmax ties break low.
pub fn mutual_nn_matches(
    a: &Tensor2,
    b: &Tensor2,
    min_similarity: Scalar,
) -> Result<Vec<(usize, usize, Scalar)>> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "descriptor dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Ok(Vec::new());
    }
    let sim = a.matmul_nt(b)?;
    let best_for_a: Vec<usize> = (0..a.rows()).map(|r| argmax_row(&sim, r)).collect();
    let best_for_b: Vec<usize> = (0..b.rows()).map(|c| argmax_col(&sim, c)).collect();
    let mut out = Vec::new();
    for (u, &x) in best_for_a.iter().enumerate() {
        if best_for_b[x] == u && sim.get(u, x) >= min_similarity {
            out.push((u, x, sim.get(u, x)));
        }
    }
    Ok(out)
}

fn argmax_row(m: &Tensor2, r: usize) -> usize {
    let mut best = 0;
    let mut best_v = m.get(r, 0);
    for c in 1..m.cols() {
        if m.get(r, c) > best_v {
            best_v = m.get(r, c);
            best = c;
        }
    }
    best
}

fn argmax_col(m: &Tensor2, c: usize) -> usize {
    let mut best = 0;
    let mut best_v = m.get(0, c);
    for r in 1..m.rows() {
        if m.get(r, c) > best_v {
            best_v = m.get(r, c);
            best = r;
        }
    }
    best
}
