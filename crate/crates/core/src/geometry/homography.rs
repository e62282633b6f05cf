use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PixelPoint;
use crate::error::{Error, Result};

const W_TOLERANCE: f64 = 1e-9;

/// Plane-to-plane projective map. Stored normalized: h[2][2] = 1 when
/// |h[2][2]| is large enough, otherwise unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    h: Matrix3<f64>,
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;
    fn try_from(v: [f64; 9]) -> Result<Self> {
        Homography::from_row_major(v)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> [f64; 9] {
        h.to_row_major()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            h: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography::from_row_major([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0]).expect("valid")
    }

    /// Normalize and validate a 3×3 matrix given in row-major order.
    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        let m = Matrix3::from_row_slice(&v);
        Self::from_matrix(m)
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("homography entries".into()));
        }
        let h22 = m[(2, 2)];
        let normed = if h22.abs() > 1e-12 {
            m / h22
        } else {
            let n = m.norm();
            if n < 1e-12 {
                return Err(Error::DegenerateConfiguration(
                    "zero homography matrix".into(),
                ));
            }
            m / n
        };
        if normed.determinant().abs() <= 1e-12 {
            return Err(Error::DegenerateConfiguration(format!(
                "singular homography, |det| = {:e}",
                normed.determinant().abs()
            )));
        }
        Ok(Homography { h: normed })
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.h[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .h
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("homography not invertible".into()))?;
        Homography::from_matrix(inv)
    }

    /// Composition: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.h * other.h)
    }
}

/// Project `p` through `h`, failing when the point maps to infinity.
pub fn apply_homography(h: &Homography, p: PixelPoint) -> Result<PixelPoint> {
    let v = h.matrix() * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() <= W_TOLERANCE {
        return Err(Error::PointAtInfinity { w: v.z });
    }
    Ok(PixelPoint::new(v.x / v.z, v.y / v.z))
}

/// ½(‖h(p) − q‖ + ‖h⁻¹(q) − p‖).
pub fn symmetric_reprojection_error(h: &Homography, p: PixelPoint, q: PixelPoint) -> Result<f64> {
    let h_inv = h.inverse()?;
    symmetric_reprojection_error_with_inverse(h, &h_inv, p, q)
}

/// Same as [`symmetric_reprojection_error`] with a precomputed inverse, for
/// callers scoring many points against one model.
pub fn symmetric_reprojection_error_with_inverse(
    h: &Homography,
    h_inv: &Homography,
    p: PixelPoint,
    q: PixelPoint,
) -> Result<f64> {
    let fwd = apply_homography(h, p)?;
    let bwd = apply_homography(h_inv, q)?;
    Ok(0.5 * (fwd.distance(q) + bwd.distance(p)))
}

/// Mean reprojection distance of the four frame corners under the two maps.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, width: f64, height: f64) -> Result<f64> {
    let corners = [
        PixelPoint::new(0.0, 0.0),
        PixelPoint::new(width, 0.0),
        PixelPoint::new(width, height),
        PixelPoint::new(0.0, height),
    ];
    let mut total = 0.0;
    for c in corners {
        let a = apply_homography(h_est, c)?;
        let b = apply_homography(h_gt, c)?;
        total += a.distance(b);
    }
    Ok(total / 4.0)
}

fn hartley_normalization(points: &[PixelPoint]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in points {
        cx += p.x;
        cy += p.y;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for p in points {
        mean_dist += ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt();
    }
    mean_dist /= n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(m: &Matrix3<f64>, p: PixelPoint) -> PixelPoint {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    PixelPoint::new(v.x / v.z, v.y / v.z)
}

/// Weighted least-squares homography by normalized DLT.
///
/// Both point sets are Hartley-preconditioned, the stacked 2N×9 system has
/// its rows scaled by √weight, the null vector comes from the SVD, and the
/// result is de-conditioned and normalized.
pub fn dlt_homography(
    correspondences: &[(PixelPoint, PixelPoint)],
    weights: &[f64],
) -> Result<Homography> {
    if correspondences.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} correspondences vs {} weights",
            correspondences.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidData("DLT weights must be nonnegative".into()));
    }
    let active: Vec<(PixelPoint, PixelPoint, f64)> = correspondences
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&(p, q), &w)| (p, q, w))
        .collect();
    if active.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 4 positively weighted correspondences, got {}",
            active.len()
        )));
    }

    let src: Vec<PixelPoint> = active.iter().map(|&(p, _, _)| p).collect();
    let dst: Vec<PixelPoint> = active.iter().map(|&(_, q, _)| q).collect();
    let t_src = hartley_normalization(&src);
    let t_dst = hartley_normalization(&dst);

    let n = active.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (k, &(p, q, w)) in active.iter().enumerate() {
        let pn = transform(&t_src, p);
        let qn = transform(&t_dst, q);
        let sw = w.sqrt();
        let (x, y) = (pn.x, pn.y);
        let (u, v) = (qn.x, qn.y);
        let r0 = 2 * k;
        a[(r0, 0)] = -x * sw;
        a[(r0, 1)] = -y * sw;
        a[(r0, 2)] = -sw;
        a[(r0, 6)] = u * x * sw;
        a[(r0, 7)] = u * y * sw;
        a[(r0, 8)] = u * sw;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x * sw;
        a[(r1, 4)] = -y * sw;
        a[(r1, 5)] = -sw;
        a[(r1, 6)] = v * x * sw;
        a[(r1, 7)] = v * y * sw;
        a[(r1, 8)] = v * sw;
    }

    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let mut singular: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular.sort_by(|x, y| y.partial_cmp(x).unwrap());
    // With 8 degrees of freedom the system must have exactly one vanishing
    // direction; two near-equal smallest singular values mean the solution
    // is not unique.
    let sigma_max = singular[0].max(1.0);
    let second_smallest = singular[singular.len() - 2];
    let smallest = singular[singular.len() - 1];
    if (second_smallest - smallest) <= 1e-9 * sigma_max {
        return Err(Error::DegenerateConfiguration(format!(
            "rank-deficient DLT system (sigma7={second_smallest:e}, sigma8={smallest:e})"
        )));
    }
    let h_row = vt.row(vt.nrows() - 1);
    let hn = Matrix3::from_row_slice(&[
        h_row[0], h_row[1], h_row[2], h_row[3], h_row[4], h_row[5], h_row[6], h_row[7], h_row[8],
    ]);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("conditioning not invertible".into()))?;
    Homography::from_matrix(t_dst_inv * hn * t_src)
}

/// Classic 4-point RANSAC with symmetric reprojection scoring.
///
/// Each trial draws its sample from a counter-based RNG stream mixed from
/// (seed, trial index), so results are independent of trial execution order
/// and the whole search is deterministic for a fixed seed. The best model is
/// re-fit by DLT on its inlier set and the final mask is recomputed under
/// the re-fit model.
pub fn ransac_homography(
    correspondences: &[(PixelPoint, PixelPoint)],
    inlier_threshold_px: f64,
    max_iters: usize,
    rng_seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    if correspondences.len() < 4 {
        return Err(Error::RansacFailure);
    }
    if inlier_threshold_px <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "inlier threshold must be positive, got {inlier_threshold_px}"
        )));
    }

    struct TrialOutcome {
        trial: usize,
        inliers: Vec<bool>,
        count: usize,
    }

    let outcomes: Vec<Option<TrialOutcome>> = (0..max_iters)
        .into_par_iter()
        .map(|trial| {
            let model = sample_model(correspondences, rng_seed, trial)?;
            let inliers = inlier_mask(correspondences, &model, inlier_threshold_px).ok()?;
            let count = inliers.iter().filter(|&&b| b).count();
            if count < 4 {
                return None;
            }
            Some(TrialOutcome {
                trial,
                inliers,
                count,
            })
        })
        .collect();

    // Deterministic reduction: most inliers, ties to the lowest trial index.
    let best = outcomes
        .into_iter()
        .flatten()
        .max_by(|a, b| a.count.cmp(&b.count).then(b.trial.cmp(&a.trial)));
    let best = best.ok_or(Error::RansacFailure)?;

    let weights: Vec<f64> = best.inliers.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let refit = dlt_homography(correspondences, &weights)?;
    let final_mask = inlier_mask(correspondences, &refit, inlier_threshold_px)
        .map_err(|_| Error::RansacFailure)?;
    if final_mask.iter().filter(|&&b| b).count() < 4 {
        return Err(Error::RansacFailure);
    }
    Ok((refit, final_mask))
}

/// Draw a minimal 4-point sample for one trial, rejecting samples with any
/// three collinear points. At most 10 redraws per trial, all from the
/// trial's private stream.
fn sample_model(
    correspondences: &[(PixelPoint, PixelPoint)],
    seed: u64,
    trial: usize,
) -> Option<Homography> {
    let stream = crate::numeric::mix_seed_index(seed, trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let indices: Vec<usize> = (0..correspondences.len()).collect();
    for _attempt in 0..10 {
        let sample: Vec<usize> = indices.choose_multiple(&mut rng, 4).copied().collect();
        let pts: Vec<(PixelPoint, PixelPoint)> =
            sample.iter().map(|&i| correspondences[i]).collect();
        let src: Vec<PixelPoint> = pts.iter().map(|&(p, _)| p).collect();
        let dst: Vec<PixelPoint> = pts.iter().map(|&(_, q)| q).collect();
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            continue;
        }
        if let Ok(h) = dlt_homography(&pts, &[1.0; 4]) {
            return Some(h);
        }
    }
    None
}

fn has_collinear_triple(pts: &[PixelPoint]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let ux = pts[j].x - pts[i].x;
                let uy = pts[j].y - pts[i].y;
                let vx = pts[k].x - pts[i].x;
                let vy = pts[k].y - pts[i].y;
                let cross = ux * vy - uy * vx;
                let scale = (ux * ux + uy * uy).sqrt() * (vx * vx + vy * vy).sqrt();
                if cross.abs() <= 1e-6 * scale.max(1.0) {
                    return true;
                }
            }
        }
    }
    false
}

fn inlier_mask(
    correspondences: &[(PixelPoint, PixelPoint)],
    h: &Homography,
    threshold: f64,
) -> Result<Vec<bool>> {
    let h_inv = h.inverse()?;
    correspondences
        .iter()
        .map(|&(p, q)| {
            Ok(
                match symmetric_reprojection_error_with_inverse(h, &h_inv, p, q) {
                    Ok(e) => e <= threshold,
                    // A correspondence at infinity under this model is simply
                    // not an inlier.
                    Err(Error::PointAtInfinity { .. }) => false,
                    Err(e) => return Err(e),
                },
            )
        })
        .collect()
}
