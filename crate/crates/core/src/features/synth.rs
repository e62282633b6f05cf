use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageFeatures;
use crate::error::{Error, Result};
use crate::geometry::{apply_homography, dlt_homography, Homography, PixelPoint};
use crate::numeric::{mix_seed, Scalar, Tensor2};

/// Knobs of the synthetic planar-scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// World points on the canonical plane (≥ 8).
    pub num_points: usize,
    /// Source views; the scene has `num_source_views + 1` images in total.
    pub num_source_views: usize,
    pub width: f64,
    pub height: f64,
    /// Fraction of each frame quarter the sampled corners may move into.
    /// 0 keeps the identity homography; values toward 1 skew hard.
    pub corner_jitter: f64,
    pub descriptor_dim: usize,
    /// Per-view Gaussian noise added to descriptors before renormalizing.
    pub descriptor_noise_sigma: f64,
    /// Probability that a world point borrows another point's embedding
    /// (repetitive-texture analogue).
    pub ambiguity_rate: f64,
    /// Probability that a visible (point, view) observation is removed
    /// (occlusion analogue).
    pub dropout_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_points: 48,
            num_source_views: 4,
            width: 640.0,
            height: 480.0,
            corner_jitter: 0.3,
            descriptor_dim: 64,
            descriptor_noise_sigma: 0.05,
            ambiguity_rate: 0.0,
            dropout_rate: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points < 8 {
            return Err(Error::InvalidConfig(format!(
                "num_points must be >= 8, got {}",
                self.num_points
            )));
        }
        if self.num_source_views < 1 {
            return Err(Error::InvalidConfig("need at least one source view".into()));
        }
        if !(0.0..1.0).contains(&self.corner_jitter) {
            return Err(Error::InvalidConfig(format!(
                "corner_jitter must be in [0, 1), got {}",
                self.corner_jitter
            )));
        }
        for (name, v) in [
            ("ambiguity_rate", self.ambiguity_rate),
            ("dropout_rate", self.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.descriptor_dim == 0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::InvalidConfig("bad frame or descriptor dim".into()));
        }
        Ok(())
    }
}

/// A labeled point on the canonical plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub label: usize,
    pub position: PixelPoint,
}

/// Ground-truth pair structure: label-equality matches between the surviving
/// keypoints of images i and t, plus the points with no counterpart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGt {
    pub i: usize,
    pub t: usize,
    pub matches: Vec<(usize, usize)>,
    pub unmatched_i: Vec<usize>,
    pub unmatched_t: Vec<usize>,
}

/// A fully specified synthetic scene: planar world points, one homography
/// per view, per-view features, and ground-truth matches for every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub seed: u64,
    pub world_points: Vec<WorldPoint>,
    /// Canonical plane → image, one per view.
    pub homographies: Vec<Homography>,
    /// visibility[view][world point]: survived projection and dropout.
    pub visibility: Vec<Vec<bool>>,
    pub images: Vec<ImageFeatures>,
    /// point_labels[view][row] = world label of that keypoint.
    pub point_labels: Vec<Vec<usize>>,
    pub gt_pairs: Vec<PairGt>,
}

impl SyntheticScene {
    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Ground-truth map from image i pixels to image t pixels.
    pub fn pair_homography(&self, i: usize, t: usize) -> Result<Homography> {
        self.homographies[t].compose(&self.homographies[i].inverse()?)
    }

    pub fn gt_pair(&self, i: usize, t: usize) -> Option<&PairGt> {
        self.gt_pairs
            .iter()
            .find(|p| (p.i == i && p.t == t) || (p.i == t && p.t == i))
    }

    /// Matches of the ordered pair (i, t), flipping the stored pair if needed.
    pub fn gt_matches_oriented(&self, i: usize, t: usize) -> Vec<(usize, usize)> {
        match self.gt_pair(i, t) {
            None => Vec::new(),
            Some(p) if p.i == i => p.matches.clone(),
            Some(p) => p.matches.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }
}

/// Generate a deterministic synthetic scene with `num_source_views + 1`
/// views of one plane.
pub fn generate_scene(rng_seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let n_images = config.num_source_views + 1;
    let (w, h) = (config.width, config.height);

    // World points on the canonical plane, kept off the border so mild
    // numerical wobble cannot push a projection outside the frame.
    let mut pos_rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, "world-points"));
    let margin = 0.05;
    let world_points: Vec<WorldPoint> = (0..config.num_points)
        .map(|label| WorldPoint {
            label,
            position: PixelPoint::new(
                pos_rng.gen_range(margin * w..(1.0 - margin) * w),
                pos_rng.gen_range(margin * h..(1.0 - margin) * h),
            ),
        })
        .collect();

    // Embeddings: a deterministic unit vector per label. Unlike a one-hot
    // table this stays collision-free when num_points exceeds the dimension.
    let mut emb_rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, "embeddings"));
    let base_embeddings: Vec<Vec<Scalar>> = (0..config.num_points)
        .map(|_| random_unit_vector(&mut emb_rng, config.descriptor_dim))
        .collect();

    // Repetitive-texture analogue: some points borrow another's embedding.
    let mut amb_rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, "ambiguity"));
    let embedding_source: Vec<usize> = (0..config.num_points)
        .map(|p| {
            if config.ambiguity_rate > 0.0 && amb_rng.gen::<f64>() < config.ambiguity_rate {
                let donor = amb_rng.gen_range(0..config.num_points - 1);
                if donor >= p {
                    donor + 1
                } else {
                    donor
                }
            } else {
                p
            }
        })
        .collect();

    let mut homographies = Vec::with_capacity(n_images);
    for view in 0..n_images {
        let mut corner_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, &format!("corners-{view}")));
        homographies.push(sample_view_homography(&mut corner_rng, config)?);
    }

    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, "dropout"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, "descriptor-noise"));

    let mut visibility = Vec::with_capacity(n_images);
    let mut images = Vec::with_capacity(n_images);
    let mut point_labels = Vec::with_capacity(n_images);
    for (view, hom) in homographies.iter().enumerate() {
        let mut visible = vec![false; config.num_points];
        let mut keypoints = Vec::new();
        let mut labels = Vec::new();
        let mut desc_rows = Vec::new();
        for wp in &world_points {
            let projected = match apply_homography(hom, wp.position) {
                Ok(p) => p,
                Err(Error::PointAtInfinity { .. }) => continue,
                Err(e) => return Err(e),
            };
            let in_frame =
                projected.x >= 0.0 && projected.x <= w && projected.y >= 0.0 && projected.y <= h;
            // Consume the dropout draw regardless of visibility so the
            // stream stays aligned across configs.
            let dropped = drop_rng.gen::<f64>() < config.dropout_rate;
            if !in_frame || dropped {
                continue;
            }
            visible[wp.label] = true;
            keypoints.push(projected);
            labels.push(wp.label);
            let base = &base_embeddings[embedding_source[wp.label]];
            let mut row: Vec<Scalar> = base.clone();
            if config.descriptor_noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += (config.descriptor_noise_sigma * gaussian(&mut noise_rng)) as Scalar;
                }
            }
            normalize(&mut row);
            desc_rows.push(row);
        }
        let descriptors = if desc_rows.is_empty() {
            Tensor2::zeros(0, config.descriptor_dim)
        } else {
            Tensor2::from_rows(&desc_rows)?
        };
        let features = ImageFeatures {
            image_id: format!("img{view}"),
            width: w,
            height: h,
            keypoints,
            descriptors,
        };
        features.validate()?;
        visibility.push(visible);
        images.push(features);
        point_labels.push(labels);
    }

    let mut gt_pairs = Vec::new();
    for i in 0..n_images {
        for t in i + 1..n_images {
            gt_pairs.push(pair_gt(i, t, &point_labels));
        }
    }

    Ok(SyntheticScene {
        config: config.clone(),
        seed: rng_seed,
        world_points,
        homographies,
        visibility,
        images,
        point_labels,
        gt_pairs,
    })
}

fn pair_gt(i: usize, t: usize, point_labels: &[Vec<usize>]) -> PairGt {
    let mut matches = Vec::new();
    let mut matched_i = vec![false; point_labels[i].len()];
    let mut matched_t = vec![false; point_labels[t].len()];
    for (u, &lu) in point_labels[i].iter().enumerate() {
        for (x, &lx) in point_labels[t].iter().enumerate() {
            if lu == lx {
                matches.push((u, x));
                matched_i[u] = true;
                matched_t[x] = true;
            }
        }
    }
    PairGt {
        i,
        t,
        matches,
        unmatched_i: (0..point_labels[i].len()).filter(|&u| !matched_i[u]).collect(),
        unmatched_t: (0..point_labels[t].len()).filter(|&x| !matched_t[x]).collect(),
    }
}

/// Sample one view homography by jittering the four frame corners, each
/// within its own quarter, resampling until the quad is strictly convex.
fn sample_view_homography(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Result<Homography> {
    let (w, h) = (config.width, config.height);
    let canonical = [
        PixelPoint::new(0.0, 0.0),
        PixelPoint::new(w, 0.0),
        PixelPoint::new(w, h),
        PixelPoint::new(0.0, h),
    ];
    let reach_x = config.corner_jitter * w / 2.0;
    let reach_y = config.corner_jitter * h / 2.0;
    fn jitter(rng: &mut ChaCha8Rng, reach: f64) -> f64 {
        if reach > 0.0 {
            rng.gen_range(0.0..=reach)
        } else {
            0.0
        }
    }
    const MAX_ATTEMPTS: usize = 100;
    for _ in 0..MAX_ATTEMPTS {
        // Move each corner inward by up to the jitter reach.
        let sampled = [
            PixelPoint::new(jitter(rng, reach_x), jitter(rng, reach_y)),
            PixelPoint::new(w - jitter(rng, reach_x), jitter(rng, reach_y)),
            PixelPoint::new(w - jitter(rng, reach_x), h - jitter(rng, reach_y)),
            PixelPoint::new(jitter(rng, reach_x), h - jitter(rng, reach_y)),
        ];
        if !is_strictly_convex(&sampled) {
            continue;
        }
        let correspondences: Vec<(PixelPoint, PixelPoint)> =
            canonical.iter().copied().zip(sampled).collect();
        match dlt_homography(&correspondences, &[1.0; 4]) {
            Ok(hom) => return Ok(hom),
            Err(Error::DegenerateConfiguration(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateHomography {
        attempts: MAX_ATTEMPTS,
    })
}

fn is_strictly_convex(quad: &[PixelPoint; 4]) -> bool {
    let mut sign = 0.0;
    for k in 0..4 {
        let a = quad[k];
        let b = quad[(k + 1) % 4];
        let c = quad[(k + 2) % 4];
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn random_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<Scalar> {
    loop {
        let mut v: Vec<Scalar> = (0..d).map(|_| gaussian(rng) as Scalar).collect();
        let norm: Scalar = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            return v;
        }
    }
}

fn normalize(v: &mut [Scalar]) {
    let norm: Scalar = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Box-Muller, consuming two uniform draws per sample.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
