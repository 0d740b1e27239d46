//! Soft inlier counting, softmax hypothesis selection, and
//! entropy-controlled adaptation of the selection sharpness.
//!
//! A hypothesis is scored by summing a sigmoid of its per-cell reprojection
//! residuals, which makes the score differentiable in the scene
//! coordinates. Scores are turned into a selection distribution by a
//! softmax with scale `alpha`; `alpha` in turn is adapted online so the
//! distribution keeps a target Shannon entropy.

use crate::data::SceneCoordinateGrid;
use crate::exec;
use crate::geometry::{reprojection_jacobians, CameraIntrinsics, Pose, Projector};
use crate::pnp::HypothesisPool;
use nalgebra::Vector3;
use rand::Rng;

/// Sigmoid arguments beyond this magnitude evaluate to exactly 0 or 1 with
/// an exactly zero slope, so saturated cells drop out of sums and gradient
/// fields bit-reproducibly.
pub const SATURATION_BAND: f64 = 40.0;
/// Lower clamp applied to the softmax scale during adaptation.
pub const MIN_ALPHA: f64 = 1e-6;

/// Configuration for score, distribution, and entropy-control computations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    /// Inlier threshold in pixels.
    pub tau: f64,
    /// Softness of the inlier boundary.
    pub beta: f64,
    /// Initial softmax scale over hypothesis scores.
    pub alpha: f64,
    /// Target selection entropy in bits.
    pub target_entropy: f64,
    /// Place the sigmoid midpoint at `r = tau` (argument `beta * (tau - r)`)
    /// instead of the default soft boundary at `r = tau / beta`
    /// (argument `tau - beta * r`).
    pub sigmoid_at_threshold: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            beta: 0.5,
            alpha: 0.1,
            target_entropy: 6.0,
            sigmoid_at_threshold: false,
        }
    }
}

/// Logistic sigmoid, saturated to exact 0/1 outside [`SATURATION_BAND`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= SATURATION_BAND {
        1.0
    } else if x <= -SATURATION_BAND {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Derivative of [`sigmoid`]; exactly zero in the saturated tails.
fn sigmoid_slope(x: f64) -> f64 {
    if x.abs() >= SATURATION_BAND {
        0.0
    } else {
        let s = 1.0 / (1.0 + (-x).exp());
        s * (1.0 - s)
    }
}

/// Sigmoid argument for a residual of `r` pixels. Both forms fall with the
/// same slope `-beta` in `r`; they differ in where the midpoint sits.
fn score_argument(r: f64, cfg: &ScoringConfig) -> f64 {
    if cfg.sigmoid_at_threshold {
        cfg.beta * (cfg.tau - r)
    } else {
        cfg.tau - cfg.beta * r
    }
}

/// Soft inlier count of a pose over a scene-coordinate grid: the sum over
/// cells of a sigmoid of the (negated, scaled) reprojection residual.
/// Total over all inputs: cells that fail to project receive the clamped
/// residual and contribute exactly zero.
pub fn soft_inlier_score(
    pose: &Pose,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &ScoringConfig,
) -> f64 {
    assert!(!grid.is_empty(), "cannot score an empty grid");
    let proj = Projector::new(pose, camera);
    let terms = exec::map_indexed(grid.len(), |i| {
        let r = proj.error_clamped(&grid.coordinates[i], &grid.anchors[i]);
        sigmoid(score_argument(r, cfg))
    });
    exec::pairwise_sum(&terms)
}

/// Score every hypothesis in the pool and populate its selection
/// probabilities under the scale `cfg.alpha`.
pub fn score_pool(
    pool: &mut HypothesisPool,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &ScoringConfig,
) {
    pool.scores =
        exec::map_indexed(pool.len(), |j| soft_inlier_score(&pool.poses[j], grid, camera, cfg));
    pool.probabilities = hypothesis_distribution(&pool.scores, cfg.alpha);
}

/// Per-cell derivatives of [`soft_inlier_score`] with respect to the scene
/// coordinates. Cells that are clamped (projection failure), kinked
/// (exactly zero residual), or saturated get an exactly zero vector.
pub fn soft_score_scene_gradients(
    pose: &Pose,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &ScoringConfig,
) -> Vec<Vector3<f64>> {
    exec::map_indexed(grid.len(), |i| {
        match reprojection_jacobians(&grid.coordinates[i], &grid.anchors[i], pose, camera) {
            Ok(rj) => {
                let slope = sigmoid_slope(score_argument(rj.error, cfg));
                if slope == 0.0 {
                    Vector3::zeros()
                } else {
                    rj.d_scene * (-cfg.beta * slope)
                }
            }
            Err(_) => Vector3::zeros(),
        }
    })
}

/// Shifted softmax weights and their pairwise-summed normalizer.
fn softmax_parts(scores: &[f64], alpha: f64) -> (Vec<f64>, f64, f64) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let weights: Vec<f64> = scores.iter().map(|&s| (alpha * (s - max)).exp()).collect();
    let z = exec::pairwise_sum(&weights);
    (weights, z, max)
}

/// Softmax selection distribution over hypothesis scores, computed with
/// max-subtraction so scores in the hundreds or thousands cannot overflow.
pub fn hypothesis_distribution(scores: &[f64], alpha: f64) -> Vec<f64> {
    assert!(!scores.is_empty(), "distribution over an empty pool");
    let (weights, z, _) = softmax_parts(scores, alpha);
    weights.into_iter().map(|w| w / z).collect()
}

/// Shannon entropy in bits of the softmax distribution over `scores` at
/// scale `alpha`. Uses the log-sum-exp identity
/// `S = ln Z - alpha * E[s]` (in nats) rather than summing `-p ln p`
/// terms, which would cancel catastrophically for sharp distributions.
pub fn distribution_entropy(scores: &[f64], alpha: f64) -> f64 {
    let (weights, z, max) = softmax_parts(scores, alpha);
    let shifted_mean = exec::pairwise_sum(
        &weights.iter().zip(scores).map(|(w, &s)| w / z * (s - max)).collect::<Vec<_>>(),
    );
    (z.ln() - alpha * shifted_mean) / std::f64::consts::LN_2
}

/// Analytical derivative of [`distribution_entropy`] with respect to
/// `alpha`: `dS/d(alpha) = -alpha * Var_P(s) / ln 2` bits.
pub fn entropy_alpha_gradient(scores: &[f64], alpha: f64) -> f64 {
    let (weights, z, max) = softmax_parts(scores, alpha);
    let shifted: Vec<f64> = scores.iter().map(|&s| s - max).collect();
    let mean = exec::pairwise_sum(
        &weights.iter().zip(&shifted).map(|(w, &s)| w / z * s).collect::<Vec<_>>(),
    );
    let second = exec::pairwise_sum(
        &weights.iter().zip(&shifted).map(|(w, &s)| w / z * s * s).collect::<Vec<_>>(),
    );
    let variance = (second - mean * mean).max(0.0);
    -alpha * variance / std::f64::consts::LN_2
}

/// One gradient-descent step on the squared entropy mismatch
/// `(S(alpha) - target)^2`, using the analytical entropy derivative. The
/// result is clamped to stay positive.
pub fn adapt_alpha(scores: &[f64], alpha: f64, cfg: &ScoringConfig, learning_rate: f64) -> f64 {
    let entropy = distribution_entropy(scores, alpha);
    let gradient = 2.0 * (entropy - cfg.target_entropy) * entropy_alpha_gradient(scores, alpha);
    (alpha - learning_rate * gradient).max(MIN_ALPHA)
}

/// How to pick a hypothesis from a scored pool.
pub enum Selection<'a, R: Rng> {
    /// Draw an index from the pool's selection probabilities.
    Sample(&'a mut R),
    /// Deterministically take the highest-scoring index (ties break low).
    Argmax,
}

/// Select a hypothesis index from a populated pool.
pub fn select_hypothesis<R: Rng>(pool: &HypothesisPool, mode: Selection<R>) -> usize {
    assert!(!pool.is_empty(), "selection from an empty pool");
    match mode {
        Selection::Argmax => argmax_index(&pool.scores),
        Selection::Sample(rng) => sample_index(&pool.probabilities, rng),
    }
}

fn argmax_index(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

fn sample_index<R: Rng>(probabilities: &[f64], rng: &mut R) -> usize {
    let draw: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (j, &p) in probabilities.iter().enumerate() {
        cumulative += p;
        if draw < cumulative {
            return j;
        }
    }
    probabilities.len() - 1
}
