//! Three-stage regressor training.
//!
//! Stage 1 fits the network to initialization targets (rendered from a
//! scene model, or a constant-depth heuristic when no model exists). Stage
//! 2 minimizes the summed reprojection error under the ground-truth poses,
//! which lets the network discover true depth. Stage 3 trains end to end:
//! the expected pose loss over the hypothesis distribution is
//! differentiated exactly over the full pool, combining a score-function
//! term (through the softmax weights) with a pathwise term (through the
//! refinement of each hypothesis), while the softmax scale adapts to hold
//! the distribution entropy at its target.
//!
//! All stages use ADAM with batch size 1, random ±shift augmentation with
//! edge replication (anchors shift with the image so the geometric
//! relationships survive), and halving learning-rate schedules; a single
//! scale factor shrinks every schedule proportionally for desk-scale runs.
//! Runs are bit-reproducible for a fixed master seed.

use crate::data::{standard_anchors, SceneCoordinateGrid, TrainingSample, TrainingSet, GRID_STRIDE};
use crate::exec;
use crate::geometry::{
    backproject, pose_loss, pose_loss_gradient, reprojection_jacobians, CameraIntrinsics,
    GeometryError, PixelPoint, Pose, SceneCoordinate, CLAMPED_ERROR, NORM_KINK,
};
use crate::pnp::{sample_hypotheses, PnpError, SamplingConfig};
use crate::refinement::{refine_pose, refinement_gradient, RefinementConfig};
use crate::regressor::{
    heuristic_targets_at, save_checkpoint, CheckpointError, ParameterGradients, Regressor,
    RegressorError,
};
use crate::scoring::{
    adapt_alpha, distribution_entropy, hypothesis_distribution, soft_inlier_score,
    soft_score_scene_gradients, ScoringConfig,
};
use nalgebra::Vector3;
use rand::Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

// Stable stream indices for the per-stage RNGs.
const STREAM_INIT: u64 = 0x11;
const STREAM_SUBSET: u64 = 0x12;
const STREAM_REPROJECTION: u64 = 0x13;
const STREAM_END_TO_END: u64 = 0x14;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training set has no samples")]
    EmptyDataset,
    #[error("rendered-target training needs a depth map for every sample")]
    MissingDepth,
    #[error("{skipped} of {iterations} iterations skipped; sampling keeps failing")]
    TooManySkips { skipped: usize, iterations: usize },
    #[error(transparent)]
    Model(#[from] RegressorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("could not write training log: {0}")]
    Log(#[from] std::io::Error),
}

// ======================== ADAM ========================

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates in the canonical flat parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl AdamState {
    pub fn new(parameter_count: usize) -> Self {
        Self { step: 0, first: vec![0.0; parameter_count], second: vec![0.0; parameter_count] }
    }
}

/// One bias-corrected ADAM update of every parameter.
pub fn adam_step(
    model: &mut Regressor,
    gradients: &ParameterGradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    learning_rate: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - cfg.beta1.powi(t);
    let correction2 = 1.0 - cfg.beta2.powi(t);
    let flat: Vec<f64> = gradients.values().collect();
    debug_assert_eq!(flat.len(), state.first.len());
    model.update_parameters(|idx, w| {
        let g = flat[idx];
        let m = cfg.beta1 * state.first[idx] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second[idx] + (1.0 - cfg.beta2) * g * g;
        state.first[idx] = m;
        state.second[idx] = v;
        let m_hat = m / correction1;
        let v_hat = v / correction2;
        *w -= learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    });
}

// ======================== schedules ========================

/// A halving learning-rate schedule: the rate stays at `initial_rate` for
/// `warmup` iterations, then halves every `halve_every` iterations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub initial_rate: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub halve_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { initial_rate: 1e-4, iterations: 300_000, warmup: 100_000, halve_every: 50_000 }
    }
}

impl Schedule {
    /// Shrink all iteration counts by `scale`, preserving the halving
    /// structure. Nonzero counts round to the nearest iteration, never
    /// below one; a zero count stays zero.
    pub fn scaled(&self, scale: f64) -> Schedule {
        let s =
            |n: usize| if n == 0 { 0 } else { ((n as f64 * scale).round() as usize).max(1) };
        Schedule {
            initial_rate: self.initial_rate,
            iterations: s(self.iterations),
            warmup: s(self.warmup),
            halve_every: s(self.halve_every).max(1),
        }
    }

    /// Learning rate for iteration `iter` (0-based).
    pub fn rate_at(&self, iter: usize) -> f64 {
        if iter < self.warmup {
            return self.initial_rate;
        }
        let halvings = 1 + (iter - self.warmup) / self.halve_every.max(1);
        self.initial_rate * 0.5_f64.powi(halvings as i32)
    }
}

// ======================== configuration ========================

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Multiplier on every schedule's iteration counts (1.0 = full scale).
    pub schedule_scale: f64,
    /// Stage-1 schedule (rendered targets).
    pub init: Schedule,
    /// Stage-1 iteration count when fitting the constant-depth heuristic;
    /// kept short to avoid overfitting the approximation.
    pub heuristic_iterations: usize,
    /// Fraction of the training data used in heuristic initialization.
    pub heuristic_fraction: f64,
    /// Constant-depth prior in metres for the heuristic targets.
    pub depth_prior: f64,
    /// Stage-2 schedule.
    pub reprojection: Schedule,
    /// Elementwise clamp on stage-2 scene-coordinate gradients.
    pub reprojection_clamp: f64,
    /// Stage-3 schedule.
    pub end_to_end: Schedule,
    /// Elementwise clamp on stage-3 scene-coordinate gradients.
    pub end_to_end_clamp: f64,
    /// Gradient-descent rate for the softmax-scale entropy controller.
    pub alpha_learning_rate: f64,
    /// Augmentation: images shift uniformly in [-shift_max, +shift_max] px.
    pub shift_max: i64,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Abort when more than this fraction of stage-3 iterations skip.
    pub max_skip_fraction: f64,
    /// Write a checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
    pub master_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            schedule_scale: 1.0,
            init: Schedule::default(),
            heuristic_iterations: 100_000,
            heuristic_fraction: 0.05,
            depth_prior: 3.0,
            reprojection: Schedule::default(),
            reprojection_clamp: 0.5,
            end_to_end: Schedule {
                initial_rate: 1e-6,
                iterations: 50_000,
                warmup: 25_000,
                halve_every: 25_000,
            },
            end_to_end_clamp: 1e-3,
            alpha_learning_rate: 1e-3,
            shift_max: 8,
            batch_size: 1,
            adam: AdamConfig::default(),
            max_skip_fraction: 0.1,
            checkpoint_every: 0,
            master_seed: 0,
        }
    }
}

// ======================== logging ========================

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub stage: &'static str,
    pub iteration: usize,
    pub loss: f64,
    pub entropy_bits: f64,
    pub alpha: f64,
    pub skipped: usize,
}

/// Append-only training log. Records are always kept in memory; when a
/// file is attached each record is also written as one line.
#[derive(Debug)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    writer: Option<BufWriter<File>>,
}

impl TrainingLog {
    pub fn in_memory() -> Self {
        Self { records: Vec::new(), writer: None }
    }

    pub fn with_file(path: &Path) -> Result<Self, TrainingError> {
        let file = File::options().create(true).append(true).open(path)?;
        Ok(Self { records: Vec::new(), writer: Some(BufWriter::new(file)) })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<(), TrainingError> {
        if let Some(w) = &mut self.writer {
            writeln!(
                w,
                "stage={} iter={} loss={:.6} entropy={:.4} alpha={:.6} skipped={}",
                record.stage,
                record.iteration,
                record.loss,
                record.entropy_bits,
                record.alpha,
                record.skipped
            )?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }
}

// ======================== per-stage cell losses ========================

/// Stage-1 loss and per-cell gradients: the summed (unsquared) Euclidean
/// distance between predictions and targets over unmasked cells. The
/// distance kink at zero uses the zero-gradient convention.
pub fn init_loss_and_gradients(
    predictions: &[SceneCoordinate],
    targets: &[SceneCoordinate],
    valid: &[bool],
) -> (f64, Vec<Vector3<f64>>) {
    debug_assert_eq!(predictions.len(), targets.len());
    let mut gradients = vec![Vector3::zeros(); predictions.len()];
    let mut terms = vec![0.0; predictions.len()];
    for i in 0..predictions.len() {
        if !valid[i] {
            continue;
        }
        let diff = predictions[i].coords - targets[i].coords;
        let norm = diff.norm();
        terms[i] = norm;
        if norm > NORM_KINK {
            gradients[i] = diff / norm;
        }
    }
    (exec::pairwise_sum(&terms), gradients)
}

/// Stage-2 loss and per-cell gradients: summed reprojection errors under
/// the ground-truth pose. Cells that fail to project contribute the large
/// clamped error with zero gradient; zero-residual cells contribute zero
/// gradient. Gradients are clamped elementwise to ±`clamp`.
pub fn reprojection_loss_and_gradients(
    predictions: &[SceneCoordinate],
    anchors: &[PixelPoint],
    pose_gt: &Pose,
    camera: &CameraIntrinsics,
    clamp: f64,
) -> (f64, Vec<Vector3<f64>>) {
    debug_assert_eq!(predictions.len(), anchors.len());
    let cells: Vec<(f64, Vector3<f64>)> = exec::map_indexed(predictions.len(), |i| {
        match reprojection_jacobians(&predictions[i], &anchors[i], pose_gt, camera) {
            Ok(j) => {
                let g = j.d_scene.map(|v| v.clamp(-clamp, clamp));
                (j.error, g)
            }
            Err(GeometryError::NonDifferentiable) => (0.0, Vector3::zeros()),
            Err(_) => (CLAMPED_ERROR, Vector3::zeros()),
        }
    });
    let terms: Vec<f64> = cells.iter().map(|(e, _)| *e).collect();
    let gradients = cells.into_iter().map(|(_, g)| g).collect();
    (exec::pairwise_sum(&terms), gradients)
}

// ======================== expected pose loss (stage 3) ========================

/// Everything produced by one exact expected-loss evaluation.
#[derive(Debug, Clone)]
pub struct ExpectedLoss {
    /// The expectation of the refined pose loss over the hypothesis
    /// distribution.
    pub loss: f64,
    /// Total per-cell scene-coordinate gradient (`score_term + pathwise_term`).
    pub gradient: Vec<Vector3<f64>>,
    /// Score-function part: losses times the softmax-probability gradients.
    pub score_term: Vec<Vector3<f64>>,
    /// Pathwise part: loss gradients chained through each hypothesis's
    /// refinement sensitivity.
    pub pathwise_term: Vec<Vector3<f64>>,
    /// Soft inlier scores of the (unrefined) hypotheses.
    pub scores: Vec<f64>,
    /// Shannon entropy of the hypothesis distribution, in bits.
    pub entropy_bits: f64,
}

/// Exact expected pose loss over a fixed hypothesis set, and its gradient
/// with respect to every scene coordinate.
///
/// Hypotheses are scored on the current grid, refined (each from its own
/// pose, with its own inlier set), and the expectation of
/// `pose_loss(refined, ground truth)` is taken under the softmax of the
/// scores. The gradient has two parts: the score-function term
/// `alpha * sum_j P_j (l_j - E) * d s_j / d y`, which moves probability
/// mass toward low-loss hypotheses, and the pathwise term
/// `sum_j P_j * d l_j / d y` through each converged refinement's
/// sensitivity blocks. Unconverged or singular refinements contribute
/// their loss but no pathwise gradient.
pub fn expected_loss_and_gradient(
    grid: &SceneCoordinateGrid,
    pose_gt: &Pose,
    camera: &CameraIntrinsics,
    hypotheses: &[Pose],
    scoring: &ScoringConfig,
    refinement: &RefinementConfig,
) -> ExpectedLoss {
    assert!(!hypotheses.is_empty(), "need at least one hypothesis");
    let n = hypotheses.len();
    let cells = grid.len();

    struct HypothesisTerms {
        score: f64,
        loss: f64,
        score_gradients: Vec<Vector3<f64>>,
        pathwise: Vec<(usize, Vector3<f64>)>,
    }

    let per: Vec<HypothesisTerms> = exec::map_indexed(n, |j| {
        let h = &hypotheses[j];
        let score = soft_inlier_score(h, grid, camera, scoring);
        let score_gradients = soft_score_scene_gradients(h, grid, camera, scoring);
        let refined = refine_pose(h, grid, camera, refinement);
        let loss = pose_loss(&refined.pose, pose_gt);
        let mut pathwise = Vec::new();
        if refined.converged {
            if let Ok(blocks) = refinement_gradient(&refined, grid, camera, refinement) {
                let dl_dpose = pose_loss_gradient(&refined.pose, pose_gt);
                for (k, &cell) in refined.inliers.cell_indices.iter().enumerate() {
                    pathwise.push((cell, blocks[k].transpose() * dl_dpose));
                }
            }
        }
        HypothesisTerms { score, loss, score_gradients, pathwise }
    });

    let scores: Vec<f64> = per.iter().map(|t| t.score).collect();
    let probabilities = hypothesis_distribution(&scores, scoring.alpha);
    let entropy_bits = distribution_entropy(&scores, scoring.alpha);
    let loss_terms: Vec<f64> =
        per.iter().zip(&probabilities).map(|(t, p)| p * t.loss).collect();
    let loss = exec::pairwise_sum(&loss_terms);

    // Score-function weights alpha * P_j * (l_j - E).
    let weights: Vec<f64> = per
        .iter()
        .zip(&probabilities)
        .map(|(t, p)| scoring.alpha * p * (t.loss - loss))
        .collect();
    let score_term = exec::map_indexed(cells, |i| {
        let mut acc = Vector3::zeros();
        for (t, w) in per.iter().zip(&weights) {
            acc += *w * t.score_gradients[i];
        }
        acc
    });

    let mut pathwise_term = vec![Vector3::zeros(); cells];
    for (t, p) in per.iter().zip(&probabilities) {
        for (cell, g) in &t.pathwise {
            pathwise_term[*cell] += *p * g;
        }
    }

    let gradient = score_term
        .iter()
        .zip(&pathwise_term)
        .map(|(a, b)| a + b)
        .collect();
    ExpectedLoss { loss, gradient, score_term, pathwise_term, scores, entropy_bits }
}

// ======================== stage drivers ========================

/// Where stage-1 targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Ray-cast depth from the dataset's depth maps.
    Rendered,
    /// Constant-depth approximation from the ground-truth pose alone.
    Heuristic,
}

/// Anchor lattice displaced opposite to an image shift: cell content moved
/// by `(dx, dy)` came from the pixels at `anchor - (dx, dy)`.
fn shifted_anchors(cells_x: usize, cells_y: usize, dx: i64, dy: i64) -> Vec<PixelPoint> {
    standard_anchors(cells_x, cells_y, GRID_STRIDE)
        .into_iter()
        .map(|a| PixelPoint::new(a.x - dx as f64, a.y - dy as f64))
        .collect()
}

/// Stage-1 targets for one (possibly shifted) view.
fn init_targets(
    mode: InitMode,
    sample: &TrainingSample,
    anchors: &[PixelPoint],
    camera: &CameraIntrinsics,
    depth_prior: f64,
) -> Result<(Vec<SceneCoordinate>, Vec<bool>), TrainingError> {
    match mode {
        InitMode::Heuristic => {
            let targets = heuristic_targets_at(&sample.pose, camera, anchors, depth_prior)?;
            let valid = vec![true; targets.len()];
            Ok((targets, valid))
        }
        InitMode::Rendered => {
            let depth = sample.depth.as_ref().ok_or(TrainingError::MissingDepth)?;
            let mut targets = Vec::with_capacity(anchors.len());
            let mut valid = Vec::with_capacity(anchors.len());
            for a in anchors {
                let (x, y) = (a.x.floor(), a.y.floor());
                let inside = x >= 0.0
                    && y >= 0.0
                    && (x as usize) < depth.width
                    && (y as usize) < depth.height;
                let ok = inside && depth.is_valid(y as usize, x as usize);
                if ok {
                    let d = depth.at(y as usize, x as usize);
                    if let Ok(p) = backproject(a, d, camera) {
                        targets.push(sample.pose.transform(&p));
                        valid.push(true);
                        continue;
                    }
                }
                targets.push(SceneCoordinate::new(0.0, 0.0, 0.0));
                valid.push(false);
            }
            Ok((targets, valid))
        }
    }
}

fn maybe_checkpoint(
    dir: Option<&Path>,
    every: usize,
    stage: &str,
    iter: usize,
    model: &Regressor,
) -> Result<(), TrainingError> {
    if let Some(dir) = dir {
        if every > 0 && (iter + 1) % every == 0 {
            save_checkpoint(&dir.join(format!("{stage}-{:06}.ckpt", iter + 1)), model, None)?;
        }
    }
    Ok(())
}

/// Stage 1: fit the regressor to initialization targets. Rendered mode
/// uses the full dataset and schedule; heuristic mode trains for the
/// shorter heuristic schedule on a small random subset of the data.
pub fn train_init(
    set: &TrainingSet,
    model: &mut Regressor,
    cfg: &TrainingConfig,
    mode: InitMode,
    log: &mut TrainingLog,
    checkpoint_dir: Option<&Path>,
) -> Result<(), TrainingError> {
    if set.samples.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let schedule = match mode {
        InitMode::Rendered => cfg.init.scaled(cfg.schedule_scale),
        InitMode::Heuristic => Schedule {
            iterations: cfg.heuristic_iterations,
            ..cfg.init
        }
        .scaled(cfg.schedule_scale),
    };
    let allowed: Vec<usize> = match mode {
        InitMode::Rendered => (0..set.samples.len()).collect(),
        InitMode::Heuristic => {
            let count = ((set.samples.len() as f64 * cfg.heuristic_fraction).ceil() as usize)
                .clamp(1, set.samples.len());
            let mut rng = exec::derive_rng(cfg.master_seed, STREAM_SUBSET);
            let mut picked =
                rand::seq::index::sample(&mut rng, set.samples.len(), count).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let stage = match mode {
        InitMode::Rendered => "init-rendered",
        InitMode::Heuristic => "init-heuristic",
    };

    let mut adam = AdamState::new(model.parameter_count());
    let mut rng = exec::derive_rng(cfg.master_seed, STREAM_INIT);
    for iter in 0..schedule.iterations {
        let mut loss_sum = 0.0;
        let mut batch = ParameterGradients::zeros_like(model);
        for _ in 0..cfg.batch_size.max(1) {
            let sample = &set.samples[allowed[rng.gen_range(0..allowed.len())]];
            let dx = rng.gen_range(-cfg.shift_max..=cfg.shift_max);
            let dy = rng.gen_range(-cfg.shift_max..=cfg.shift_max);
            let image = sample.image.shifted(dx, dy);
            let (grid, trace) = model.forward(&image)?;
            let anchors = shifted_anchors(grid.width, grid.height, dx, dy);
            let (targets, valid) =
                init_targets(mode, sample, &anchors, &set.intrinsics, cfg.depth_prior)?;
            let (loss, cell_gradients) =
                init_loss_and_gradients(&grid.coordinates, &targets, &valid);
            loss_sum += loss;
            batch.accumulate_scaled(&model.backward(&trace, &cell_gradients)?, 1.0);
        }
        adam_step(model, &batch, &mut adam, &cfg.adam, schedule.rate_at(iter));
        log.push(LogRecord {
            stage,
            iteration: iter,
            loss: loss_sum / cfg.batch_size.max(1) as f64,
            entropy_bits: 0.0,
            alpha: 0.0,
            skipped: 0,
        })?;
        maybe_checkpoint(checkpoint_dir, cfg.checkpoint_every, stage, iter, model)?;
    }
    Ok(())
}

/// Stage 2: minimize the summed ground-truth-pose reprojection error.
pub fn train_reprojection(
    set: &TrainingSet,
    model: &mut Regressor,
    cfg: &TrainingConfig,
    log: &mut TrainingLog,
    checkpoint_dir: Option<&Path>,
) -> Result<(), TrainingError> {
    if set.samples.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let schedule = cfg.reprojection.scaled(cfg.schedule_scale);
    let mut adam = AdamState::new(model.parameter_count());
    let mut rng = exec::derive_rng(cfg.master_seed, STREAM_REPROJECTION);
    for iter in 0..schedule.iterations {
        let mut loss_sum = 0.0;
        let mut batch = ParameterGradients::zeros_like(model);
        for _ in 0..cfg.batch_size.max(1) {
            let sample = &set.samples[rng.gen_range(0..set.samples.len())];
            let dx = rng.gen_range(-cfg.shift_max..=cfg.shift_max);
            let dy = rng.gen_range(-cfg.shift_max..=cfg.shift_max);
            let image = sample.image.shifted(dx, dy);
            let (grid, trace) = model.forward(&image)?;
            let anchors = shifted_anchors(grid.width, grid.height, dx, dy);
            let (loss, cell_gradients) = reprojection_loss_and_gradients(
                &grid.coordinates,
                &anchors,
                &sample.pose,
                &set.intrinsics,
                cfg.reprojection_clamp,
            );
            debug_assert!(cell_gradients
                .iter()
                .all(|g| g.amax() <= cfg.reprojection_clamp));
            loss_sum += loss;
            batch.accumulate_scaled(&model.backward(&trace, &cell_gradients)?, 1.0);
        }
        adam_step(model, &batch, &mut adam, &cfg.adam, schedule.rate_at(iter));
        log.push(LogRecord {
            stage: "reprojection",
            iteration: iter,
            loss: loss_sum / cfg.batch_size.max(1) as f64,
            entropy_bits: 0.0,
            alpha: 0.0,
            skipped: 0,
        })?;
        maybe_checkpoint(checkpoint_dir, cfg.checkpoint_every, "reprojection", iter, model)?;
    }
    Ok(())
}

/// Stage 3: end-to-end training of the expected pose loss. Returns the
/// final softmax scale alpha. Iterations whose hypothesis sampling
/// exhausts are skipped (still consuming their slot); too many skips
/// abort the run.
pub fn train_end_to_end(
    set: &TrainingSet,
    model: &mut Regressor,
    cfg: &TrainingConfig,
    sampling: &SamplingConfig,
    scoring: &ScoringConfig,
    refinement: &RefinementConfig,
    log: &mut TrainingLog,
    checkpoint_dir: Option<&Path>,
) -> Result<f64, TrainingError> {
    if set.samples.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let schedule = cfg.end_to_end.scaled(cfg.schedule_scale);
    let mut adam = AdamState::new(model.parameter_count());
    let mut rng = exec::derive_rng(cfg.master_seed, STREAM_END_TO_END);
    let mut alpha = scoring.alpha;
    let mut skipped = 0usize;
    for iter in 0..schedule.iterations {
        let sample = &set.samples[rng.gen_range(0..set.samples.len())];
        let dx = rng.gen_range(-cfg.shift_max..=cfg.shift_max);
        let dy = rng.gen_range(-cfg.shift_max..=cfg.shift_max);
        let pool_seed: u64 = rng.gen();
        let image = sample.image.shifted(dx, dy);
        let (grid, trace) = model.forward(&image)?;
        // The pipeline must see the true observation pixels, so the
        // predicted coordinates pair with the shifted anchor lattice.
        let loss_grid = SceneCoordinateGrid {
            width: grid.width,
            height: grid.height,
            coordinates: grid.coordinates,
            anchors: shifted_anchors(grid.width, grid.height, dx, dy),
        };
        let pool = match sample_hypotheses(&loss_grid, &set.intrinsics, sampling, pool_seed) {
            Ok(pool) => pool,
            Err(PnpError::SamplingExhausted { .. }) | Err(PnpError::Degenerate) => {
                skipped += 1;
                log.push(LogRecord {
                    stage: "end-to-end",
                    iteration: iter,
                    loss: f64::NAN,
                    entropy_bits: 0.0,
                    alpha,
                    skipped,
                })?;
                if iter + 1 >= 20
                    && skipped as f64 > cfg.max_skip_fraction * (iter + 1) as f64
                {
                    return Err(TrainingError::TooManySkips {
                        skipped,
                        iterations: iter + 1,
                    });
                }
                continue;
            }
        };
        let stage_scoring = ScoringConfig { alpha, ..*scoring };
        let outcome = expected_loss_and_gradient(
            &loss_grid,
            &sample.pose,
            &set.intrinsics,
            &pool.poses,
            &stage_scoring,
            refinement,
        );
        let clamped: Vec<Vector3<f64>> = outcome
            .gradient
            .iter()
            .map(|g| g.map(|v| v.clamp(-cfg.end_to_end_clamp, cfg.end_to_end_clamp)))
            .collect();
        debug_assert!(clamped.iter().all(|g| g.amax() <= cfg.end_to_end_clamp));
        let gradients = model.backward(&trace, &clamped)?;
        adam_step(model, &gradients, &mut adam, &cfg.adam, schedule.rate_at(iter));
        alpha = adapt_alpha(&outcome.scores, alpha, &stage_scoring, cfg.alpha_learning_rate);
        log.push(LogRecord {
            stage: "end-to-end",
            iteration: iter,
            loss: outcome.loss,
            entropy_bits: outcome.entropy_bits,
            alpha,
            skipped,
        })?;
        maybe_checkpoint(checkpoint_dir, cfg.checkpoint_every, "end-to-end", iter, model)?;
    }
    Ok(alpha)
}
