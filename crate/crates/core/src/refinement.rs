//! Pose refinement: inlier selection, damped Gauss-Newton optimization of
//! inlier reprojection residuals, their alternation, and the analytical
//! sensitivity of the refined pose to the scene coordinates.
//!
//! By default each inlier contributes its 2D pixel-difference residual (two
//! rows of the residual Jacobian). This makes the normal matrix the true
//! curvature of the summed squared reprojection error, so Gauss-Newton
//! converges quadratically and the linearized sensitivity below matches
//! finite differences of the optimum closely. A scalar-norm variant (one
//! row per inlier, the gradient of the error norm) is available behind
//! [`ResidualForm::ScalarNorm`]; it reaches the same optima but converges
//! only linearly near noisy minima and its linearized sensitivity
//! systematically underestimates curvature, so it is not the default.

use crate::data::SceneCoordinateGrid;
use crate::exec;
use crate::geometry::{
    projection_jacobians, reprojection_jacobians, CameraIntrinsics, GeometryError, Pose,
    Projector, CLAMPED_ERROR,
};
use nalgebra::{Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Sensitivity of the refined 6-vector pose to one scene coordinate.
pub type PoseSceneBlock = nalgebra::Matrix6x3<f64>;

/// Lower clamp on the damping parameter.
const MIN_LAMBDA: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RefinementError {
    #[error("need at least {needed} inliers, got {got}")]
    TooFewInliers { needed: usize, got: usize },
    #[error("damped normal equations are singular")]
    SolverSingular,
}

/// How each inlier enters the residual vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// Two rows per inlier: the x/y components of the pixel difference.
    PixelVector,
    /// One row per inlier: the reprojection error norm, with a zero row at
    /// the non-differentiable zero-error point.
    ScalarNorm,
}

/// Configuration for inlier selection and Gauss-Newton refinement.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Inlier threshold in pixels (strict `r < tau`).
    pub tau: f64,
    /// Total Gauss-Newton step budget shared across inlier re-computations.
    pub max_iterations: usize,
    /// Cap on inlier-set / optimization alternations.
    pub max_alternations: usize,
    /// Convergence threshold on the parameter step norm.
    pub step_tolerance: f64,
    /// Initial damping parameter.
    pub initial_lambda: f64,
    /// Multiplicative damping adjustment per rejected/accepted step.
    pub lambda_factor: f64,
    /// Damping above this aborts the inner loop (no further progress).
    pub max_lambda: f64,
    /// Minimum inlier count for a well-posed 6-DoF solve.
    pub min_inliers: usize,
    /// Residual parameterization (see [`ResidualForm`]).
    pub residual_form: ResidualForm,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            max_iterations: 100,
            max_alternations: 10,
            step_tolerance: 1e-6,
            initial_lambda: 1e-6,
            lambda_factor: 10.0,
            max_lambda: 1e8,
            min_inliers: 4,
            residual_form: ResidualForm::PixelVector,
        }
    }
}

/// Grid cells currently counted as inliers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InlierSet {
    /// Unique, ascending cell indices.
    pub cell_indices: Vec<usize>,
}

impl InlierSet {
    pub fn len(&self) -> usize {
        self.cell_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_indices.is_empty()
    }
}

/// Outcome of one inner Gauss-Newton run on a fixed inlier set.
#[derive(Debug, Clone)]
pub struct GaussNewtonOutcome {
    pub pose: Pose,
    /// Solve attempts consumed (accepted and rejected).
    pub steps_used: usize,
    /// Whether the step norm fell below the tolerance.
    pub converged: bool,
    /// Damping used in the final accepted step's normal equations.
    pub lambda: f64,
    /// Objective after the start and after every accepted step.
    pub objective_history: Vec<f64>,
}

/// Result of the full inlier/optimize alternation.
#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub pose: Pose,
    /// Inlier set of the final accepted pose.
    pub inliers: InlierSet,
    /// Total Gauss-Newton solve attempts consumed.
    pub iterations_used: usize,
    /// True when both the step norm and the inlier set converged.
    pub converged: bool,
    /// Damping of the final accepted Gauss-Newton step.
    pub lambda: f64,
}

/// Cells whose reprojection error under `pose` is strictly below `cfg.tau`.
/// Cells that fail to project carry the clamped error and never qualify.
pub fn compute_inliers(
    pose: &Pose,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> InlierSet {
    let proj = Projector::new(pose, camera);
    let flags = exec::map_indexed(grid.len(), |i| {
        proj.error_clamped(&grid.coordinates[i], &grid.anchors[i]) < cfg.tau
    });
    InlierSet {
        cell_indices: flags
            .into_iter()
            .enumerate()
            .filter_map(|(i, keep)| keep.then_some(i))
            .collect(),
    }
}

/// Sum of squared reprojection residuals over the given cells. Both
/// residual forms share this objective: the squared pixel-difference
/// vector sums to the squared norm.
fn objective(
    pose: &Pose,
    cells: &[usize],
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
) -> f64 {
    let proj = Projector::new(pose, camera);
    let terms = exec::map_indexed(cells.len(), |k| {
        let i = cells[k];
        let r = proj.error_clamped(&grid.coordinates[i], &grid.anchors[i]);
        r * r
    });
    exec::pairwise_sum(&terms)
}

/// One residual row: its value and its pose / scene-coordinate gradients.
#[derive(Debug, Clone, Copy)]
struct Row {
    jpose: Vector6<f64>,
    jscene: Vector3<f64>,
    value: f64,
}

const ZERO_ROW: Row =
    Row { jpose: Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), jscene: Vector3::new(0.0, 0.0, 0.0), value: 0.0 };

/// Residual rows of one cell: one or two depending on the form. Clamped
/// cells contribute a single constant penalty row with zero gradients, so
/// the objective stays total while such cells exert no pull on the pose.
#[derive(Debug, Clone, Copy)]
struct CellRows {
    rows: [Row; 2],
    count: usize,
}

fn cell_rows(
    cell: usize,
    pose: &Pose,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    form: ResidualForm,
) -> CellRows {
    let point = &grid.coordinates[cell];
    let anchor = &grid.anchors[cell];
    match form {
        ResidualForm::PixelVector => match projection_jacobians(point, pose, camera) {
            Ok(pj) => {
                let ex = pj.pixel.x - anchor.x;
                let ey = pj.pixel.y - anchor.y;
                CellRows {
                    rows: [
                        Row {
                            jpose: pj.d_pose.row(0).transpose(),
                            jscene: pj.d_scene.row(0).transpose(),
                            value: ex,
                        },
                        Row {
                            jpose: pj.d_pose.row(1).transpose(),
                            jscene: pj.d_scene.row(1).transpose(),
                            value: ey,
                        },
                    ],
                    count: 2,
                }
            }
            Err(_) => CellRows {
                rows: [Row { value: CLAMPED_ERROR, ..ZERO_ROW }, ZERO_ROW],
                count: 1,
            },
        },
        ResidualForm::ScalarNorm => match reprojection_jacobians(point, anchor, pose, camera) {
            Ok(rj) => CellRows {
                rows: [Row { jpose: rj.d_pose, jscene: rj.d_scene, value: rj.error }, ZERO_ROW],
                count: 1,
            },
            Err(GeometryError::NonDifferentiable) => CellRows { rows: [ZERO_ROW; 2], count: 1 },
            Err(_) => CellRows {
                rows: [Row { value: CLAMPED_ERROR, ..ZERO_ROW }, ZERO_ROW],
                count: 1,
            },
        },
    }
}

fn all_rows(
    pose: &Pose,
    cells: &[usize],
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    form: ResidualForm,
) -> Vec<CellRows> {
    exec::map_indexed(cells.len(), |k| cell_rows(cells[k], pose, grid, camera, form))
}

/// Normal-equation pieces accumulated in fixed cell order.
fn normal_equations(rows: &[CellRows]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut jtj = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for cell in rows {
        for row in &cell.rows[..cell.count] {
            jtj += row.jpose * row.jpose.transpose();
            g += row.jpose * row.value;
        }
    }
    (jtj, g)
}

fn damped(jtj: &Matrix6<f64>, lambda: f64) -> Matrix6<f64> {
    let mut a = *jtj;
    for d in 0..6 {
        a[(d, d)] += lambda * jtj[(d, d)];
    }
    a
}

/// Minimize the summed squared residuals of a fixed inlier set by damped
/// Gauss-Newton, spending at most `max_steps` solve attempts. Every solve
/// attempt (accepted or rejected) counts against the budget. The returned
/// pose never has a worse objective than the input.
pub fn gauss_newton_refine(
    pose: &Pose,
    inliers: &InlierSet,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &RefinementConfig,
    max_steps: usize,
) -> Result<GaussNewtonOutcome, RefinementError> {
    if inliers.len() < cfg.min_inliers {
        return Err(RefinementError::TooFewInliers {
            needed: cfg.min_inliers,
            got: inliers.len(),
        });
    }
    let cells = &inliers.cell_indices;
    let mut current = *pose;
    let mut obj = objective(&current, cells, grid, camera);
    let mut lambda = cfg.initial_lambda;
    let mut accepted_lambda = cfg.initial_lambda;
    let mut steps_used = 0;
    let mut converged = false;
    let mut history = vec![obj];

    'outer: while steps_used < max_steps {
        let rows = all_rows(&current, cells, grid, camera, cfg.residual_form);
        let (jtj, g) = normal_equations(&rows);
        if g.norm() < 1e-14 {
            // Stationary already (e.g. an exact grid): nothing to solve.
            converged = true;
            break;
        }
        // Retry the solve with growing damping until a step is accepted.
        loop {
            if steps_used >= max_steps {
                break 'outer;
            }
            steps_used += 1;
            let Some(delta) = damped(&jtj, lambda).cholesky().map(|c| c.solve(&g)) else {
                lambda *= cfg.lambda_factor;
                if lambda > cfg.max_lambda {
                    return Err(RefinementError::SolverSingular);
                }
                continue;
            };
            let candidate = Pose::from_vector(&(current.as_vector() - delta));
            let candidate_obj = objective(&candidate, cells, grid, camera);
            if candidate_obj <= obj {
                current = candidate;
                obj = candidate_obj;
                history.push(obj);
                accepted_lambda = lambda;
                lambda = (lambda / cfg.lambda_factor).max(MIN_LAMBDA);
                if delta.norm() < cfg.step_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= cfg.lambda_factor;
            if lambda > cfg.max_lambda {
                // No decrease possible at any damping: local optimum.
                converged = true;
                break 'outer;
            }
        }
    }
    Ok(GaussNewtonOutcome {
        pose: current.canonicalized(),
        steps_used,
        converged,
        lambda: accepted_lambda,
        objective_history: history,
    })
}

/// Alternate inlier-set computation and Gauss-Newton optimization until the
/// inlier set repeats, the set starves, or the shared step budget runs out.
/// Degenerate inputs return the start pose with `converged = false`.
pub fn refine_pose(
    start: &Pose,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> RefinementResult {
    let inliers = compute_inliers(start, grid, camera, cfg);
    let mut result = RefinementResult {
        pose: *start,
        inliers: inliers.clone(),
        iterations_used: 0,
        converged: false,
        lambda: cfg.initial_lambda,
    };
    if inliers.len() < cfg.min_inliers {
        return result;
    }
    let mut current = *start;
    let mut active = inliers;
    for _ in 0..cfg.max_alternations {
        let budget = cfg.max_iterations - result.iterations_used;
        if budget == 0 {
            break;
        }
        let outcome = match gauss_newton_refine(&current, &active, grid, camera, cfg, budget) {
            Ok(outcome) => outcome,
            Err(_) => break,
        };
        result.iterations_used += outcome.steps_used;
        current = outcome.pose;
        result.lambda = outcome.lambda;
        let next = compute_inliers(&current, grid, camera, cfg);
        if next == active {
            result.converged = outcome.converged;
            break;
        }
        if next.len() < cfg.min_inliers {
            break;
        }
        active = next;
    }
    // Keep whichever of start and refined pose fits the final inlier set
    // better; alternation switches objectives between runs, so guard the
    // end-to-end monotonicity explicitly.
    let final_inliers = compute_inliers(&current, grid, camera, cfg);
    if !final_inliers.is_empty()
        && objective(start, &final_inliers.cell_indices, grid, camera)
            < objective(&current, &final_inliers.cell_indices, grid, camera)
    {
        result.pose = *start;
        result.inliers = compute_inliers(start, grid, camera, cfg);
        result.converged = false;
    } else {
        result.pose = current;
        result.inliers = final_inliers;
    }
    result
}

/// Per-inlier sensitivities of the refined pose to the scene coordinates,
/// evaluated with the optimum held fixed: each coordinate moves the pose
/// by `-(J^T J)^-1 * J^T * (d residual / d y_i)`. The normal matrix is
/// undamped — at a converged optimum the residual gradient vanishes for
/// every damping level, so the sensitivity carries none. Returned in
/// `result.inliers` order; cells without usable gradients (clamped, or
/// kinked in scalar form) contribute an exactly zero block.
pub fn refinement_gradient(
    result: &RefinementResult,
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<Vec<PoseSceneBlock>, RefinementError> {
    let cells = &result.inliers.cell_indices;
    let rows = all_rows(&result.pose, cells, grid, camera, cfg.residual_form);
    let (jtj, _) = normal_equations(&rows);
    let Some(chol) = jtj.cholesky() else {
        return Err(RefinementError::SolverSingular);
    };
    Ok(rows
        .iter()
        .map(|cell| {
            let mut block = PoseSceneBlock::zeros();
            for row in &cell.rows[..cell.count] {
                if row.jpose == Vector6::zeros() {
                    continue;
                }
                let direction = chol.solve(&row.jpose);
                block -= direction * row.jscene.transpose();
            }
            block
        })
        .collect())
}

/// Root-mean-square reprojection error of a pose over a set of cells.
pub fn reprojection_rms(
    pose: &Pose,
    cells: &[usize],
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    (objective(pose, cells, grid, camera) / cells.len() as f64).sqrt()
}
