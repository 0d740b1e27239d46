//! Stage-by-stage benchmarks over a realistic 80x60 coordinate grid
//! (a 640x480 image at the regression stride) with 30% outliers and one
//! pixel of correspondence noise.
//!
//! Group names carry the execution mode, so saved baselines from
//! `cargo bench` (rayon) and `cargo bench --no-default-features`
//! (sequential) can be compared side by side.

use camreloc::data::{
    generate_scene, render_view, sample_view_pose, standard_anchors, SceneCoordinateGrid,
    SceneStyle, GRID_STRIDE,
};
use camreloc::eval::localize_grid;
use camreloc::exec;
use camreloc::geometry::{backproject, CameraIntrinsics, Pose};
use camreloc::pnp::{sample_hypotheses, SamplingConfig};
use camreloc::refinement::{refine_pose, RefinementConfig};
use camreloc::regressor::{default_architecture, Regressor};
use camreloc::scoring::{score_pool, select_hypothesis, ScoringConfig, Selection};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const MODE: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn fixture() -> (SceneCoordinateGrid, CameraIntrinsics, Pose) {
    let camera = CameraIntrinsics::new(500.0, 320.0, 240.0);
    let pose = Pose::new(Vector3::new(-0.3, 0.2, 0.4), Vector3::new(0.5, -1.0, 0.8));
    let (cells_x, cells_y) = (80, 60);
    let anchors = standard_anchors(cells_x, cells_y, GRID_STRIDE);
    let mut rng = exec::derive_rng(17, 0);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let coordinates = anchors
        .iter()
        .map(|a| {
            if rng.gen_bool(0.3) {
                return camreloc::geometry::SceneCoordinate::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                );
            }
            let depth = rng.gen_range(2.0..5.0);
            let exact = pose.transform(&backproject(a, depth, &camera).unwrap());
            let px = noise.sample(&mut rng) * depth / camera.focal;
            let py = noise.sample(&mut rng) * depth / camera.focal;
            exact + pose.rotation_matrix() * Vector3::new(px, py, 0.0)
        })
        .collect();
    let grid = SceneCoordinateGrid { width: cells_x, height: cells_y, coordinates, anchors };
    (grid, camera, pose)
}

fn bench_sampling(c: &mut Criterion) {
    let (grid, camera, _) = fixture();
    let cfg = SamplingConfig::default();
    c.bench_function(&format!("sample-256-hypotheses/{MODE}"), |b| {
        b.iter(|| sample_hypotheses(&grid, &camera, &cfg, 9).unwrap())
    });
}

fn bench_scoring(c: &mut Criterion) {
    let (grid, camera, _) = fixture();
    let pool = sample_hypotheses(&grid, &camera, &SamplingConfig::default(), 9).unwrap();
    let cfg = ScoringConfig::default();
    c.bench_function(&format!("score-256-hypotheses/{MODE}"), |b| {
        b.iter_batched(
            || pool.clone(),
            |mut pool| score_pool(&mut pool, &grid, &camera, &cfg),
            BatchSize::SmallInput,
        )
    });
}

fn bench_refinement(c: &mut Criterion) {
    let (grid, camera, _) = fixture();
    let mut pool = sample_hypotheses(&grid, &camera, &SamplingConfig::default(), 9).unwrap();
    score_pool(&mut pool, &grid, &camera, &ScoringConfig::default());
    let best = select_hypothesis::<&mut ChaCha8Rng>(&pool, Selection::Argmax);
    let start = pool.poses[best];
    let cfg = RefinementConfig::default();
    c.bench_function(&format!("refine-best-hypothesis/{MODE}"), |b| {
        b.iter(|| refine_pose(&start, &grid, &camera, &cfg))
    });
}

fn bench_localization(c: &mut Criterion) {
    let (grid, camera, _) = fixture();
    c.bench_function(&format!("localize-frame/{MODE}"), |b| {
        b.iter(|| {
            localize_grid(
                &grid,
                &camera,
                &SamplingConfig::default(),
                &ScoringConfig::default(),
                &RefinementConfig::default(),
                9,
            )
            .unwrap()
        })
    });
}

fn bench_regression(c: &mut Criterion) {
    let scene = generate_scene(5, 4.0, SceneStyle::Room);
    let camera = CameraIntrinsics::new(140.0, 80.0, 60.0);
    let mut rng = exec::derive_rng(5, 1);
    let pose = sample_view_pose(&scene, &mut rng);
    let view = render_view(&scene, &pose, &camera, 160, 120).unwrap();
    let model = Regressor::new(
        &default_architecture(),
        &camreloc::geometry::SceneCoordinate::new(0.0, 0.0, 0.0),
        3,
    );
    let mut group = c.benchmark_group("regression");
    group.sample_size(10);
    group.bench_function(&format!("forward-160x120/{MODE}"), |b| {
        b.iter(|| model.forward(&view.image).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_sampling,
    bench_scoring,
    bench_refinement,
    bench_localization,
    bench_regression
);
criterion_main!(benches);
