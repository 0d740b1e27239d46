//! Compact convolutional scene-coordinate regressor.
//!
//! Maps an RGB image to one scene-coordinate prediction per 8x8 pixel
//! block: a 3x3 stride-1 convolution, three 3x3 stride-2 convolutions, and
//! three 1x1 layers, ReLU activations everywhere except the linear output.
//! Each output cell sees only a limited receptive field, so predictions are
//! local and translating the input by the stride shifts the output grid by
//! exactly one cell. The forward pass records activations in a trace that
//! the reverse pass consumes, and both are deterministic for fixed inputs.
//!
//! Also provides the two ways of generating initialization targets
//! (constant-depth heuristic here, ray-cast rendering in [`crate::data`])
//! and a versioned little-endian checkpoint format with a human-readable
//! manifest.

use crate::data::{standard_anchors, ImageTensor, SceneCoordinateGrid, TrainingSet, GRID_STRIDE};
use crate::exec;
use crate::geometry::{backproject, CameraIntrinsics, PixelPoint, Pose, SceneCoordinate};
use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegressorError {
    #[error("input {width}x{height} is not compatible with stride {stride}")]
    ShapeMismatch { width: usize, height: usize, stride: usize },
    #[error("no forward state for this gradient: expected {expected} cells, got {got}")]
    StateMissing { expected: usize, got: usize },
    #[error("constant depth {depth} is not usable for backprojection")]
    InvalidDepth { depth: f64 },
}

/// Shape of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel size; padding is `(kernel - 1) / 2` (zero padding).
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// The default desk-scale architecture: stride product 8, three-channel
/// coordinate output, ~131k parameters.
pub fn default_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec { in_channels: 3, out_channels: 16, kernel: 3, stride: 1 },
        LayerSpec { in_channels: 16, out_channels: 32, kernel: 3, stride: 2 },
        LayerSpec { in_channels: 32, out_channels: 64, kernel: 3, stride: 2 },
        LayerSpec { in_channels: 64, out_channels: 128, kernel: 3, stride: 2 },
        LayerSpec { in_channels: 128, out_channels: 128, kernel: 1, stride: 1 },
        LayerSpec { in_channels: 128, out_channels: 128, kernel: 1, stride: 1 },
        LayerSpec { in_channels: 128, out_channels: 3, kernel: 1, stride: 1 },
    ]
}

/// One convolution layer's parameters. Weight layout is
/// `[out][in][ky][kx]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The regressor: layer stack plus the input normalization constants that
/// were in effect when the model was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub layers: Vec<ConvLayer>,
    /// Per-channel mean subtracted from the raw image.
    pub norm_mean: [f64; 3],
    /// Per-channel scale dividing the centred image.
    pub norm_scale: [f64; 3],
}

impl Regressor {
    /// Fan-in-scaled normal initialization. Hidden layers use the ReLU
    /// gain, the linear output layer unit gain, and the output bias is set
    /// to `scene_center` so untrained predictions already land inside the
    /// scene.
    pub fn new(architecture: &[LayerSpec], scene_center: &SceneCoordinate, seed: u64) -> Self {
        assert!(!architecture.is_empty(), "architecture must have at least one layer");
        assert_eq!(architecture[0].in_channels, 3, "first layer must take RGB input");
        assert_eq!(
            architecture.last().unwrap().out_channels,
            3,
            "last layer must emit 3 coordinate channels"
        );
        for pair in architecture.windows(2) {
            assert_eq!(
                pair[0].out_channels, pair[1].in_channels,
                "layer channel counts must chain"
            );
        }
        let stride_product: usize = architecture.iter().map(|l| l.stride).product();
        assert_eq!(stride_product, GRID_STRIDE, "stride product must match the grid stride");

        let mut rng = exec::derive_rng(seed, 0x5eed);
        let last = architecture.len() - 1;
        let layers = architecture
            .iter()
            .enumerate()
            .map(|(idx, spec)| {
                let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
                let gain = if idx == last { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).unwrap();
                let weights = (0..spec.weight_count()).map(|_| normal.sample(&mut rng)).collect();
                let bias = if idx == last {
                    vec![scene_center.x, scene_center.y, scene_center.z]
                } else {
                    vec![0.0; spec.out_channels]
                };
                ConvLayer { spec: *spec, weights, bias }
            })
            .collect();
        Self { layers, norm_mean: [0.5; 3], norm_scale: [0.5; 3] }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Side length in pixels of the square input window one output cell
    /// depends on, computed from the layer stack.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for layer in &self.layers {
            field += (layer.spec.kernel - 1) * jump;
            jump *= layer.spec.stride;
        }
        field
    }

    /// Visit every parameter in the canonical order (per layer: weights,
    /// then biases) with its flat index. Optimizers pair this with
    /// [`ParameterGradients::values`].
    pub fn update_parameters(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                f(idx, w);
                idx += 1;
            }
            for b in &mut layer.bias {
                f(idx, b);
                idx += 1;
            }
        }
    }

    fn check_input(&self, image: &ImageTensor) -> Result<(), RegressorError> {
        let ok = image.width % GRID_STRIDE == 0
            && image.height % GRID_STRIDE == 0
            && image.width > 0
            && image.height > 0
            && image.data.len() == 3 * image.width * image.height;
        if ok {
            Ok(())
        } else {
            Err(RegressorError::ShapeMismatch {
                width: image.width,
                height: image.height,
                stride: GRID_STRIDE,
            })
        }
    }

    /// Run the network, keeping every intermediate activation for a later
    /// [`Regressor::backward`] call.
    pub fn forward(
        &self,
        image: &ImageTensor,
    ) -> Result<(SceneCoordinateGrid, ForwardTrace), RegressorError> {
        self.check_input(image)?;
        let mut dims = vec![(3usize, image.height, image.width)];
        let mut activations = Vec::with_capacity(self.layers.len() + 1);

        // Stage 0: the normalized input.
        let mut normalized = vec![0.0; image.data.len()];
        let plane = image.height * image.width;
        exec::for_each_row(&mut normalized, plane, |c, row| {
            let (m, s) = (self.norm_mean[c], self.norm_scale[c]);
            for (v, raw) in row.iter_mut().zip(&image.data[c * plane..(c + 1) * plane]) {
                *v = (raw - m) / s;
            }
        });
        activations.push(normalized);

        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (c, h, w) = *dims.last().unwrap();
            debug_assert_eq!(c, layer.spec.in_channels);
            let out = conv_forward(activations.last().unwrap(), h, w, layer, idx != last);
            let oh = conv_extent(h, &layer.spec);
            let ow = conv_extent(w, &layer.spec);
            dims.push((layer.spec.out_channels, oh, ow));
            activations.push(out);
        }

        let (_, gh, gw) = *dims.last().unwrap();
        let out = activations.last().unwrap();
        let cell_plane = gh * gw;
        let coordinates = (0..cell_plane)
            .map(|cell| {
                SceneCoordinate::new(out[cell], out[cell_plane + cell], out[2 * cell_plane + cell])
            })
            .collect();
        let grid = SceneCoordinateGrid {
            width: gw,
            height: gh,
            coordinates,
            anchors: standard_anchors(gw, gh, GRID_STRIDE),
        };
        Ok((grid, ForwardTrace { dims, activations }))
    }

    /// Run the network without keeping the trace.
    pub fn predict(&self, image: &ImageTensor) -> Result<SceneCoordinateGrid, RegressorError> {
        Ok(self.forward(image)?.0)
    }

    /// Reverse pass: propagate per-cell coordinate gradients back to every
    /// parameter. Gradients are linear in `output_gradients` and the
    /// accumulation order is fixed, so results are deterministic.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_gradients: &[Vector3<f64>],
    ) -> Result<ParameterGradients, RegressorError> {
        let (oc, gh, gw) = *trace.dims.last().unwrap();
        debug_assert_eq!(oc, 3);
        if output_gradients.len() != gh * gw || trace.activations.len() != self.layers.len() + 1 {
            return Err(RegressorError::StateMissing {
                expected: gh * gw,
                got: output_gradients.len(),
            });
        }
        let cell_plane = gh * gw;
        let mut upstream = vec![0.0; 3 * cell_plane];
        for (cell, g) in output_gradients.iter().enumerate() {
            upstream[cell] = g.x;
            upstream[cell_plane + cell] = g.y;
            upstream[2 * cell_plane + cell] = g.z;
        }

        let last = self.layers.len() - 1;
        let mut grads: Vec<LayerGradients> = self
            .layers
            .iter()
            .map(|l| LayerGradients {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let (_, h, w) = trace.dims[idx];
            // ReLU: the stored post-activation is zero exactly where the
            // unit was clipped, so it doubles as the gradient mask.
            if idx != last {
                let post = &trace.activations[idx + 1];
                for (g, a) in upstream.iter_mut().zip(post) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &trace.activations[idx];
            let (dw, db, dinput) =
                conv_backward(input, h, w, layer, &upstream, idx > 0);
            grads[idx].weights = dw;
            grads[idx].bias = db;
            if let Some(dinput) = dinput {
                upstream = dinput;
            }
        }
        Ok(ParameterGradients { layers: grads })
    }
}

/// Output extent of one spatial dimension under a layer's geometry.
fn conv_extent(n: usize, spec: &LayerSpec) -> usize {
    (n + 2 * spec.padding() - spec.kernel) / spec.stride + 1
}

/// Convolution forward over planar `[channel][y][x]` buffers, parallel over
/// output rows. Each output element is an independent dot product, so the
/// result does not depend on the execution mode.
fn conv_forward(input: &[f64], h: usize, w: usize, layer: &ConvLayer, relu: bool) -> Vec<f64> {
    let spec = &layer.spec;
    let (oh, ow) = (conv_extent(h, spec), conv_extent(w, spec));
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding() as isize);
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    exec::for_each_row(&mut out, ow, |row_idx, row| {
        let o = row_idx / oh;
        let oy = row_idx % oh;
        let wbase = o * spec.in_channels * k * k;
        for (ox, value) in row.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for i in 0..spec.in_channels {
                let plane = &input[i * h * w..(i + 1) * h * w];
                let wch = wbase + i * k * k;
                for ky in 0..k {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = iy as usize * w;
                    for kx in 0..k {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += layer.weights[wch + ky * k + kx] * plane[irow + ix as usize];
                    }
                }
            }
            *value = if relu { acc.max(0.0) } else { acc };
        }
    });
    out
}

/// Convolution reverse pass. Weight/bias gradients parallelize over output
/// channels (each owns its slice), the input gradient over input rows;
/// every task accumulates sequentially in a fixed order.
fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    layer: &ConvLayer,
    upstream: &[f64],
    need_input_gradient: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let spec = &layer.spec;
    let (oh, ow) = (conv_extent(h, spec), conv_extent(w, spec));
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding() as isize);
    let per_out = spec.in_channels * k * k;

    let parts: Vec<(Vec<f64>, f64)> = exec::map_indexed(spec.out_channels, |o| {
        let mut dw = vec![0.0; per_out];
        let mut db = 0.0;
        let uplane = &upstream[o * oh * ow..(o + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = uplane[oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                db += g;
                for i in 0..spec.in_channels {
                    let plane = &input[i * h * w..(i + 1) * h * w];
                    let wch = i * k * k;
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dw[wch + ky * k + kx] += g * plane[irow + ix as usize];
                        }
                    }
                }
            }
        }
        (dw, db)
    });
    let mut weights = vec![0.0; layer.weights.len()];
    let mut bias = vec![0.0; layer.bias.len()];
    for (o, (dw, db)) in parts.into_iter().enumerate() {
        weights[o * per_out..(o + 1) * per_out].copy_from_slice(&dw);
        bias[o] = db;
    }

    if !need_input_gradient {
        return (weights, bias, None);
    }
    let mut dinput = vec![0.0; spec.in_channels * h * w];
    exec::for_each_row(&mut dinput, w, |row_idx, row| {
        let i = row_idx / h;
        let iy = (row_idx % h) as isize;
        for (ix, value) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for o in 0..spec.out_channels {
                let uplane = &upstream[o * oh * ow..(o + 1) * oh * ow];
                let wch = (o * spec.in_channels + i) * k * k;
                for ky in 0..k {
                    let num = iy + p - ky as isize;
                    if num < 0 || num % s as isize != 0 {
                        continue;
                    }
                    let oy = (num / s as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k {
                        let num = ix as isize + p - kx as isize;
                        if num < 0 || num % s as isize != 0 {
                            continue;
                        }
                        let ox = (num / s as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        acc += layer.weights[wch + ky * k + kx] * uplane[oy * ow + ox];
                    }
                }
            }
            *value = acc;
        }
    });
    (weights, bias, Some(dinput))
}

/// Activations recorded by [`Regressor::forward`]: stage 0 is the
/// normalized input, stage `l+1` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub dims: Vec<(usize, usize, usize)>,
    pub activations: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients, shaped like the layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParameterGradients {
    pub fn zeros_like(model: &Regressor) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// All gradient values in the canonical parameter order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    /// `self += scale * other`, entry-wise.
    pub fn accumulate_scaled(&mut self, other: &ParameterGradients, scale: f64) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in mine.weights.iter_mut().zip(&theirs.weights) {
                *a += scale * b;
            }
            for (a, b) in mine.bias.iter_mut().zip(&theirs.bias) {
                *a += scale * b;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let squares: Vec<f64> = self.values().map(|v| v * v).collect();
        exec::pairwise_sum(&squares).sqrt()
    }
}

// ======================== initialization targets ========================

/// Scene coordinates for arbitrary anchors under the constant-depth
/// approximation: every anchor is backprojected at depth `depth` and moved
/// into the scene frame by the ground-truth pose. Each target therefore
/// reprojects exactly onto its anchor under that pose.
pub fn heuristic_targets_at(
    pose: &Pose,
    camera: &CameraIntrinsics,
    anchors: &[PixelPoint],
    depth: f64,
) -> Result<Vec<SceneCoordinate>, RegressorError> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(RegressorError::InvalidDepth { depth });
    }
    anchors
        .iter()
        .map(|a| {
            backproject(a, depth, camera)
                .map(|p| SceneCoordinate::from(pose.transform(&p)))
                .map_err(|_| RegressorError::InvalidDepth { depth })
        })
        .collect()
}

/// Grid-shaped constant-depth targets on the standard anchor lattice.
pub fn heuristic_targets(
    pose: &Pose,
    camera: &CameraIntrinsics,
    cells_x: usize,
    cells_y: usize,
    depth: f64,
) -> Result<SceneCoordinateGrid, RegressorError> {
    let anchors = standard_anchors(cells_x, cells_y, GRID_STRIDE);
    let coordinates = heuristic_targets_at(pose, camera, &anchors, depth)?;
    Ok(SceneCoordinateGrid { width: cells_x, height: cells_y, coordinates, anchors })
}

/// Rough scene centroid from training poses alone: the average of every
/// camera's position pushed `depth` metres along its optical axis. Good
/// enough to seed the output bias when no scene model exists.
pub fn estimate_scene_center(set: &TrainingSet, depth: f64) -> Result<SceneCoordinate, RegressorError> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(RegressorError::InvalidDepth { depth });
    }
    assert!(!set.samples.is_empty(), "cannot estimate a centre from an empty split");
    let mut acc = Vector3::zeros();
    for sample in &set.samples {
        acc += sample.pose.transform(&Vector3::new(0.0, 0.0, depth)).coords;
    }
    Ok(SceneCoordinate::from(acc / set.samples.len() as f64))
}

// ======================== checkpointing ========================

const CHECKPOINT_MAGIC: &[u8; 4] = b"CRLC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated or inconsistent")]
    Corrupt,
}

/// Optimizer state stored alongside the weights, in the canonical flat
/// parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Corrupt)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Corrupt)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, expected: Option<usize>) -> Result<Vec<f64>, CheckpointError> {
    let len = read_u64(r)? as usize;
    if len > (1 << 28) || expected.is_some_and(|e| e != len) {
        return Err(CheckpointError::Corrupt);
    }
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Corrupt)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write the model (and, when present, optimizer state) as a versioned
/// little-endian binary checkpoint.
pub fn save_checkpoint(
    path: &Path,
    model: &Regressor,
    moments: Option<&OptimizerMoments>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        for dim in [
            layer.spec.in_channels,
            layer.spec.out_channels,
            layer.spec.kernel,
            layer.spec.stride,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
    }
    for v in model.norm_mean.iter().chain(model.norm_scale.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    for layer in &model.layers {
        write_f64s(&mut w, &layer.weights)?;
        write_f64s(&mut w, &layer.bias)?;
    }
    match moments {
        Some(m) => {
            w.write_all(&[1u8])?;
            w.write_all(&m.step.to_le_bytes())?;
            write_f64s(&mut w, &m.first)?;
            write_f64s(&mut w, &m.second)?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    path: &Path,
) -> Result<(Regressor, Option<OptimizerMoments>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Corrupt)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let layer_count = read_u32(&mut r)? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(CheckpointError::Corrupt);
    }
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let in_channels = read_u32(&mut r)? as usize;
        let out_channels = read_u32(&mut r)? as usize;
        let kernel = read_u32(&mut r)? as usize;
        let stride = read_u32(&mut r)? as usize;
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(CheckpointError::Corrupt);
        }
        specs.push(LayerSpec { in_channels, out_channels, kernel, stride });
    }
    let mut norm = [0.0; 6];
    for v in &mut norm {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| CheckpointError::Corrupt)?;
        *v = f64::from_le_bytes(buf);
    }
    let mut layers = Vec::with_capacity(layer_count);
    for spec in specs {
        let weights = read_f64s(&mut r, Some(spec.weight_count()))?;
        let bias = read_f64s(&mut r, Some(spec.out_channels))?;
        layers.push(ConvLayer { spec, weights, bias });
    }
    let model = Regressor {
        layers,
        norm_mean: [norm[0], norm[1], norm[2]],
        norm_scale: [norm[3], norm[4], norm[5]],
    };
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|_| CheckpointError::Corrupt)?;
    let moments = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let count = model.parameter_count();
            let first = read_f64s(&mut r, Some(count))?;
            let second = read_f64s(&mut r, Some(count))?;
            Some(OptimizerMoments { step, first, second })
        }
        _ => return Err(CheckpointError::Corrupt),
    };
    Ok((model, moments))
}

/// Write a plain-text companion manifest listing the layer shapes, for
/// validating checkpoints against other implementations.
pub fn write_manifest(path: &Path, model: &Regressor) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "format: camreloc checkpoint v{CHECKPOINT_VERSION}")?;
    writeln!(w, "layers: {}", model.layers.len())?;
    for (idx, layer) in model.layers.iter().enumerate() {
        writeln!(
            w,
            "layer {idx}: {k}x{k} stride {s}, channels {i} -> {o}, weights {wn}, bias {bn}",
            k = layer.spec.kernel,
            s = layer.spec.stride,
            i = layer.spec.in_channels,
            o = layer.spec.out_channels,
            wn = layer.weights.len(),
            bn = layer.bias.len(),
        )?;
    }
    writeln!(w, "parameters: {}", model.parameter_count())?;
    writeln!(
        w,
        "normalization: mean [{:.6}, {:.6}, {:.6}] scale [{:.6}, {:.6}, {:.6}]",
        model.norm_mean[0],
        model.norm_mean[1],
        model.norm_mean[2],
        model.norm_scale[0],
        model.norm_scale[1],
        model.norm_scale[2],
    )?;
    w.flush()?;
    Ok(())
}
