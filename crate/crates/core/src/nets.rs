//! Pixel-wise push and grasp Q-networks over rotated heightmaps.
//!
//! The state is resampled into 16 views. In view `k` the pixel at `p` shows the
//! workspace at `R(θ_k)(p - c) + c`, so a stroke along the view's +x axis is a
//! stroke along world angle `θ_k`. A shared encoder feeds a push head and a
//! grasp head; each head's map is resampled back into workspace coordinates.

use opg_tensor::ops::{self, Conv2dSpec};
use opg_tensor::{ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angles::{rotation_cos_sin, ROTATIONS};
use crate::perception::STATE_CHANNELS;
use crate::sim::ActionKind;

pub const ENCODER_CHANNELS: [usize; 5] = [STATE_CHANNELS, 16, 32, 32, 64];
pub const HEAD_CHANNELS: [usize; 4] = [64, 32, 16, 1];
/// Total encoder downsampling, undone by the heads' upsampling.
pub const SCALE: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] opg_tensor::TensorError),
    #[error("non-finite Q value in {0} map")]
    NonFinite(&'static str),
    #[error("workspace {0}x{1} must be square with a side divisible by {SCALE}")]
    BadWorkspace(usize, usize),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Source pixel in view `k` for workspace pixel `(x, y)` of an `n x n` grid.
/// Sample points outside the view are clamped to its edge.
pub fn view_source(k: usize, x: usize, y: usize, n: usize) -> (usize, usize) {
    let (c, s) = rotation_cos_sin(k);
    // rotate by -θ_k
    let (s, c) = (-s, c);
    let (qx, qy) = sample_cell(c, s, x, y, n);
    let last = (n - 1) as f64;
    (qx.clamp(0.0, last) as usize, qy.clamp(0.0, last) as usize)
}

/// Cell (possibly outside the grid) under pixel `(x, y)` rotated by `(c, s)`
/// about the grid centre.
///
/// A rotated point can land exactly on a grid line through the centre (on the
/// diagonal views). Such ties are broken by a pinwheel rule, which a quarter
/// turn maps onto itself, so views `k` and `k + 4` stay exact rotations of
/// each other.
fn sample_cell(c: f64, s: f64, x: usize, y: usize, n: usize) -> (f64, f64) {
    let centre = n as f64 / 2.0;
    let (vx, vy) = (x as f64 + 0.5 - centre, y as f64 + 0.5 - centre);
    let (u, v) = (c * vx - s * vy, s * vx + c * vy);
    let pick = |a: f64, high: bool| {
        if a == 0.0 {
            if high {
                centre
            } else {
                centre - 1.0
            }
        } else {
            (a + centre).floor()
        }
    };
    (pick(u, v > 0.0), pick(v, u < 0.0))
}

/// Rotate a `[C, n, n]` raster into view `k`: nearest neighbour, zero outside.
pub fn rotate_view<T: Scalar>(input: &Tensor<T>, k: usize) -> Tensor<T> {
    let [ch, h, w] = *input.dims() else {
        panic!("rotate_view expects [C, H, W], got {:?}", input.dims());
    };
    assert_eq!(h, w, "rotate_view needs a square raster");
    if k % ROTATIONS == 0 {
        return input.clone();
    }
    let n = w;
    let (c, s) = rotation_cos_sin(k);
    let mut src = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            let (qx, qy) = sample_cell(c, s, x, y, n);
            if qx >= 0.0 && qy >= 0.0 && qx < n as f64 && qy < n as f64 {
                src[y * n + x] = Some(qy as usize * n + qx as usize);
            }
        }
    }
    let mut out = Tensor::zeros(input.dims());
    let plane = n * n;
    for chan in 0..ch {
        let from = &input.data()[chan * plane..(chan + 1) * plane];
        let to = &mut out.data_mut()[chan * plane..(chan + 1) * plane];
        for (dst, s) in to.iter_mut().zip(&src) {
            if let Some(i) = *s {
                *dst = from[i];
            }
        }
    }
    out
}

/// All 16 views of a state raster.
pub fn rotate_stack<T: Scalar>(state: &Tensor<T>) -> Vec<Tensor<T>> {
    (0..ROTATIONS).map(|k| rotate_view(state, k)).collect()
}

/// Resample a `[n, n]` view-`k` map back into workspace coordinates.
pub fn counter_rotate<T: Scalar>(view_map: &[T], k: usize, n: usize, out: &mut [T]) {
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = view_source(k, x, y, n);
            out[y * n + x] = view_map[sy * n + sx];
        }
    }
}

/// Per-rotation Q values in workspace coordinates, `[16, H, W]` per kind.
#[derive(Clone, Debug, PartialEq)]
pub struct QMaps {
    pub push: Tensor<f32>,
    pub grasp: Tensor<f32>,
}

impl QMaps {
    pub fn get(&self, kind: ActionKind) -> &Tensor<f32> {
        match kind {
            ActionKind::Push => &self.push,
            ActionKind::Grasp => &self.grasp,
        }
    }

    pub fn value(&self, kind: ActionKind, rot: usize, x: usize, y: usize) -> f32 {
        self.get(kind).at(&[rot, y, x])
    }

    /// Largest value over both kinds.
    pub fn max(&self) -> f32 {
        self.push
            .data()
            .iter()
            .chain(self.grasp.data())
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestAction {
    pub kind: ActionKind,
    pub rot_index: usize,
    pub x: usize,
    pub y: usize,
    pub q_value: f32,
}

/// Global argmax of one `[16, H, W]` map. Ties go to the smallest `(rot, y, x)`.
pub fn argmax(kind: ActionKind, map: &Tensor<f32>) -> BestAction {
    let [_, h, w] = *map.dims() else {
        panic!("Q map must be [R, H, W]");
    };
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    BestAction {
        kind,
        rot_index: best / (h * w),
        y: best / w % h,
        x: best % w,
        q_value: map.data()[best],
    }
}

/// Best push and best grasp.
pub fn best_actions(q: &QMaps) -> (BestAction, BestAction) {
    (
        argmax(ActionKind::Push, &q.push),
        argmax(ActionKind::Grasp, &q.grasp),
    )
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

/// Activations of one view kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ViewCache<T: Scalar> {
    /// Input to each encoder layer, followed by the encoder output.
    encoder: Vec<Tensor<T>>,
    /// Per head: input to each head layer, then the low-resolution output.
    heads: [Vec<Tensor<T>>; 2],
    /// Full-resolution view-frame maps, push then grasp.
    pub outputs: [Tensor<T>; 2],
}

/// Shared encoder plus push and grasp heads.
#[derive(Clone, Debug)]
pub struct QNet<T: Scalar = f32> {
    pub params: ParamStore<T>,
    encoder: Vec<ConvLayer>,
    heads: [Vec<ConvLayer>; 2],
}

fn head_index(kind: ActionKind) -> usize {
    match kind {
        ActionKind::Push => 0,
        ActionKind::Grasp => 1,
    }
}

fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(
    dims: &[usize],
    bound: f64,
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(dims, data).expect("dims match")
}

impl<T: Scalar> QNet<T> {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut add = |name: String,
                       c_in: usize,
                       c_out: usize,
                       kernel: usize,
                       spec: Conv2dSpec,
                       gain: f64| {
            let fan_in = (c_in * kernel * kernel) as f64;
            let bound = gain * (6.0 / fan_in).sqrt();
            let w = params
                .add(
                    format!("{name}.w"),
                    uniform_tensor(&[c_out, c_in, kernel, kernel], bound, rng),
                )
                .expect("unique name");
            let b = params
                .add(format!("{name}.b"), Tensor::zeros(&[c_out]))
                .expect("unique name");
            ConvLayer { w, b, spec }
        };
        let strides = [2, 2, 1, 1];
        let encoder = (0..4)
            .map(|i| {
                add(
                    format!("enc.{i}"),
                    ENCODER_CHANNELS[i],
                    ENCODER_CHANNELS[i + 1],
                    3,
                    Conv2dSpec::new(strides[i], 1),
                    1.0,
                )
            })
            .collect();
        let mut head = |prefix: &str| -> Vec<ConvLayer> {
            (0..3)
                .map(|i| {
                    let gain = if i == 2 { 0.1 } else { 1.0 };
                    add(
                        format!("{prefix}.{i}"),
                        HEAD_CHANNELS[i],
                        HEAD_CHANNELS[i + 1],
                        1,
                        Conv2dSpec::new(1, 0),
                        gain,
                    )
                })
                .collect()
        };
        let heads = [head("push"), head("grasp")];
        Self {
            params,
            encoder,
            heads,
        }
    }

    /// Same architecture around an existing parameter store, matched by name.
    pub fn with_params(params: ParamStore<T>) -> Result<Self> {
        let layer = |name: String, stride: usize, padding: usize| -> Result<ConvLayer> {
            Ok(ConvLayer {
                w: params.id(&format!("{name}.w"))?,
                b: params.id(&format!("{name}.b"))?,
                spec: Conv2dSpec::new(stride, padding),
            })
        };
        let strides = [2, 2, 1, 1];
        let encoder = (0..4)
            .map(|i| layer(format!("enc.{i}"), strides[i], 1))
            .collect::<Result<Vec<_>>>()?;
        let head = |prefix: &str| {
            (0..3)
                .map(|i| layer(format!("{prefix}.{i}"), 1, 0))
                .collect::<Result<Vec<_>>>()
        };
        let heads = [head("push")?, head("grasp")?];
        Ok(Self {
            params,
            encoder,
            heads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> QNet<U> {
        QNet {
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
        }
    }

    fn conv(&self, layer: &ConvLayer, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::conv2d(
            input,
            self.params.value(layer.w),
            self.params.value(layer.b),
            layer.spec,
        )?)
    }

    /// Forward one `[5, n, n]` view, keeping activations.
    pub fn forward_view(&self, view: &Tensor<T>) -> Result<ViewCache<T>> {
        let [_, h, w] = *view.dims() else {
            return Err(NetError::BadWorkspace(0, 0));
        };
        if h != w || w % SCALE != 0 {
            return Err(NetError::BadWorkspace(w, h));
        }
        let mut encoder = vec![view.clone()];
        for layer in &self.encoder {
            let out = ops::relu(&self.conv(layer, encoder.last().expect("nonempty"))?);
            encoder.push(out);
        }
        let features = encoder.last().expect("nonempty");
        let mut heads: [Vec<Tensor<T>>; 2] = [Vec::new(), Vec::new()];
        let mut outputs = Vec::with_capacity(2);
        for (acts, layers) in heads.iter_mut().zip(&self.heads) {
            acts.push(features.clone());
            for (i, layer) in layers.iter().enumerate() {
                let mut out = self.conv(layer, acts.last().expect("nonempty"))?;
                if i + 1 < layers.len() {
                    out = ops::relu(&out);
                }
                acts.push(out);
            }
            outputs.push(ops::bilinear_upsample(
                acts.last().expect("nonempty"),
                SCALE,
            )?);
        }
        let grasp = outputs.pop().expect("two heads");
        let push = outputs.pop().expect("two heads");
        Ok(ViewCache {
            encoder,
            heads,
            outputs: [push, grasp],
        })
    }

    /// Accumulate parameter gradients for `dL/d outputs` (push, grasp; `None` = zero).
    pub fn backward_view(
        &mut self,
        cache: &ViewCache<T>,
        grad_outputs: [Option<&Tensor<T>>; 2],
    ) -> Result<()> {
        let features = cache.encoder.last().expect("nonempty");
        let mut grad_features: Option<Tensor<T>> = None;
        for (h, grad_out) in grad_outputs.iter().enumerate() {
            let Some(grad_out) = grad_out else { continue };
            let acts = &cache.heads[h];
            let low = acts.last().expect("nonempty");
            let mut grad = ops::bilinear_upsample_backward(low.dims(), grad_out, SCALE)?;
            let layers = self.heads[h].clone();
            for (i, layer) in layers.iter().enumerate().rev() {
                if i + 1 < layers.len() {
                    grad = ops::relu_backward(&acts[i + 1], &grad)?;
                }
                grad = self
                    .conv_backward(layer, &acts[i], &grad, true)?
                    .expect("input gradient requested");
            }
            match grad_features.as_mut() {
                Some(g) => g.add_assign(&grad)?,
                None => grad_features = Some(grad),
            }
        }
        let Some(mut grad) = grad_features else {
            return Ok(());
        };
        debug_assert_eq!(grad.dims(), features.dims());
        let layers = self.encoder.clone();
        for (i, layer) in layers.iter().enumerate().rev() {
            grad = ops::relu_backward(&cache.encoder[i + 1], &grad)?;
            match self.conv_backward(layer, &cache.encoder[i], &grad, i > 0)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    fn conv_backward(
        &mut self,
        layer: &ConvLayer,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let w = self.params.value(layer.w).clone();
        let mut gb = std::mem::replace(self.params.grad_mut(layer.b), Tensor::zeros(&[0]));
        let gw = self.params.grad_mut(layer.w);
        let r = ops::conv2d_backward(input, &w, grad_out, layer.spec, gw, &mut gb, want_input);
        *self.params.grad_mut(layer.b) = gb;
        Ok(r?)
    }

    /// Q value of one action and its view-frame pixel, with activations cached.
    pub fn forward_action(
        &self,
        state: &Tensor<T>,
        kind: ActionKind,
        rot: usize,
        x: usize,
        y: usize,
    ) -> Result<(T, ViewCache<T>, (usize, usize))> {
        let n = state.dims()[2];
        let cache = self.forward_view(&rotate_view(state, rot))?;
        let (sx, sy) = view_source(rot, x, y, n);
        let q = cache.outputs[head_index(kind)].data()[sy * n + sx];
        Ok((q, cache, (sx, sy)))
    }

    /// Accumulate `dL/dq · dq/dθ` for an action evaluated by [`Self::forward_action`].
    pub fn backward_action(
        &mut self,
        cache: &ViewCache<T>,
        kind: ActionKind,
        pixel: (usize, usize),
        dl_dq: T,
    ) -> Result<()> {
        let dims = cache.outputs[0].dims().to_vec();
        let mut grad = Tensor::zeros(&dims);
        grad.set(&[0, pixel.1, pixel.0], dl_dq);
        let mut grads = [None, None];
        grads[head_index(kind)] = Some(&grad);
        self.backward_view(cache, grads)
    }
}

impl QNet<f32> {
    /// Evaluate all 16 views of a `[5, n, n]` state and map results back to workspace coordinates.
    pub fn forward_qmaps(&self, state: &Tensor<f32>) -> Result<QMaps> {
        let [_, h, w] = *state.dims() else {
            return Err(NetError::BadWorkspace(0, 0));
        };
        if h != w || w % SCALE != 0 {
            return Err(NetError::BadWorkspace(w, h));
        }
        let n = w;
        let plane = n * n;
        let mut push = Tensor::zeros(&[ROTATIONS, n, n]);
        let mut grasp = Tensor::zeros(&[ROTATIONS, n, n]);
        for k in 0..ROTATIONS {
            let cache = self.forward_view(&rotate_view(state, k))?;
            let [p, g] = &cache.outputs;
            counter_rotate(
                p.data(),
                k,
                n,
                &mut push.data_mut()[k * plane..(k + 1) * plane],
            );
            counter_rotate(
                g.data(),
                k,
                n,
                &mut grasp.data_mut()[k * plane..(k + 1) * plane],
            );
        }
        if !push.is_finite() {
            return Err(NetError::NonFinite("push"));
        }
        if !grasp.is_finite() {
            return Err(NetError::NonFinite("grasp"));
        }
        Ok(QMaps { push, grasp })
    }
}
