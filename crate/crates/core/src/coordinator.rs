//! Push-or-grasp selector: a small MLP predicting whether grasping now succeeds.

use std::collections::VecDeque;

use opg_tensor::loss::{bce, bce_grad};
use opg_tensor::ops::{linear, linear_backward, relu, relu_backward, sigmoid};
use opg_tensor::{Adam, ParamId, ParamStore, Result, Scalar, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::ActionKind;

pub const FEATURES: usize = 6;
pub const HIDDEN: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BUFFER_CAPACITY: usize = 1000;
pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Inputs to the selector, in the order the network sees them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorFeatures {
    pub q_p: f64,
    pub q_g: f64,
    pub o: f64,
    pub a_b: f64,
    pub a_n: f64,
    pub f_c: f64,
}

impl CoordinatorFeatures {
    pub fn to_array(&self) -> [f64; FEATURES] {
        [self.q_p, self.q_g, self.o, self.a_b, self.a_n, self.f_c]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDecision {
    pub features: CoordinatorFeatures,
    /// 1 when the executed grasp took the target.
    pub label: u8,
}

/// Grasp when `p >= threshold`.
pub fn decide(p: f64, threshold: f64) -> ActionKind {
    if p >= threshold {
        ActionKind::Grasp
    } else {
        ActionKind::Push
    }
}

/// 6 → 32 → 32 → 1 with ReLU hidden units and a sigmoid output.
#[derive(Clone, Debug)]
pub struct Mlp<T: Scalar = f32> {
    pub params: ParamStore<T>,
    layers: [(ParamId, ParamId); 3],
}

struct MlpCache<T: Scalar> {
    /// Input to each layer.
    inputs: Vec<Tensor<T>>,
    logit: T,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let sizes = [FEATURES, HIDDEN, HIDDEN, 1];
        let layers = std::array::from_fn(|i| {
            let (n_in, n_out) = (sizes[i], sizes[i + 1]);
            let bound = (6.0 / n_in as f64).sqrt();
            let data = (0..n_in * n_out)
                .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
                .collect();
            let w = params
                .add(
                    format!("coord.{i}.w"),
                    Tensor::from_vec(&[n_out, n_in], data).expect("dims"),
                )
                .expect("unique");
            let b = params
                .add(format!("coord.{i}.b"), Tensor::zeros(&[n_out]))
                .expect("unique");
            (w, b)
        });
        Self { params, layers }
    }

    pub fn with_params(params: ParamStore<T>) -> Result<Self> {
        let mut layers = [(opg_tensor::ParamId(0), opg_tensor::ParamId(0)); 3];
        for (i, l) in layers.iter_mut().enumerate() {
            *l = (
                params.id(&format!("coord.{i}.w"))?,
                params.id(&format!("coord.{i}.b"))?,
            );
        }
        Ok(Self { params, layers })
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            params: self.params.cast(),
            layers: self.layers,
        }
    }

    fn forward_cached(&self, features: &CoordinatorFeatures) -> Result<MlpCache<T>> {
        let x = features.to_array().iter().map(|&v| T::of_f64(v)).collect();
        let mut inputs = vec![Tensor::from_vec(&[FEATURES], x)?];
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = linear(
                inputs.last().expect("nonempty"),
                self.params.value(w),
                self.params.value(b),
            )?;
            inputs.push(if i < 2 { relu(&z) } else { z });
        }
        let logit = inputs.pop().expect("output").data()[0];
        Ok(MlpCache { inputs, logit })
    }

    /// Probability that grasping now succeeds.
    pub fn predict(&self, features: &CoordinatorFeatures) -> T {
        sigmoid(self.forward_cached(features).expect("fixed shapes").logit)
    }

    /// BCE of one example; accumulates `scale · dBCE/dθ` into the gradients.
    pub fn loss_backward(&mut self, example: &LabeledDecision, scale: T) -> Result<T> {
        let cache = self.forward_cached(&example.features)?;
        let y = sigmoid(cache.logit);
        let y_true = T::of_f64(example.label as f64);
        // dBCE/dlogit through the sigmoid
        let dy = bce_grad(y, y_true);
        let mut grad = Tensor::from_vec(&[1], vec![scale * dy * y * (T::one() - y)])?;
        for i in (0..3).rev() {
            let (w, b) = self.layers[i];
            if i < 2 {
                grad = relu_backward(&cache.inputs[i + 1], &grad)?;
            }
            let weights = self.params.value(w).clone();
            let mut gb = std::mem::replace(self.params.grad_mut(b), Tensor::zeros(&[0]));
            let r = linear_backward(
                &cache.inputs[i],
                &weights,
                &grad,
                self.params.grad_mut(w),
                &mut gb,
            );
            *self.params.grad_mut(b) = gb;
            grad = r?;
        }
        Ok(bce(y, y_true))
    }

    /// Mean BCE over a set of examples.
    pub fn mean_loss<'a>(&self, examples: impl IntoIterator<Item = &'a LabeledDecision>) -> f64 {
        let (sum, n) = examples.into_iter().fold((0.0, 0usize), |(s, n), e| {
            let y = self.predict(&e.features);
            (s + bce(y, T::of_f64(e.label as f64)).as_f64(), n + 1)
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// The selector network with its grasp-outcome buffer and optimizer.
#[derive(Clone, Debug)]
pub struct Coordinator {
    pub net: Mlp<f32>,
    pub buffer: VecDeque<LabeledDecision>,
    pub capacity: usize,
    pub batch_size: usize,
    pub optimizer: Adam,
}

impl Coordinator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, lr: f64, capacity: usize, batch_size: usize) -> Self {
        Self {
            net: Mlp::new(rng),
            buffer: VecDeque::new(),
            capacity,
            batch_size,
            optimizer: Adam::new(lr),
        }
    }

    pub fn predict(&self, features: &CoordinatorFeatures) -> f64 {
        self.net.predict(features) as f64
    }

    /// Store one grasp outcome and take an optimizer step on a random batch.
    pub fn record_and_train<R: Rng + ?Sized>(
        &mut self,
        example: LabeledDecision,
        rng: &mut R,
    ) -> Result<f64> {
        self.buffer.push_back(example);
        while self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
        self.train_step(rng)
    }

    /// One optimizer step on up to `batch_size` buffered examples drawn without
    /// replacement. Returns the batch loss before the step; no-op on an empty buffer.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        if self.buffer.is_empty() {
            return Ok(0.0);
        }
        let n = self.batch_size.min(self.buffer.len());
        let picks = sample(rng, self.buffer.len(), n);
        self.net.params.zero_grad();
        let scale = 1.0 / n as f32;
        let mut loss = 0.0;
        for i in picks.iter() {
            let ex = self.buffer[i];
            loss += self.net.loss_backward(&ex, scale)? as f64;
        }
        self.optimizer.step(&mut self.net.params);
        Ok(loss / n as f64)
    }
}
