//! Named parameter storage, the Adam optimizer and the equalized learning-rate
//! layers shared by every network in the crate.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Runtime multiplier for a weight tensor of the given shape: `sqrt(2 / fan_in)`,
/// where fan-in is the product of every dimension except the leading (output) one.
pub fn equalized_parameter_scale(shape: &[i64]) -> f64 {
    let fan_in: i64 = shape.iter().skip(1).product();
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Ordered collection of named trainable tensors.
///
/// Modules keep shallow clones of the tensors registered here, so in-place
/// updates made through the store (optimizer steps, checkpoint loads) are
/// visible to every module immediately.
#[derive(Debug)]
pub struct ParamStore {
    kind: Kind,
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(kind: Kind) -> Self {
        ParamStore {
            kind,
            params: IndexMap::new(),
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers `values` (row-major) under `name` and returns a handle sharing storage.
    pub fn add_values(&mut self, name: &str, shape: &[i64], values: &[f64]) -> Tensor {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        let t = Tensor::from_slice(values)
            .to_kind(self.kind)
            .reshape(shape)
            .set_requires_grad(true);
        let handle = t.shallow_clone();
        self.params.insert(name.to_string(), t);
        handle
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[i64], rng: &mut R) -> Tensor {
        let numel: i64 = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        self.add_values(name, shape, &values)
    }

    pub fn fill(&mut self, name: &str, shape: &[i64], value: f64) -> Tensor {
        let numel: i64 = shape.iter().product();
        self.add_values(name, shape, &vec![value; numel as usize])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Handles to every tensor, in registration order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.values().map(|t| t.shallow_clone()).collect()
    }

    /// Overwrites a parameter's values in place.
    pub fn assign(&self, name: &str, shape: &[i64], values: &[f32]) -> Result<()> {
        let target = self.params.get(name).ok_or_else(|| Error::Record {
            name: name.to_string(),
            reason: "unknown parameter".into(),
        })?;
        if target.size() != shape {
            return Err(Error::Record {
                name: name.to_string(),
                reason: format!("shape {:?} does not match model shape {:?}", shape, target.size()),
            });
        }
        let src = Tensor::from_slice(values).to_kind(self.kind).reshape(shape);
        tch::no_grad(|| {
            let mut dst = target.shallow_clone();
            dst.copy_(&src);
        });
        Ok(())
    }

    /// SHA-256 of every record's raw values, keyed by name.
    pub fn record_hashes(&self) -> BTreeMap<String, String> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tensor_digest(t)))
            .collect()
    }
}

/// Hex SHA-256 over the tensor's shape and little-endian values in its own precision.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut hasher = Sha256::new();
    for d in t.size() {
        hasher.update(d.to_le_bytes());
    }
    let flat = t.detach().flatten(0, -1);
    match t.kind() {
        Kind::Double => {
            let v: Vec<f64> = Vec::try_from(&flat).expect("double tensor");
            for x in v {
                hasher.update(x.to_le_bytes());
            }
        }
        _ => {
            let v: Vec<f32> = Vec::try_from(&flat.to_kind(Kind::Float)).expect("float tensor");
            for x in v {
                hasher.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(hasher.finalize())
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with first/second moments kept per parameter name so they can be
/// written to and restored from checkpoints.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_steps(&mut self, step: u64) {
        self.step = step;
    }

    /// Applies one update. `params` and `grads` are parallel slices.
    pub fn step(&mut self, names: &[String], params: &[Tensor], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(names.len(), params.len());
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for ((name, p), g) in names.iter().zip(params).zip(grads) {
                let g = if g.defined() { g.shallow_clone() } else { p.zeros_like() };
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (p.zeros_like(), p.zeros_like()));
                let new_m = &*m * beta1 + &g * (1.0 - beta1);
                let new_v = &*v * beta2 + g.square() * (1.0 - beta2);
                let update = (&new_m / bias1) / ((&new_v / bias2).sqrt() + eps) * lr;
                let mut p = p.shallow_clone();
                let _ = p.f_sub_(&update)?;
                *m = new_m;
                *v = new_v;
            }
            Ok::<(), Error>(())
        })
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub fn set_moment(&mut self, name: &str, m: Tensor, v: Tensor) {
        self.moments.insert(name.to_string(), (m, v));
    }
}

/// Gradients of the scalar `output` with respect to `inputs`. Inputs that do
/// not influence `output` receive zeros. With `create_graph` the returned
/// gradients are themselves differentiable.
pub fn gradients(output: &Tensor, inputs: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if !output.requires_grad() {
        return Ok(inputs.iter().map(Tensor::zeros_like).collect());
    }
    let grads = Tensor::f_run_backward(&[output], inputs, create_graph, create_graph)?;
    Ok(grads
        .into_iter()
        .zip(inputs)
        .map(|(g, x)| if g.defined() { g } else { x.zeros_like() })
        .collect())
}

/// Leaky rectifier with slope 0.2, written with `maximum` so that positive
/// inputs pass through bit-exactly.
pub fn lrelu(x: &Tensor) -> Tensor {
    x.maximum(&(x * 0.2))
}

/// Dense layer with equalized learning rate: weights are stored unit-normal
/// (or zero) and scaled by `sqrt(2 / fan_in)` on every forward.
#[derive(Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub scale: f64,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: i64, fan_out: i64, rng: &mut R) -> Self {
        let weight = store.normal(&format!("{prefix}.w"), &[fan_out, fan_in], rng);
        let bias = store.fill(&format!("{prefix}.b"), &[fan_out], 0.0);
        Dense {
            weight,
            bias,
            scale: equalized_parameter_scale(&[fan_out, fan_in]),
        }
    }

    /// Zero weights and the given bias values.
    pub fn with_bias(store: &mut ParamStore, prefix: &str, fan_in: i64, bias: &[f64]) -> Self {
        let fan_out = bias.len() as i64;
        let weight = store.fill(&format!("{prefix}.w"), &[fan_out, fan_in], 0.0);
        let bias = store.add_values(&format!("{prefix}.b"), &[fan_out], bias);
        Dense {
            weight,
            bias,
            scale: equalized_parameter_scale(&[fan_out, fan_in]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&(&self.weight * self.scale), Some(&self.bias))
    }
}

/// 2D convolution with "same" output size and equalized learning rate.
/// Even kernels pad one extra row/column at the bottom/right.
#[derive(Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: i64,
    pub scale: f64,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: i64,
        out_ch: i64,
        kernel: i64,
        rng: &mut R,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = store.normal(&format!("{prefix}.w"), &shape, rng);
        let bias = store.fill(&format!("{prefix}.b"), &[out_ch], 0.0);
        Conv {
            weight,
            bias,
            kernel,
            scale: equalized_parameter_scale(&shape),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = &self.weight * self.scale;
        let k = self.kernel;
        if k % 2 == 1 {
            x.conv2d(&w, Some(&self.bias), [1, 1], [k / 2, k / 2], [1, 1], 1)
        } else {
            let lo = (k - 1) / 2;
            let hi = k - 1 - lo;
            x.constant_pad_nd([lo, hi, lo, hi])
                .conv2d(&w, Some(&self.bias), [1, 1], [0, 0], [1, 1], 1)
        }
    }
}

pub fn avg_pool(x: &Tensor) -> Tensor {
    x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>)
}
