//! Fine-tuning of a conditional model's per-texture parameters on an unseen
//! exemplar: octave transforms, per-layer modulation and noise injectors are
//! optimized against the style loss while every network weight stays frozen.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::Tensor;

use crate::checkpoint::{content_hash, Container, Record};
use crate::critic::FeatureExtractor;
use crate::error::{arg_err, Error, Result};
use crate::losses::{style_loss_with, GramDistance};
use crate::model::Model;
use crate::params::{gradients, Adam, AdamConfig};
use crate::sampler::{Modulation, TextureField, HIDDEN_LAYERS, NOISE_LAYERS};
use crate::slicer::{random_plane, SliceMode, SlicePlane, SliceSpec};
use crate::trainer::render_batch;

/// The trainable set: `transforms` `[n, 3, 3]`, five `(gamma, delta)` pairs
/// of shape `[width]`, and four injectors `[width, n/4]`.
#[derive(Debug)]
pub struct AdaptableParams {
    pub transforms: Tensor,
    pub gamma: Vec<Tensor>,
    pub delta: Vec<Tensor>,
    pub injectors: Vec<Tensor>,
}

impl AdaptableParams {
    /// Zero-shot prediction for `patch` (`[3, S, S]` in `[0, 1]`).
    pub fn predict(model: &Model, patch: &Tensor) -> Result<Self> {
        let cond = tch::no_grad(|| model.conditioner()?.condition(patch))?;
        let leaf = |t: &Tensor| t.detach().copy().set_requires_grad(true);
        Ok(AdaptableParams {
            transforms: leaf(cond.transforms.tensor()),
            gamma: cond.modulation.gamma.iter().map(leaf).collect(),
            delta: cond.modulation.delta.iter().map(leaf).collect(),
            injectors: model.sampler.injectors().iter().map(leaf).collect(),
        })
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("transforms".to_string(), self.transforms.shallow_clone())];
        for l in 0..HIDDEN_LAYERS {
            out.push((format!("gamma{l}"), self.gamma[l].shallow_clone()));
            out.push((format!("delta{l}"), self.delta[l].shallow_clone()));
        }
        for l in 0..NOISE_LAYERS {
            out.push((format!("A{l}"), self.injectors[l].shallow_clone()));
        }
        out
    }

    pub fn field<'a>(&self, model: &'a Model) -> TextureField<'a> {
        model.custom_field(
            &model.bank,
            self.transforms.shallow_clone(),
            Some(Modulation {
                gamma: self.gamma.iter().map(Tensor::shallow_clone).collect(),
                delta: self.delta.iter().map(Tensor::shallow_clone).collect(),
            }),
            Some(self.injectors.iter().map(Tensor::shallow_clone).collect()),
        )
    }

    /// True when every tensor matches `other` exactly.
    pub fn equals(&self, other: &AdaptableParams) -> bool {
        self.named()
            .iter()
            .zip(other.named())
            .all(|((_, a), (_, b))| a.size() == b.size() && a.equal(&b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdaptOptimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: AdaptOptimizer,
    /// Slices rendered per iteration.
    pub batch_size: usize,
    /// Fixed planes used for the before/after comparison.
    pub probe_count: usize,
    pub slice_mode: SliceMode,
    pub gram_distance: GramDistance,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: 500,
            lr: 1e-3,
            optimizer: AdaptOptimizer::Adam,
            batch_size: 4,
            probe_count: 8,
            slice_mode: SliceMode::Isotropic,
            gram_distance: GramDistance::L1,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct AdaptResult {
    pub params: AdaptableParams,
    /// Style loss of the training batch at each iteration, before its update.
    pub trajectory: Vec<f64>,
    /// Style loss on the fixed probe planes before and after the run.
    pub initial_probe: f64,
    pub final_probe: f64,
    /// Windows where the smoothed trajectory increased.
    pub warnings: Vec<String>,
}

/// Adapts against the model's own frozen critic.
pub fn adapt(model: &Model, patch: &Tensor, config: &AdaptConfig) -> Result<AdaptResult> {
    adapt_with_extractor(model, patch, &model.critic, config)
}

fn normalize(images: &Tensor) -> Tensor {
    images * 2.0 - 1.0
}

fn probe_loss(
    model: &Model,
    theta: &AdaptableParams,
    planes: &[SlicePlane],
    spec: &SliceSpec,
    target: &[Tensor],
    extractor: &dyn FeatureExtractor,
    distance: GramDistance,
) -> Result<f64> {
    tch::no_grad(|| {
        let fake = render_batch(&theta.field(model), planes, spec)?;
        let feats = extractor.feature_maps(&normalize(&fake))?;
        Ok(style_loss_with(target, &feats, distance)?.value())
    })
}

/// Same procedure with features drawn from `extractor`.
pub fn adapt_with_extractor(
    model: &Model,
    patch: &Tensor,
    extractor: &dyn FeatureExtractor,
    config: &AdaptConfig,
) -> Result<AdaptResult> {
    model.conditioner()?;
    let size = model.patch_size();
    let kind = model.kind();
    let patch = patch.to_kind(kind);
    if patch.size() != [3, size, size] {
        return arg_err(format!(
            "adaptation patch must be [3, {size}, {size}], got {:?}",
            patch.size()
        ));
    }
    if !(config.lr > 0.0) || config.batch_size == 0 || config.probe_count == 0 {
        return arg_err(format!("invalid adaptation settings {config:?}"));
    }
    let spec = SliceSpec {
        resolution: size as usize,
        pixel_spacing: model.pixel_spacing,
    };
    let params = AdaptableParams::predict(model, &patch)?;
    let target = tch::no_grad(|| extractor.feature_maps(&normalize(&patch.unsqueeze(0))))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let probes: Vec<SlicePlane> = (0..config.probe_count)
        .map(|_| random_plane(config.slice_mode, &mut rng))
        .collect();
    let initial_probe = probe_loss(model, &params, &probes, &spec, &target, extractor, config.gram_distance)?;

    let named = params.named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut trajectory = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let planes: Vec<SlicePlane> = (0..config.batch_size)
            .map(|_| random_plane(config.slice_mode, &mut rng))
            .collect();
        let fake = render_batch(&params.field(model), &planes, &spec)?;
        let feats = extractor.feature_maps(&normalize(&fake))?;
        let loss = style_loss_with(&target, &feats, config.gram_distance)?;
        let v = loss.value();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("style loss {v} at adaptation iteration {it}")));
        }
        trajectory.push(v);
        let grads = gradients(&loss.total, &tensors, false)?;
        match config.optimizer {
            AdaptOptimizer::Adam => adam.step(&names, &tensors, &grads)?,
            AdaptOptimizer::Sgd => tch::no_grad(|| {
                for (p, g) in tensors.iter().zip(&grads) {
                    let mut p = p.shallow_clone();
                    let _ = p.f_sub_(&(g * config.lr))?;
                }
                Ok::<(), Error>(())
            })?,
        }
    }
    let final_probe = probe_loss(model, &params, &probes, &spec, &target, extractor, config.gram_distance)?;
    let warnings = smoothed_increases(&trajectory, 50);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(AdaptResult {
        params,
        trajectory,
        initial_probe,
        final_probe,
        warnings,
    })
}

/// Reports every point where the trailing `window`-mean rises.
pub fn smoothed_increases(values: &[f64], window: usize) -> Vec<String> {
    if window == 0 || values.len() <= window {
        return Vec::new();
    }
    let mut means = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    means.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        means.push(sum / window as f64);
    }
    means
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, w)| {
            format!(
                "smoothed style loss rose from {:.6e} to {:.6e} at iteration {}",
                w[0],
                w[1],
                i + window
            )
        })
        .collect()
}

/// Writes `params` as a delta file bound to `parent` by content hash.
pub fn save_delta(params: &AdaptableParams, parent: &Path, path: &Path) -> Result<()> {
    let hash = content_hash(parent)?;
    let records = params
        .named()
        .iter()
        .map(|(n, t)| Record::from_tensor(&format!("delta.{n}"), t))
        .collect();
    Container {
        meta: serde_json::json!({ "kind": "delta", "parent_sha256": hash }),
        records,
    }
    .write(path)
}

/// Reads a delta and checks it against the checkpoint at `parent`.
pub fn load_delta(path: &Path, parent: &Path, model: &Model) -> Result<AdaptableParams> {
    let c = Container::read(path)?;
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("delta") {
        return Err(Error::CorruptCheckpoint(format!("{} is not a delta file", path.display())));
    }
    let expected = c
        .meta
        .get("parent_sha256")
        .and_then(|h| h.as_str())
        .ok_or_else(|| Error::CorruptCheckpoint("delta lacks a parent hash".into()))?
        .to_string();
    let found = content_hash(parent)?;
    if expected != found {
        return Err(Error::HashMismatch { expected, found });
    }
    let kind = model.kind();
    let width = model.sampler.width();
    let n = model.sampler.octaves() as i64;
    let get = |name: &str, shape: &[i64]| -> Result<Tensor> {
        let full = format!("delta.{name}");
        let r = c.record(&full).ok_or_else(|| Error::Record {
            name: full.clone(),
            reason: "missing from delta".into(),
        })?;
        if r.shape != shape {
            return Err(Error::Record {
                name: full,
                reason: format!("shape {:?} does not match model shape {shape:?}", r.shape),
            });
        }
        Ok(r.to_tensor(kind))
    };
    Ok(AdaptableParams {
        transforms: get("transforms", &[n, 3, 3])?,
        gamma: (0..HIDDEN_LAYERS)
            .map(|l| get(&format!("gamma{l}"), &[width]))
            .collect::<Result<_>>()?,
        delta: (0..HIDDEN_LAYERS)
            .map(|l| get(&format!("delta{l}"), &[width]))
            .collect::<Result<_>>()?,
        injectors: (0..NOISE_LAYERS)
            .map(|l| get(&format!("A{l}"), &[width, n / 4]))
            .collect::<Result<_>>()?,
    })
}
