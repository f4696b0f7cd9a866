//! Convolutional critic. Its post-activation conv maps double as the feature
//! extractor for the Gram style loss.

use rand::Rng;
use tch::Tensor;

use crate::error::{arg_err, Result};
use crate::params::{avg_pool, lrelu, Conv, Dense, ParamStore};

/// One resolution level: convolutions (by output channel count) followed by a 2x2 average pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStage {
    pub channels: Vec<i64>,
    pub kernel: i64,
}

/// Layer layout of a conv-pool stack that reduces `input_size` to 1x1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackArch {
    pub input_size: i64,
    pub stages: Vec<ConvStage>,
    pub dense: Vec<i64>,
}

fn stage(channels: &[i64], kernel: i64) -> ConvStage {
    ConvStage {
        channels: channels.to_vec(),
        kernel,
    }
}

impl StackArch {
    /// The 128x128 critic: 9 convs, 7 pools, dense 256 -> 512 -> 1.
    pub fn critic_full() -> Self {
        StackArch {
            input_size: 128,
            stages: vec![
                stage(&[32, 64], 3),
                stage(&[64, 128], 3),
                stage(&[128], 3),
                stage(&[256], 3),
                stage(&[256], 3),
                stage(&[256], 3),
                stage(&[256], 2),
            ],
            dense: vec![512, 1],
        }
    }

    /// The 128x128 encoder: 7 conv-pool stages, dense 256 -> 256 -> 32.
    pub fn encoder_full(latent: i64) -> Self {
        StackArch {
            input_size: 128,
            stages: vec![
                stage(&[32], 3),
                stage(&[64], 3),
                stage(&[128], 3),
                stage(&[256], 3),
                stage(&[256], 3),
                stage(&[256], 3),
                stage(&[256], 2),
            ],
            dense: vec![256, latent],
        }
    }

    /// Keeps the trailing stages needed to reduce a `size`-pixel patch to 1x1
    /// and divides every hidden width by `divisor`.
    pub fn shrink(full: &StackArch, size: i64, divisor: i64) -> Result<Self> {
        if size < 2 || size > full.input_size || size & (size - 1) != 0 {
            return arg_err(format!(
                "patch size must be a power of two in [2, {}], got {size}",
                full.input_size
            ));
        }
        if divisor < 1 {
            return arg_err("width divisor must be >= 1");
        }
        let levels = size.trailing_zeros() as usize;
        let skip = full.stages.len() - levels;
        let div = |c: i64| (c / divisor).max(1);
        let stages = full.stages[skip..]
            .iter()
            .map(|s| ConvStage {
                channels: s.channels.iter().map(|&c| div(c)).collect(),
                kernel: s.kernel,
            })
            .collect();
        let last = full.dense.len() - 1;
        let dense = full
            .dense
            .iter()
            .enumerate()
            .map(|(i, &d)| if i == last { d } else { div(d) })
            .collect();
        Ok(StackArch {
            input_size: size,
            stages,
            dense,
        })
    }

    pub fn conv_count(&self) -> usize {
        self.stages.iter().map(|s| s.channels.len()).sum()
    }

    /// `(channels, pixels)` of every conv activation, in order.
    pub fn feature_shapes(&self) -> Vec<(i64, i64)> {
        let mut size = self.input_size;
        let mut out = Vec::new();
        for s in &self.stages {
            for &c in &s.channels {
                out.push((c, size * size));
            }
            size /= 2;
        }
        out
    }
}

/// Conv-pool stack followed by dense layers, with LReLU after every layer but the last.
#[derive(Debug)]
pub struct ConvStack {
    arch: StackArch,
    convs: Vec<(Conv, bool)>,
    dense: Vec<Dense>,
}

/// Output of a stack forward: final dense output and every conv activation.
#[derive(Debug)]
pub struct StackOutput {
    pub output: Tensor,
    pub features: Vec<Tensor>,
}

impl ConvStack {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, arch: StackArch, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 3;
        let mut idx = 0;
        for s in &arch.stages {
            for (k, &out) in s.channels.iter().enumerate() {
                let conv = Conv::new(store, &format!("{prefix}.conv{idx}"), in_ch, out, s.kernel, rng);
                convs.push((conv, k + 1 == s.channels.len()));
                in_ch = out;
                idx += 1;
            }
        }
        let mut dense = Vec::new();
        let mut fan_in = in_ch;
        for (i, &out) in arch.dense.iter().enumerate() {
            dense.push(Dense::new(store, &format!("{prefix}.dense{i}"), fan_in, out, rng));
            fan_in = out;
        }
        ConvStack { arch, convs, dense }
    }

    pub fn arch(&self) -> &StackArch {
        &self.arch
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.size();
        let n = self.arch.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return arg_err(format!("expected input [B, 3, {n}, {n}], got {s:?}"));
        }
        Ok(())
    }

    /// Runs the conv part only, returning the post-activation maps.
    pub fn conv_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut h = x.shallow_clone();
        let mut feats = Vec::with_capacity(self.convs.len());
        for (conv, pool) in &self.convs {
            h = lrelu(&conv.forward(&h));
            feats.push(h.shallow_clone());
            if *pool {
                h = avg_pool(&h);
            }
        }
        Ok(feats)
    }

    pub fn forward(&self, x: &Tensor) -> Result<StackOutput> {
        let features = self.conv_features(x)?;
        let mut h = avg_pool(features.last().expect("at least one conv")).flatten(1, -1);
        let last = self.dense.len() - 1;
        for (i, d) in self.dense.iter().enumerate() {
            h = d.forward(&h);
            if i != last {
                h = lrelu(&h);
            }
        }
        Ok(StackOutput { output: h, features })
    }
}

/// Anything that maps images in `[-1, 1]` (`[B, 3, H, W]`) to an ordered list
/// of spatial feature maps `[B, N_l, H_l, W_l]`.
pub trait FeatureExtractor {
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Per-layer activations retained from a critic forward.
pub type FeatureStack = Vec<Tensor>;

#[derive(Debug)]
pub struct Critic {
    stack: ConvStack,
}

impl Critic {
    /// Registers `critic.*` records.
    pub fn new<R: Rng>(store: &mut ParamStore, arch: StackArch, rng: &mut R) -> Self {
        Critic {
            stack: ConvStack::new(store, "critic", arch, rng),
        }
    }

    pub fn arch(&self) -> &StackArch {
        self.stack.arch()
    }

    pub fn input_size(&self) -> i64 {
        self.stack.arch().input_size
    }

    /// Scores `[B]` and every conv activation for normalized patches `[B, 3, S, S]`.
    pub fn forward(&self, patches: &Tensor) -> Result<(Tensor, FeatureStack)> {
        let out = self.stack.forward(patches)?;
        Ok((out.output.squeeze_dim(1), out.features))
    }

    pub fn score(&self, patches: &Tensor) -> Result<Tensor> {
        Ok(self.forward(patches)?.0)
    }
}

impl FeatureExtractor for Critic {
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.stack.conv_features(images)
    }
}
