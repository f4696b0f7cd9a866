//! The point-operation sampler: an MLP with a learned constant input whose
//! first four hidden layers each receive one contiguous bin of the noise vector.

use rand::Rng;
use tch::{Kind, Tensor};

use crate::error::{arg_err, Result};
use crate::noise_field::NoiseBank;
use crate::params::{equalized_parameter_scale, lrelu, ParamStore};

pub const HIDDEN_LAYERS: usize = 5;
pub const NOISE_LAYERS: usize = 4;
pub const DEFAULT_WIDTH: i64 = 128;

/// One RGB sample. Unclamped; export code clamps to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgbValue {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

/// Per-hidden-layer scale and shift applied after the activation.
#[derive(Debug)]
pub struct Modulation {
    pub gamma: Vec<Tensor>,
    pub delta: Vec<Tensor>,
}

impl Modulation {
    pub fn identity(width: i64, kind: Kind) -> Self {
        let opts = (kind, tch::Device::Cpu);
        Modulation {
            gamma: (0..HIDDEN_LAYERS).map(|_| Tensor::ones([width], opts)).collect(),
            delta: (0..HIDDEN_LAYERS).map(|_| Tensor::zeros([width], opts)).collect(),
        }
    }

    pub fn shallow_clone(&self) -> Self {
        Modulation {
            gamma: self.gamma.iter().map(Tensor::shallow_clone).collect(),
            delta: self.delta.iter().map(Tensor::shallow_clone).collect(),
        }
    }

    fn validate(&self, width: i64) -> Result<()> {
        if self.gamma.len() != HIDDEN_LAYERS || self.delta.len() != HIDDEN_LAYERS {
            return arg_err(format!(
                "modulation needs {HIDDEN_LAYERS} (gamma, delta) pairs, got {}/{}",
                self.gamma.len(),
                self.delta.len()
            ));
        }
        for t in self.gamma.iter().chain(&self.delta) {
            if t.size() != [width] {
                return arg_err(format!("modulation vector of shape {:?}, expected [{width}]", t.size()));
            }
        }
        Ok(())
    }
}

/// Hidden activations of every layer plus the RGB head output for a batch.
#[derive(Debug)]
pub struct SamplerTrace {
    pub hidden: Vec<Tensor>,
    pub rgb: Tensor,
}

#[derive(Debug)]
pub struct Sampler {
    width: i64,
    octaves: usize,
    constant: Tensor,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    injectors: Vec<Tensor>,
    out_weight: Tensor,
    out_bias: Tensor,
}

impl Sampler {
    /// Registers `sampler.*` records in `store`. `octaves` must be a positive multiple of 4.
    pub fn new<R: Rng>(store: &mut ParamStore, octaves: usize, width: i64, rng: &mut R) -> Result<Self> {
        if octaves == 0 || octaves % NOISE_LAYERS != 0 {
            return arg_err(format!(
                "octave count must be a positive multiple of {NOISE_LAYERS} to split into equal bins, got {octaves}"
            ));
        }
        if width < 1 {
            return arg_err("sampler width must be positive");
        }
        let bin = (octaves / NOISE_LAYERS) as i64;
        let constant = store.normal("sampler.const", &[width], rng);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut injectors = Vec::new();
        for l in 0..HIDDEN_LAYERS {
            weights.push(store.normal(&format!("sampler.W{l}"), &[width, width], rng));
            biases.push(store.fill(&format!("sampler.b{l}"), &[width], 0.0));
            if l < NOISE_LAYERS {
                injectors.push(store.normal(&format!("sampler.A{l}"), &[width, bin], rng));
            }
        }
        let out_weight = store.normal("sampler.Wout", &[3, width], rng);
        let out_bias = store.fill("sampler.bout", &[3], 0.0);
        Ok(Sampler {
            width,
            octaves,
            constant,
            weights,
            biases,
            injectors,
            out_weight,
            out_bias,
        })
    }

    pub fn width(&self) -> i64 {
        self.width
    }

    pub fn octaves(&self) -> usize {
        self.octaves
    }

    pub fn bin_size(&self) -> usize {
        self.octaves / NOISE_LAYERS
    }

    /// The learned noise-injection matrices `A_0..A_3`.
    pub fn injectors(&self) -> &[Tensor] {
        &self.injectors
    }

    /// Full forward returning every hidden activation. `injectors` replaces
    /// `A_0..A_3` when given (used by adaptation).
    pub fn trace(
        &self,
        noise: &Tensor,
        modulation: Option<&Modulation>,
        injectors: Option<&[Tensor]>,
    ) -> Result<SamplerTrace> {
        let s = noise.size();
        if s.len() != 2 || s[0] < 1 {
            return arg_err(format!("noise batch must be [B, n] with B >= 1, got {s:?}"));
        }
        if s[1] != self.octaves as i64 {
            return arg_err(format!("noise vectors of length {}, sampler expects {}", s[1], self.octaves));
        }
        if let Some(m) = modulation {
            m.validate(self.width)?;
        }
        let injectors = injectors.unwrap_or(&self.injectors);
        if injectors.len() != NOISE_LAYERS {
            return arg_err(format!("expected {NOISE_LAYERS} injector matrices, got {}", injectors.len()));
        }
        let bin = self.bin_size() as i64;
        let w_scale = equalized_parameter_scale(&[self.width, self.width]);
        let a_scale = equalized_parameter_scale(&[self.width, bin]);
        let noise = noise.to_kind(self.constant.kind());

        let mut x = self.constant.unsqueeze(0);
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        for l in 0..HIDDEN_LAYERS {
            let mut pre = x.linear(&(&self.weights[l] * w_scale), None::<&Tensor>);
            if l < NOISE_LAYERS {
                let eta = noise.narrow(1, l as i64 * bin, bin);
                pre = pre + eta.linear(&(&injectors[l] * a_scale), None::<&Tensor>);
            }
            let mut y = lrelu(&(pre + &self.biases[l]));
            if let Some(m) = modulation {
                y = &m.gamma[l] * y + &m.delta[l];
            }
            hidden.push(y.shallow_clone());
            x = y;
        }
        let out_scale = equalized_parameter_scale(&[3, self.width]);
        let rgb = x.linear(&(&self.out_weight * out_scale), Some(&self.out_bias));
        // layer 0 without noise broadcasts a single row; expand to the batch
        let rgb = rgb.expand([s[0], 3], false);
        Ok(SamplerTrace { hidden, rgb })
    }

    /// Batched forward: `[B, n]` noise to `[B, 3]` RGB.
    pub fn forward_batch(&self, noise: &Tensor, modulation: Option<&Modulation>) -> Result<Tensor> {
        Ok(self.trace(noise, modulation, None)?.rgb)
    }

    /// Single-point forward.
    pub fn forward(&self, noise: &[f64], modulation: Option<&Modulation>) -> Result<RgbValue> {
        let t = Tensor::from_slice(noise)
            .reshape([1, noise.len() as i64])
            .to_kind(self.constant.kind());
        let out = self.forward_batch(&t, modulation)?;
        Ok(RgbValue {
            r: out.double_value(&[0, 0]),
            g: out.double_value(&[0, 1]),
            b: out.double_value(&[0, 2]),
        })
    }
}

/// A texture snapshot that can be queried at arbitrary world coordinates.
#[derive(Debug)]
pub struct TextureField<'a> {
    pub bank: &'a NoiseBank,
    pub sampler: &'a Sampler,
    pub transforms: Tensor,
    pub modulation: Option<Modulation>,
    pub injectors: Option<Vec<Tensor>>,
}

impl TextureField<'_> {
    /// `[P, 3]` coordinates to `[P, 3]` RGB.
    pub fn evaluate(&self, coords: &Tensor) -> Result<Tensor> {
        let noise = self.bank.sample(coords, &self.transforms)?;
        Ok(self
            .sampler
            .trace(&noise, self.modulation.as_ref(), self.injectors.as_deref())?
            .rgb)
    }

    /// Like [`evaluate`](Self::evaluate) but without gradient tracking and in
    /// fixed-size chunks, for export of large grids.
    pub fn evaluate_detached(&self, coords: &Tensor) -> Result<Tensor> {
        const CHUNK: i64 = 1 << 16;
        tch::no_grad(|| {
            let p = coords.size()[0];
            let mut parts = Vec::new();
            let mut start = 0;
            while start < p {
                let len = CHUNK.min(p - start);
                parts.push(self.evaluate(&coords.narrow(0, start, len))?);
                start += len;
            }
            if parts.is_empty() {
                return Ok(Tensor::zeros([0, 3], (self.bank.kind(), tch::Device::Cpu)));
            }
            Ok(Tensor::cat(&parts, 0))
        })
    }
}

/// Composition of the noise lookup and the batched sampler forward.
pub fn evaluate_texture(
    coords: &Tensor,
    transforms: &Tensor,
    bank: &NoiseBank,
    sampler: &Sampler,
    modulation: Option<&Modulation>,
) -> Result<Tensor> {
    if transforms.size()[0] as usize != sampler.octaves() {
        return arg_err(format!(
            "{} transforms for a sampler with {} octaves",
            transforms.size()[0],
            sampler.octaves()
        ));
    }
    let noise = bank.sample(coords, transforms)?;
    sampler.forward_batch(&noise, modulation)
}
