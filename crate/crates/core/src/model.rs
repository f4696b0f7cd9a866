//! The complete set of networks for one training run, split into the
//! generator-side and critic parameter stores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::conditioning::{ConditionState, Conditioner, LATENT_DIM};
use crate::critic::{Critic, StackArch};
use crate::error::{arg_err, Result};
use crate::noise_field::{octave_ladder, NoiseBank};
use crate::params::ParamStore;
use crate::sampler::{Modulation, Sampler, TextureField};
use crate::trainer::{Mode, TrainConfig};

/// Record name of the free octave transforms in single-exemplar mode.
pub const TRANSFORMS_RECORD: &str = "transforms";

#[derive(Debug)]
pub struct Model {
    pub mode: Mode,
    pub bank: NoiseBank,
    pub generator_params: ParamStore,
    pub critic_params: ParamStore,
    pub sampler: Sampler,
    /// `[n, 3, 3]`, single-exemplar mode only.
    pub transforms: Option<Tensor>,
    pub conditioner: Option<Conditioner>,
    pub critic: Critic,
    pub pixel_spacing: f64,
}

impl Model {
    /// Builds freshly initialized networks for `config`. Initialization is a
    /// pure function of `config.seed`.
    pub fn new(config: &TrainConfig, kind: Kind) -> Result<Self> {
        config.validate()?;
        let octaves = config.octaves();
        let bank = NoiseBank::new(octaves, config.noise_resolution, config.noise_seed(), kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut generator_params = ParamStore::new(kind);
        let mut critic_params = ParamStore::new(kind);
        let sampler = Sampler::new(&mut generator_params, octaves, config.hidden_width, &mut rng)?;
        let (transforms, conditioner) = match config.mode {
            Mode::Single => {
                let ladder = octave_ladder(octaves, &mut rng);
                let t = generator_params.add_values(TRANSFORMS_RECORD, &[octaves as i64, 3, 3], &ladder);
                (Some(t), None)
            }
            Mode::Conditional => {
                let arch = StackArch::shrink(
                    &StackArch::encoder_full(LATENT_DIM),
                    config.patch_size,
                    config.encoder_width_divisor,
                )?;
                let c = Conditioner::new(&mut generator_params, arch, octaves, config.hidden_width, &mut rng)?;
                (None, Some(c))
            }
        };
        let arch = StackArch::shrink(&StackArch::critic_full(), config.patch_size, config.critic_width_divisor)?;
        let critic = Critic::new(&mut critic_params, arch, &mut rng);
        Ok(Model {
            mode: config.mode,
            bank,
            generator_params,
            critic_params,
            sampler,
            transforms,
            conditioner,
            critic,
            pixel_spacing: config.pixel_spacing,
        })
    }

    pub fn kind(&self) -> Kind {
        self.generator_params.kind()
    }

    pub fn patch_size(&self) -> i64 {
        self.critic.input_size()
    }

    pub fn conditioner(&self) -> Result<&Conditioner> {
        self.conditioner.as_ref().ok_or_else(|| crate::Error::ModeMismatch {
            expected: "conditional".into(),
            found: "single-exemplar".into(),
        })
    }

    /// Texture field of a single-exemplar model over `bank`.
    pub fn single_field<'a>(&'a self, bank: &'a NoiseBank) -> Result<TextureField<'a>> {
        let Some(t) = &self.transforms else {
            return Err(crate::Error::ModeMismatch {
                expected: "single-exemplar".into(),
                found: "conditional".into(),
            });
        };
        Ok(TextureField {
            bank,
            sampler: &self.sampler,
            transforms: t.shallow_clone(),
            modulation: None,
            injectors: None,
        })
    }

    /// Texture field driven by a condition.
    pub fn conditioned_field<'a>(&'a self, bank: &'a NoiseBank, cond: &ConditionState) -> Result<TextureField<'a>> {
        if cond.transforms.count() != self.sampler.octaves() {
            return arg_err("condition octave count does not match the sampler");
        }
        Ok(TextureField {
            bank,
            sampler: &self.sampler,
            transforms: cond.transforms.tensor().shallow_clone(),
            modulation: Some(cond.modulation.shallow_clone()),
            injectors: None,
        })
    }

    /// Field with explicit transforms, modulation and injectors.
    pub fn custom_field<'a>(
        &'a self,
        bank: &'a NoiseBank,
        transforms: Tensor,
        modulation: Option<Modulation>,
        injectors: Option<Vec<Tensor>>,
    ) -> TextureField<'a> {
        TextureField {
            bank,
            sampler: &self.sampler,
            transforms,
            modulation,
            injectors,
        }
    }

    /// A second noise bank with the same shape but another seed.
    pub fn bank_with_seed(&self, seed: u64) -> Result<NoiseBank> {
        NoiseBank::new(self.bank.octaves(), self.bank.resolution(), seed, self.kind())
    }
}
