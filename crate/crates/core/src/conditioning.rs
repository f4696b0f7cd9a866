//! Conditional-mode networks: patch encoder, transform mapping, style MLP and
//! the per-layer affine heads producing `(gamma, delta)`.

use rand::Rng;
use tch::Tensor;

use crate::critic::{ConvStack, StackArch};
use crate::error::{arg_err, Result};
use crate::noise_field::{octave_ladder, FrequencyTransforms};
use crate::params::{lrelu, Dense, ParamStore};
use crate::sampler::{Modulation, HIDDEN_LAYERS};

pub const LATENT_DIM: i64 = 32;
pub const MAPPING_HIDDEN: i64 = 128;

/// Everything the sampler needs to synthesize one conditioned texture.
#[derive(Debug)]
pub struct ConditionState {
    /// `[LATENT_DIM]`
    pub z: Tensor,
    /// `[width]`
    pub w: Tensor,
    pub transforms: FrequencyTransforms,
    pub modulation: Modulation,
}

#[derive(Debug)]
pub struct Conditioner {
    encoder: ConvStack,
    q_hidden: Dense,
    q_out: Dense,
    f_hidden: Dense,
    f_out: Dense,
    affine: Vec<Dense>,
    octaves: usize,
    width: i64,
}

impl Conditioner {
    /// Registers `encoder.*`, `qmap.*`, `style.*` and `affine.l{0..4}.*`.
    /// The transform head starts at the octave ladder and the affine heads at
    /// the identity modulation, independent of `z`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        encoder_arch: StackArch,
        octaves: usize,
        width: i64,
        rng: &mut R,
    ) -> Result<Self> {
        if encoder_arch.dense.last() != Some(&LATENT_DIM) {
            return arg_err(format!("encoder must end in a {LATENT_DIM}-dim dense layer"));
        }
        let encoder = ConvStack::new(store, "encoder", encoder_arch, rng);
        let q_hidden = Dense::new(store, "qmap.dense0", LATENT_DIM, MAPPING_HIDDEN, rng);
        let ladder = octave_ladder(octaves, rng);
        let q_out = Dense::with_bias(store, "qmap.dense1", MAPPING_HIDDEN, &ladder);
        let f_hidden = Dense::new(store, "style.dense0", LATENT_DIM, MAPPING_HIDDEN, rng);
        let f_out = Dense::new(store, "style.dense1", MAPPING_HIDDEN, width, rng);
        let mut identity = vec![1.0; width as usize];
        identity.extend(std::iter::repeat(0.0).take(width as usize));
        let affine = (0..HIDDEN_LAYERS)
            .map(|l| Dense::with_bias(store, &format!("affine.l{l}"), width, &identity))
            .collect();
        Ok(Conditioner {
            encoder,
            q_hidden,
            q_out,
            f_hidden,
            f_out,
            affine,
            octaves,
            width,
        })
    }

    pub fn patch_size(&self) -> i64 {
        self.encoder.arch().input_size
    }

    pub fn octaves(&self) -> usize {
        self.octaves
    }

    /// Patches `[B, 3, S, S]` with values in `[0, 1]` to latent codes `[B, 32]`.
    pub fn encode(&self, patches: &Tensor) -> Result<Tensor> {
        let x = patches * 2.0 - 1.0;
        Ok(self.encoder.forward(&x)?.output)
    }

    fn check_latent(z: &Tensor) -> Result<()> {
        let s = z.size();
        if s.len() != 2 || s[1] != LATENT_DIM {
            return arg_err(format!("latent codes must be [B, {LATENT_DIM}], got {s:?}"));
        }
        Ok(())
    }

    /// `[B, 32]` to `[B, n, 3, 3]`.
    pub fn map_transforms(&self, z: &Tensor) -> Result<Tensor> {
        Self::check_latent(z)?;
        let h = lrelu(&self.q_hidden.forward(z));
        let b = z.size()[0];
        Ok(self.q_out.forward(&h).reshape([b, self.octaves as i64, 3, 3]))
    }

    /// `[B, 32]` to style vectors `[B, width]`.
    pub fn style(&self, z: &Tensor) -> Result<Tensor> {
        Self::check_latent(z)?;
        Ok(self.f_out.forward(&lrelu(&self.f_hidden.forward(z))))
    }

    /// `(gamma_l, delta_l)`, each `[B, width]`.
    pub fn layer_affine(&self, w: &Tensor, layer: usize) -> Result<(Tensor, Tensor)> {
        if layer >= HIDDEN_LAYERS {
            return arg_err(format!("layer index {layer} out of range 0..{HIDDEN_LAYERS}"));
        }
        let s = w.size();
        if s.len() != 2 || s[1] != self.width {
            return arg_err(format!("style vectors must be [B, {}], got {s:?}", self.width));
        }
        let out = self.affine[layer].forward(w);
        Ok((out.narrow(1, 0, self.width), out.narrow(1, self.width, self.width)))
    }

    /// Builds the condition for a single latent code `[32]`.
    pub fn condition_from_latent(&self, z: &Tensor) -> Result<ConditionState> {
        let zb = z.reshape([1, LATENT_DIM]);
        let transforms = FrequencyTransforms::from_tensor(self.map_transforms(&zb)?.squeeze_dim(0))?;
        let w = self.style(&zb)?;
        let mut gamma = Vec::with_capacity(HIDDEN_LAYERS);
        let mut delta = Vec::with_capacity(HIDDEN_LAYERS);
        for l in 0..HIDDEN_LAYERS {
            let (g, d) = self.layer_affine(&w, l)?;
            gamma.push(g.squeeze_dim(0));
            delta.push(d.squeeze_dim(0));
        }
        Ok(ConditionState {
            z: zb.squeeze_dim(0),
            w: w.squeeze_dim(0),
            transforms,
            modulation: Modulation { gamma, delta },
        })
    }

    /// Encodes one patch `[3, S, S]` (or `[1, 3, S, S]`) and builds its condition.
    pub fn condition(&self, patch: &Tensor) -> Result<ConditionState> {
        let p = if patch.dim() == 3 { patch.unsqueeze(0) } else { patch.shallow_clone() };
        if p.size()[0] != 1 {
            return arg_err("condition() takes exactly one patch");
        }
        let z = self.encode(&p)?;
        self.condition_from_latent(&z.squeeze_dim(0))
    }
}
