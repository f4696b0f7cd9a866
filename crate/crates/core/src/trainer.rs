//! Adversarial training for the single-exemplar and conditional modes.
//!
//! Each iteration updates the critic once (WGAN-GP) and then the generator
//! once (adversarial term plus Gram style loss on critic features). The
//! critic step only differentiates with respect to `critic.*` records and
//! the generator step only with respect to generator-side records, so each
//! phase leaves the other's parameters untouched.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::losses::{critic_loss, generator_loss, gradient_penalty, style_loss_with, GramDistance, LossWeights};
use crate::model::Model;
use crate::noise_field::coords_tensor;
use crate::params::{gradients, Adam, AdamConfig};
use crate::sampler::TextureField;
use crate::slicer::{plane_to_coords, random_plane, Axis, SliceMode, SlicePlane, SliceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Conditional,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Single => "single-exemplar",
            Mode::Conditional => "conditional",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceKind {
    #[default]
    Isotropic,
    Anisotropic,
}

fn default_noise_resolution() -> usize {
    64
}
fn default_width() -> i64 {
    128
}
fn default_patch() -> i64 {
    128
}
fn default_divisor() -> i64 {
    1
}
fn default_spacing() -> f64 {
    1.0 / 128.0
}
fn default_lr_d() -> f64 {
    2e-3
}
fn default_lr_g() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.0
}
fn default_beta2() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}
fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    10.0
}
fn default_batch() -> usize {
    8
}
fn default_every() -> u64 {
    1000
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Training configuration; mirrors the TOML config file one key per field.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    #[serde(default)]
    pub exemplars: Vec<PathBuf>,
    /// Defaults to 16 (single) or 32 (conditional).
    #[serde(default)]
    pub octaves: Option<usize>,
    #[serde(default = "default_noise_resolution")]
    pub noise_resolution: usize,
    /// Defaults to `seed`.
    #[serde(default)]
    pub noise_seed: Option<u64>,
    #[serde(default = "default_width")]
    pub hidden_width: i64,
    #[serde(default = "default_patch")]
    pub patch_size: i64,
    #[serde(default = "default_divisor")]
    pub critic_width_divisor: i64,
    #[serde(default = "default_divisor")]
    pub encoder_width_divisor: i64,
    #[serde(default = "default_spacing")]
    pub pixel_spacing: f64,
    #[serde(default = "default_lr_d")]
    pub lr_d: f64,
    #[serde(default = "default_lr_g")]
    pub lr_g: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub gram_distance: GramDistance,
    /// Defaults to 50k (single) or 300k (conditional).
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub slice_mode: SliceKind,
    #[serde(default)]
    pub grain_axis: Axis,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl TrainConfig {
    /// Defaults for `mode` with every optional key unset.
    pub fn new(mode: Mode) -> Self {
        TrainConfig {
            mode,
            exemplars: Vec::new(),
            octaves: None,
            noise_resolution: default_noise_resolution(),
            noise_seed: None,
            hidden_width: default_width(),
            patch_size: default_patch(),
            critic_width_divisor: 1,
            encoder_width_divisor: 1,
            pixel_spacing: default_spacing(),
            lr_d: default_lr_d(),
            lr_g: default_lr_g(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            alpha: default_alpha(),
            beta: default_beta(),
            lambda: default_lambda(),
            gram_distance: GramDistance::L1,
            iterations: None,
            batch_size: default_batch(),
            slice_mode: SliceKind::Isotropic,
            grain_axis: Axis::Z,
            seed: 0,
            checkpoint_every: default_every(),
            output_dir: default_out(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn octaves(&self) -> usize {
        self.octaves.unwrap_or(match self.mode {
            Mode::Single => 16,
            Mode::Conditional => 32,
        })
    }

    pub fn iterations(&self) -> u64 {
        self.iterations.unwrap_or(match self.mode {
            Mode::Single => 50_000,
            Mode::Conditional => 300_000,
        })
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed.unwrap_or(self.seed)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn slice_mode(&self) -> SliceMode {
        match self.slice_mode {
            SliceKind::Isotropic => SliceMode::Isotropic,
            SliceKind::Anisotropic => SliceMode::Anisotropic { axis: self.grain_axis },
        }
    }

    pub fn slice_spec(&self) -> SliceSpec {
        SliceSpec {
            resolution: self.patch_size as usize,
            pixel_spacing: self.pixel_spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.octaves();
        if n == 0 || n % 4 != 0 {
            return bad(format!(
                "octaves = {n}: the noise vector is split into 4 equal bins, so it must be a positive multiple of 4"
            ));
        }
        if self.noise_resolution < 2 {
            return bad(format!("noise_resolution = {} must be >= 2", self.noise_resolution));
        }
        if !(self.lr_d > 0.0 && self.lr_g > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda < 0.0 {
            return bad("alpha, beta and lambda must be non-negative".into());
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return bad("alpha and beta cannot both be zero".into());
        }
        if self.mode == Mode::Conditional && self.beta <= 0.0 {
            return bad("conditional training requires beta > 0 (style loss)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.hidden_width < 1 {
            return bad("hidden_width must be >= 1".into());
        }
        let p = self.patch_size;
        if !(2..=128).contains(&p) || p & (p - 1) != 0 {
            return bad(format!("patch_size = {p} must be a power of two in [2, 128]"));
        }
        if self.critic_width_divisor < 1 || self.encoder_width_divisor < 1 {
            return bad("width divisors must be >= 1".into());
        }
        if !(self.pixel_spacing > 0.0) {
            return bad("pixel_spacing must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        Ok(())
    }
}

/// Scalars reported after every iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_style: f64,
    pub wasserstein: f64,
}

/// Model plus optimizer state, iteration counter and the sampling RNG.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_kind(config, Kind::Float)
    }

    pub fn with_kind(config: TrainConfig, kind: Kind) -> Result<Self> {
        let model = Model::new(&config, kind)?;
        let adam = |lr| AdamConfig {
            lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        };
        let opt_g = Adam::new(adam(config.lr_g));
        let opt_d = Adam::new(adam(config.lr_d));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(TrainState {
            config,
            model,
            opt_g,
            opt_d,
            iteration: 0,
            rng,
        })
    }
}

/// Uniformly placed `size`-pixel crop of a `[3, H, W]` image.
pub fn random_crop<R: Rng>(image: &Tensor, size: i64, rng: &mut R) -> Result<Tensor> {
    let s = image.size();
    if s.len() != 3 || s[0] != 3 || s[1] < size || s[2] < size {
        return Err(Error::Argument(format!(
            "exemplar of shape {s:?} is smaller than the {size}x{size} patch"
        )));
    }
    let y = rng.gen_range(0..=s[1] - size);
    let x = rng.gen_range(0..=s[2] - size);
    Ok(image.narrow(1, y, size).narrow(2, x, size))
}

/// Renders one slice per plane from a shared field as a `[B, 3, S, S]` batch.
pub fn render_batch(field: &TextureField<'_>, planes: &[SlicePlane], spec: &SliceSpec) -> Result<Tensor> {
    let mut coords = Vec::with_capacity(planes.len() * spec.resolution * spec.resolution);
    for p in planes {
        coords.extend(plane_to_coords(p, spec)?);
    }
    let rgb = field.evaluate(&coords_tensor(&coords, field.bank.kind()))?;
    let r = spec.resolution as i64;
    Ok(rgb.reshape([planes.len() as i64, r, r, 3]).permute([0, 3, 1, 2]))
}

fn normalize(images: &Tensor) -> Tensor {
    images * 2.0 - 1.0
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

/// Critic update on normalized real and (detached) fake batches. Returns
/// `(loss_d, wasserstein)`.
fn critic_phase(state: &mut TrainState, real: &Tensor, fake: &Tensor) -> Result<(f64, f64)> {
    let model = &state.model;
    let b = real.size()[0] as usize;
    let t: Vec<f64> = (0..b).map(|_| state.rng.gen::<f64>()).collect();
    let score_real = model.critic.score(real)?;
    let score_fake = model.critic.score(fake)?;
    let gp = gradient_penalty(real, fake, &t, |u| model.critic.score(u))?;
    let loss = critic_loss(&score_fake, &score_real, &gp, state.config.lambda);
    let loss_v = finite("critic loss", loss.double_value(&[]))?;
    let wasserstein = score_real.mean(None::<Kind>).double_value(&[]) - score_fake.mean(None::<Kind>).double_value(&[]);
    let params = model.critic_params.tensors();
    let grads = gradients(&loss, &params, false)?;
    state.opt_d.step(&model.critic_params.names(), &params, &grads)?;
    Ok((loss_v, wasserstein))
}

/// Generator update given normalized real crops and a differentiable fake
/// batch. Returns `(loss_g, loss_style)`.
fn generator_phase(state: &mut TrainState, real: &Tensor, fake: &Tensor) -> Result<(f64, f64)> {
    let model = &state.model;
    let (_, real_feats) = tch::no_grad(|| model.critic.forward(real))?;
    let (score_fake, fake_feats) = model.critic.forward(fake)?;
    let style = style_loss_with(&real_feats, &fake_feats, state.config.gram_distance)?;
    let loss = generator_loss(&score_fake, &style, state.config.alpha, state.config.beta)?;
    let loss_v = finite("generator loss", loss.double_value(&[]))?;
    let style_v = finite("style loss", style.value())?;
    let params = model.generator_params.tensors();
    let grads = gradients(&loss, &params, false)?;
    state.opt_g.step(&model.generator_params.names(), &params, &grads)?;
    Ok((loss_v, style_v))
}

fn draw_planes(state: &mut TrainState, count: usize) -> Vec<SlicePlane> {
    let mode = state.config.slice_mode();
    (0..count).map(|_| random_plane(mode, &mut state.rng)).collect()
}

/// One single-exemplar iteration against a `[3, H, W]` exemplar in `[0, 1]`.
pub fn train_step_single(state: &mut TrainState, exemplar: &Tensor) -> Result<StepMetrics> {
    let b = state.config.batch_size;
    let size = state.model.patch_size();
    let spec = state.config.slice_spec();
    let kind = state.model.kind();
    let crops = (0..b)
        .map(|_| random_crop(exemplar, size, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    let real = normalize(&Tensor::stack(&crops, 0).to_kind(kind));

    let planes = draw_planes(state, b);
    let fake = tch::no_grad(|| {
        let field = state.model.single_field(&state.model.bank)?;
        render_batch(&field, &planes, &spec)
    })?;
    let (loss_d, wasserstein) = critic_phase(state, &real, &normalize(&fake))?;

    let planes = draw_planes(state, b);
    let field = state.model.single_field(&state.model.bank)?;
    let fake = normalize(&render_batch(&field, &planes, &spec)?);
    let (loss_g, loss_style) = generator_phase(state, &real, &fake)?;

    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        loss_d,
        loss_g,
        loss_style,
        wasserstein,
    })
}

/// Condition and real crop drawn for one batch element.
#[derive(Debug)]
pub struct ConditionalSample {
    pub texture: usize,
    pub condition: Tensor,
    pub real: Tensor,
}

/// Picks a texture, then two independent crops of it.
pub fn sample_condition_pair<R: Rng>(dataset: &[Tensor], size: i64, rng: &mut R) -> Result<ConditionalSample> {
    if dataset.is_empty() {
        return Err(Error::Argument("conditional training needs at least one exemplar".into()));
    }
    let texture = rng.gen_range(0..dataset.len());
    let condition = random_crop(&dataset[texture], size, rng)?;
    let real = random_crop(&dataset[texture], size, rng)?;
    Ok(ConditionalSample {
        texture,
        condition,
        real,
    })
}

fn render_conditioned(state: &TrainState, conditions: &Tensor, planes: &[SlicePlane]) -> Result<Tensor> {
    let model = &state.model;
    let conditioner = model.conditioner()?;
    let spec = state.config.slice_spec();
    let mut slices = Vec::with_capacity(planes.len());
    for (i, plane) in planes.iter().enumerate() {
        let cond = conditioner.condition(&conditions.get(i as i64))?;
        let field = model.conditioned_field(&model.bank, &cond)?;
        slices.push(render_batch(&field, std::slice::from_ref(plane), &spec)?);
    }
    Ok(Tensor::cat(&slices, 0))
}

/// One conditional iteration over a collection of `[3, H, W]` exemplars.
pub fn train_step_conditional(state: &mut TrainState, dataset: &[Tensor]) -> Result<StepMetrics> {
    state.model.conditioner()?;
    let b = state.config.batch_size;
    let size = state.model.patch_size();
    let kind = state.model.kind();
    let mut conds = Vec::with_capacity(b);
    let mut reals = Vec::with_capacity(b);
    for _ in 0..b {
        let s = sample_condition_pair(dataset, size, &mut state.rng)?;
        conds.push(s.condition);
        reals.push(s.real);
    }
    let conditions = Tensor::stack(&conds, 0).to_kind(kind);
    let real = normalize(&Tensor::stack(&reals, 0).to_kind(kind));

    let planes = draw_planes(state, b);
    let fake = tch::no_grad(|| render_conditioned(state, &conditions, &planes))?;
    let (loss_d, wasserstein) = critic_phase(state, &real, &normalize(&fake))?;

    let planes = draw_planes(state, b);
    let fake = normalize(&render_conditioned(state, &conditions, &planes)?);
    let (loss_g, loss_style) = generator_phase(state, &real, &fake)?;

    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        loss_d,
        loss_g,
        loss_style,
        wasserstein,
    })
}

/// Dispatches to the step matching the configured mode.
pub fn train_step(state: &mut TrainState, data: &[Tensor]) -> Result<StepMetrics> {
    match state.config.mode {
        Mode::Single => {
            let ex = data
                .first()
                .ok_or_else(|| Error::Argument("single-exemplar training needs an exemplar".into()))?;
            train_step_single(state, ex)
        }
        Mode::Conditional => train_step_conditional(state, data),
    }
}

/// Append-only CSV of per-iteration metrics.
pub struct MetricsWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
    last: u64,
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(writer: W, write_header: bool) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        if write_header {
            inner
                .write_record(["iteration", "loss_d", "loss_g", "loss_style", "wasserstein"])
                .map_err(csv_err)?;
        }
        Ok(MetricsWriter { inner, last: 0 })
    }

    pub fn push(&mut self, m: &StepMetrics) -> Result<()> {
        if m.iteration <= self.last {
            return Err(Error::Argument(format!(
                "metrics must be appended in increasing iteration order ({} after {})",
                m.iteration, self.last
            )));
        }
        self.last = m.iteration;
        self.inner
            .write_record([
                m.iteration.to_string(),
                m.loss_d.to_string(),
                m.loss_g.to_string(),
                m.loss_style.to_string(),
                m.wasserstein.to_string(),
            ])
            .map_err(csv_err)?;
        self.inner.flush().map_err(|e| Error::io("metrics", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Argument(format!("csv: {e}"))
}
