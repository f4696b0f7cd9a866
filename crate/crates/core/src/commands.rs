//! Library side of the command-line tools. Every command is a pure function
//! of its inputs and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::adaptation::{adapt, load_delta, save_delta, AdaptConfig, AdaptResult, AdaptableParams};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::conditioning::ConditionState;
use crate::error::{arg_err, Error, Result};
use crate::evaluation::{
    average_log_likelihood, bandwidth_grid_search, image_sample_vector, sifid, sifid_protocol, ConvExtractor,
    MetricReport,
};
use crate::io::{load_image, read_points, save_image, write_colored_points, write_volume, VolumeHeader};
use crate::model::Model;
use crate::noise_field::{coords_tensor, Coordinate3, NoiseBank};
use crate::sampler::TextureField;
use crate::slicer::{plane_to_coords, random_plane, SliceMode, SlicePlane, SliceSpec};
use crate::trainer::{random_crop, train_step, MetricsWriter, Mode, StepMetrics, TrainConfig, TrainState};

/// What drives the sampler of a loaded model.
#[derive(Debug)]
pub enum TextureSource {
    /// Single-exemplar model's own transforms.
    Single,
    /// Conditional model, conditioned on a patch or latent.
    Conditioned(ConditionState),
    /// Conditional model with adapted parameters from a delta file.
    Adapted(AdaptableParams),
}

impl TextureSource {
    pub fn field<'a>(&self, model: &'a Model, bank: &'a NoiseBank) -> Result<TextureField<'a>> {
        match self {
            TextureSource::Single => model.single_field(bank),
            TextureSource::Conditioned(c) => model.conditioned_field(bank, c),
            TextureSource::Adapted(p) => {
                let mut f = p.field(model);
                f.bank = bank;
                Ok(f)
            }
        }
    }
}

/// Loads a checkpoint and resolves how its texture is driven. Conditional
/// models need either a `condition` patch image or a `delta` file.
pub fn load_texture(checkpoint: &Path, condition: Option<&Path>, delta: Option<&Path>) -> Result<(TrainState, TextureSource)> {
    let state = load_checkpoint(checkpoint, None)?;
    let source = match (state.config.mode, condition, delta) {
        (Mode::Single, None, None) => TextureSource::Single,
        (Mode::Single, _, _) => {
            return Err(Error::ModeMismatch {
                expected: Mode::Conditional.to_string(),
                found: Mode::Single.to_string(),
            })
        }
        (Mode::Conditional, _, Some(d)) => TextureSource::Adapted(load_delta(d, checkpoint, &state.model)?),
        (Mode::Conditional, Some(p), None) => {
            let patch = center_patch(&load_image(p)?, state.model.patch_size())?;
            let cond = tch::no_grad(|| state.model.conditioner()?.condition(&patch.to_kind(state.model.kind())))?;
            TextureSource::Conditioned(cond)
        }
        (Mode::Conditional, None, None) => {
            return arg_err("a conditional checkpoint needs --condition <patch.png> or --delta <file>")
        }
    };
    Ok((state, source))
}

/// Central `size x size` crop of a `[3, H, W]` image.
pub fn center_patch(image: &Tensor, size: i64) -> Result<Tensor> {
    let s = image.size();
    if s.len() != 3 || s[1] < size || s[2] < size {
        return arg_err(format!("image of shape {s:?} is smaller than the {size}x{size} patch"));
    }
    Ok(image.narrow(1, (s[1] - size) / 2, size).narrow(2, (s[2] - size) / 2, size))
}

/// Noise bank of texture instance `seed`.
pub fn instance_bank(model: &Model, seed: u64) -> Result<NoiseBank> {
    model.bank_with_seed(seed)
}

/// Plane used when none is given explicitly: drawn from `seed` on its own stream.
pub fn seeded_plane(seed: u64) -> SlicePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    random_plane(SliceMode::Isotropic, &mut rng)
}

/// Evaluates a plane into a `[3, R, R]` image without clamping.
pub fn render_plane(field: &TextureField<'_>, plane: &SlicePlane, spec: &SliceSpec) -> Result<Tensor> {
    let coords = plane_to_coords(plane, spec)?;
    let rgb = field.evaluate_detached(&coords_tensor(&coords, field.bank.kind()))?;
    let r = spec.resolution as i64;
    Ok(rgb.reshape([r, r, 3]).permute([2, 0, 1]))
}

#[derive(Debug, Clone)]
pub struct SliceArgs {
    pub resolution: usize,
    /// World units per pixel; defaults to the model's training spacing.
    pub pixel_spacing: Option<f64>,
    pub seed: u64,
    /// Explicit plane; a seeded random plane otherwise.
    pub plane: Option<SlicePlane>,
}

pub fn slice_image(model: &Model, source: &TextureSource, args: &SliceArgs) -> Result<Tensor> {
    if args.resolution == 0 {
        return arg_err("resolution must be >= 1");
    }
    let bank = instance_bank(model, args.seed)?;
    let field = source.field(model, &bank)?;
    let plane = args.plane.unwrap_or_else(|| seeded_plane(args.seed));
    let spec = SliceSpec {
        resolution: args.resolution,
        pixel_spacing: args.pixel_spacing.unwrap_or(model.pixel_spacing),
    };
    render_plane(&field, &plane, &spec)
}

pub fn cmd_slice(
    checkpoint: &Path,
    condition: Option<&Path>,
    delta: Option<&Path>,
    args: &SliceArgs,
    out: &Path,
) -> Result<Tensor> {
    let (state, source) = load_texture(checkpoint, condition, delta)?;
    let img = slice_image(&state.model, &source, args)?;
    save_image(&img, out)?;
    Ok(img)
}

#[derive(Debug, Clone, Copy)]
pub struct VolumeArgs {
    pub dims: [u32; 3],
    pub extent: [f64; 3],
    pub seed: u64,
}

/// Writes the texture sampled on a regular lattice, one z-slab at a time.
pub fn write_texture_volume(model: &Model, source: &TextureSource, args: &VolumeArgs, w: &mut impl Write) -> Result<VolumeHeader> {
    let header = VolumeHeader::new(args.dims, args.extent)?;
    let bank = instance_bank(model, args.seed)?;
    let field = source.field(model, &bank)?;
    write_volume(&header, w, |iz| {
        let coords = coords_tensor(&header.slab_positions(iz), bank.kind());
        let rgb = field.evaluate_detached(&coords)?;
        Ok(Vec::try_from(&rgb.to_kind(Kind::Float).flatten(0, -1))?)
    })?;
    Ok(header)
}

pub fn cmd_volume(
    checkpoint: &Path,
    condition: Option<&Path>,
    delta: Option<&Path>,
    args: &VolumeArgs,
    out: &Path,
) -> Result<VolumeHeader> {
    let header = VolumeHeader::new(args.dims, args.extent)?;
    let (state, source) = load_texture(checkpoint, condition, delta)?;
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(f);
    write_texture_volume(&state.model, &source, args, &mut w)?;
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(header)
}

/// Colors for `points` in input order, `[P, 3]`.
pub fn color_points(model: &Model, source: &TextureSource, points: &[Coordinate3], seed: u64) -> Result<Tensor> {
    let bank = instance_bank(model, seed)?;
    let field = source.field(model, &bank)?;
    field.evaluate_detached(&coords_tensor(points, bank.kind()))
}

pub fn cmd_texture_points(
    checkpoint: &Path,
    condition: Option<&Path>,
    delta: Option<&Path>,
    points: &Path,
    seed: u64,
    out: &Path,
) -> Result<usize> {
    let pts = read_points(points)?;
    let (state, source) = load_texture(checkpoint, condition, delta)?;
    let rgb = color_points(&state.model, &source, &pts, seed)?;
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    write_colored_points(&pts, &rgb, &mut BufWriter::new(f))?;
    Ok(pts.len())
}

/// Latent codes and slices of an interpolation strip.
#[derive(Debug)]
pub struct Interpolation {
    /// `[steps, LATENT_DIM]`
    pub latents: Tensor,
    /// `[3, R, steps * R]`
    pub strip: Tensor,
}

/// `z_t = (1 - t) E(a) + t E(b)` for `steps` evenly spaced `t` in `[0, 1]`,
/// each rendered on the same plane and noise instance.
pub fn interpolate(model: &Model, patch_a: &Tensor, patch_b: &Tensor, steps: usize, args: &SliceArgs) -> Result<Interpolation> {
    if steps < 2 {
        return arg_err("interpolation needs at least 2 steps");
    }
    let cond = model.conditioner()?;
    let size = model.patch_size();
    let kind = model.kind();
    let encode = |p: &Tensor| -> Result<Tensor> {
        let patch = center_patch(p, size)?.to_kind(kind).unsqueeze(0);
        Ok(tch::no_grad(|| cond.encode(&patch))?.squeeze_dim(0))
    };
    let (za, zb) = (encode(patch_a)?, encode(patch_b)?);
    let mut latents = Vec::with_capacity(steps);
    let mut slices = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        let z = &za * (1.0 - t) + &zb * t;
        let c = tch::no_grad(|| cond.condition_from_latent(&z))?;
        slices.push(slice_image(model, &TextureSource::Conditioned(c), args)?);
        latents.push(z);
    }
    Ok(Interpolation {
        latents: Tensor::stack(&latents, 0),
        strip: Tensor::cat(&slices, 2),
    })
}

pub fn cmd_interpolate(
    checkpoint: &Path,
    patch_a: &Path,
    patch_b: &Path,
    steps: usize,
    args: &SliceArgs,
    out: &Path,
) -> Result<Interpolation> {
    let state = load_checkpoint(checkpoint, Some(Mode::Conditional))?;
    let result = interpolate(&state.model, &load_image(patch_a)?, &load_image(patch_b)?, steps, args)?;
    save_image(&result.strip, out)?;
    Ok(result)
}

pub fn cmd_adapt(checkpoint: &Path, patch: &Path, config: &AdaptConfig, out: &Path) -> Result<AdaptResult> {
    let state = load_checkpoint(checkpoint, Some(Mode::Conditional))?;
    let patch = center_patch(&load_image(patch)?, state.model.patch_size())?;
    let result = adapt(&state.model, &patch, config)?;
    save_delta(&result.params, checkpoint, out)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub sifid: bool,
    /// Scores the reference against itself instead of synthesized slices.
    pub self_test: bool,
    pub count: usize,
    pub seed: u64,
    /// Parzen-window evaluation with this many generated and reference samples.
    pub likelihood: Option<usize>,
    /// Side of the downsampled pixel patches used as likelihood samples.
    pub likelihood_side: i64,
    pub bandwidths: Vec<f64>,
    /// `builtin`, a path, or `None` to consult the environment.
    pub extractor: Option<String>,
}

impl Default for EvaluateArgs {
    fn default() -> Self {
        EvaluateArgs {
            sifid: true,
            self_test: false,
            count: 50,
            seed: 0,
            likelihood: None,
            likelihood_side: 32,
            bandwidths: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0],
            extractor: None,
        }
    }
}

#[derive(Debug)]
pub struct EvaluationOutput {
    pub sifid: Option<MetricReport>,
    /// `(bandwidth, average log-likelihood)`
    pub likelihood: Option<(f64, f64)>,
}

/// Runs the requested metrics and writes `sifid.csv`, `likelihood.csv` and
/// `summary.txt` into `out_dir`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    reference: &Path,
    condition: Option<&Path>,
    delta: Option<&Path>,
    args: &EvaluateArgs,
    out_dir: &Path,
) -> Result<EvaluationOutput> {
    let reference_img = load_image(reference)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = String::new();
    let mut output = EvaluationOutput {
        sifid: None,
        likelihood: None,
    };
    if args.sifid {
        let extractor = ConvExtractor::resolve(args.extractor.as_deref())?;
        let report = if args.self_test {
            let values = (0..args.count.max(1))
                .map(|_| sifid(&reference_img, &reference_img, &extractor))
                .collect::<Result<Vec<_>>>()?;
            MetricReport::new("sifid", values)
        } else {
            let (state, source) = load_texture(checkpoint, condition, delta)?;
            match source {
                TextureSource::Adapted(_) => adapted_sifid(&state.model, &source, &reference_img, args, &extractor)?,
                _ => sifid_protocol(&state.model, &reference_img, args.count, args.seed, &extractor)?,
            }
        };
        let path = out_dir.join("sifid.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        summary.push_str(&report.summary());
        summary.push('\n');
        output.sifid = Some(report);
    }
    if let Some(count) = args.likelihood {
        let (state, source) = load_texture(checkpoint, condition, delta)?;
        let model = &state.model;
        let side = reference_img.size()[1].min(reference_img.size()[2]);
        let size = model.patch_size().min(side);
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(4);
        let truth = (0..count.max(2))
            .map(|_| image_sample_vector(&random_crop(&reference_img, size, &mut rng)?, args.likelihood_side))
            .collect::<Result<Vec<_>>>()?;
        let generated = (0..count.max(1) as u64)
            .map(|k| {
                let img = slice_image(
                    model,
                    &source,
                    &SliceArgs {
                        resolution: size as usize,
                        pixel_spacing: None,
                        seed: args.seed.wrapping_add(k),
                        plane: None,
                    },
                )?;
                image_sample_vector(&img.clamp(0.0, 1.0), args.likelihood_side)
            })
            .collect::<Result<Vec<_>>>()?;
        let h = bandwidth_grid_search(&truth, &args.bandwidths)?;
        let all = average_log_likelihood(&generated, &truth, h)?;
        let path = out_dir.join("likelihood.csv");
        std::fs::write(&path, format!("bandwidth,average_log_likelihood\n{h:e},{all:e}\n"))
            .map_err(|e| Error::io(&path, e))?;
        summary.push_str(&format!("average log-likelihood: {all:.6e} (bandwidth {h})\n"));
        output.likelihood = Some((h, all));
    }
    let path = out_dir.join("summary.txt");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(output)
}

fn adapted_sifid(
    model: &Model,
    source: &TextureSource,
    reference: &Tensor,
    args: &EvaluateArgs,
    extractor: &ConvExtractor,
) -> Result<MetricReport> {
    let s = reference.size();
    if s[1] != s[2] {
        return arg_err("reference must be square");
    }
    let values = (0..args.count as u64)
        .map(|k| {
            let seed = args.seed.wrapping_add(k);
            let img = slice_image(
                model,
                source,
                &SliceArgs {
                    resolution: s[1] as usize,
                    pixel_spacing: None,
                    seed,
                    plane: None,
                },
            )?;
            sifid(reference, &img.clamp(0.0, 1.0), extractor)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new("sifid", values))
}

/// Paths produced by a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<StepMetrics>,
}

/// Resolves exemplar paths relative to `base` and loads them.
pub fn load_exemplars(config: &TrainConfig, base: &Path) -> Result<Vec<Tensor>> {
    if config.exemplars.is_empty() {
        return Err(Error::Config("no exemplars listed".into()));
    }
    if config.mode == Mode::Single && config.exemplars.len() != 1 {
        return Err(Error::Config(format!(
            "single-exemplar mode takes exactly one exemplar, got {}",
            config.exemplars.len()
        )));
    }
    config
        .exemplars
        .iter()
        .map(|p| {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            let img = load_image(&path)?;
            let s = img.size();
            if s[1] < config.patch_size || s[2] < config.patch_size {
                return Err(Error::Config(format!(
                    "exemplar {} is {}x{}, smaller than the {}-pixel patch",
                    path.display(),
                    s[2],
                    s[1],
                    config.patch_size
                )));
            }
            Ok(img)
        })
        .collect()
}

/// Runs training for the configured number of iterations, writing periodic
/// checkpoints, `metrics.csv` and `final.ggan` into the output directory.
pub fn run_training(config: TrainConfig, exemplars: &[Tensor], on_step: &mut dyn FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = config.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = MetricsWriter::new(file, true)?;
    let iterations = config.iterations();
    let every = config.checkpoint_every;
    let mut state = TrainState::new(config)?;
    let mut last = None;
    while state.iteration < iterations {
        match train_step(&mut state, exemplars) {
            Ok(m) => {
                metrics.push(&m)?;
                on_step(&m);
                last = Some(m);
            }
            Err(Error::NonFinite(reason)) => {
                let snapshot = out_dir.join("abort_snapshot.ggan");
                save_checkpoint(&state, &snapshot)?;
                return Err(Error::TrainingAborted { snapshot, reason });
            }
            Err(e) => return Err(e),
        }
        if state.iteration % every == 0 && state.iteration < iterations {
            save_checkpoint(&state, &out_dir.join(format!("ckpt_{:08}.ggan", state.iteration)))?;
        }
    }
    let final_checkpoint = out_dir.join("final.ggan");
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics: metrics_path,
        last,
    })
}

/// Reads and validates a config file, applying an optional seed override.
pub fn read_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = TrainConfig::from_toml(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    if config.output_dir.is_relative() {
        config.output_dir = base.join(&config.output_dir);
    }
    Ok(config)
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>, on_step: &mut dyn FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    let config = read_config(config_path, seed)?;
    let exemplars = load_exemplars(&config, config_path.parent().unwrap_or(Path::new(".")))?;
    run_training(config, &exemplars, on_step)
}
