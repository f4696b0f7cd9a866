use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use solidtex::adaptation::{AdaptConfig, AdaptOptimizer};
use solidtex::commands::{
    cmd_adapt, cmd_evaluate, cmd_interpolate, cmd_slice, cmd_texture_points, cmd_train, cmd_volume, EvaluateArgs,
    SliceArgs, VolumeArgs,
};
use solidtex::noise_field::Coordinate3;
use solidtex::slicer::{Axis, SliceMode, SlicePlane};
use solidtex::Error;

/// Solid texture synthesis: train point-wise texture samplers from 2D
/// exemplars and export slices, volumes and colored points.
#[derive(Parser, Debug)]
#[command(name = "solidtex", version)]
struct Cli {
    /// Seed for noise instances, planes and sampling. For `train` it
    /// overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training configuration (TOML). Required by `train`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Intra-op threads; 1 makes every command byte-reproducible.
    #[arg(long, global = true)]
    threads: Option<i32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from the exemplars listed in --config.
    Train {
        /// Print metrics every this many iterations.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Render one planar slice to a PNG.
    Slice {
        #[command(flatten)]
        texture: TextureArgs,
        #[command(flatten)]
        plane: PlaneArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Sample the texture on a regular lattice into a GGVX volume.
    Volume {
        #[command(flatten)]
        texture: TextureArgs,
        /// Voxel counts along x, y, z.
        #[arg(long, value_parser = parse_triple::<u32>, default_value = "64,64,64")]
        dims: [u32; 3],
        /// World-space size along x, y, z.
        #[arg(long, value_parser = parse_triple::<f64>, default_value = "1,1,1")]
        extent: [f64; 3],
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Color arbitrary 3D points read from a text file (`x y z` per line).
    TexturePoints {
        #[command(flatten)]
        texture: TextureArgs,
        #[arg(long)]
        points: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render slices along a straight line between two exemplars' latent codes.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[command(flatten)]
        plane: PlaneArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fine-tune transforms, modulation and noise injection of a conditional
    /// model on a new exemplar, writing a delta file.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        /// Restrict slices to planes containing this axis.
        #[arg(long, value_enum)]
        grain_axis: Option<AxisArg>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score a model against a reference image.
    Evaluate {
        #[command(flatten)]
        texture: TextureArgs,
        #[arg(long)]
        reference: PathBuf,
        /// Number of synthesized slices scored with SIFID.
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Skip SIFID.
        #[arg(long)]
        no_sifid: bool,
        /// Score the reference against itself (extractor sanity check).
        #[arg(long)]
        self_test: bool,
        /// Also compute the Parzen-window log-likelihood with this many samples.
        #[arg(long)]
        likelihood: Option<usize>,
        #[arg(long, default_value_t = 32)]
        likelihood_side: i64,
        /// Candidate Parzen bandwidths.
        #[arg(long, value_delimiter = ',')]
        bandwidths: Option<Vec<f64>>,
        /// `builtin` or a weights file; defaults to the environment setting.
        #[arg(long)]
        extractor: Option<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TextureArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Exemplar patch conditioning a conditional model.
    #[arg(long)]
    condition: Option<PathBuf>,
    /// Delta file from `adapt`, applied to a conditional model.
    #[arg(long, conflicts_with = "condition")]
    delta: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlaneArgs {
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// World units per pixel; defaults to the training spacing.
    #[arg(long)]
    pixel_spacing: Option<f64>,
    /// Plane origin `x,y,z`; a seeded random plane when omitted.
    #[arg(long, value_parser = parse_triple::<f64>, requires_all = ["u", "v"])]
    origin: Option<[f64; 3]>,
    /// First in-plane axis `x,y,z`.
    #[arg(long, value_parser = parse_triple::<f64>, requires = "origin")]
    u: Option<[f64; 3]>,
    /// Second in-plane axis `x,y,z`.
    #[arg(long, value_parser = parse_triple::<f64>, requires = "origin")]
    v: Option<[f64; 3]>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    X,
    Y,
    Z,
}

/// Parses `a,b,c`.
fn parse_triple<T: std::str::FromStr + Copy + Default>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut out = [T::default(); 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a valid number"))?;
    }
    Ok(out)
}

impl PlaneArgs {
    fn slice_args(&self, seed: u64) -> solidtex::Result<SliceArgs> {
        let plane = match (&self.origin, &self.u, &self.v) {
            (Some(o), Some(u), Some(v)) => Some(SlicePlane::new(Coordinate3::new(o[0], o[1], o[2]), *u, *v)?),
            _ => None,
        };
        Ok(SliceArgs {
            resolution: self.resolution,
            pixel_spacing: self.pixel_spacing,
            seed,
            plane,
        })
    }
}

fn run(cli: Cli) -> solidtex::Result<()> {
    if let Some(n) = cli.threads {
        if n < 1 {
            return Err(Error::Argument("--threads must be at least 1".into()));
        }
        tch::set_num_threads(n);
        tch::set_num_interop_threads(n);
    }
    let seed = cli.seed.unwrap_or(0);
    if cli.config.is_some() && !matches!(cli.command, Command::Train { .. }) {
        return Err(Error::Argument("--config is only used by `train`".into()));
    }
    match cli.command {
        Command::Train { log_every } => {
            let config = cli
                .config
                .ok_or_else(|| Error::Config("`train` needs --config <file.toml>".into()))?;
            let every = log_every.max(1);
            let outcome = cmd_train(&config, cli.seed, &mut |m| {
                if m.iteration % every == 0 || m.iteration == 1 {
                    log::info!(
                        "iter {} loss_d {:.4} loss_g {:.4} style {:.4} w {:.4}",
                        m.iteration,
                        m.loss_d,
                        m.loss_g,
                        m.loss_style,
                        m.wasserstein
                    );
                }
            })?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Slice { texture, plane, output } => {
            let args = plane.slice_args(seed)?;
            let _ = cmd_slice(
                &texture.checkpoint,
                texture.condition.as_deref(),
                texture.delta.as_deref(),
                &args,
                &output,
            )?;
        }
        Command::Volume {
            texture,
            dims,
            extent,
            output,
        } => {
            let args = VolumeArgs {
                dims,
                extent,
                seed,
            };
            cmd_volume(
                &texture.checkpoint,
                texture.condition.as_deref(),
                texture.delta.as_deref(),
                &args,
                &output,
            )?;
        }
        Command::TexturePoints { texture, points, output } => {
            let n = cmd_texture_points(
                &texture.checkpoint,
                texture.condition.as_deref(),
                texture.delta.as_deref(),
                &points,
                seed,
                &output,
            )?;
            log::info!("colored {n} points");
        }
        Command::Interpolate {
            checkpoint,
            from,
            to,
            steps,
            plane,
            output,
        } => {
            let args = plane.slice_args(seed)?;
            cmd_interpolate(&checkpoint, &from, &to, steps, &args, &output)?;
        }
        Command::Adapt {
            checkpoint,
            exemplar,
            iterations,
            lr,
            optimizer,
            batch_size,
            probes,
            grain_axis,
            output,
        } => {
            let config = AdaptConfig {
                iterations,
                lr,
                optimizer: match optimizer {
                    OptimizerArg::Adam => AdaptOptimizer::Adam,
                    OptimizerArg::Sgd => AdaptOptimizer::Sgd,
                },
                batch_size,
                probe_count: probes,
                slice_mode: match grain_axis {
                    None => SliceMode::Isotropic,
                    Some(a) => SliceMode::Anisotropic {
                        axis: match a {
                            AxisArg::X => Axis::X,
                            AxisArg::Y => Axis::Y,
                            AxisArg::Z => Axis::Z,
                        },
                    },
                },
                seed,
                ..AdaptConfig::default()
            };
            let r = cmd_adapt(&checkpoint, &exemplar, &config, &output)?;
            println!("probe style loss {:.6e} -> {:.6e}", r.initial_probe, r.final_probe);
        }
        Command::Evaluate {
            texture,
            reference,
            count,
            no_sifid,
            self_test,
            likelihood,
            likelihood_side,
            bandwidths,
            extractor,
            output,
        } => {
            let mut args = EvaluateArgs {
                sifid: !no_sifid,
                self_test,
                count,
                seed,
                likelihood,
                likelihood_side,
                extractor,
                ..EvaluateArgs::default()
            };
            if let Some(b) = bandwidths {
                args.bandwidths = b;
            }
            cmd_evaluate(
                &texture.checkpoint,
                &reference,
                texture.condition.as_deref(),
                texture.delta.as_deref(),
                &args,
                &output,
            )?;
            let summary = output.join("summary.txt");
            print!("{}", std::fs::read_to_string(&summary).map_err(|e| Error::Io { path: summary, source: e })?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::TrainingAborted { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
