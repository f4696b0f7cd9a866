//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use solidtex::adaptation::{adapt, AdaptConfig};
use solidtex::commands::{
    cmd_adapt, cmd_evaluate, cmd_interpolate, cmd_slice, cmd_texture_points, cmd_train, cmd_volume, EvaluateArgs,
    SliceArgs, VolumeArgs,
};
use solidtex::evaluation::{sifid, sifid_protocol, ConvExtractor};
use solidtex::io::{band_limited_noise, quantize, save_image, write_points};
use solidtex::losses::{gradient_penalty, gram, style_loss};
use solidtex::noise_field::{coords_tensor, Coordinate3};
use solidtex::sampler::Modulation;
use solidtex::slicer::{cross, plane_to_coords, random_plane, SliceMode, SlicePlane, SliceSpec};
use solidtex::trainer::{render_batch, train_step, Mode, TrainConfig, TrainState};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tch::{Device, Kind, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: u32, name: &str, o: &Outcome, elapsed: Duration) -> bool {
    println!(
        "criterion {id:>2} {} {name}: {} [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gram_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, m) = (rng.gen_range(1..=8usize), rng.gen_range(1..=32usize));
        let v: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = gram(&Tensor::from_slice(&v).reshape([n as i64, m as i64])).unwrap();
        let got: Vec<f64> = Vec::try_from(g.flatten(0, -1)).unwrap();
        let mut want = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..m {
                    want[i * n + j] += v[i * m + k] * v[j * m + k];
                }
            }
        }
        worst = worst.max(max_abs(&got, &want));
    }
    let t = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && t < 1.0, format!("max err {worst:.2e}, {t:.3} s for 100 maps"))
}

fn style_hand_value() -> Outcome {
    let opts = (Kind::Double, Device::Cpu);
    let real = Tensor::from_slice(&[1.0f64, 1.0]).reshape([1, 1, 1, 2]);
    let fake = Tensor::zeros([1, 1, 1, 2], opts);
    let v = style_loss(&[real], &[fake]).unwrap().value();
    outcome(v == 0.125, format!("L_style = {v}"))
}

fn penalty_analytics() -> Outcome {
    let opts = (Kind::Double, Device::Cpu);
    tch::manual_seed(3);
    let real = Tensor::randn([4, 3, 8, 8], opts);
    let fake = Tensor::randn([4, 3, 8, 8], opts);
    let g = Tensor::randn([1, 3, 8, 8], opts);
    let g = &g / g.norm();
    let t = [0.1, 0.4, 0.6, 0.95];
    let linear = |x: &Tensor| Ok((x * &g).flatten(1, -1).sum_dim_intlist([1].as_slice(), false, None::<Kind>));
    let zero = |x: &Tensor| Ok(x.flatten(1, -1).sum_dim_intlist([1].as_slice(), false, None::<Kind>) * 0.0);
    let a = gradient_penalty(&real, &fake, &t, linear).unwrap().double_value(&[]);
    let b = gradient_penalty(&real, &fake, &t, zero).unwrap().double_value(&[]);
    outcome(a.abs() <= 1e-6 && (b - 1.0).abs() <= 1e-6, format!("linear {a:.2e}, zero {b:.9}"))
}

fn finite_differences() -> Outcome {
    let start = Instant::now();
    let state = common::f64_state(Mode::Single);
    let planes = common::planes(2, 40);
    let ex = common::exemplar(48, 4).to_kind(Kind::Double);
    let real = Tensor::stack(&[ex.narrow(1, 0, 16).narrow(2, 0, 16), ex.narrow(1, 20, 16).narrow(2, 9, 16)], 0);
    let style = || common::generator_objectives(&state, &planes, &real, None).0;
    let lg = || common::generator_objectives(&state, &planes, &real, None).1;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, f, seed) in [("L_style", &style as &dyn Fn() -> Tensor, 41), ("L_G", &lg, 42)] {
        let r = common::finite_difference_check(&state.model.generator_params, f, 100, 1e-8, 1e-3, 1e-9, seed);
        worst = worst.max(r.worst_relative);
        checked += r.checked;
        failures.extend(r.failures.into_iter().map(|f| format!("{name} {f}")));
    }
    let t = start.elapsed().as_secs_f64();
    let mut detail = format!("{checked} points, worst relative {worst:.2e}, {t:.1} s");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    outcome(failures.is_empty() && t < 120.0, detail)
}

fn bin_isolation() -> Outcome {
    let state = common::f64_state(Mode::Single);
    let s = &state.model.sampler;
    let bin = s.bin_size() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    tch::manual_seed(55);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let l = rng.gen_range(0..4i64);
        let noise = Tensor::randn([32, s.octaves() as i64], (Kind::Double, Device::Cpu));
        let bumped = noise.copy();
        let _ = bumped.narrow(1, l * bin, bin).f_add_scalar_(rng.gen_range(0.05..3.0)).unwrap();
        let a = s.trace(&noise, None, None).unwrap();
        let b = s.trace(&bumped, None, None).unwrap();
        for k in 0..l as usize {
            let d = (&a.hidden[k] - &b.hidden[k]).abs().max().double_value(&[]);
            worst = worst.max(d);
            if d != 0.0 {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("50 trials, max diff in earlier layers {worst:e}"))
}

fn modulation_identity() -> Outcome {
    let state = TrainState::new(common::tiny_config(Mode::Conditional)).unwrap();
    let model = &state.model;
    let s = &model.sampler;
    tch::manual_seed(6);
    let noise = Tensor::randn([256, s.octaves() as i64], (Kind::Float, Device::Cpu));
    let plain = s.forward_batch(&noise, None).unwrap();
    let modulated = s.forward_batch(&noise, Some(&Modulation::identity(s.width(), Kind::Float))).unwrap();
    // freshly initialized affine heads produce exactly gamma = 1, delta = 0
    let cond = model.conditioner().unwrap().condition(&common::exemplar(16, 2)).unwrap();
    let coords: Vec<Coordinate3> = (0..256)
        .map(|i| Coordinate3::new(i as f64 * 0.031, i as f64 * -0.017, 0.5 + i as f64 * 0.007))
        .collect();
    let c = coords_tensor(&coords, Kind::Float);
    let conditioned = model.conditioned_field(&model.bank, &cond).unwrap().evaluate_detached(&c).unwrap();
    let unconditioned = model
        .custom_field(&model.bank, cond.transforms.tensor().shallow_clone(), None, None)
        .evaluate_detached(&c)
        .unwrap();
    let a = plain.equal(&modulated);
    let b = conditioned.equal(&unconditioned);
    outcome(a && b, format!("sampler bit-identical: {a}, conditioned field at init bit-identical: {b}"))
}

fn slice_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spec = SliceSpec {
        resolution: 8,
        pixel_spacing: 0.13,
    };
    let (bands, sectors) = (6usize, 8usize);
    let mut counts = vec![0u64; bands * sectors];
    let mut worst_ortho = 0.0f64;
    let mut worst_plane = 0.0f64;
    let n = 10_000;
    for _ in 0..n {
        let p = random_plane(SliceMode::Isotropic, &mut rng);
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        worst_ortho = worst_ortho
            .max((dot(p.u, p.u) - 1.0).abs())
            .max((dot(p.v, p.v) - 1.0).abs())
            .max(dot(p.u, p.v).abs());
        let normal = cross(p.u, p.v);
        let o = p.origin.to_array();
        for c in plane_to_coords(&p, &spec).unwrap() {
            let d = c.to_array();
            worst_plane = worst_plane.max(dot([d[0] - o[0], d[1] - o[1], d[2] - o[2]], normal).abs());
        }
        // z bands of equal height are equal-area on the sphere
        let band = (((normal[2] + 1.0) / 2.0 * bands as f64) as usize).min(bands - 1);
        let phi = normal[1].atan2(normal[0]) + std::f64::consts::PI;
        let sector = ((phi / std::f64::consts::TAU * sectors as f64) as usize).min(sectors - 1);
        counts[band * sectors + sector] += 1;
    }
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat);
    outcome(
        worst_ortho <= 1e-6 && worst_plane <= 1e-6 && p > 0.01,
        format!("orthonormality {worst_ortho:.1e}, plane equation {worst_plane:.1e}, chi-square p = {p:.3}"),
    )
}

fn adaptation_freeze() -> Outcome {
    let mut state = TrainState::new(common::tiny_config(Mode::Conditional)).unwrap();
    let data: Vec<Tensor> = (0..2).map(|s| common::exemplar(32, s)).collect();
    for _ in 0..3 {
        train_step(&mut state, &data).unwrap();
    }
    let g0 = state.model.generator_params.record_hashes();
    let d0 = state.model.critic_params.record_hashes();
    let config = AdaptConfig {
        iterations: 100,
        batch_size: 2,
        probe_count: 4,
        ..AdaptConfig::default()
    };
    let r = adapt(&state.model, &common::exemplar(16, 9), &config).unwrap();
    let frozen = state.model.generator_params.record_hashes() == g0 && state.model.critic_params.record_hashes() == d0;
    outcome(
        frozen && r.final_probe < r.initial_probe,
        format!(
            "non-adapted records unchanged: {frozen}, probe L_style {:.4e} -> {:.4e}",
            r.initial_probe, r.final_probe
        ),
    )
}

fn sifid_self_distance() -> Outcome {
    let ex = ConvExtractor::builtin();
    let opts = (Kind::Float, Device::Cpu);
    tch::manual_seed(9);
    let mut imgs: Vec<Tensor> = (0..7).map(|s| band_limited_noise(48, 100 + s).unwrap()).collect();
    imgs.push(Tensor::rand([3, 48, 48], opts));
    imgs.push(Tensor::linspace(0.0, 1.0, 48, opts).view([1, 48, 1]).expand([3, 48, 48], true).contiguous());
    imgs.push(Tensor::rand([3, 48, 48], opts).round());
    let mut worst_self = 0.0f64;
    let mut worst_sym = 0.0f64;
    for (i, x) in imgs.iter().enumerate() {
        worst_self = worst_self.max(sifid(x, x, &ex).unwrap().abs());
        let y = &imgs[(i + 1) % imgs.len()];
        let (ab, ba) = (sifid(x, y, &ex).unwrap(), sifid(y, x, &ex).unwrap());
        worst_sym = worst_sym.max((ab - ba).abs() / ab.abs().max(f64::MIN_POSITIVE));
    }
    outcome(
        worst_self <= 1e-6 && worst_sym <= 1e-6,
        format!("max self-distance {worst_self:.2e}, max relative asymmetry {worst_sym:.2e}"),
    )
}

fn smoke_config() -> TrainConfig {
    let mut c = TrainConfig::new(Mode::Single);
    c.octaves = Some(8);
    c.hidden_width = 64;
    c.patch_size = 64;
    c.critic_width_divisor = 4;
    c.batch_size = 8;
    c.alpha = 0.1;
    c.beta = 1.0;
    c.iterations = Some(2000);
    c.seed = 2024;
    c
}

fn mean_sifid(model: &solidtex::model::Model, exemplar: &Tensor, ex: &ConvExtractor) -> f64 {
    sifid_protocol(model, exemplar, 4, 31, ex).unwrap().mean()
}

/// Runs the desk-scale training. Returns the outcome and the trained state.
fn training_smoke() -> (Outcome, TrainState) {
    let config = smoke_config();
    let exemplar = band_limited_noise(128, 2024).unwrap();
    let ex = ConvExtractor::builtin();
    let untrained = TrainState::new(config.clone()).unwrap();
    let sifid_before = mean_sifid(&untrained.model, &exemplar, &ex);
    let mut state = TrainState::new(config).unwrap();
    let data = [exemplar.shallow_clone()];
    let mut style = Vec::with_capacity(2000);
    let start = Instant::now();
    while state.iteration < 2000 {
        let m = train_step(&mut state, &data).unwrap();
        style.push(m.loss_style);
        if m.iteration % 250 == 0 {
            eprintln!(
                "  training iteration {} ({:.0} s): L_style {:.4}, W {:.3}",
                m.iteration,
                start.elapsed().as_secs_f64(),
                m.loss_style,
                m.wasserstein
            );
        }
    }
    let window = 10;
    let early: f64 = style[..window].iter().sum::<f64>() / window as f64;
    let late: f64 = style[style.len() - window..].iter().sum::<f64>() / window as f64;
    let sifid_after = mean_sifid(&state.model, &exemplar, &ex);
    let style_ok = late <= 0.5 * early;
    let sifid_ok = sifid_after * 2.0 <= sifid_before;

    // same critic, same planes and crops: how much of the style gap closed
    let planes = common::planes(8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let crops: Vec<Tensor> = (0..8)
        .map(|_| solidtex::trainer::random_crop(&exemplar, 64, &mut rng).unwrap())
        .collect();
    let real = Tensor::stack(&crops, 0);
    let spec = state.config.slice_spec();
    let fixed_critic_style = |model: &solidtex::model::Model| {
        tch::no_grad(|| {
            let fake = render_batch(&model.single_field(&model.bank).unwrap(), &planes, &spec).unwrap();
            let (_, rf) = state.model.critic.forward(&(&real * 2.0 - 1.0)).unwrap();
            let (_, ff) = state.model.critic.forward(&(fake * 2.0 - 1.0)).unwrap();
            style_loss(&rf, &ff).unwrap().value()
        })
    };
    let frozen_before = fixed_critic_style(&untrained.model);
    let frozen_after = fixed_critic_style(&state.model);

    let detail = format!(
        "L_style 10-iteration mean {early:.4} at start vs {late:.4} at end (needs <= {:.4}: {}); \
         SIFID untrained {sifid_before:.3} vs trained {sifid_after:.3} (needs 2x: {}); \
         under the final critic L_style untrained {frozen_before:.4} vs trained {frozen_after:.4}; {:.0} s",
        0.5 * early,
        if style_ok { "met" } else { "not met" },
        if sifid_ok { "met" } else { "not met" },
        start.elapsed().as_secs_f64()
    );
    (outcome(style_ok && sifid_ok, detail), state)
}

fn shared_line_consistency(state: &TrainState) -> Outcome {
    let model = &state.model;
    let field = model.single_field(&model.bank).unwrap();
    let spec = SliceSpec {
        resolution: 128,
        pixel_spacing: model.pixel_spacing,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut mismatched = 0usize;
    let mut differing_images = 0;
    let pairs = 20;
    for _ in 0..pairs {
        let a = random_plane(SliceMode::Isotropic, &mut rng);
        // rotate about the shared line through the origin along `u`
        let theta = rng.gen_range(0.3..2.8f64);
        let n = cross(a.u, a.v);
        let v2: [f64; 3] = std::array::from_fn(|k| theta.cos() * a.v[k] + theta.sin() * n[k]);
        let b = SlicePlane::new(a.origin, a.u, v2).unwrap();
        let img = |p: &SlicePlane| tch::no_grad(|| render_batch(&field, &[*p], &spec)).unwrap().squeeze_dim(0);
        let (ia, ib) = (img(&a), img(&b));
        let row = |t: &Tensor| quantize(&t.narrow(1, 64, 1)).unwrap().2;
        let (ra, rb) = (row(&ia), row(&ib));
        mismatched += ra.iter().zip(&rb).filter(|(x, y)| x != y).count();
        if quantize(&ia).unwrap().2 != quantize(&ib).unwrap().2 {
            differing_images += 1;
        }
    }
    outcome(
        mismatched == 0 && differing_images == pairs,
        format!("{pairs} plane pairs: {mismatched} differing 8-bit values on the shared line; {differing_images} pairs differ off the line"),
    )
}

fn tiny_train_config(mode: Mode, dir: &Path) -> std::path::PathBuf {
    let mut c = common::tiny_config(mode);
    c.exemplars = vec!["a.png".into(), "b.png".into()];
    if mode == Mode::Single {
        c.exemplars.truncate(1);
    }
    c.iterations = Some(3);
    c.checkpoint_every = 2;
    c.output_dir = format!("run_{mode}").into();
    let path = dir.join(format!("{mode}.toml"));
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

/// Runs every command once in `dir` and returns the produced files.
fn run_all_commands(dir: &Path) -> Vec<(String, Vec<u8>)> {
    save_image(&band_limited_noise(32, 1).unwrap(), &dir.join("a.png")).unwrap();
    save_image(&band_limited_noise(32, 2).unwrap(), &dir.join("b.png")).unwrap();
    let single = cmd_train(&tiny_train_config(Mode::Single, dir), Some(5), &mut |_| {})
        .unwrap()
        .final_checkpoint;
    let cond = cmd_train(&tiny_train_config(Mode::Conditional, dir), Some(5), &mut |_| {})
        .unwrap()
        .final_checkpoint;
    let slice = SliceArgs {
        resolution: 24,
        pixel_spacing: None,
        seed: 3,
        plane: None,
    };
    let _ = cmd_slice(&single, None, None, &slice, &dir.join("slice.png")).unwrap();
    let _ = cmd_slice(&cond, Some(&dir.join("a.png")), None, &slice, &dir.join("slice_cond.png")).unwrap();
    let vol = VolumeArgs {
        dims: [6, 5, 4],
        extent: [1.0, 1.0, 0.5],
        seed: 3,
    };
    cmd_volume(&single, None, None, &vol, &dir.join("volume.ggvx")).unwrap();
    let pts: Vec<Coordinate3> = (0..10).map(|i| Coordinate3::new(i as f64 * 0.1, 0.3, -(i as f64))).collect();
    let mut buf = Vec::new();
    write_points(&pts, &mut buf).unwrap();
    std::fs::write(dir.join("pts.txt"), buf).unwrap();
    cmd_texture_points(&single, None, None, &dir.join("pts.txt"), 3, &dir.join("points.csv")).unwrap();
    cmd_interpolate(&cond, &dir.join("a.png"), &dir.join("b.png"), 4, &slice, &dir.join("strip.png")).unwrap();
    let adapt_cfg = AdaptConfig {
        iterations: 5,
        batch_size: 2,
        probe_count: 2,
        seed: 3,
        ..AdaptConfig::default()
    };
    cmd_adapt(&cond, &dir.join("b.png"), &adapt_cfg, &dir.join("delta.ggan")).unwrap();
    let _ = cmd_slice(&cond, None, Some(&dir.join("delta.ggan")), &slice, &dir.join("slice_delta.png")).unwrap();
    let eval = EvaluateArgs {
        count: 2,
        seed: 3,
        likelihood: Some(4),
        likelihood_side: 4,
        extractor: Some("builtin".into()),
        ..EvaluateArgs::default()
    };
    cmd_evaluate(&single, &dir.join("a.png"), None, None, &eval, &dir.join("eval")).unwrap();

    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    tch::set_num_threads(1);
    // both runs use the same directory so recorded paths and parent hashes match
    let dir = tempfile::tempdir().unwrap();
    let fa = run_all_commands(dir.path());
    for e in std::fs::read_dir(dir.path()).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            std::fs::remove_dir_all(&p).unwrap();
        } else {
            std::fs::remove_file(&p).unwrap();
        }
    }
    let fb = run_all_commands(dir.path());
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} output files compared across two runs, differing: {differing:?} ({})", names.len(), names.join(", ")),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn main() {
    let mut all = true;
    let quick: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gram oracle equivalence", gram_oracle),
        (2, "style-loss hand value", style_hand_value),
        (3, "gradient-penalty analytics", penalty_analytics),
        (4, "finite-difference suite", finite_differences),
        (5, "noise-bin isolation", bin_isolation),
        (6, "modulation identity", modulation_identity),
        (7, "slice geometry", slice_geometry),
        (8, "adaptation freeze", adaptation_freeze),
        (9, "SIFID self-distance", sifid_self_distance),
    ];
    for (id, name, f) in quick {
        let (o, t) = timed(f);
        all &= report(id, name, &o, t);
    }

    let ((o, trained), t) = timed(training_smoke);
    all &= report(10, "desk-scale training smoke test", &o, t);
    let (o, t) = timed(|| shared_line_consistency(&trained));
    all &= report(11, "3D consistency on shared lines", &o, t);
    println!("criterion 12 SKIP full-scale SIFID reproduction: not gated (needs multi-hour training on unreleased exemplars)");
    let (o, t) = timed(determinism);
    all &= report(13, "command determinism", &o, t);

    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all gated criteria passed");
}
