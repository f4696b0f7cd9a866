//! End-to-end behavior of the command functions on tiny checkpoints.

mod common;

use common::{exemplar, tiny_config};
use solidtex::checkpoint::save_checkpoint;
use solidtex::commands::{
    cmd_evaluate, cmd_interpolate, cmd_slice, cmd_texture_points, cmd_train, cmd_volume, color_points, interpolate,
    load_texture, run_training, slice_image, write_texture_volume, EvaluateArgs, SliceArgs, TextureSource, VolumeArgs,
};
use solidtex::io::{read_volume, save_image, write_points};
use solidtex::noise_field::Coordinate3;
use solidtex::slicer::{axis_plane, plane_to_coords, Axis, SlicePlane, SliceSpec};
use solidtex::trainer::{train_step, Mode, TrainState};
use solidtex::Error;
use std::path::{Path, PathBuf};
use tch::Tensor;

fn checkpoint(dir: &Path, mode: Mode) -> PathBuf {
    let mut state = TrainState::new(tiny_config(mode)).unwrap();
    let data = vec![exemplar(32, 0), exemplar(32, 1)];
    train_step(&mut state, &data).unwrap();
    let path = dir.join(format!("{mode:?}.ggan"));
    save_checkpoint(&state, &path).unwrap();
    path
}

fn args(resolution: usize, plane: Option<SlicePlane>) -> SliceArgs {
    SliceArgs {
        resolution,
        pixel_spacing: None,
        seed: 11,
        plane,
    }
}

#[test]
fn single_voxel_matches_single_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let (state, source) = load_texture(&ckpt, None, None).unwrap();
    let origin = Coordinate3::new(0.0, 0.0, 0.0);
    let pixel = slice_image(&state.model, &source, &args(1, Some(axis_plane(Axis::Z, 0.0, origin)))).unwrap();
    let mut buf = Vec::new();
    let vargs = VolumeArgs {
        dims: [1, 1, 1],
        extent: [1.0; 3],
        seed: 11,
    };
    write_texture_volume(&state.model, &source, &vargs, &mut buf).unwrap();
    let voxel: Vec<f32> = buf[44..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let px: Vec<f32> = Vec::try_from(pixel.flatten(0, -1)).unwrap();
    assert_eq!(voxel, px);
}

#[test]
fn axis_slice_matches_volume_slab() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let out = dir.path().join("v.ggvx");
    let s = 1.0 / 16.0;
    let vargs = VolumeArgs {
        dims: [8, 8, 2],
        extent: [8.0 * s, 8.0 * s, 0.5],
        seed: 11,
    };
    cmd_volume(&ckpt, None, None, &vargs, &out).unwrap();
    let (_, values) = read_volume(&out).unwrap();
    let (state, source) = load_texture(&ckpt, None, None).unwrap();
    let plane = axis_plane(Axis::Z, 0.0, Coordinate3::new(4.0 * s, 4.0 * s, 0.25));
    let img = slice_image(&state.model, &source, &args(8, Some(plane))).unwrap();
    let slab = Tensor::from_slice(&values[192..]).reshape([8, 8, 3]).permute([2, 0, 1]);
    let diff = (img - slab).abs().max().double_value(&[]);
    assert!(diff <= 1e-5, "{diff}");
}

#[test]
fn texture_points_match_slice_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let (state, source) = load_texture(&ckpt, None, None).unwrap();
    let plane = axis_plane(Axis::X, 0.3, Coordinate3::new(0.2, 0.4, -1.0));
    let img = slice_image(&state.model, &source, &args(6, Some(plane))).unwrap();
    let pts = plane_to_coords(&plane, &SliceSpec { resolution: 6, pixel_spacing: state.model.pixel_spacing }).unwrap();
    let rgb = color_points(&state.model, &source, &pts, 11).unwrap();
    assert!(rgb.equal(&img.permute([1, 2, 0]).reshape([36, 3])));

    let points_path = dir.path().join("pts.txt");
    let mut buf = Vec::new();
    write_points(&pts, &mut buf).unwrap();
    std::fs::write(&points_path, buf).unwrap();
    let out = dir.path().join("pts.csv");
    assert_eq!(cmd_texture_points(&ckpt, None, None, &points_path, 11, &out).unwrap(), 36);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x,y,z,r,g,b\n"));
    assert_eq!(text.lines().count(), 37);
}

#[test]
fn planes_sharing_a_line_agree_on_it() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let (state, source) = load_texture(&ckpt, None, None).unwrap();
    let o = Coordinate3::new(0.37, 0.11, 0.59);
    let u = [0.6, 0.0, 0.8];
    let a = SlicePlane::new(o, u, [0.0, 1.0, 0.0]).unwrap();
    let b = SlicePlane::new(o, u, [0.8, 0.0, -0.6]).unwrap();
    let ia = slice_image(&state.model, &source, &args(16, Some(a))).unwrap();
    let ib = slice_image(&state.model, &source, &args(16, Some(b))).unwrap();
    // row `res / 2` lies on the shared line through the origin along `u`
    assert!(ia.select(1, 8).equal(&ib.select(1, 8)));
    assert!(!ia.equal(&ib));
}

#[test]
fn large_slices_render() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let out = dir.path().join("big.png");
    let img = cmd_slice(&ckpt, None, None, &args(512, None), &out).unwrap();
    assert_eq!(img.size(), vec![3, 512, 512]);
    assert!(out.exists());
    assert!(cmd_slice(&ckpt, None, None, &args(0, None), &out).is_err());
}

#[test]
fn seeds_select_texture_instances() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let (state, source) = load_texture(&ckpt, None, None).unwrap();
    let plane = Some(axis_plane(Axis::Z, 0.0, Coordinate3::new(0.5, 0.5, 0.5)));
    let mut a = args(8, plane);
    let x = slice_image(&state.model, &source, &a).unwrap();
    assert!(x.equal(&slice_image(&state.model, &source, &a).unwrap()));
    a.seed = 12;
    assert!(!x.equal(&slice_image(&state.model, &source, &a).unwrap()));
}

#[test]
fn interpolation_endpoints_and_linearity() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Conditional);
    let pa = dir.path().join("a.png");
    let pb = dir.path().join("b.png");
    save_image(&exemplar(20, 3), &pa).unwrap();
    save_image(&exemplar(20, 4), &pb).unwrap();
    let plane = Some(axis_plane(Axis::Y, 0.0, Coordinate3::new(0.1, 0.2, 0.3)));
    let out = dir.path().join("strip.png");
    let r = cmd_interpolate(&ckpt, &pa, &pb, 5, &args(8, plane), &out).unwrap();
    assert_eq!(r.strip.size(), vec![3, 8, 40]);
    let z = &r.latents;
    let mid = (z.get(0) + z.get(4)) * 0.5;
    assert!((z.get(2) - mid).abs().max().double_value(&[]) <= 1e-6);

    let (state, source) = load_texture(&ckpt, Some(&pa), None).unwrap();
    let first = slice_image(&state.model, &source, &args(8, plane)).unwrap();
    assert!((r.strip.narrow(2, 0, 8) - first).abs().max().double_value(&[]) <= 1e-6);
    let (_, source_b) = load_texture(&ckpt, Some(&pb), None).unwrap();
    let last = slice_image(&state.model, &source_b, &args(8, plane)).unwrap();
    assert!((r.strip.narrow(2, 32, 8) - last).abs().max().double_value(&[]) <= 1e-6);

    let a = solidtex::io::load_image(&pa).unwrap();
    assert!(interpolate(&state.model, &a, &a, 1, &args(8, plane)).is_err());
}

#[test]
fn mode_requirements_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let single = checkpoint(dir.path(), Mode::Single);
    let cond = checkpoint(dir.path(), Mode::Conditional);
    let patch = dir.path().join("p.png");
    save_image(&exemplar(16, 1), &patch).unwrap();
    assert!(matches!(load_texture(&single, Some(&patch), None), Err(Error::ModeMismatch { .. })));
    assert!(matches!(load_texture(&cond, None, None), Err(Error::Argument(_))));
    assert!(matches!(load_texture(&cond, Some(&patch), None), Ok((_, TextureSource::Conditioned(_)))));
    let out = dir.path().join("s.png");
    assert!(matches!(
        cmd_interpolate(&single, &patch, &patch, 3, &args(4, None), &out),
        Err(Error::ModeMismatch { .. })
    ));
}

#[test]
fn evaluation_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), Mode::Single);
    let reference = dir.path().join("ref.png");
    save_image(&exemplar(32, 0), &reference).unwrap();
    let eargs = EvaluateArgs {
        count: 3,
        likelihood: Some(4),
        likelihood_side: 4,
        extractor: Some("builtin".into()),
        ..EvaluateArgs::default()
    };
    let out = dir.path().join("eval");
    let r = cmd_evaluate(&ckpt, &reference, None, None, &eargs, &out).unwrap();
    let report = r.sifid.unwrap();
    assert_eq!(report.count(), 3);
    assert!(report.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(r.likelihood.unwrap().1.is_finite());
    for f in ["sifid.csv", "likelihood.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let self_args = EvaluateArgs {
        self_test: true,
        count: 2,
        extractor: Some("builtin".into()),
        ..EvaluateArgs::default()
    };
    let r = cmd_evaluate(&ckpt, &reference, None, None, &self_args, &out).unwrap();
    assert!(r.sifid.unwrap().values.iter().all(|v| *v <= 1e-6));
}

#[test]
fn training_command_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    save_image(&exemplar(32, 2), &dir.path().join("ex.png")).unwrap();
    let mut c = tiny_config(Mode::Single);
    c.exemplars = vec!["ex.png".into()];
    c.iterations = Some(3);
    c.checkpoint_every = 2;
    c.output_dir = "run".into();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, c.to_toml()).unwrap();
    let mut seen = Vec::new();
    let outcome = cmd_train(&cfg, None, &mut |m| seen.push(m.iteration)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    let run = dir.path().join("run");
    for f in ["metrics.csv", "final.ggan", "ckpt_00000002.ggan"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);
    assert_eq!(outcome.final_checkpoint, run.join("final.ggan"));
    assert_eq!(outcome.last.unwrap().iteration, 3);
}

#[test]
fn non_finite_training_leaves_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(Mode::Single);
    c.iterations = Some(5);
    c.output_dir = dir.path().join("run");
    let poisoned = exemplar(32, 0) * f64::NAN;
    match run_training(c, &[poisoned], &mut |_| {}) {
        Err(Error::TrainingAborted { snapshot, .. }) => {
            assert!(snapshot.ends_with("abort_snapshot.ggan"));
            assert!(solidtex::checkpoint::load_checkpoint(&snapshot, Some(Mode::Single)).is_ok());
        }
        other => panic!("{other:?}"),
    }
}
