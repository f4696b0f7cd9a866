#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use solidtex::losses::{generator_loss, style_loss};
use solidtex::params::{gradients, ParamStore};
use solidtex::slicer::{random_plane, SliceMode, SlicePlane};
use solidtex::trainer::{render_batch, Mode, TrainConfig, TrainState};
use tch::{Kind, Tensor};

/// Small configuration: width-8 sampler, 16-pixel critic, 4 octaves.
pub fn tiny_config(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::new(mode);
    c.octaves = Some(4);
    c.noise_resolution = 16;
    c.hidden_width = 8;
    c.patch_size = 16;
    c.critic_width_divisor = 8;
    c.encoder_width_divisor = 8;
    c.pixel_spacing = 1.0 / 16.0;
    c.batch_size = 2;
    c.seed = 3;
    c
}

pub fn planes(count: usize, seed: u64) -> Vec<SlicePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_plane(SliceMode::Isotropic, &mut rng)).collect()
}

pub fn exemplar(size: i64, seed: u64) -> Tensor {
    solidtex::io::band_limited_noise(size, seed).unwrap()
}

/// Generator-side objectives `(L_style, L_G)` for fixed planes and real
/// patches. Conditional states use `conditions` (one patch per plane).
pub fn generator_objectives(
    state: &TrainState,
    planes: &[SlicePlane],
    real: &Tensor,
    conditions: Option<&Tensor>,
) -> (Tensor, Tensor) {
    let model = &state.model;
    let spec = state.config.slice_spec();
    let fake = match conditions {
        None => {
            let field = model.single_field(&model.bank).unwrap();
            render_batch(&field, planes, &spec).unwrap()
        }
        Some(c) => {
            let cond = model.conditioner().unwrap();
            let mut parts = Vec::new();
            for (i, p) in planes.iter().enumerate() {
                let st = cond.condition(&c.get(i as i64)).unwrap();
                let field = model.conditioned_field(&model.bank, &st).unwrap();
                parts.push(render_batch(&field, std::slice::from_ref(p), &spec).unwrap());
            }
            Tensor::cat(&parts, 0)
        }
    };
    let (_, real_feats) = tch::no_grad(|| model.critic.forward(&(real * 2.0 - 1.0))).unwrap();
    let (scores, fake_feats) = model.critic.forward(&(fake * 2.0 - 1.0)).unwrap();
    let style = style_loss(&real_feats, &fake_feats).unwrap();
    let lg = generator_loss(&scores, &style, state.config.alpha, state.config.beta).unwrap();
    (style.total, lg)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_relative: f64,
}

/// Compares analytic and central-difference gradients of `objective` at
/// `points` randomly chosen entries of the parameters in `store`.
/// Passes when `|a - n| <= rel * max(|a|, |n|) + abs_floor`.
pub fn finite_difference_check(
    store: &ParamStore,
    objective: &dyn Fn() -> Tensor,
    points: usize,
    eps: f64,
    rel: f64,
    abs_floor: f64,
    seed: u64,
) -> FdReport {
    use rand::Rng;
    let names = store.names();
    let params = store.tensors();
    let grads = gradients(&objective(), &params, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    for _ in 0..points {
        let k = rng.gen_range(0..params.len());
        let numel = params[k].numel() as i64;
        let idx = rng.gen_range(0..numel);
        let flat_grad = grads[k].flatten(0, -1);
        let analytic = flat_grad.double_value(&[idx]);
        let nudge = |delta: f64| {
            tch::no_grad(|| {
                let p = params[k].shallow_clone();
                let mut view = p.view([-1]).get(idx);
                let _ = view.f_add_scalar_(delta).unwrap();
            })
        };
        nudge(eps);
        // objectives may differentiate internally, so autograd stays on
        let plus = objective().double_value(&[]);
        nudge(-2.0 * eps);
        let minus = objective().double_value(&[]);
        nudge(eps);
        let numeric = (plus - minus) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        let err = (analytic - numeric).abs();
        if scale > 0.0 {
            report.worst_relative = report.worst_relative.max(err / scale);
        }
        if err > rel * scale + abs_floor {
            report
                .failures
                .push(format!("{}[{idx}]: analytic {analytic:e}, numeric {numeric:e}", names[k]));
        }
        report.checked += 1;
    }
    report
}

pub fn f64_state(mode: Mode) -> TrainState {
    TrainState::with_kind(tiny_config(mode), Kind::Double).unwrap()
}
