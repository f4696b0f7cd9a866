//! Gram matrices, the Gram style loss, the WGAN-GP critic objective and the
//! combined generator objective.

use tch::{Kind, Tensor};

use crate::error::{arg_err, Error, Result};
use crate::params::gradients;

/// Weights of the adversarial, style and gradient-penalty terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 1.0,
            lambda: 10.0,
        }
    }
}

/// Distance used between Gram matrices. `L1` is the default; `L2` exists for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramDistance {
    #[default]
    L1,
    L2,
}

#[derive(Debug)]
pub struct StyleLossValue {
    pub total: Tensor,
    pub per_layer: Vec<Tensor>,
}

impl StyleLossValue {
    pub fn value(&self) -> f64 {
        self.total.double_value(&[])
    }

    pub fn layer_values(&self) -> Vec<f64> {
        self.per_layer.iter().map(|t| t.double_value(&[])).collect()
    }
}

/// Reshapes `[N, M]`, `[B, N, M]` or `[B, N, H, W]` to `[B, N, M]`.
fn as_batched(features: &Tensor) -> Result<Tensor> {
    let s = features.size();
    match s.len() {
        2 => Ok(features.unsqueeze(0)),
        3 => Ok(features.shallow_clone()),
        4 => Ok(features.reshape([s[0], s[1], s[2] * s[3]])),
        _ => arg_err(format!("feature map must have 2 to 4 dims, got {s:?}")),
    }
}

/// Gram matrix over the spatial axis: entry `(i, j) = sum_k f[i,k] f[j,k]`.
/// `[N, M]` gives `[N, N]`; batched inputs give `[B, N, N]`.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let s = features.size();
    if s.len() < 2 || s.iter().any(|&d| d < 1) {
        return arg_err(format!("gram needs a non-empty feature map, got {s:?}"));
    }
    let f = as_batched(features)?;
    let g = f.matmul(&f.transpose(1, 2));
    Ok(if s.len() == 2 { g.squeeze_dim(0) } else { g })
}

/// Per-layer `1/(4 N^2 M^2) sum_ij |G(r)_ij - G(f)_ij|`, averaged over the batch,
/// then averaged over layers. A real stack with batch 1 is broadcast against the fake batch.
pub fn style_loss(real: &[Tensor], fake: &[Tensor]) -> Result<StyleLossValue> {
    style_loss_with(real, fake, GramDistance::L1)
}

pub fn style_loss_with(real: &[Tensor], fake: &[Tensor], distance: GramDistance) -> Result<StyleLossValue> {
    if real.len() != fake.len() || real.is_empty() {
        return arg_err(format!(
            "feature stacks must have equal non-zero depth, got {} and {}",
            real.len(),
            fake.len()
        ));
    }
    let mut per_layer = Vec::with_capacity(real.len());
    for (l, (r, f)) in real.iter().zip(fake).enumerate() {
        let (rb, fb) = (as_batched(r)?, as_batched(f)?);
        let (rs, fs) = (rb.size(), fb.size());
        if rs[1..] != fs[1..] || (rs[0] != fs[0] && rs[0] != 1 && fs[0] != 1) {
            return arg_err(format!("layer {l}: feature shapes {:?} and {:?} differ", r.size(), f.size()));
        }
        let (n, m) = (rs[1] as f64, rs[2] as f64);
        let diff = rb.matmul(&rb.transpose(1, 2)) - fb.matmul(&fb.transpose(1, 2));
        let dist = match distance {
            GramDistance::L1 => diff.abs(),
            GramDistance::L2 => diff.square(),
        };
        let per_sample = dist.sum_dim_intlist([1, 2].as_slice(), false, None::<Kind>);
        per_layer.push(per_sample.mean(None::<Kind>) / (4.0 * n * n * m * m));
    }
    let total = Tensor::stack(&per_layer, 0).mean(None::<Kind>);
    Ok(StyleLossValue { total, per_layer })
}

/// `mean(fake) - mean(real) + lambda * gp`.
pub fn critic_loss(scores_fake: &Tensor, scores_real: &Tensor, gp: &Tensor, lambda: f64) -> Tensor {
    scores_fake.mean(None::<Kind>) - scores_real.mean(None::<Kind>) + gp * lambda
}

/// WGAN-GP penalty `mean_b (||grad_u D(u_b)||_2 - 1)^2` with
/// `u_b = t_b r_b + (1 - t_b) f_b`. One coefficient per sample; the gradient
/// norm runs over all pixels of a sample jointly. The result stays
/// differentiable with respect to the critic's parameters.
pub fn gradient_penalty<F>(real: &Tensor, fake: &Tensor, t: &[f64], critic: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if real.size() != fake.size() {
        return arg_err(format!("real {:?} and fake {:?} differ in shape", real.size(), fake.size()));
    }
    let b = real.size()[0];
    if t.len() as i64 != b {
        return arg_err(format!("{} interpolation coefficients for batch {b}", t.len()));
    }
    let mut shape = vec![1i64; real.dim()];
    shape[0] = b;
    let coef = Tensor::from_slice(t).to_kind(real.kind()).reshape(shape.as_slice());
    let u: Tensor = (&coef * real.detach() + (-&coef + 1.0) * fake.detach())
        .detach()
        .set_requires_grad(true);
    let scores = critic(&u)?;
    let grad = gradients(&scores.sum(None::<Kind>), &[u.shallow_clone()], true)?
        .pop()
        .expect("one input");
    let norms = grad
        .flatten(1, -1)
        .square()
        .sum_dim_intlist([1].as_slice(), false, None::<Kind>)
        .sqrt();
    let penalty = (norms - 1.0).square().mean(None::<Kind>);
    let v = penalty.double_value(&[]);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradient penalty evaluated to {v}")));
    }
    Ok(penalty)
}

/// `-alpha * mean(scores_fake) + beta * style.total`.
pub fn generator_loss(scores_fake: &Tensor, style: &StyleLossValue, alpha: f64, beta: f64) -> Result<Tensor> {
    if alpha < 0.0 || beta < 0.0 {
        return arg_err(format!("loss weights must be non-negative (alpha={alpha}, beta={beta})"));
    }
    if alpha == 0.0 && beta == 0.0 {
        return arg_err("alpha and beta cannot both be zero");
    }
    Ok(scores_fake.mean(None::<Kind>) * (-alpha) + &style.total * beta)
}
