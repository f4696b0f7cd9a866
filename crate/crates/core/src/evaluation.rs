//! Quantitative evaluation: single-image Fréchet distance on deep features,
//! Parzen-window log-likelihood, and the paired signed-rank test.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use tch::{Kind, Tensor};

use crate::checkpoint::{content_hash, Container, Record};
use crate::critic::FeatureExtractor;
use crate::error::{arg_err, Error, Result};
use crate::model::Model;
use crate::params::{equalized_parameter_scale, lrelu, ParamStore};
use crate::slicer::{random_plane, SliceMode, SliceSpec};
use crate::trainer::{render_batch, Mode};

/// Environment key naming the SIFID extractor artifact (`builtin` or a path).
pub const EXTRACTOR_ENV: &str = "SOLIDTEX_SIFID_EXTRACTOR";
/// Optional environment key pinning the artifact's SHA-256.
pub const EXTRACTOR_SHA_ENV: &str = "SOLIDTEX_SIFID_SHA256";

/// Diagonal jitter added to both covariances.
pub const COVARIANCE_JITTER: f64 = 1e-6;

/// Per-sample values with statistics always recomputed from them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub values: Vec<f64>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        MetricReport {
            name: name.into(),
            values,
        }
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    /// `index,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("index,{}\n", self.name);
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{i},{v:e}\n"));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {:.6e} ± {:.6e} (n = {})",
            self.name,
            self.mean(),
            self.std(),
            self.count()
        )
    }
}

/// Converts `[C, H, W]` or `[1, C, H, W]` features to `M x C` rows.
fn feature_rows(features: &Tensor) -> Result<DMatrix<f64>> {
    let f = if features.dim() == 4 {
        if features.size()[0] != 1 {
            return arg_err("SIFID features must come from a single image");
        }
        features.squeeze_dim(0)
    } else {
        features.shallow_clone()
    };
    let s = f.size();
    if s.len() != 3 {
        return arg_err(format!("expected a [C, H, W] feature map, got {s:?}"));
    }
    let (c, m) = (s[0] as usize, (s[1] * s[2]) as usize);
    let flat: Vec<f64> = Vec::try_from(&f.detach().to_kind(Kind::Double).reshape([s[0], -1]).transpose(0, 1).contiguous().flatten(0, -1))?;
    Ok(DMatrix::from_row_slice(m, c, &flat))
}

fn mean_cov(rows: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = rows.nrows();
    if m < 2 {
        return Err(Error::Degenerate("at least two feature vectors are needed".into()));
    }
    let mu = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians `(mu1, cov1)` and `(mu2, cov2)`.
/// The trace of `(cov1 cov2)^{1/2}` is taken as the nuclear norm of
/// `cov1^{1/2} cov2^{1/2}`, which is symmetric in its arguments.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || cov1.shape() != cov2.shape() || cov1.nrows() != mu1.len() {
        return arg_err("Gaussian parameters have mismatched dimensions");
    }
    let n = mu1.len();
    let jitter = DMatrix::<f64>::identity(n, n) * COVARIANCE_JITTER;
    let c1 = cov1 + &jitter;
    let c2 = cov2 + &jitter;
    let cross = (psd_sqrt(&c1) * psd_sqrt(&c2)).singular_values().sum();
    let d = (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite(format!("Fréchet distance {d}")));
    }
    Ok(if d < 0.0 && d >= -1e-5 { 0.0 } else { d })
}

/// Fréchet distance between the feature-vector distributions of two feature maps.
pub fn feature_frechet(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.size() != b.size() {
        return arg_err(format!("feature maps {:?} and {:?} differ", a.size(), b.size()));
    }
    let (m1, c1) = mean_cov(&feature_rows(a)?)?;
    let (m2, c2) = mean_cov(&feature_rows(b)?)?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// SIFID between two `[3, H, W]` images in `[0, 1]`, using the last map the
/// extractor returns.
pub fn sifid(reference: &Tensor, sample: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if reference.size() != sample.size() || reference.dim() != 3 || reference.size()[0] != 3 {
        return arg_err(format!(
            "SIFID needs two [3, H, W] images of equal size, got {:?} and {:?}",
            reference.size(),
            sample.size()
        ));
    }
    let feats = |img: &Tensor| -> Result<Tensor> {
        let x = (img.to_kind(Kind::Float) * 2.0 - 1.0).unsqueeze(0);
        let maps = tch::no_grad(|| extractor.feature_maps(&x))?;
        maps.last()
            .map(|t| t.shallow_clone())
            .ok_or_else(|| Error::Argument("extractor returned no feature maps".into()))
    };
    feature_frechet(&feats(reference)?, &feats(sample)?)
}

/// Renders `count` textures, one per seed derived from `master_seed`, takes
/// one random slice of each at the reference resolution and scores it
/// against `reference`. Conditional models are conditioned on the
/// reference's central crop.
pub fn sifid_protocol(
    model: &Model,
    reference: &Tensor,
    count: usize,
    master_seed: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<MetricReport> {
    let s = reference.size();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return arg_err(format!("reference must be a square [3, H, H] image, got {s:?}"));
    }
    if count == 0 {
        return arg_err("count must be >= 1");
    }
    let spec = SliceSpec {
        resolution: s[1] as usize,
        pixel_spacing: model.pixel_spacing,
    };
    let cond = match model.mode {
        Mode::Single => None,
        Mode::Conditional => {
            let p = model.patch_size();
            if s[1] < p {
                return arg_err(format!("reference must be at least {p} pixels wide to condition on"));
            }
            let off = (s[1] - p) / 2;
            let crop = reference.narrow(1, off, p).narrow(2, off, p).to_kind(model.kind());
            Some(tch::no_grad(|| model.conditioner()?.condition(&crop))?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let bank = model.bank_with_seed(rng.gen())?;
        let plane = random_plane(SliceMode::Isotropic, &mut rng);
        let slice = tch::no_grad(|| {
            let field = match &cond {
                None => model.single_field(&bank)?,
                Some(c) => model.conditioned_field(&bank, c)?,
            };
            render_batch(&field, &[plane], &spec)
        })?;
        values.push(sifid(reference, &slice.squeeze_dim(0).clamp(0.0, 1.0), extractor)?);
    }
    Ok(MetricReport::new("sifid", values))
}

/// Convolutional feature extractor with fixed weights: a chain of 3x3
/// convolutions with leaky ReLU and optional 2x2 average pooling.
#[derive(Debug)]
pub struct ConvExtractor {
    store: ParamStore,
    /// `(weight name, bias name, pool after)`
    layers: Vec<(String, String, bool)>,
}

const BUILTIN_LAYERS: [(i64, i64, bool); 3] = [(3, 32, false), (32, 64, true), (64, 64, false)];
const BUILTIN_SEED: u64 = 0x5f1d;

impl ConvExtractor {
    /// Seeded random-weight network used when no trained artifact is supplied.
    pub fn builtin() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(BUILTIN_SEED);
        let mut store = ParamStore::new(Kind::Float);
        let mut layers = Vec::new();
        for (i, &(cin, cout, pool)) in BUILTIN_LAYERS.iter().enumerate() {
            let (w, b) = (format!("conv{i}.w"), format!("conv{i}.b"));
            let _ = store.normal(&w, &[cout, cin, 3, 3], &mut rng);
            let _ = store.fill(&b, &[cout], 0.0);
            layers.push((w, b, pool));
        }
        ConvExtractor { store, layers }
    }

    pub fn to_container(&self) -> Container {
        let pools: Vec<bool> = self.layers.iter().map(|l| l.2).collect();
        let mut records = Vec::new();
        for (w, b, _) in &self.layers {
            records.push(Record::from_tensor(w, self.store.get(w).expect("layer weight")));
            records.push(Record::from_tensor(b, self.store.get(b).expect("layer bias")));
        }
        Container {
            meta: serde_json::json!({ "kind": "extractor", "pool_after": pools }),
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("extractor") {
            return Err(Error::CorruptCheckpoint("not a feature extractor file".into()));
        }
        let pools: Vec<bool> = serde_json::from_value(c.meta.get("pool_after").cloned().unwrap_or_default())
            .map_err(|e| Error::CorruptCheckpoint(format!("pool_after: {e}")))?;
        let mut store = ParamStore::new(Kind::Float);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, pool) in pools.into_iter().enumerate() {
            let (w, b) = (format!("conv{i}.w"), format!("conv{i}.b"));
            let find = |name: &str| {
                c.record(name).ok_or_else(|| Error::Record {
                    name: name.to_string(),
                    reason: "missing from extractor file".into(),
                })
            };
            let (rw, rb) = (find(&w)?, find(&b)?);
            if rw.shape.len() != 4 || rw.shape[1] != cin || rb.shape != [rw.shape[0]] {
                return Err(Error::Record {
                    name: w,
                    reason: format!("inconsistent shapes {:?} / {:?}", rw.shape, rb.shape),
                });
            }
            let _ = store.add_values(&w, &rw.shape, &rw.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let _ = store.add_values(&b, &rb.shape, &rb.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
            cin = rw.shape[0];
            layers.push((w, b, pool));
        }
        if layers.is_empty() {
            return Err(Error::CorruptCheckpoint("extractor has no layers".into()));
        }
        Ok(ConvExtractor { store, layers })
    }

    /// Loads an artifact, verifying `sha256` when given.
    pub fn load(path: &Path, sha256: Option<&str>) -> Result<Self> {
        if let Some(expected) = sha256 {
            let found = content_hash(path)?;
            if !found.eq_ignore_ascii_case(expected) {
                return Err(Error::HashMismatch {
                    expected: expected.to_string(),
                    found,
                });
            }
        }
        Self::from_container(&Container::read(path)?)
    }

    /// Resolves `explicit` (or the environment key when `None`) to an
    /// extractor: `builtin` selects the seeded network, anything else is a path.
    pub fn resolve(explicit: Option<&str>) -> Result<Self> {
        let from_env = std::env::var(EXTRACTOR_ENV).ok();
        let Some(spec) = explicit.map(str::to_string).or(from_env) else {
            return Err(Error::MissingExtractor { key: EXTRACTOR_ENV });
        };
        if spec == "builtin" {
            return Ok(Self::builtin());
        }
        let pin = std::env::var(EXTRACTOR_SHA_ENV).ok();
        Self::load(&PathBuf::from(spec), pin.as_deref())
    }
}

impl FeatureExtractor for ConvExtractor {
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = images.to_kind(Kind::Float);
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, pool) in &self.layers {
            let w = self.store.get(w).expect("layer weight");
            let scale = equalized_parameter_scale(&w.size());
            x = lrelu(&x.conv2d(&(w * scale), self.store.get(b), [1, 1], [1, 1], [1, 1], 1));
            if *pool {
                x = x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
            }
            out.push(x.shallow_clone());
        }
        Ok(out)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(generated: &[Vec<f64>], ground_truth: &[Vec<f64>], bandwidth: f64) -> Result<usize> {
    if generated.is_empty() || ground_truth.is_empty() {
        return arg_err("sample sets must be non-empty");
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return arg_err(format!("bandwidth must be positive, got {bandwidth}"));
    }
    let d = ground_truth[0].len();
    if d == 0 || generated.iter().chain(ground_truth).any(|v| v.len() != d) {
        return arg_err("all samples must share one non-zero dimensionality");
    }
    Ok(d)
}

/// Mean over `generated` of the log Gaussian-kernel density
/// `1/K sum_j N(x; y_j, h^2 I)`.
pub fn average_log_likelihood(generated: &[Vec<f64>], ground_truth: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    let d = check_sets(generated, ground_truth, bandwidth)?;
    let h2 = bandwidth * bandwidth;
    let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * h2).ln() - (ground_truth.len() as f64).ln();
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(ground_truth.len());
    for x in generated {
        terms.clear();
        terms.extend(ground_truth.iter().map(|y| -sq_dist(x, y) / (2.0 * h2)));
        total += log_sum_exp(&terms) + norm;
    }
    Ok(total / generated.len() as f64)
}

/// Leave-one-out log-likelihood of `set` under its own Parzen estimate.
pub fn leave_one_out_log_likelihood(set: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    let d = check_sets(set, set, bandwidth)?;
    if set.len() < 2 {
        return arg_err("leave-one-out needs at least two samples");
    }
    let h2 = bandwidth * bandwidth;
    let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * h2).ln() - ((set.len() - 1) as f64).ln();
    let mut total = 0.0;
    for (i, x) in set.iter().enumerate() {
        let terms: Vec<f64> = set
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, y)| -sq_dist(x, y) / (2.0 * h2))
            .collect();
        total += log_sum_exp(&terms) + norm;
    }
    Ok(total / set.len() as f64)
}

/// Candidate with the highest leave-one-out likelihood; ties keep the first.
pub fn bandwidth_grid_search(validation: &[Vec<f64>], candidates: &[f64]) -> Result<f64> {
    if candidates.len() < 2 {
        return arg_err("grid search needs at least two candidate bandwidths");
    }
    let mut best: Option<(f64, f64)> = None;
    for &h in candidates {
        let ll = leave_one_out_log_likelihood(validation, h)?;
        if best.map_or(true, |(_, b)| ll > b) {
            best = Some((h, ll));
        }
    }
    Ok(best.expect("non-empty candidates").0)
}

/// Area-downsamples a `[3, H, W]` image to `side x side` and flattens it.
pub fn image_sample_vector(image: &Tensor, side: i64) -> Result<Vec<f64>> {
    if image.dim() != 3 || side < 1 {
        return arg_err(format!("expected a [3, H, W] image and side >= 1, got {:?}", image.size()));
    }
    let small = image.to_kind(Kind::Double).unsqueeze(0).adaptive_avg_pool2d([side, side]);
    Ok(Vec::try_from(small.flatten(0, -1))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)` over non-zero differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest count of non-zero differences handled by the exact distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Midranks of `values` (1-based).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test. Zero differences are discarded; ties
/// receive midranks. Up to 25 non-zero differences use the exact permutation
/// distribution of the positive-rank sum; larger samples use the normal
/// approximation with the tie-corrected variance.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return arg_err(format!("paired samples differ in length ({} vs {})", a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired samples contain non-finite values".into()));
    }
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let ranks = midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let statistic = w_plus.min(total - w_plus);
    if n <= WILCOXON_EXACT_MAX {
        // doubled midranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let target = (w_plus * 2.0).round() as usize;
        let all = 2f64.powi(n as i32);
        let le: f64 = counts[..=target].iter().sum();
        let ge: f64 = counts[target..].iter().sum();
        let p = (2.0 * le.min(ge) / all).min(1.0);
        return Ok(WilcoxonResult {
            statistic,
            p_value: p,
            n,
            exact: true,
        });
    }
    let mean = total / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if !(var > 0.0) {
        return Err(Error::Degenerate("signed-rank variance is zero".into()));
    }
    let z = (statistic - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.cdf(-z.abs())).min(1.0);
    Ok(WilcoxonResult {
        statistic,
        p_value: p,
        n,
        exact: false,
    })
}
