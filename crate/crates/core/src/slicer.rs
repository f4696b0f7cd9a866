//! Random planar probes of the 3D texture field and their rasterization.

use rand::Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

use crate::error::{arg_err, Result};
use crate::noise_field::{coords_tensor, Coordinate3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

/// Isotropic: planes uniformly oriented. Anisotropic: planes rotate only
/// about the grain axis, staying perpendicular to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceMode {
    Isotropic,
    Anisotropic { axis: Axis },
}

impl Default for SliceMode {
    fn default() -> Self {
        SliceMode::Isotropic
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePlane {
    pub origin: Coordinate3,
    pub u: [f64; 3],
    pub v: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceSpec {
    pub resolution: usize,
    /// World units per pixel.
    pub pixel_spacing: f64,
}

impl Default for SliceSpec {
    fn default() -> Self {
        SliceSpec {
            resolution: 128,
            pixel_spacing: 1.0 / 128.0,
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl SlicePlane {
    pub fn new(origin: Coordinate3, u: [f64; 3], v: [f64; 3]) -> Result<Self> {
        let p = SlicePlane { origin, u, v };
        if !p.is_orthonormal(1e-6) {
            return arg_err(format!("plane basis {u:?}, {v:?} is not orthonormal"));
        }
        Ok(p)
    }

    pub fn normal(&self) -> [f64; 3] {
        cross(self.u, self.v)
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        (dot(self.u, self.u).sqrt() - 1.0).abs() <= tol
            && (dot(self.v, self.v).sqrt() - 1.0).abs() <= tol
            && dot(self.u, self.v).abs() <= tol
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
fn quaternion_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Haar-uniform rotation from a normalized 4D Gaussian draw.
pub fn uniform_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return quaternion_matrix(q.map(|x| x / n));
        }
    }
}

/// Plane perpendicular to `axis`, rotated in-plane by `theta`. For `Z` and
/// `theta = 0` this is `u = x`, `v = y`.
pub fn axis_plane(axis: Axis, theta: f64, origin: Coordinate3) -> SlicePlane {
    let (e1, e2) = match axis {
        Axis::X => ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        Axis::Y => ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        Axis::Z => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
    };
    let (s, c) = theta.sin_cos();
    let u = std::array::from_fn(|k| c * e1[k] + s * e2[k]);
    let v = std::array::from_fn(|k| -s * e1[k] + c * e2[k]);
    SlicePlane { origin, u, v }
}

/// Random plane with origin uniform over one wrap period `[0, 1)^3`.
pub fn random_plane<R: Rng>(mode: SliceMode, rng: &mut R) -> SlicePlane {
    let origin = Coordinate3::new(rng.gen(), rng.gen(), rng.gen());
    match mode {
        SliceMode::Isotropic => {
            let m = uniform_rotation(rng);
            SlicePlane {
                origin,
                u: [m[0][0], m[1][0], m[2][0]],
                v: [m[0][1], m[1][1], m[2][1]],
            }
        }
        SliceMode::Anisotropic { axis } => {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            axis_plane(axis, theta, origin)
        }
    }
}

/// `coord(i, j) = origin + (i - res/2) s u + (j - res/2) s v`, row-major with `j` as the row.
pub fn plane_to_coords(plane: &SlicePlane, spec: &SliceSpec) -> Result<Vec<Coordinate3>> {
    if spec.resolution < 1 || !(spec.pixel_spacing > 0.0) {
        return arg_err(format!("invalid slice spec {spec:?}"));
    }
    let res = spec.resolution;
    let half = (res / 2) as f64;
    let o = plane.origin.to_array();
    let mut out = Vec::with_capacity(res * res);
    for j in 0..res {
        let b = (j as f64 - half) * spec.pixel_spacing;
        for i in 0..res {
            let a = (i as f64 - half) * spec.pixel_spacing;
            let p: [f64; 3] = std::array::from_fn(|k| o[k] + a * plane.u[k] + b * plane.v[k]);
            out.push(Coordinate3::new(p[0], p[1], p[2]));
        }
    }
    Ok(out)
}

/// Rasterizes a plane into a `[3, res, res]` image by querying `texture`
/// (`[P, 3]` coordinates to `[P, 3]` RGB) at every pixel.
pub fn render_slice<F>(plane: &SlicePlane, spec: &SliceSpec, kind: Kind, texture: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let coords = plane_to_coords(plane, spec)?;
    let rgb = texture(&coords_tensor(&coords, kind))?;
    let r = spec.resolution as i64;
    Ok(rgb.reshape([r, r, 3]).permute([2, 0, 1]))
}
