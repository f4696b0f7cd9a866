//! Per-octave 3D Gaussian noise grids and the transform, wrap and trilinear
//! lookup that turns a world coordinate into the sampler's noise vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use tch::{Kind, Tensor};

use crate::error::{arg_err, Result};

/// A point in world space. One world unit is the side length of one exemplar patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Coordinate3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Coordinate3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Stacks coordinates into a `[P, 3]` tensor of the given precision.
pub fn coords_tensor(coords: &[Coordinate3], kind: Kind) -> Tensor {
    let flat: Vec<f64> = coords.iter().flat_map(|c| c.to_array()).collect();
    Tensor::from_slice(&flat)
        .reshape([coords.len() as i64, 3])
        .to_kind(kind)
}

/// Borrowed view of one cubic noise grid, stored with z varying fastest.
#[derive(Debug, Clone, Copy)]
pub struct Grid3<'a> {
    values: &'a [f32],
    resolution: usize,
}

impl<'a> Grid3<'a> {
    pub fn new(values: &'a [f32], resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return arg_err(format!("grid resolution must be >= 2, got {resolution}"));
        }
        if values.len() != resolution.pow(3) {
            return arg_err(format!(
                "grid of resolution {resolution} needs {} values, got {}",
                resolution.pow(3),
                values.len()
            ));
        }
        Ok(Grid3 { values, resolution })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Value at lattice index `(x, y, z)`, each taken modulo the resolution.
    pub fn get(&self, x: i64, y: i64, z: i64) -> f32 {
        let r = self.resolution as i64;
        let (x, y, z) = (x.rem_euclid(r), y.rem_euclid(r), z.rem_euclid(r));
        self.values[((x * r + y) * r + z) as usize]
    }
}

/// Trilinear interpolation of the 8 lattice neighbours of `p` (lattice units),
/// wrapping indices toroidally.
pub fn trilinear_sample(grid: &Grid3<'_>, p: Coordinate3) -> Result<f64> {
    if !p.is_finite() {
        return arg_err(format!("non-finite sample position {p:?}"));
    }
    let (bx, by, bz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (fx, fy, fz) = (p.x - bx, p.y - by, p.z - bz);
    let (ix, iy, iz) = (bx as i64, by as i64, bz as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
        let w = if dx == 1 { fx } else { 1.0 - fx }
            * if dy == 1 { fy } else { 1.0 - fy }
            * if dz == 1 { fz } else { 1.0 - fz };
        if w != 0.0 {
            acc += w * grid.get(ix + dx, iy + dy, iz + dz) as f64;
        }
    }
    Ok(acc)
}

/// `n` immutable standard-normal grids of identical resolution, fully
/// determined by `(n, resolution, seed)`.
#[derive(Debug)]
pub struct NoiseBank {
    seed: u64,
    resolution: usize,
    octaves: usize,
    values: Vec<f32>,
    grids: Tensor,
}

impl NoiseBank {
    /// Draws the grids. `kind` selects the precision of the lookup tensors; the
    /// stored values are always float32 draws so every precision sees the same noise.
    pub fn new(octaves: usize, resolution: usize, seed: u64, kind: Kind) -> Result<Self> {
        if octaves == 0 {
            return arg_err("noise bank needs at least one octave");
        }
        if resolution < 2 {
            return arg_err(format!("noise resolution must be >= 2, got {resolution}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = octaves * resolution.pow(3);
        let values: Vec<f32> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let grids = Tensor::from_slice(&values)
            .reshape([octaves as i64, resolution.pow(3) as i64])
            .to_kind(kind);
        Ok(NoiseBank {
            seed,
            resolution,
            octaves,
            values,
            grids,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn octaves(&self) -> usize {
        self.octaves
    }

    pub fn kind(&self) -> Kind {
        self.grids.kind()
    }

    pub fn grid(&self, i: usize) -> Grid3<'_> {
        let n = self.resolution.pow(3);
        Grid3 {
            values: &self.values[i * n..(i + 1) * n],
            resolution: self.resolution,
        }
    }

    /// Flattened grids as a `[n, R^3]` tensor (no gradient).
    pub fn grids(&self) -> &Tensor {
        &self.grids
    }

    /// Noise vectors for a batch of coordinates: `coords` is `[P, 3]`,
    /// `transforms` is `[n, 3, 3]`; returns `[P, n]`. Differentiable with
    /// respect to `transforms` and `coords`.
    pub fn sample(&self, coords: &Tensor, transforms: &Tensor) -> Result<Tensor> {
        let n = self.octaves as i64;
        if transforms.size() != [n, 3, 3] {
            return arg_err(format!(
                "expected {n} transforms of shape 3x3, got {:?}",
                transforms.size()
            ));
        }
        let csize = coords.size();
        if csize.len() != 2 || csize[1] != 3 {
            return arg_err(format!("coordinates must be [P, 3], got {csize:?}"));
        }
        if !bool::try_from(coords.isfinite().all())? {
            return arg_err("non-finite coordinate in batch");
        }
        let r = self.resolution as i64;
        let coords = coords.to_kind(self.kind());
        // [n, 3, P] positions in lattice units
        let pos = transforms.matmul(&coords.tr()) * (r as f64);
        let base = pos.detach().floor();
        let frac = &pos - &base;
        let idx = base.to_kind(Kind::Int64).remainder(r);
        let axis = |t: &Tensor, a: i64| t.select(1, a);
        let (ix, iy, iz) = (axis(&idx, 0), axis(&idx, 1), axis(&idx, 2));
        let (fx, fy, fz) = (axis(&frac, 0), axis(&frac, 1), axis(&frac, 2));
        let next = |t: &Tensor| (t + 1).remainder(r);
        let (jx, jy, jz) = (next(&ix), next(&iy), next(&iz));
        let (gx, gy, gz) = (1.0 - &fx, 1.0 - &fy, 1.0 - &fz);
        let mut acc: Option<Tensor> = None;
        for corner in 0..8 {
            let (cx, wx) = if corner >> 2 & 1 == 1 { (&jx, &fx) } else { (&ix, &gx) };
            let (cy, wy) = if corner >> 1 & 1 == 1 { (&jy, &fy) } else { (&iy, &gy) };
            let (cz, wz) = if corner & 1 == 1 { (&jz, &fz) } else { (&iz, &gz) };
            let flat = (cx * r + cy) * r + cz;
            let vals = self.grids.gather(1, &flat, false);
            let term = vals * wx * wy * wz;
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        Ok(acc.expect("eight corners").tr())
    }
}

/// The `n` learnable (or predicted) 3x3 maps from world coordinates to
/// per-octave sampling coordinates, held as an `[n, 3, 3]` tensor.
#[derive(Debug)]
pub struct FrequencyTransforms {
    matrices: Tensor,
}

impl FrequencyTransforms {
    pub fn from_tensor(matrices: Tensor) -> Result<Self> {
        let s = matrices.size();
        if s.len() != 3 || s[1] != 3 || s[2] != 3 || s[0] < 1 {
            return arg_err(format!("transforms must be [n, 3, 3], got {s:?}"));
        }
        Ok(FrequencyTransforms { matrices })
    }

    pub fn from_matrices(ms: &[[[f64; 3]; 3]], kind: Kind) -> Result<Self> {
        let flat: Vec<f64> = ms.iter().flat_map(|m| m.iter().flatten().copied()).collect();
        Self::from_tensor(Tensor::from_slice(&flat).reshape([ms.len() as i64, 3, 3]).to_kind(kind))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrices
    }

    pub fn count(&self) -> usize {
        self.matrices.size()[0] as usize
    }

    pub fn matrices(&self) -> Vec<[[f64; 3]; 3]> {
        let v: Vec<f64> = Vec::try_from(self.matrices.detach().to_kind(Kind::Double).flatten(0, -1))
            .expect("transform values");
        v.chunks(9)
            .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
            .collect()
    }
}

/// Initial octave ladder: `T_i = 2^(4 i / n) I + eps`, `eps ~ N(0, 0.01^2)` per entry.
/// Returned row-major, 9 values per octave.
pub fn octave_ladder<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let jitter = Normal::new(0.0, 0.01).expect("valid normal");
    let mut out = Vec::with_capacity(9 * n);
    for i in 0..n {
        let s = 2f64.powf(i as f64 * 4.0 / n as f64);
        for r in 0..3 {
            for c in 0..3 {
                let diag = if r == c { s } else { 0.0 };
                out.push(diag + rng.sample(jitter));
            }
        }
    }
    out
}

/// Scalar reference of the noise-vector lookup: component `i` is the
/// trilinear sample of grid `i` at `R * (T_i c)`.
pub fn eval_noise_vector(
    c: Coordinate3,
    transforms: &FrequencyTransforms,
    bank: &NoiseBank,
) -> Result<Vec<f64>> {
    if transforms.count() != bank.octaves() {
        return arg_err(format!(
            "{} transforms for {} noise octaves",
            transforms.count(),
            bank.octaves()
        ));
    }
    let r = bank.resolution() as f64;
    transforms
        .matrices()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let v = c.to_array();
            let t = |row: usize| r * (m[row][0] * v[0] + m[row][1] * v[1] + m[row][2] * v[2]);
            trilinear_sample(&bank.grid(i), Coordinate3::new(t(0), t(1), t(2)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> Vec<[[f64; 3]; 3]> {
        vec![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]; n]
    }

    #[test]
    fn bank_is_deterministic() {
        let a = NoiseBank::new(1, 2, 0, Kind::Float).unwrap();
        let b = NoiseBank::new(1, 2, 0, Kind::Float).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values.len(), 8);
        let c = NoiseBank::new(1, 2, 1, Kind::Float).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn bank_rejects_bad_arguments() {
        assert!(NoiseBank::new(0, 8, 0, Kind::Float).is_err());
        assert!(NoiseBank::new(2, 1, 0, Kind::Float).is_err());
    }

    #[test]
    fn bank_statistics() {
        let bank = NoiseBank::new(4, 32, 7, Kind::Float).unwrap();
        for i in 0..4 {
            let g = bank.grid(i);
            let n = g.values.len() as f64;
            let mean = g.values.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = g.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "var {var}");
        }
    }

    #[test]
    fn full_size_bank_shape() {
        let bank = NoiseBank::new(16, 64, 11, Kind::Float).unwrap();
        assert_eq!(bank.grids().size(), vec![16, 64 * 64 * 64]);
    }

    #[test]
    fn lattice_and_edge_samples() {
        let bank = NoiseBank::new(1, 8, 3, Kind::Float).unwrap();
        let g = bank.grid(0);
        let v = trilinear_sample(&g, Coordinate3::new(3.0, 5.0, 1.0)).unwrap();
        assert_eq!(v, g.get(3, 5, 1) as f64);
        let mid = trilinear_sample(&g, Coordinate3::new(3.5, 5.0, 1.0)).unwrap();
        let expect = 0.5 * (g.get(3, 5, 1) as f64 + g.get(4, 5, 1) as f64);
        assert!((mid - expect).abs() < 1e-12);
        let wrap = trilinear_sample(&g, Coordinate3::new(7.5, 0.0, 0.0)).unwrap();
        let expect = 0.5 * (g.get(7, 0, 0) as f64 + g.get(0, 0, 0) as f64);
        assert!((wrap - expect).abs() < 1e-12);
        assert!(trilinear_sample(&g, Coordinate3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn zero_transforms_sample_origin() {
        let bank = NoiseBank::new(3, 4, 9, Kind::Double).unwrap();
        let t = FrequencyTransforms::from_matrices(&[[[0.0; 3]; 3]; 3], Kind::Double).unwrap();
        for c in [Coordinate3::new(0.3, -2.0, 7.1), Coordinate3::new(100.0, 0.5, 0.25)] {
            let v = eval_noise_vector(c, &t, &bank).unwrap();
            for (i, x) in v.iter().enumerate() {
                assert_eq!(*x, bank.grid(i).get(0, 0, 0) as f64);
            }
        }
    }

    #[test]
    fn tensor_path_matches_scalar_path() {
        let bank = NoiseBank::new(4, 8, 5, Kind::Double).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = FrequencyTransforms::from_tensor(
            Tensor::from_slice(&octave_ladder(4, &mut rng)).reshape([4, 3, 3]),
        )
        .unwrap();
        let coords: Vec<Coordinate3> = (0..20)
            .map(|_| Coordinate3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let batch = bank.sample(&coords_tensor(&coords, Kind::Double), t.tensor()).unwrap();
        for (p, c) in coords.iter().enumerate() {
            let scalar = eval_noise_vector(*c, &t, &bank).unwrap();
            for (i, s) in scalar.iter().enumerate() {
                let b = batch.double_value(&[p as i64, i as i64]);
                assert!((b - s).abs() < 1e-9, "{b} vs {s}");
            }
        }
    }

    #[test]
    fn mismatched_counts_rejected() {
        let bank = NoiseBank::new(4, 4, 0, Kind::Double).unwrap();
        let t = FrequencyTransforms::from_matrices(&identity(3), Kind::Double).unwrap();
        assert!(eval_noise_vector(Coordinate3::new(0.0, 0.0, 0.0), &t, &bank).is_err());
        assert!(bank.sample(&coords_tensor(&[Coordinate3::new(0.0, 0.0, 0.0)], Kind::Double), t.tensor()).is_err());
    }

    #[test]
    fn ladder_spans_four_octaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = octave_ladder(16, &mut rng);
        assert_eq!(l.len(), 144);
        assert!((l[0] - 1.0).abs() < 0.1);
        let last = 2f64.powf(15.0 * 4.0 / 16.0);
        assert!((l[15 * 9] - last).abs() < 0.1);
    }
}
