//! File formats: 8-bit PNG images, point lists, and the GGVX voxel container.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

use crate::error::{arg_err, Error, Result};
use crate::noise_field::Coordinate3;

/// Loads an image as `[3, H, W]` float in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let t = Tensor::from_slice(img.as_raw())
        .reshape([h as i64, w as i64, 3])
        .permute([2, 0, 1])
        .to_kind(Kind::Float)
        / 255.0;
    Ok(t)
}

/// Quantizes a `[3, H, W]` image in `[0, 1]` to interleaved 8-bit RGB.
pub fn quantize(image: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let s = image.size();
    if s.len() != 3 || s[0] != 3 {
        return arg_err(format!("expected a [3, H, W] image, got {s:?}"));
    }
    let bytes = (image.detach().to_kind(Kind::Double).clamp(0.0, 1.0) * 255.0)
        .round()
        .to_kind(Kind::Uint8)
        .permute([1, 2, 0])
        .contiguous()
        .flatten(0, -1);
    let data: Vec<u8> = Vec::try_from(&bytes)?;
    Ok((s[2] as u32, s[1] as u32, data))
}

/// Writes an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (w, h, data) = quantize(image)?;
    image::save_buffer_with_format(path, &data, w, h, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Parses `x y z` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_points(text: &str, path: &Path) -> Result<Vec<Coordinate3>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut v = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f
                .parse::<f64>()
                .map_err(|_| parse_err(format!("`{f}` is not a number")))?;
            if !v[k].is_finite() {
                return Err(parse_err(format!("`{f}` is not finite")));
            }
        }
        out.push(Coordinate3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

pub fn read_points(path: &Path) -> Result<Vec<Coordinate3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text, path)
}

pub fn write_points(points: &[Coordinate3], w: &mut impl Write) -> std::io::Result<()> {
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Writes `x,y,z,r,g,b` rows; `rgb` is `[P, 3]`.
pub fn write_colored_points(points: &[Coordinate3], rgb: &Tensor, w: &mut impl Write) -> Result<()> {
    if rgb.size() != [points.len() as i64, 3] {
        return arg_err(format!("{} points but colors of shape {:?}", points.len(), rgb.size()));
    }
    let colors: Vec<f32> = Vec::try_from(&rgb.detach().to_kind(Kind::Float).flatten(0, -1))?;
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Argument(format!("csv: {e}"));
    wr.write_record(["x", "y", "z", "r", "g", "b"]).map_err(csv_err)?;
    for (p, c) in points.iter().zip(colors.chunks_exact(3)) {
        wr.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            c[0].to_string(),
            c[1].to_string(),
            c[2].to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io("<points output>", e))
}

/// Periodic band-limited colored noise `[3, size, size]` in `[0, 1]`: white
/// noise blurred at two scales, mixed across channels by a random color
/// matrix and standardized. Used as a procedural exemplar.
pub fn band_limited_noise(size: i64, seed: u64) -> Result<Tensor> {
    if size < 1 {
        return arg_err("size must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Tensor {
        let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_slice(&v)
    };
    let blur = |x: &Tensor, sigma: f64| -> Tensor {
        let radius = (3.0 * sigma).ceil() as i64;
        let taps: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let sum: f32 = taps.iter().sum();
        let k = Tensor::from_slice(&taps) / sum as f64;
        let len = 2 * radius + 1;
        let kx = k.reshape([1, 1, 1, len]).repeat([3, 1, 1, 1]);
        let ky = k.reshape([1, 1, len, 1]).repeat([3, 1, 1, 1]);
        let padded = x.unsqueeze(0).pad([radius, radius, radius, radius], "circular", None);
        padded
            .conv2d(&kx, None::<&Tensor>, [1, 1], [0, 0], [1, 1], 3)
            .conv2d(&ky, None::<&Tensor>, [1, 1], [0, 0], [1, 1], 3)
            .squeeze_dim(0)
    };
    let numel = (3 * size * size) as usize;
    let fine = blur(&normal(numel).reshape([3, size, size]), 1.5);
    let coarse = blur(&normal(numel).reshape([3, size, size]), 5.0);
    let mix = normal(9).reshape([3, 3]);
    let base = normal(3).reshape([3, 1, 1]) * 0.1 + 0.5;
    let field = &fine / fine.std(true) + &coarse / coarse.std(true) * 1.5;
    let colored = mix.matmul(&field.reshape([3, -1])).reshape([3, size, size]);
    let colored = (&colored - colored.mean(None::<Kind>)) / colored.std(true);
    Ok((colored * 0.15 + base).clamp(0.0, 1.0))
}

pub const VOLUME_MAGIC: &[u8; 4] = b"GGVX";
pub const VOLUME_VERSION: u32 = 1;
/// Magic, version, three `u32` dims and three `f64` extents.
pub const VOLUME_HEADER_LEN: usize = 4 + 4 + 12 + 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    pub dims: [u32; 3],
    /// World-space size along each axis.
    pub extent: [f64; 3],
}

impl VolumeHeader {
    pub fn new(dims: [u32; 3], extent: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return arg_err(format!("volume dims must be positive, got {dims:?}"));
        }
        if extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return arg_err(format!("volume extent must be positive, got {extent:?}"));
        }
        Ok(VolumeHeader { dims, extent })
    }

    pub fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    /// `3 * dx * dy * dz * 4`.
    pub fn payload_len(&self) -> u64 {
        self.voxel_count() * 12
    }

    /// World position of voxel `(ix, iy, iz)`: `i * extent / dim` per axis.
    pub fn voxel_position(&self, ix: u32, iy: u32, iz: u32) -> Coordinate3 {
        let p = |i: u32, a: usize| i as f64 * self.extent[a] / self.dims[a] as f64;
        Coordinate3::new(p(ix, 0), p(iy, 1), p(iz, 2))
    }

    /// Positions of one z-slab, x fastest.
    pub fn slab_positions(&self, iz: u32) -> Vec<Coordinate3> {
        let mut out = Vec::with_capacity(self.dims[0] as usize * self.dims[1] as usize);
        for iy in 0..self.dims[1] {
            for ix in 0..self.dims[0] {
                out.push(self.voxel_position(ix, iy, iz));
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(VOLUME_MAGIC)?;
        w.write_all(&VOLUME_VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for e in self.extent {
            w.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = [0u8; VOLUME_HEADER_LEN];
        r.read_exact(&mut buf)
            .map_err(|_| Error::CorruptCheckpoint("volume header truncated".into()))?;
        if &buf[..4] != VOLUME_MAGIC {
            return Err(Error::CorruptCheckpoint("not a GGVX volume".into()));
        }
        let u = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if u(4) != VOLUME_VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported volume version {}", u(4))));
        }
        VolumeHeader::new([u(8), u(12), u(16)], [f(20), f(28), f(36)])
    }
}

/// Streams a volume: the header, then one z-slab at a time from `slab`,
/// which must return `dx * dy` RGB triples.
pub fn write_volume<W, F>(header: &VolumeHeader, w: &mut W, mut slab: F) -> Result<()>
where
    W: Write,
    F: FnMut(u32) -> Result<Vec<f32>>,
{
    let io = |e| Error::io("<volume output>", e);
    header.write_to(w).map_err(io)?;
    let per_slab = 3 * header.dims[0] as usize * header.dims[1] as usize;
    for iz in 0..header.dims[2] {
        let values = slab(iz)?;
        if values.len() != per_slab {
            return arg_err(format!("slab {iz} has {} values, expected {per_slab}", values.len()));
        }
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

/// Reads a full volume into memory.
pub fn read_volume(path: &Path) -> Result<(VolumeHeader, Vec<f32>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(f);
    let header = VolumeHeader::read_from(&mut r)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != header.payload_len() {
        return Err(Error::CorruptCheckpoint(format!(
            "volume payload is {} bytes, header implies {}",
            bytes.len(),
            header.payload_len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}
