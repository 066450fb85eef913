//! Smooth blobs carried around the sphere by solid-body rotation, plus a
//! static orography channel and a seasonal insolation channel.
//!
//! The rotation axis leans from the north pole towards (0°N, 0°E) by the
//! tilt angle; at 90° it lies in the equatorial plane and blobs travel over
//! both poles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::GridFile;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::metrics::YEAR_DAYS;
use crate::padding::GridSpec;

/// Names for advected channels, in order of use.
pub const BLOB_CHANNELS: [&str; 8] = ["Z500", "T850", "T2m", "MSL", "TCWV", "U500", "V500", "Q700"];
pub const OROGRAPHY: &str = "orography";
pub const INSOLATION: &str = "TISR";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_days: usize,
    /// Date of the first frame, days since 1970-01-01.
    pub start_day: i32,
    pub seed: u64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_blob_channels: usize,
    pub blobs_per_channel: usize,
    pub tilt_deg: f64,
    pub speed_deg_per_day: f64,
    pub blob_width_deg: f64,
    pub noise_amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_days: 360,
            start_day: 17532,
            seed: 0,
            n_lat: 16,
            n_lon: 32,
            n_blob_channels: 3,
            blobs_per_channel: 3,
            tilt_deg: 90.0,
            speed_deg_per_day: 10.0,
            blob_width_deg: 20.0,
            noise_amplitude: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(field, reason));
        if self.speed_deg_per_day == 0.0 || !self.speed_deg_per_day.is_finite() {
            return bad("speed_deg_per_day", "must be finite and non-zero");
        }
        if !(0.0..=90.0).contains(&self.tilt_deg) {
            return bad("tilt_deg", "must lie in [0, 90]");
        }
        if self.n_blob_channels == 0 || self.n_blob_channels > BLOB_CHANNELS.len() {
            return bad("n_blob_channels", "must lie in 1..=8");
        }
        if self.blobs_per_channel == 0 {
            return bad("blobs_per_channel", "must be at least 1");
        }
        if !(self.blob_width_deg > 0.0) {
            return bad("blob_width_deg", "must be positive");
        }
        if !(self.noise_amplitude >= 0.0) {
            return bad("noise_amplitude", "must be non-negative");
        }
        if self.n_days == 0 {
            return bad("n_days", "must be at least 1");
        }
        GridSpec::regular(self.n_lat, self.n_lon).map(|_| ())
    }

    pub fn channel_names(&self) -> Vec<String> {
        BLOB_CHANNELS[..self.n_blob_channels]
            .iter()
            .chain(&[OROGRAPHY, INSOLATION])
            .map(|s| s.to_string())
            .collect()
    }

    pub fn orography_channel(&self) -> usize {
        self.n_blob_channels
    }

    pub fn insolation_channel(&self) -> usize {
        self.n_blob_channels + 1
    }

    pub fn n_channel(&self) -> usize {
        self.n_blob_channels + 2
    }

    pub fn dates(&self) -> Vec<i32> {
        (0..self.n_days as i32).map(|d| self.start_day + d).collect()
    }
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(lat_deg: f64, lon_deg: f64) -> Vec3 {
    let (p, l) = (lat_deg.to_radians(), lon_deg.to_radians());
    [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
}

/// Rodrigues rotation of `v` about unit `axis` by `angle` radians.
fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let k = cross(axis, v);
    let d = dot(axis, v) * (1.0 - c);
    [0, 1, 2].map(|i| v[i] * c + k[i] * s + axis[i] * d)
}

#[derive(Clone, Debug)]
struct Blob {
    center: Vec3,
    lat: f64,
    lon: f64,
    amplitude: f64,
}

/// Precomputed generator state for one spec.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub spec: SyntheticSpec,
    grid: GridSpec,
    axis: Vec3,
    blobs: Vec<Vec<Blob>>,
    scale: Vec<f64>,
    offset: Vec<f64>,
    orography: Vec<f32>,
}

impl Synthetic {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let grid = GridSpec::regular(spec.n_lat, spec.n_lon)?;
        let tilt = spec.tilt_deg.to_radians();
        let axis = [tilt.sin(), 0.0, tilt.cos()];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let random_point = |rng: &mut ChaCha8Rng| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let lon: f64 = rng.random_range(0.0..360.0);
            (z.asin().to_degrees(), lon)
        };
        let mut blobs = Vec::with_capacity(spec.n_blob_channels);
        for c in 0..spec.n_blob_channels {
            let mut list = Vec::with_capacity(spec.blobs_per_channel);
            for b in 0..spec.blobs_per_channel {
                // The lead blob starts on the great circle normal to the axis.
                let (lat, lon) = if c == 0 && b == 0 { (0.0, 90.0) } else { random_point(&mut rng) };
                let amplitude = if c == 0 && b == 0 {
                    1.5
                } else {
                    let a: f64 = rng.random_range(0.4..1.0);
                    if rng.random_bool(0.5) { a } else { -a }
                };
                list.push(Blob {
                    center: unit(lat, lon),
                    lat,
                    lon,
                    amplitude,
                });
            }
            blobs.push(list);
        }
        let scale = (0..spec.n_blob_channels).map(|_| rng.random_range(1.0..4.0)).collect();
        let offset = (0..spec.n_blob_channels).map(|_| rng.random_range(-5.0..5.0)).collect();

        let hills: Vec<(Vec3, f64)> = (0..4)
            .map(|_| {
                let (lat, lon) = random_point(&mut rng);
                (unit(lat, lon), rng.random_range(0.5..2.0))
            })
            .collect();
        let w2 = 15f64.to_radians().powi(2);
        let mut orography = Vec::with_capacity(spec.n_lat * spec.n_lon);
        for &lat in &grid.lat_centers {
            for &lon in &grid.lon_centers {
                let x = unit(lat, lon);
                let h: f64 = hills.iter().map(|(q, a)| a * ((dot(x, *q) - 1.0) / w2).exp()).sum();
                orography.push(h as f32);
            }
        }
        Ok(Self {
            spec,
            grid,
            axis,
            blobs,
            scale,
            offset,
            orography,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Centre of blob `b` of channel `c` after `t` days.
    pub fn blob_center(&self, c: usize, b: usize, t: f64) -> Vec3 {
        let angle = (self.spec.speed_deg_per_day * t).to_radians();
        rotate(self.blobs[c][b].center, self.axis, angle)
    }

    /// Raw field `[C, H, W]` at `t` days after the first frame.
    pub fn frame_at(&self, t: f64) -> Tensor<f32> {
        let spec = &self.spec;
        let (h, w) = (spec.n_lat, spec.n_lon);
        let plane = h * w;
        let w2 = spec.blob_width_deg.to_radians().powi(2);
        let mut out = vec![0f32; spec.n_channel() * plane];
        let dlon = self.grid.lon_spacing();
        let shift = spec.speed_deg_per_day * t / dlon;
        for (c, blobs) in self.blobs.iter().enumerate() {
            let field = &mut out[c * plane..(c + 1) * plane];
            if spec.tilt_deg == 0.0 {
                // Pure zonal flow: evaluate the initial field at a column
                // shifted in index space so whole-cell shifts are exact rolls.
                for (j, &lat) in self.grid.lat_centers.iter().enumerate() {
                    for i in 0..w {
                        let src = (i as f64 - shift).rem_euclid(w as f64);
                        let x = unit(lat, src * dlon);
                        let v: f64 = blobs
                            .iter()
                            .map(|b| b.amplitude * ((dot(x, unit(b.lat, b.lon)) - 1.0) / w2).exp())
                            .sum();
                        field[j * w + i] = (self.offset[c] + self.scale[c] * v) as f32;
                    }
                }
            } else {
                let centers: Vec<Vec3> = (0..blobs.len()).map(|b| self.blob_center(c, b, t)).collect();
                for (j, &lat) in self.grid.lat_centers.iter().enumerate() {
                    for (i, &lon) in self.grid.lon_centers.iter().enumerate() {
                        let x = unit(lat, lon);
                        let v: f64 = blobs
                            .iter()
                            .zip(&centers)
                            .map(|(b, p)| b.amplitude * ((dot(x, *p) - 1.0) / w2).exp())
                            .sum();
                        field[j * w + i] = (self.offset[c] + self.scale[c] * v) as f32;
                    }
                }
            }
        }
        if spec.noise_amplitude > 0.0 {
            let key = (t * 24.0).round() as i64 as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key);
            for c in 0..spec.n_blob_channels {
                let amp = spec.noise_amplitude * self.scale[c];
                for v in &mut out[c * plane..(c + 1) * plane] {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += (amp * n) as f32;
                }
            }
        }
        let oro = spec.orography_channel();
        out[oro * plane..(oro + 1) * plane].copy_from_slice(&self.orography);
        let ins = spec.insolation_channel();
        let day = spec.start_day as f64 + t;
        let season = (std::f64::consts::TAU * day / YEAR_DAYS).sin();
        for (j, &lat) in self.grid.lat_centers.iter().enumerate() {
            let phi = lat.to_radians();
            let v = (0.5 + 0.5 * phi.cos() + 0.4 * phi.sin() * season) as f32;
            out[ins * plane + j * w..ins * plane + (j + 1) * w].fill(v);
        }
        Tensor::new(vec![spec.n_channel(), h, w], out).expect("frame shape")
    }
}

/// Daily frames for every day of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GridFile> {
    let gen = Synthetic::new(spec.clone())?;
    let frames: Vec<Tensor<f32>> = (0..spec.n_days).map(|d| gen.frame_at(d as f64)).collect();
    GridFile::from_frames(spec.channel_names(), spec.dates(), &frames)
}
