//! Boundary handling for equal-angle latitude-longitude fields.
//!
//! Rows run north to south, columns east from 0°. Three modes are offered:
//! plain zero padding, circular longitude wrap with zero pole lines, and
//! geocyclic padding, which wraps longitude and continues over each pole by
//! reflecting the nearest latitude rings and rotating them half a turn.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::engine::{Graph, PlaneGather, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Geometry of a pole-excluding lat-lon grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Degrees, index 0 northernmost.
    pub lat_centers: Vec<f64>,
    /// Degrees east, starting at 0.
    pub lon_centers: Vec<f64>,
    /// `cos(lat)` normalized to unit mean.
    pub row_weights: Vec<f64>,
}

impl GridSpec {
    /// Equal-angle grid whose row centers sit half a spacing off the poles
    /// (72 rows gives ±88.75° at 2.5°).
    pub fn regular(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat == 0 {
            return Err(Error::invalid("grid needs at least one latitude row"));
        }
        let dlat = 180.0 / n_lat as f64;
        let lats = (0..n_lat).map(|j| 90.0 - dlat * (j as f64 + 0.5)).collect();
        Self::with_latitudes(lats, n_lon)
    }

    pub fn with_latitudes(lat_centers: Vec<f64>, n_lon: usize) -> Result<Self> {
        if n_lon == 0 || n_lon % 2 != 0 {
            return Err(Error::invalid(format!(
                "n_lon must be even and positive, got {n_lon}"
            )));
        }
        if lat_centers.is_empty() {
            return Err(Error::invalid("grid needs at least one latitude row"));
        }
        if lat_centers.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("latitude centers must strictly decrease"));
        }
        if lat_centers.iter().any(|l| l.abs() >= 90.0) {
            return Err(Error::invalid("latitude centers must lie strictly inside (-90, 90)"));
        }
        let dlon = 360.0 / n_lon as f64;
        let lon_centers = (0..n_lon).map(|i| i as f64 * dlon).collect();
        let row_weights = latitude_weights(&lat_centers);
        Ok(Self {
            n_lat: lat_centers.len(),
            n_lon,
            lat_centers,
            lon_centers,
            row_weights,
        })
    }

    pub fn lat_spacing(&self) -> f64 {
        180.0 / self.n_lat as f64
    }

    pub fn lon_spacing(&self) -> f64 {
        360.0 / self.n_lon as f64
    }
}

/// `cos(φ_j)` normalized so the weights average to one.
pub fn latitude_weights(lat_centers_deg: &[f64]) -> Vec<f64> {
    let cos: Vec<f64> = lat_centers_deg.iter().map(|l| l.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    cos.iter().map(|c| c / mean).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    Zero,
    CircularZeroPole,
    Geocyclic,
}

impl PaddingMode {
    pub const ALL: [PaddingMode; 3] = [Self::Zero, Self::CircularZeroPole, Self::Geocyclic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::CircularZeroPole => "circular",
            Self::Geocyclic => "geocyclic",
        }
    }
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "circular" | "circular_zero_pole" => Ok(Self::CircularZeroPole),
            "geocyclic" => Ok(Self::Geocyclic),
            other => Err(Error::invalid(format!(
                "unknown padding mode `{other}` (zero, circular, geocyclic)"
            ))),
        }
    }
}

/// Gather table for one padding configuration; `-1` marks zero fill.
#[derive(Clone, Debug, PartialEq)]
pub struct PadIndexMap {
    pub height: usize,
    pub width: usize,
    pub pad: usize,
    pub mode: PaddingMode,
    table: Arc<PlaneGather>,
}

impl PadIndexMap {
    pub fn new(pad: usize, height: usize, width: usize, mode: PaddingMode) -> Result<Self> {
        if pad < 1 {
            return Err(Error::invalid("pad width must be at least 1"));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("cannot pad an empty field"));
        }
        if mode == PaddingMode::Geocyclic {
            if width % 2 != 0 {
                return Err(Error::invalid(format!(
                    "geocyclic padding needs an even number of columns, got {width}"
                )));
            }
            if pad > height {
                return Err(Error::invalid(format!(
                    "geocyclic pad {pad} exceeds the {height} rows available for reflection"
                )));
            }
        }
        let (ho, wo) = (height + 2 * pad, width + 2 * pad);
        let (h, w, p) = (height as isize, width as isize, pad as isize);
        let mut index = Vec::with_capacity(ho * wo);
        for pr in 0..ho as isize {
            for pc in 0..wo as isize {
                let col = (pc - p).rem_euclid(w);
                let src = match mode {
                    PaddingMode::Zero => {
                        let (r, c) = (pr - p, pc - p);
                        ((0..h).contains(&r) && (0..w).contains(&c)).then_some((r, c))
                    }
                    PaddingMode::CircularZeroPole => {
                        let r = pr - p;
                        (0..h).contains(&r).then_some((r, col))
                    }
                    PaddingMode::Geocyclic => {
                        let half = (col + w / 2).rem_euclid(w);
                        Some(if pr < p {
                            // pad line k = p - pr over the north pole reflects ring k - 1
                            (p - pr - 1, half)
                        } else if pr >= p + h {
                            let k = pr - (p + h) + 1;
                            (h - k, half)
                        } else {
                            (pr - p, col)
                        })
                    }
                };
                index.push(src.map_or(-1, |(r, c)| r * w + c));
            }
        }
        Ok(Self {
            height,
            width,
            pad,
            mode,
            table: Arc::new(PlaneGather {
                in_hw: (height, width),
                out_hw: (ho, wo),
                index: index.into(),
            }),
        })
    }

    /// Source `(row, col)` of padded cell `(pr, pc)`, or `None` for zero fill.
    pub fn source(&self, pr: usize, pc: usize) -> Option<(usize, usize)> {
        let (_, wo) = self.table.out_hw;
        let i = self.table.index[pr * wo + pc];
        (i >= 0).then(|| (i as usize / self.width, i as usize % self.width))
    }

    /// Flat gather indices, row-major over the padded plane.
    pub fn indices(&self) -> &[isize] {
        &self.table.index
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        self.table.out_hw
    }

    pub(crate) fn table(&self) -> Arc<PlaneGather> {
        self.table.clone()
    }
}

/// Index table for `grid`; a pure function of its arguments.
pub fn index_map(pad: usize, grid: &GridSpec, mode: PaddingMode) -> Result<PadIndexMap> {
    PadIndexMap::new(pad, grid.n_lat, grid.n_lon, mode)
}

/// Pads a `[C, H, W]` node on the graph; differentiable through the gather.
pub fn pad<T: Real>(g: &mut Graph<'_, T>, x: Var, pad: usize, mode: PaddingMode) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    let map = PadIndexMap::new(pad, h, w, mode)?;
    g.gather_planes(x, map.table())
}

pub fn pad_geocyclic<T: Real>(g: &mut Graph<'_, T>, x: Var, p: usize) -> Result<Var> {
    pad(g, x, p, PaddingMode::Geocyclic)
}

pub fn pad_circular_zero_pole<T: Real>(g: &mut Graph<'_, T>, x: Var, p: usize) -> Result<Var> {
    pad(g, x, p, PaddingMode::CircularZeroPole)
}

pub fn pad_zero<T: Real>(g: &mut Graph<'_, T>, x: Var, p: usize) -> Result<Var> {
    pad(g, x, p, PaddingMode::Zero)
}

/// Pads a plain tensor without recording.
pub fn pad_tensor<T: Real>(x: &Tensor<T>, pad: usize, mode: PaddingMode) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let map = PadIndexMap::new(pad, h, w, mode)?;
    let (ho, wo) = map.padded_shape();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = x.channel(ch);
        out.extend(
            map.indices()
                .iter()
                .map(|&i| if i < 0 { T::zero() } else { plane[i as usize] }),
        );
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Removes `pad` cells from every spatial edge.
pub fn crop_center<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (c, hp, wp) = x.chw()?;
    if hp < 2 * pad || wp < 2 * pad {
        return Err(Error::shape("crop_center", format!("{hp}x{wp} too small for pad {pad}")));
    }
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = x.channel(ch);
        for r in 0..h {
            let start = (r + pad) * wp + pad;
            out.extend_from_slice(&plane[start..start + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}
