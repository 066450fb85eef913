//! Forecast verification: latitude-weighted RMSE, anomaly correlation
//! against a harmonic climatology, member regression maps and box averages.
//!
//! Field arguments are single planes of `n_lat * n_lon` values, row-major
//! north to south.

use nalgebra::{SMatrix, SVector};

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::padding::GridSpec;

/// Harmonic period in days.
pub const YEAR_DAYS: f64 = 365.25;
pub const N_HARMONICS: usize = 3;
pub const N_BASIS: usize = 1 + 2 * N_HARMONICS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Latitude,
    Uniform,
}

/// Per-row weights for the grid, cos(latitude) normalized to unit mean.
pub fn latitude_weights(grid: &GridSpec) -> Vec<f64> {
    grid.row_weights.clone()
}

fn row_weights(grid: &GridSpec, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Latitude => grid.row_weights.clone(),
        Weighting::Uniform => vec![1.0; grid.n_lat],
    }
}

fn check_plane<T: Real>(what: &str, field: &[T], grid: &GridSpec) -> Result<()> {
    if field.len() != grid.n_lat * grid.n_lon {
        return Err(Error::Metric(format!(
            "{what} has {} values, grid is {}x{}",
            field.len(),
            grid.n_lat,
            grid.n_lon
        )));
    }
    if let Some(i) = field.iter().position(|v| !v.is_finite()) {
        return Err(Error::Metric(format!(
            "non-finite {what} value at row {}, column {}",
            i / grid.n_lon,
            i % grid.n_lon
        )));
    }
    Ok(())
}

/// `sqrt(Σ w_j (y − ŷ)² / (n_lat · n_lon))` over one plane.
pub fn weighted_rmse<T: Real>(forecast: &[T], truth: &[T], grid: &GridSpec, weighting: Weighting) -> Result<f64> {
    check_plane("forecast", forecast, grid)?;
    check_plane("truth", truth, grid)?;
    let w = row_weights(grid, weighting);
    let mut acc = 0.0;
    for (j, (fr, tr)) in forecast.chunks(grid.n_lon).zip(truth.chunks(grid.n_lon)).enumerate() {
        let row: f64 = fr
            .iter()
            .zip(tr)
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        acc += w[j] * row;
    }
    Ok((acc / forecast.len() as f64).sqrt())
}

/// Weighted RMSE of every channel of two `[C, H, W]` tensors.
pub fn rmse_per_channel<T: Real>(forecast: &Tensor<T>, truth: &Tensor<T>, grid: &GridSpec, weighting: Weighting) -> Result<Vec<f64>> {
    if forecast.shape() != truth.shape() {
        return Err(Error::Metric(format!(
            "forecast {:?} vs truth {:?}",
            forecast.shape(),
            truth.shape()
        )));
    }
    let (c, _, _) = forecast.chw()?;
    (0..c)
        .map(|ch| weighted_rmse(forecast.channel(ch), truth.channel(ch), grid, weighting))
        .collect()
}

/// Weighted RMSE over a subset of rows, normalized by the rows used.
pub fn rmse_rows<T: Real>(forecast: &[T], truth: &[T], grid: &GridSpec, rows: &[usize]) -> Result<f64> {
    check_plane("forecast", forecast, grid)?;
    check_plane("truth", truth, grid)?;
    if rows.is_empty() || rows.iter().any(|&r| r >= grid.n_lat) {
        return Err(Error::Metric(format!("invalid row selection {rows:?}")));
    }
    let n = grid.n_lon;
    let (mut acc, mut wsum) = (0.0, 0.0);
    for &r in rows {
        let w = grid.row_weights[r];
        for i in r * n..(r + 1) * n {
            let d = forecast[i].as_f64() - truth[i].as_f64();
            acc += w * d * d;
        }
        wsum += w * n as f64;
    }
    Ok((acc / wsum).sqrt())
}

/// Basis row `[1, cos(2πk t/P), sin(2πk t/P), ...]` for day `t`.
pub fn harmonic_basis(day: f64) -> [f64; N_BASIS] {
    let mut b = [0.0; N_BASIS];
    b[0] = 1.0;
    for k in 1..=N_HARMONICS {
        let phase = std::f64::consts::TAU * k as f64 * day / YEAR_DAYS;
        b[2 * k - 1] = phase.cos();
        b[2 * k] = phase.sin();
    }
    b
}

/// Per-point mean plus three annual harmonics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClimatologyTable {
    pub n_channel: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    /// `[a0, a1, b1, a2, b2, a3, b3]` per point, point-major.
    pub coeffs: Vec<f64>,
    pub first_day: i32,
    pub last_day: i32,
}

impl ClimatologyTable {
    pub fn point(&self, channel: usize, row: usize, col: usize) -> &[f64] {
        let p = (channel * self.n_lat + row) * self.n_lon + col;
        &self.coeffs[p * N_BASIS..(p + 1) * N_BASIS]
    }

    /// Climatological `[C, H, W]` state on `day`.
    pub fn evaluate(&self, day: f64) -> Tensor<f64> {
        let b = harmonic_basis(day);
        let data = self
            .coeffs
            .chunks_exact(N_BASIS)
            .map(|c| c.iter().zip(&b).map(|(a, x)| a * x).sum())
            .collect();
        Tensor::new(vec![self.n_channel, self.n_lat, self.n_lon], data).expect("consistent table")
    }

    pub fn amplitude(&self, channel: usize, row: usize, col: usize, k: usize) -> f64 {
        let c = self.point(channel, row, col);
        c[2 * k - 1].hypot(c[2 * k])
    }
}

/// Least-squares harmonic fit at every point of a `[C, H, W]` series.
/// Needs at least two full annual cycles between the first and last date.
pub fn fit_climatology<T: Real>(fields: &[Tensor<T>], days: &[i32]) -> Result<ClimatologyTable> {
    if fields.len() != days.len() || fields.is_empty() {
        return Err(Error::Metric(format!("{} fields for {} dates", fields.len(), days.len())));
    }
    let first = *days.iter().min().expect("non-empty");
    let last = *days.iter().max().expect("non-empty");
    let span = (last - first + 1) as f64;
    if span < 2.0 * YEAR_DAYS {
        return Err(Error::Metric(format!(
            "climatology needs two annual cycles, dates span {span} days"
        )));
    }
    let (c, h, w) = fields[0].chw()?;
    if fields.iter().any(|f| f.shape() != [c, h, w]) {
        return Err(Error::Metric("fields differ in shape".into()));
    }

    let mut normal = SMatrix::<f64, N_BASIS, N_BASIS>::zeros();
    let basis: Vec<[f64; N_BASIS]> = days.iter().map(|&d| harmonic_basis(d as f64)).collect();
    for b in &basis {
        let v = SVector::<f64, N_BASIS>::from_row_slice(b);
        normal += v * v.transpose();
    }
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Metric("harmonic normal equations are singular".into()))?;

    let points = c * h * w;
    // rhs[p][k] = Σ_t basis_k(t) · y_p(t)
    let mut rhs = vec![0.0; points * N_BASIS];
    for (field, b) in fields.iter().zip(&basis) {
        for (p, v) in field.data().iter().enumerate() {
            let y = v.as_f64();
            let r = &mut rhs[p * N_BASIS..(p + 1) * N_BASIS];
            for k in 0..N_BASIS {
                r[k] += b[k] * y;
            }
        }
    }
    let mut coeffs = Vec::with_capacity(points * N_BASIS);
    for r in rhs.chunks_exact(N_BASIS) {
        let sol = chol.solve(&SVector::<f64, N_BASIS>::from_row_slice(r));
        coeffs.extend(sol.iter());
    }
    Ok(ClimatologyTable {
        n_channel: c,
        n_lat: h,
        n_lon: w,
        coeffs,
        first_day: first,
        last_day: last,
    })
}

/// Anomaly correlation of one plane against a climatology plane.
pub fn acc<T: Real>(forecast: &[T], truth: &[T], clim: &[f64], grid: &GridSpec, weighting: Weighting) -> Result<f64> {
    check_plane("forecast", forecast, grid)?;
    check_plane("truth", truth, grid)?;
    check_plane("climatology", clim, grid)?;
    let w = row_weights(grid, weighting);
    let n = grid.n_lon;
    let wt = |i: usize| w[i / n];
    let xa: Vec<f64> = truth.iter().zip(clim).map(|(x, c)| x.as_f64() - c).collect();
    let ya: Vec<f64> = forecast.iter().zip(clim).map(|(y, c)| y.as_f64() - c).collect();
    let wsum: f64 = (0..xa.len()).map(wt).sum();
    let xm = xa.iter().enumerate().map(|(i, v)| wt(i) * v).sum::<f64>() / wsum;
    let ym = ya.iter().enumerate().map(|(i, v)| wt(i) * v).sum::<f64>() / wsum;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..xa.len() {
        let (dx, dy) = (xa[i] - xm, ya[i] - ym);
        sxy += wt(i) * dx * dy;
        sxx += wt(i) * dx * dx;
        syy += wt(i) * dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("anomaly variance is zero, correlation undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Inputs to a member regression: one scalar index per member and one
/// field per member.
#[derive(Clone, Debug)]
pub struct RegressionRequest {
    pub index: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
    /// Report the field for a negative displacement of the index.
    pub negate: bool,
}

/// `r = Σ_m (Z_m − Z̄)(x_m − x̄) / sqrt(Σ_m (Z_m − Z̄)²)` at every point.
pub fn regression_map(req: &RegressionRequest) -> Result<Vec<f64>> {
    let m = req.index.len();
    if m < 2 || req.fields.len() != m {
        return Err(Error::Metric(format!(
            "regression needs at least two members with one field each, got {m} and {}",
            req.fields.len()
        )));
    }
    let n = req.fields[0].len();
    if req.fields.iter().any(|f| f.len() != n) {
        return Err(Error::Metric("member fields differ in length".into()));
    }
    let zm = req.index.iter().sum::<f64>() / m as f64;
    let dz: Vec<f64> = req.index.iter().map(|z| z - zm).collect();
    let norm = dz.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Metric("index has zero variance across members".into()));
    }
    let sign = if req.negate { -1.0 } else { 1.0 };
    Ok((0..n)
        .map(|p| {
            let xm = req.fields.iter().map(|f| f[p]).sum::<f64>() / m as f64;
            let cov: f64 = req.fields.iter().zip(&dz).map(|(f, d)| d * (f[p] - xm)).sum();
            sign * cov / norm
        })
        .collect())
}

/// Inclusive lat-lon box; longitudes in degrees east, wrapping allowed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatLonBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

/// 40°W–10°W, 30°N–45°N.
pub const NORTH_ATLANTIC: LatLonBox = LatLonBox {
    lon_min: 320.0,
    lon_max: 350.0,
    lat_min: 30.0,
    lat_max: 45.0,
};

pub const GLOBE: LatLonBox = LatLonBox {
    lon_min: 0.0,
    lon_max: 360.0,
    lat_min: -90.0,
    lat_max: 90.0,
};

impl LatLonBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        if lat < self.lat_min || lat > self.lat_max {
            return false;
        }
        if self.lon_max - self.lon_min >= 360.0 {
            return true;
        }
        let (lo, hi, x) = (
            self.lon_min.rem_euclid(360.0),
            self.lon_max.rem_euclid(360.0),
            lon.rem_euclid(360.0),
        );
        if lo <= hi {
            (lo..=hi).contains(&x)
        } else {
            x >= lo || x <= hi
        }
    }
}

/// Latitude-weighted mean over cells whose centers lie inside the box.
pub fn area_average<T: Real>(field: &[T], grid: &GridSpec, region: &LatLonBox) -> Result<f64> {
    check_plane("field", field, grid)?;
    let (mut acc, mut wsum) = (0.0, 0.0);
    for (j, &lat) in grid.lat_centers.iter().enumerate() {
        for (i, &lon) in grid.lon_centers.iter().enumerate() {
            if region.contains(lat, lon) {
                let w = grid.row_weights[j];
                acc += w * field[j * grid.n_lon + i].as_f64();
                wsum += w;
            }
        }
    }
    if wsum == 0.0 {
        return Err(Error::Metric(format!("no grid cell centers inside {region:?}")));
    }
    Ok(acc / wsum)
}
