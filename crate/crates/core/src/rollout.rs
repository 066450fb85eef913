//! Autoregressive multi-day forecasts and drift diagnostics.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{GridFile, NormStats};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::KarinaModel;
use crate::padding::GridSpec;

/// Normalized-space std above which a rollout counts as blown up.
pub const BLOWUP_STD: f64 = 100.0;

/// How a boundary channel is set before each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaticMode {
    /// Reset to the initial state's value (orography, constants).
    Hold,
    /// Reset to the true value at the step's lead (insolation).
    Forcing,
    /// Keep the model's own prediction.
    Recycle,
}

impl StaticMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StaticMode::Hold => "hold",
            StaticMode::Forcing => "forcing",
            StaticMode::Recycle => "recycle",
        }
    }
}

impl FromStr for StaticMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hold" => Ok(StaticMode::Hold),
            "forcing" => Ok(StaticMode::Forcing),
            "recycle" => Ok(StaticMode::Recycle),
            other => Err(Error::invalid(format!("unknown static mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StaticChannel {
    pub channel: usize,
    pub mode: StaticMode,
}

/// Supplies the normalized true field at a lead, for forcing channels.
pub type ForcingFn<'a> = dyn Fn(usize) -> Result<Tensor<f32>> + Sync + 'a;

pub struct RolloutOptions<'a> {
    pub horizon: usize,
    pub statics: Vec<StaticChannel>,
    /// Required when any channel uses [`StaticMode::Forcing`].
    pub forcing: Option<&'a ForcingFn<'a>>,
    /// Added to the step index before calling `forcing`, for continuing a rollout.
    pub lead_offset: usize,
    pub init_date: i32,
    pub checkpoint_id: String,
}

impl<'a> RolloutOptions<'a> {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            statics: Vec::new(),
            forcing: None,
            lead_offset: 0,
            init_date: 0,
            checkpoint_id: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlowupReason {
    NonFinite,
    StdExceeded { channel: usize, std: f64 },
}

/// The step (1-based lead) at which a rollout was abandoned.
#[derive(Clone, Debug, PartialEq)]
pub struct Blowup {
    pub step: usize,
    pub reason: BlowupReason,
}

#[derive(Clone, Debug)]
pub struct ForecastSeries {
    pub init_date: i32,
    pub channels: Vec<String>,
    pub stats: NormStats,
    pub checkpoint_id: String,
    /// Denormalized initial state.
    pub init: Tensor<f32>,
    /// Denormalized fields at leads 1, 2, ...
    pub steps: Vec<Tensor<f32>>,
    /// Normalized state after the last completed step.
    pub last_state: Tensor<f32>,
    pub horizon: usize,
    pub blowup: Option<Blowup>,
}

impl ForecastSeries {
    /// All steps as one grid file, dated `init_date + lead`.
    pub fn to_gridfile(&self) -> Result<GridFile> {
        let dates = (1..=self.steps.len() as i32).map(|l| self.init_date + l).collect();
        GridFile::from_frames(self.channels.clone(), dates, &self.steps)
    }

    /// Step `lead` (1-based) as a single-frame grid file.
    pub fn lead_gridfile(&self, lead: usize) -> Result<GridFile> {
        let step = self
            .steps
            .get(lead.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("lead {lead} outside 1..={}", self.steps.len())))?;
        GridFile::from_frames(self.channels.clone(), vec![self.init_date + lead as i32], std::slice::from_ref(step))
    }
}

fn normalized_std(x: &Tensor<f32>, c: usize) -> f64 {
    let v = x.channel(c);
    let n = v.len() as f64;
    let mean = v.iter().map(|&a| a as f64).sum::<f64>() / n;
    (v.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Applies `model` `horizon` times from the normalized `init` state.
pub fn rollout(model: &KarinaModel<f32>, init: &Tensor<f32>, stats: &NormStats, opts: &RolloutOptions<'_>) -> Result<ForecastSeries> {
    if opts.horizon == 0 {
        return Err(Error::invalid("rollout horizon must be at least 1"));
    }
    let (c, _, _) = init.chw()?;
    if c != stats.n_channel() {
        return Err(Error::invalid(format!("state has {c} channels, statistics cover {}", stats.n_channel())));
    }
    for s in &opts.statics {
        if s.channel >= c {
            return Err(Error::invalid(format!("static channel {} outside 0..{c}", s.channel)));
        }
        if s.mode == StaticMode::Forcing && opts.forcing.is_none() {
            return Err(Error::invalid(format!("channel {} needs a forcing source", s.channel)));
        }
    }
    if !init.all_finite() {
        return Err(Error::NonFinite { op: "rollout init" });
    }
    let mut series = ForecastSeries {
        init_date: opts.init_date,
        channels: stats.channels.clone(),
        stats: stats.clone(),
        checkpoint_id: opts.checkpoint_id.clone(),
        init: stats.denormalize(init)?,
        steps: Vec::with_capacity(opts.horizon),
        last_state: init.clone(),
        horizon: opts.horizon,
        blowup: None,
    };
    let mut state = init.clone();
    for step in 1..=opts.horizon {
        let mut next = match model.forward(&state) {
            Ok(y) => y,
            Err(Error::NonFinite { .. }) => {
                series.blowup = Some(Blowup {
                    step,
                    reason: BlowupReason::NonFinite,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let truth = match opts.forcing {
            Some(f) if opts.statics.iter().any(|s| s.mode == StaticMode::Forcing) => Some(f(opts.lead_offset + step)?),
            _ => None,
        };
        for s in &opts.statics {
            let source = match s.mode {
                StaticMode::Hold => init,
                StaticMode::Forcing => truth.as_ref().expect("forcing checked above"),
                StaticMode::Recycle => continue,
            };
            next.channel_mut(s.channel).copy_from_slice(source.channel(s.channel));
        }
        if !next.all_finite() {
            series.blowup = Some(Blowup {
                step,
                reason: BlowupReason::NonFinite,
            });
            break;
        }
        if let Some((channel, std)) = (0..c)
            .map(|ch| (ch, normalized_std(&next, ch)))
            .find(|&(_, s)| s > BLOWUP_STD)
        {
            series.blowup = Some(Blowup {
                step,
                reason: BlowupReason::StdExceeded { channel, std },
            });
            break;
        }
        series.steps.push(stats.denormalize(&next)?);
        state = next;
    }
    series.last_state = state;
    Ok(series)
}

/// Latitude-weighted mean and std of one plane.
pub fn weighted_moments(plane: &[f32], grid: &GridSpec) -> (f64, f64) {
    let w = &grid.row_weights;
    let total: f64 = w.iter().sum::<f64>() * grid.n_lon as f64;
    let mean = plane
        .chunks(grid.n_lon)
        .zip(w)
        .map(|(row, &wr)| wr * row.iter().map(|&v| v as f64).sum::<f64>())
        .sum::<f64>()
        / total;
    let var = plane
        .chunks(grid.n_lon)
        .zip(w)
        .map(|(row, &wr)| wr * row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / total;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub step: usize,
    pub channel: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Change of the weighted mean since the previous step (or the initial state).
    pub mean_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    /// Weighted std of each channel in the initial state.
    pub init_std: Vec<f64>,
}

impl DriftReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,channel,mean,std,min,max,mean_drift\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.step, r.channel, r.mean, r.std, r.min, r.max, r.mean_drift
            );
        }
        s
    }

    /// Largest `std / initial std` over steps, per channel. Channels with a
    /// flat initial state report the absolute std instead.
    pub fn max_std_ratio(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.init_std.len()];
        let n = self.init_std.len();
        for (i, r) in self.rows.iter().enumerate() {
            let c = i % n;
            let base = self.init_std[c];
            let ratio = if base > 0.0 { r.std / base } else { r.std };
            out[c] = out[c].max(ratio);
        }
        out
    }
}

/// Per-step, per-channel summary of a forecast series in physical units.
pub fn drift_report(series: &ForecastSeries, grid: &GridSpec) -> Result<DriftReport> {
    if series.steps.is_empty() {
        return Err(Error::invalid("forecast series has no steps"));
    }
    let (c, h, w) = series.init.chw()?;
    if (h, w) != (grid.n_lat, grid.n_lon) {
        return Err(Error::invalid(format!("series grid {h}x{w} vs {}x{}", grid.n_lat, grid.n_lon)));
    }
    let init: Vec<(f64, f64)> = (0..c).map(|ch| weighted_moments(series.init.channel(ch), grid)).collect();
    let mut prev: Vec<f64> = init.iter().map(|m| m.0).collect();
    let mut rows = Vec::with_capacity(series.steps.len() * c);
    for (i, field) in series.steps.iter().enumerate() {
        for ch in 0..c {
            let plane = field.channel(ch);
            let (mean, std) = weighted_moments(plane, grid);
            let min = plane.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
            let max = plane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            rows.push(DriftRow {
                step: i + 1,
                channel: series.channels[ch].clone(),
                mean,
                std,
                min,
                max,
                mean_drift: mean - prev[ch],
            });
            prev[ch] = mean;
        }
    }
    Ok(DriftReport {
        rows,
        init_std: init.iter().map(|m| m.1).collect(),
    })
}
