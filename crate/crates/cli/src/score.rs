//! Forecasts from every day of a test window, scored lead by lead.

use std::ops::Range;

use rayon::prelude::*;

use karina_core::data::{Dataset, Source};
use karina_core::engine::Tensor;
use karina_core::metrics::{acc, rmse_rows, weighted_rmse, ClimatologyTable, Weighting};
use karina_core::model::KarinaModel;
use karina_core::padding::GridSpec;
use karina_core::rollout::{rollout, RolloutOptions, StaticChannel};

use crate::config::ForecastKind;
use crate::setup::truth_frame;
use crate::CliError;

/// Physical-unit truth at absolute `day`.
pub fn raw_truth(full: &Dataset, day: usize) -> karina_core::Result<Tensor<f32>> {
    match full.source() {
        Source::Synthetic(g) if day >= full.n_days() => Ok(g.frame_at(day as f64)),
        _ => full.raw_frame(day, 0),
    }
}

/// Date of absolute `day`, continuing daily past the last frame.
pub fn date_of(full: &Dataset, day: usize) -> i32 {
    let last = full.n_days() - 1;
    if day <= last {
        full.date(day)
    } else {
        full.date(last) + (day - last) as i32
    }
}

pub struct Forecaster<'a> {
    pub kind: ForecastKind,
    pub model: Option<&'a KarinaModel<f32>>,
    pub statics: &'a [StaticChannel],
    pub full: &'a Dataset,
}

impl Forecaster<'_> {
    /// Physical-unit forecasts for leads `1..=horizon` from absolute `day`.
    pub fn run(&self, day: usize, horizon: usize) -> Result<Vec<Tensor<f32>>, CliError> {
        let full = self.full;
        match self.kind {
            ForecastKind::Truth => Ok((1..=horizon)
                .map(|l| raw_truth(full, day + l))
                .collect::<karina_core::Result<_>>()?),
            ForecastKind::Persistence => Ok(vec![raw_truth(full, day)?; horizon]),
            ForecastKind::Model => {
                let model = self
                    .model
                    .ok_or_else(|| CliError::Runtime("model forecast without a model".into()))?;
                let init = truth_frame(full, day)?;
                let forcing = |lead: usize| truth_frame(full, day + lead);
                let opts = RolloutOptions {
                    statics: self.statics.to_vec(),
                    forcing: Some(&forcing),
                    init_date: date_of(full, day),
                    ..RolloutOptions::new(horizon)
                };
                let series = rollout(model, &init, &full.stats, &opts)?;
                if let Some(b) = series.blowup {
                    return Err(CliError::Runtime(format!(
                        "forecast from day {day} blew up at lead {}: {:?}",
                        b.step, b.reason
                    )));
                }
                Ok(series.steps)
            }
        }
    }
}

pub struct ScoreSpec<'a> {
    pub channels: &'a [usize],
    pub horizon: usize,
    pub grid: &'a GridSpec,
    pub weighting: Weighting,
    pub acc: Option<(&'a ClimatologyTable, Weighting)>,
    /// Extra RMSE restricted to these rows.
    pub rows: Option<&'a [usize]>,
}

/// Scores averaged over initial days, indexed `[channel][lead - 1]` in the
/// order of `ScoreSpec::channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub rmse: Vec<Vec<f64>>,
    pub acc: Option<Vec<Vec<f64>>>,
    pub rows_rmse: Option<Vec<Vec<f64>>>,
}

struct DayScores {
    rmse: Vec<f64>,
    acc: Vec<f64>,
    rows: Vec<f64>,
}

/// Verifies forecasts from every absolute day in `days`.
pub fn verify(fc: &Forecaster<'_>, days: Range<usize>, spec: &ScoreSpec<'_>) -> Result<Verification, CliError> {
    if days.is_empty() {
        return Err(CliError::Runtime("no initial days to verify".into()));
    }
    let (nc, h) = (spec.channels.len(), spec.horizon);
    let per_day = days
        .into_par_iter()
        .map(|day| -> Result<DayScores, CliError> {
            let forecasts = fc.run(day, h)?;
            let mut s = DayScores {
                rmse: Vec::with_capacity(nc * h),
                acc: Vec::new(),
                rows: Vec::new(),
            };
            for (i, f) in forecasts.iter().enumerate() {
                let truth = raw_truth(fc.full, day + i + 1)?;
                let clim = spec
                    .acc
                    .map(|(table, _)| table.evaluate(date_of(fc.full, day + i + 1) as f64));
                for &c in spec.channels {
                    let (fp, tp) = (f.channel(c), truth.channel(c));
                    s.rmse.push(weighted_rmse(fp, tp, spec.grid, spec.weighting)?);
                    if let (Some(clim), Some((_, w))) = (&clim, spec.acc) {
                        s.acc.push(acc(fp, tp, clim.channel(c), spec.grid, w)?);
                    }
                    if let Some(rows) = spec.rows {
                        s.rows.push(rmse_rows(fp, tp, spec.grid, rows)?);
                    }
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = per_day.len() as f64;
    let mean = |pick: &dyn Fn(&DayScores) -> &[f64]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; h]; nc];
        for d in &per_day {
            for (k, v) in pick(d).iter().enumerate() {
                out[k % nc][k / nc] += v;
            }
        }
        out.iter_mut().flatten().for_each(|v| *v /= n);
        out
    };
    Ok(Verification {
        rmse: mean(&|d| &d.rmse),
        acc: spec.acc.is_some().then(|| mean(&|d| &d.acc)),
        rows_rmse: spec.rows.is_some().then(|| mean(&|d| &d.rows)),
    })
}

/// The `k` rows nearest each pole.
pub fn pole_rows(grid: &GridSpec, k: usize) -> Vec<usize> {
    let k = k.min(grid.n_lat / 2);
    (0..k).chain(grid.n_lat - k..grid.n_lat).collect()
}
