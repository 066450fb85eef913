//! Gridded data: the `GFLD` file format, z-score normalization, the
//! synthetic rotating-blob generator and (input, target) pair selection.

mod gridfile;
mod norm;
mod synthetic;

use std::collections::HashSet;
use std::ops::Range;
use std::sync::Arc;

pub use gridfile::GridFile;
pub use norm::{compute_norm_stats, NormStats};
pub use synthetic::{generate_synthetic, Synthetic, SyntheticSpec, BLOB_CHANNELS, INSOLATION, OROGRAPHY};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::padding::GridSpec;

pub const MAX_LAG_HOURS: u32 = 23;

#[derive(Debug)]
pub enum Source {
    /// Daily frames only.
    File(GridFile),
    /// Analytic frames at any hour.
    Synthetic(Synthetic),
}

/// A contiguous window of days over a source, with the statistics used to
/// normalize every frame it hands out.
#[derive(Clone, Debug)]
pub struct Dataset {
    source: Arc<Source>,
    pub stats: NormStats,
    days: Range<usize>,
    channels: Vec<String>,
    dates: Arc<[i32]>,
    n_lat: usize,
    n_lon: usize,
}

/// One training example: input at `day` (+ `lag_hours`), target `lead`
/// days later at the same hour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub day: usize,
    pub lead: usize,
    pub lag_hours: u32,
}

impl Dataset {
    pub fn from_file(file: GridFile, stats: NormStats) -> Result<Self> {
        let channels = file.channels.clone();
        let dates: Arc<[i32]> = file.dates.clone().into();
        let (n_lat, n_lon) = (file.n_lat, file.n_lon);
        Self::assemble(Source::File(file), stats, channels, dates, n_lat, n_lon)
    }

    pub fn synthetic(gen: Synthetic, stats: NormStats) -> Result<Self> {
        let channels = gen.spec.channel_names();
        let dates: Arc<[i32]> = gen.spec.dates().into();
        let (n_lat, n_lon) = (gen.spec.n_lat, gen.spec.n_lon);
        Self::assemble(Source::Synthetic(gen), stats, channels, dates, n_lat, n_lon)
    }

    fn assemble(
        source: Source,
        stats: NormStats,
        channels: Vec<String>,
        dates: Arc<[i32]>,
        n_lat: usize,
        n_lon: usize,
    ) -> Result<Self> {
        if stats.channels != channels {
            return Err(Error::Data(format!(
                "statistics channels {:?} do not match data channels {channels:?}",
                stats.channels
            )));
        }
        Ok(Self {
            source: Arc::new(source),
            stats,
            days: 0..dates.len(),
            channels,
            dates,
            n_lat,
            n_lon,
        })
    }

    /// Sub-window, relative to this one.
    pub fn window(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.n_days() {
            return Err(Error::Data(format!("window {range:?} outside 0..{}", self.n_days())));
        }
        Ok(Self {
            days: self.days.start + range.start..self.days.start + range.end,
            ..self.clone()
        })
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn date(&self, day: usize) -> i32 {
        self.dates[self.days.start + day]
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::regular(self.n_lat, self.n_lon)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels.len(), self.n_lat, self.n_lon]
    }

    pub fn supports_lag(&self, lag_hours: u32) -> bool {
        match *self.source {
            Source::File(_) => lag_hours == 0,
            Source::Synthetic(_) => lag_hours <= MAX_LAG_HOURS,
        }
    }

    /// Unnormalized frame.
    pub fn raw_frame(&self, day: usize, lag_hours: u32) -> Result<Tensor<f32>> {
        if day >= self.n_days() {
            return Err(Error::Data(format!("day {day} outside window of {} days", self.n_days())));
        }
        let abs = self.days.start + day;
        match &*self.source {
            Source::File(f) if lag_hours == 0 => Ok(f.frame_tensor(abs)),
            Source::File(_) => Err(Error::Data(format!(
                "lag {lag_hours}h unavailable: file holds daily frames only"
            ))),
            Source::Synthetic(_) if lag_hours > MAX_LAG_HOURS => {
                Err(Error::Data(format!("lag {lag_hours}h outside 0..={MAX_LAG_HOURS}")))
            }
            Source::Synthetic(g) => Ok(g.frame_at(abs as f64 + lag_hours as f64 / 24.0)),
        }
    }

    /// Normalized frame.
    pub fn frame(&self, day: usize, lag_hours: u32) -> Result<Tensor<f32>> {
        self.stats.normalize(&self.raw_frame(day, lag_hours)?)
    }

    pub fn load(&self, pair: &PairRef) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((
            self.frame(pair.day, pair.lag_hours)?,
            self.frame(pair.day + pair.lead, pair.lag_hours)?,
        ))
    }

    /// All `(X(k), X(k + lead))` pairs in date order, normalized.
    pub fn pair_iter(&self, lead: usize) -> Result<impl Iterator<Item = Result<(Tensor<f32>, Tensor<f32>)>> + '_> {
        Ok(pairs(self, lead)?.into_iter().map(move |p| self.load(&p)))
    }
}

/// Pairs whose dates sit exactly `lead` days apart.
pub fn pairs(ds: &Dataset, lead: usize) -> Result<Vec<PairRef>> {
    lag_augment(ds, &[0], lead)
}

/// Pairs for every lag in `lags`, grouped by lag.
pub fn lag_augment(ds: &Dataset, lags: &[u32], lead: usize) -> Result<Vec<PairRef>> {
    if lead == 0 {
        return Err(Error::Data("lead must be at least 1 day".into()));
    }
    if lead >= ds.n_days() {
        return Err(Error::Data(format!("lead {lead} needs more than {} days", ds.n_days())));
    }
    if lags.is_empty() {
        return Err(Error::Data("no lags requested".into()));
    }
    let mut seen = HashSet::new();
    for &lag in lags {
        if !seen.insert(lag) {
            return Err(Error::Data(format!("lag {lag}h listed twice")));
        }
        if !ds.supports_lag(lag) {
            return Err(Error::Data(format!("lag {lag}h unavailable in this dataset")));
        }
    }
    let mut out = Vec::with_capacity(lags.len() * (ds.n_days() - lead));
    for &lag_hours in lags {
        for day in 0..ds.n_days() - lead {
            if (ds.date(day + lead) - ds.date(day)) as i64 == lead as i64 {
                out.push(PairRef { day, lead, lag_hours });
            }
        }
    }
    Ok(out)
}

/// Normalization stats over the first `train_days` of a synthetic spec.
pub fn synthetic_dataset(spec: &SyntheticSpec, train_days: usize) -> Result<Dataset> {
    let file = generate_synthetic(spec)?;
    let stats = compute_norm_stats(&file, 0..train_days.min(file.n_time()))?;
    Dataset::synthetic(Synthetic::new(spec.clone())?, stats)
}
