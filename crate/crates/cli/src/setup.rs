//! Data loading, train/val/test windows, statics and model resolution.

use std::path::Path;

use karina_core::data::{
    compute_norm_stats, synthetic_dataset, Dataset, GridFile, NormStats, Source, INSOLATION, OROGRAPHY,
};
use karina_core::engine::Tensor;
use karina_core::metrics::{fit_climatology, ClimatologyTable, YEAR_DAYS};
use karina_core::model::{load_checkpoint, load_checkpoint_expecting, KarinaModel, ModelConfig};
use karina_core::rollout::{StaticChannel, StaticMode};

use crate::config::{DataSource, RunConfig, Statics};
use crate::CliError;

/// The whole series plus its train / validation / test windows. Windows
/// are consecutive: `[0, train)`, `[train, train + val)`, then the rest.
pub struct Prepared {
    pub full: Dataset,
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    /// Absolute index of the first test day.
    pub test_start: usize,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let full = match cfg.data_source {
        DataSource::Synthetic => {
            let ds = synthetic_dataset(&cfg.synthetic, cfg.train_days)?;
            match &cfg.data_stats {
                Some(p) => rebuild(&ds, NormStats::load(p)?)?,
                None => ds,
            }
        }
        DataSource::File => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| CliError::config("data.path", "required when data.source=file"))?;
            let file = GridFile::read(path)?;
            let stats = match &cfg.data_stats {
                Some(p) => NormStats::load(p)?,
                None => {
                    if cfg.train_days > file.n_time() {
                        return Err(CliError::config(
                            "data.train_days",
                            format!("{} days requested, file holds {}", cfg.train_days, file.n_time()),
                        ));
                    }
                    compute_norm_stats(&file, 0..cfg.train_days)?
                }
            };
            Dataset::from_file(file, stats)?
        }
    };
    let n = full.n_days();
    let test_start = cfg.train_days + cfg.val_days;
    if test_start + 2 > n {
        return Err(CliError::config(
            "data.train_days",
            format!("train + val days ({test_start}) leave fewer than 2 test days out of {n}"),
        ));
    }
    Ok(Prepared {
        train: full.window(0..cfg.train_days)?,
        val: (cfg.val_days > 0)
            .then(|| full.window(cfg.train_days..test_start))
            .transpose()?,
        test: full.window(test_start..n)?,
        test_start,
        full,
    })
}

fn rebuild(ds: &Dataset, stats: NormStats) -> Result<Dataset, CliError> {
    match ds.source() {
        Source::Synthetic(g) => Ok(Dataset::synthetic(g.clone(), stats)?),
        Source::File(f) => Ok(Dataset::from_file(f.clone(), stats)?),
    }
}

/// Fills channel counts from the data, refusing explicit values that disagree.
pub fn resolve_model(cfg: &mut RunConfig, channels: usize) -> Result<ModelConfig, CliError> {
    for (key, value) in [
        ("model.in_channels", cfg.model.in_channels),
        ("model.out_channels", cfg.model.out_channels),
    ] {
        if cfg.is_explicit(key) && value != channels {
            return Err(CliError::config(key, format!("set to {value}, data has {channels} channels")));
        }
    }
    cfg.model.in_channels = channels;
    cfg.model.out_channels = channels;
    cfg.model
        .validate()
        .map_err(|e| CliError::config("model", e.to_string()))?;
    Ok(cfg.model.clone())
}

/// Loads a checkpoint for `key`. When the config names any model key the
/// stored architecture must match it; otherwise the config adopts it.
pub fn load_model(cfg: &mut RunConfig, key: &str, path: &Path, channels: usize) -> Result<KarinaModel<f32>, CliError> {
    let with_path = |e: karina_core::Error| match e {
        karina_core::Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        e => e.into(),
    };
    let model = if cfg.has_explicit_prefix("model.") {
        let expected = resolve_model(cfg, channels)?;
        load_checkpoint_expecting(path, &expected).map_err(with_path)?
    } else {
        let model = load_checkpoint(path).map_err(with_path)?;
        cfg.model = model.config.clone();
        model
    };
    if model.config.in_channels != channels || model.config.out_channels != channels {
        return Err(CliError::Runtime(format!(
            "{key}: checkpoint maps {} to {} channels, data has {channels}",
            model.config.in_channels, model.config.out_channels
        )));
    }
    Ok(model)
}

pub fn resolve_statics(cfg: &RunConfig, channels: &[String]) -> Result<Vec<StaticChannel>, CliError> {
    let find = |name: &str| channels.iter().position(|c| c == name);
    match &cfg.statics {
        Statics::None => Ok(Vec::new()),
        Statics::Auto => Ok([(OROGRAPHY, StaticMode::Hold), (INSOLATION, StaticMode::Forcing)]
            .into_iter()
            .filter_map(|(name, mode)| find(name).map(|channel| StaticChannel { channel, mode }))
            .collect()),
        Statics::List(list) => list
            .iter()
            .map(|(name, mode)| {
                find(name)
                    .map(|channel| StaticChannel { channel, mode: *mode })
                    .ok_or_else(|| CliError::config("statics", format!("no channel named `{name}`")))
            })
            .collect(),
    }
}

/// Channels that are forecast rather than reset: everything except held
/// and forced statics.
pub fn scored_channels(statics: &[StaticChannel], n_channel: usize) -> Vec<usize> {
    (0..n_channel)
        .filter(|c| {
            !statics
                .iter()
                .any(|s| s.channel == *c && s.mode != StaticMode::Recycle)
        })
        .collect()
}

/// Normalized truth at absolute `day`. Synthetic sources extend past the
/// end of the series.
pub fn truth_frame(full: &Dataset, day: usize) -> karina_core::Result<Tensor<f32>> {
    match full.source() {
        Source::Synthetic(g) if day >= full.n_days() => full.stats.normalize(&g.frame_at(day as f64)),
        _ => full.frame(day, 0),
    }
}

/// Harmonic climatology for ACC. Uses the training window when it spans two
/// years, otherwise the two years a synthetic source generates before its
/// first day.
pub fn climatology(prep: &Prepared) -> Result<ClimatologyTable, CliError> {
    let train = &prep.train;
    let span = train.date(train.n_days() - 1) - train.date(0);
    if span as f64 >= 2.0 * YEAR_DAYS {
        let frames = (0..train.n_days())
            .map(|d| train.raw_frame(d, 0))
            .collect::<karina_core::Result<Vec<_>>>()?;
        let days: Vec<i32> = (0..train.n_days()).map(|d| train.date(d)).collect();
        return Ok(fit_climatology(&frames, &days)?);
    }
    match prep.full.source() {
        Source::Synthetic(g) => {
            let history = (2.0 * YEAR_DAYS).ceil() as i32 + 1;
            let start = prep.full.date(0);
            let frames: Vec<Tensor<f32>> = (-history..0).map(|t| g.frame_at(t as f64)).collect();
            let days: Vec<i32> = (-history..0).map(|t| start + t).collect();
            Ok(fit_climatology(&frames, &days)?)
        }
        Source::File(_) => Err(CliError::config(
            "eval.acc",
            format!("climatology needs two years of training data, window spans {span} days"),
        )),
    }
}
