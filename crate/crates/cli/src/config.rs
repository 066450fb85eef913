//! Plain-text `key=value` run configuration.
//!
//! Keys are grouped by prefix (`model.`, `train.`, `data.`, ...). Lines
//! starting with `#` are comments. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use karina_core::data::SyntheticSpec;
use karina_core::metrics::Weighting;
use karina_core::model::{ModelConfig, Variant};
use karina_core::rollout::StaticMode;
use karina_core::training::{default_phases, FinetunePhase, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForecastKind {
    Model,
    Persistence,
    /// Scores the verifying truth against itself.
    Truth,
}

/// Which boundary channels get reset during rollouts.
#[derive(Clone, Debug, PartialEq)]
pub enum Statics {
    /// `orography` held, `TISR` forced, other constant channels held; absent names skipped.
    Auto,
    None,
    List(Vec<(String, StaticMode)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_source: DataSource,
    pub data_path: Option<PathBuf>,
    /// Precomputed normalization statistics; computed from the training window when absent.
    pub data_stats: Option<PathBuf>,
    pub train_days: usize,
    pub val_days: usize,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub statics: Statics,
    pub finetune_init: Option<PathBuf>,
    pub finetune_phases: Vec<FinetunePhase>,
    pub eval_checkpoint: Option<PathBuf>,
    pub eval_forecast: ForecastKind,
    pub eval_leads: usize,
    pub eval_acc: bool,
    pub eval_weighting: Weighting,
    pub eval_acc_weighting: Weighting,
    pub rollout_checkpoint: Option<PathBuf>,
    pub rollout_horizon: usize,
    /// Day index into the whole data set; defaults to the first test day.
    pub rollout_init_day: Option<usize>,
    pub rollout_single_file: bool,
    pub ablate_variants: Vec<Variant>,
    pub ablate_leads: Vec<usize>,
    pub ablate_channel: Option<String>,
    pub ablate_pole_isolation: bool,
    pub ablate_pole_rows: usize,
    pub ablate_kernel_sweep: bool,
    pub ablate_kernels: Vec<usize>,
    /// Keys given explicitly, so derived values can be checked instead of overwritten.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_source: DataSource::Synthetic,
            data_path: None,
            data_stats: None,
            train_days: 300,
            val_days: 0,
            synthetic: SyntheticSpec::default(),
            // Channel counts are filled in from the data.
            model: ModelConfig::toy(0),
            train: TrainConfig::default(),
            statics: Statics::Auto,
            finetune_init: None,
            finetune_phases: default_phases(),
            eval_checkpoint: None,
            eval_forecast: ForecastKind::Model,
            eval_leads: 7,
            eval_acc: true,
            eval_weighting: Weighting::Latitude,
            eval_acc_weighting: Weighting::Latitude,
            rollout_checkpoint: None,
            rollout_horizon: 10,
            rollout_init_day: None,
            rollout_single_file: false,
            ablate_variants: Variant::ALL.to_vec(),
            ablate_leads: vec![1, 3, 5, 7],
            ablate_channel: None,
            ablate_pole_isolation: true,
            ablate_pole_rows: 5,
            ablate_kernel_sweep: false,
            ablate_kernels: vec![3, 5, 7],
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::config(key, format!("cannot parse `{value}`")))
}

fn list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn path_value(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn weighting(key: &str, value: &str) -> Result<Weighting, CliError> {
    match value.trim() {
        "latitude" => Ok(Weighting::Latitude),
        "uniform" => Ok(Weighting::Uniform),
        other => Err(CliError::config(key, format!("`{other}` is not latitude or uniform"))),
    }
}

fn weighting_str(w: Weighting) -> &'static str {
    match w {
        Weighting::Latitude => "latitude",
        Weighting::Uniform => "uniform",
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `--set` overrides, then `--seed`.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::config("--set", format!("`{s}` is not key=value")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = seed {
            cfg.set("seed", &seed.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}", n + 1), format!("`{line}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn has_explicit_prefix(&self, prefix: &str) -> bool {
        self.explicit.iter().any(|k| k.starts_with(prefix))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let core = |r: karina_core::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.source" => {
                self.data_source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "file" => DataSource::File,
                    other => return Err(CliError::config(key, format!("`{other}` is not synthetic or file"))),
                }
            }
            "data.path" => self.data_path = path_value(value),
            "data.stats" => self.data_stats = path_value(value),
            "data.train_days" => self.train_days = parse(key, value)?,
            "data.val_days" => self.val_days = parse(key, value)?,
            "statics" => {
                self.statics = match value {
                    "auto" => Statics::Auto,
                    "none" => Statics::None,
                    _ => Statics::List(
                        value
                            .split(',')
                            .map(|item| {
                                let (name, mode) = item
                                    .split_once(':')
                                    .ok_or_else(|| CliError::config(key, format!("`{item}` is not name:mode")))?;
                                let mode = mode.parse().map_err(|e: karina_core::Error| CliError::config(key, e.to_string()))?;
                                Ok((name.trim().to_string(), mode))
                            })
                            .collect::<Result<_, CliError>>()?,
                    ),
                }
            }
            "finetune.init" => self.finetune_init = path_value(value),
            "finetune.phases" => {
                self.finetune_phases = value
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|p| FinetunePhase::parse(p).map_err(|e| CliError::config(key, e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "eval.checkpoint" => self.eval_checkpoint = path_value(value),
            "eval.forecast" => {
                self.eval_forecast = match value {
                    "model" => ForecastKind::Model,
                    "persistence" => ForecastKind::Persistence,
                    "truth" => ForecastKind::Truth,
                    other => return Err(CliError::config(key, format!("`{other}` is not model, persistence or truth"))),
                }
            }
            "eval.leads" => self.eval_leads = parse(key, value)?,
            "eval.acc" => self.eval_acc = parse(key, value)?,
            "eval.weighting" => self.eval_weighting = weighting(key, value)?,
            "eval.acc_weighting" => self.eval_acc_weighting = weighting(key, value)?,
            "rollout.checkpoint" => self.rollout_checkpoint = path_value(value),
            "rollout.horizon" => self.rollout_horizon = parse(key, value)?,
            "rollout.init_day" => {
                self.rollout_init_day = match value {
                    "" | "test" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "rollout.single_file" => self.rollout_single_file = parse(key, value)?,
            "ablate.variants" => {
                self.ablate_variants = value
                    .split(',')
                    .map(|v| v.parse().map_err(|e: karina_core::Error| CliError::config(key, e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "ablate.leads" => self.ablate_leads = list(key, value)?,
            "ablate.channel" => self.ablate_channel = (!value.is_empty()).then(|| value.to_string()),
            "ablate.pole_isolation" => self.ablate_pole_isolation = parse(key, value)?,
            "ablate.pole_rows" => self.ablate_pole_rows = parse(key, value)?,
            "ablate.kernel_sweep" => self.ablate_kernel_sweep = parse(key, value)?,
            "ablate.kernels" => self.ablate_kernels = list(key, value)?,
            _ => {
                if let Some(k) = key.strip_prefix("model.") {
                    core(self.model.set(k, value))?;
                } else if let Some(k) = key.strip_prefix("train.") {
                    if k == "seed" {
                        return Err(CliError::config(key, "training randomness follows the top-level `seed`"));
                    }
                    core(self.train.set(k, value))?;
                } else if let Some(k) = key.strip_prefix("synthetic.") {
                    set_synthetic(&mut self.synthetic, key, k, value)?;
                } else {
                    return Err(CliError::config(key, "unknown key"));
                }
            }
        }
        self.train.seed = self.seed;
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |key: &str, r: karina_core::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
        core("train", self.train.validate())?;
        match self.data_source {
            DataSource::Synthetic => core("synthetic", self.synthetic.validate())?,
            DataSource::File if self.data_path.is_none() => {
                return Err(CliError::config("data.path", "required when data.source=file"))
            }
            DataSource::File => {}
        }
        if self.train_days < 2 {
            return Err(CliError::config("data.train_days", "needs at least 2 days"));
        }
        if self.eval_leads == 0 {
            return Err(CliError::config("eval.leads", "must be at least 1"));
        }
        if self.rollout_horizon == 0 {
            return Err(CliError::config("rollout.horizon", "must be at least 1"));
        }
        if self.ablate_leads.is_empty() || self.ablate_leads.contains(&0) {
            return Err(CliError::config("ablate.leads", "needs leads of at least 1 day"));
        }
        if self.ablate_variants.is_empty() {
            return Err(CliError::config("ablate.variants", "no variants listed"));
        }
        if self.ablate_kernels.iter().any(|k| k % 2 == 0) {
            return Err(CliError::config("ablate.kernels", "kernels must be odd"));
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        put(
            "data.source",
            match self.data_source {
                DataSource::Synthetic => "synthetic",
                DataSource::File => "file",
            }
            .into(),
        );
        put("data.path", opt_path(&self.data_path));
        put("data.stats", opt_path(&self.data_stats));
        put("data.train_days", self.train_days.to_string());
        put("data.val_days", self.val_days.to_string());
        let s = &self.synthetic;
        put("synthetic.n_days", s.n_days.to_string());
        put("synthetic.start_day", s.start_day.to_string());
        put("synthetic.seed", s.seed.to_string());
        put("synthetic.n_lat", s.n_lat.to_string());
        put("synthetic.n_lon", s.n_lon.to_string());
        put("synthetic.n_blob_channels", s.n_blob_channels.to_string());
        put("synthetic.blobs_per_channel", s.blobs_per_channel.to_string());
        put("synthetic.tilt_deg", s.tilt_deg.to_string());
        put("synthetic.speed_deg_per_day", s.speed_deg_per_day.to_string());
        put("synthetic.blob_width_deg", s.blob_width_deg.to_string());
        put("synthetic.noise_amplitude", s.noise_amplitude.to_string());
        for (k, v) in self.model.to_pairs() {
            put(&format!("model.{k}"), v);
        }
        for (k, v) in self.train.to_pairs() {
            if k != "seed" {
                put(&format!("train.{k}"), v);
            }
        }
        put(
            "statics",
            match &self.statics {
                Statics::Auto => "auto".into(),
                Statics::None => "none".into(),
                Statics::List(l) => l
                    .iter()
                    .map(|(n, m)| format!("{n}:{}", m.as_str()))
                    .collect::<Vec<_>>()
                    .join(","),
            },
        );
        put("finetune.init", opt_path(&self.finetune_init));
        put(
            "finetune.phases",
            self.finetune_phases.iter().map(FinetunePhase::render).collect::<Vec<_>>().join(";"),
        );
        put("eval.checkpoint", opt_path(&self.eval_checkpoint));
        put(
            "eval.forecast",
            match self.eval_forecast {
                ForecastKind::Model => "model",
                ForecastKind::Persistence => "persistence",
                ForecastKind::Truth => "truth",
            }
            .into(),
        );
        put("eval.leads", self.eval_leads.to_string());
        put("eval.acc", self.eval_acc.to_string());
        put("eval.weighting", weighting_str(self.eval_weighting).into());
        put("eval.acc_weighting", weighting_str(self.eval_acc_weighting).into());
        put("rollout.checkpoint", opt_path(&self.rollout_checkpoint));
        put("rollout.horizon", self.rollout_horizon.to_string());
        put(
            "rollout.init_day",
            self.rollout_init_day.map_or_else(|| "test".into(), |d| d.to_string()),
        );
        put("rollout.single_file", self.rollout_single_file.to_string());
        put(
            "ablate.variants",
            self.ablate_variants.iter().map(|v| v.key()).collect::<Vec<_>>().join(","),
        );
        put("ablate.leads", join(&self.ablate_leads));
        put("ablate.channel", self.ablate_channel.clone().unwrap_or_default());
        put("ablate.pole_isolation", self.ablate_pole_isolation.to_string());
        put("ablate.pole_rows", self.ablate_pole_rows.to_string());
        put("ablate.kernel_sweep", self.ablate_kernel_sweep.to_string());
        put("ablate.kernels", join(&self.ablate_kernels));
        out
    }
}

fn set_synthetic(spec: &mut SyntheticSpec, key: &str, field: &str, value: &str) -> Result<(), CliError> {
    match field {
        "n_days" => spec.n_days = parse(key, value)?,
        "start_day" => spec.start_day = parse(key, value)?,
        "seed" => spec.seed = parse(key, value)?,
        "n_lat" => spec.n_lat = parse(key, value)?,
        "n_lon" => spec.n_lon = parse(key, value)?,
        "n_blob_channels" => spec.n_blob_channels = parse(key, value)?,
        "blobs_per_channel" => spec.blobs_per_channel = parse(key, value)?,
        "tilt_deg" => spec.tilt_deg = parse(key, value)?,
        "speed_deg_per_day" => spec.speed_deg_per_day = parse(key, value)?,
        "blob_width_deg" => spec.blob_width_deg = parse(key, value)?,
        "noise_amplitude" => spec.noise_amplitude = parse(key, value)?,
        _ => return Err(CliError::config(key, "unknown key")),
    }
    Ok(())
}
