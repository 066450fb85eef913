use std::fmt::Write as _;
use std::path::PathBuf;

use karina_core::data::{pairs, Dataset, GridFile};
use karina_core::model::{save_checkpoint, KarinaModel, ModelConfig, Variant};
use karina_core::padding::PaddingMode;
use karina_core::rollout::{drift_report, rollout, RolloutOptions, StaticChannel};
use karina_core::training::{finetune, train_observed, EpochRow, PairSource, TrainReport};

use crate::config::{ForecastKind, RunConfig};
use crate::score::{date_of, pole_rows, verify, Forecaster, ScoreSpec, Verification};
use crate::setup::{
    climatology, load_model, prepare, resolve_model, resolve_statics, scored_channels, truth_frame, Prepared,
};
use crate::{sha256_file, CliError, CommandKind, Outputs};

pub const RESOLVED: &str = "resolved.cfg";
pub const CHECKPOINT: &str = "checkpoint.krna";

pub fn dispatch(kind: CommandKind, mut cfg: RunConfig, out: &Outputs) -> Result<(), CliError> {
    let prep = prepare(&cfg)?;
    match kind {
        CommandKind::Train => cmd_train(&mut cfg, &prep, out),
        CommandKind::Finetune => cmd_finetune(&mut cfg, &prep, out),
        CommandKind::Evaluate => cmd_evaluate(&mut cfg, &prep, out),
        CommandKind::Rollout => cmd_rollout(&mut cfg, &prep, out),
        CommandKind::Ablate => cmd_ablate(&mut cfg, &prep, out),
    }
}

fn write_resolved(cfg: &RunConfig, out: &Outputs) -> Result<(), CliError> {
    out.write(RESOLVED, cfg.resolved())?;
    Ok(())
}

fn required(value: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::config(key, "required for this command"))
}

fn progress(label: &str) -> impl FnMut(&EpochRow) + '_ {
    move |r: &EpochRow| {
        let val = r.val_loss.map(|v| format!(" val {v:.4e}")).unwrap_or_default();
        eprintln!("[{label}] epoch {} lr {:.3e} loss {:.4e}{val}", r.epoch, r.lr, r.train_loss);
    }
}

fn one_day_pairs(ds: &Dataset) -> Result<PairSource<'_>, CliError> {
    Ok(PairSource::new(ds, pairs(ds, 1)?))
}

fn save_model(model: &KarinaModel<f32>, name: &str, out: &Outputs) -> Result<String, CliError> {
    let path = out.path(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    save_checkpoint(model, &path)?;
    sha256_file(&path)
}

fn save_training(model: &KarinaModel<f32>, report: &TrainReport, prep: &Prepared, out: &Outputs) -> Result<(), CliError> {
    let hash = save_model(model, CHECKPOINT, out)?;
    out.write("checkpoint.sha256", format!("{hash}  {CHECKPOINT}\n"))?;
    out.write("train_report.csv", report.to_csv())?;
    out.write("norm_stats.txt", prep.full.stats.to_text())?;
    println!("checkpoint {} sha256 {hash}", out.path(CHECKPOINT).display());
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, prep: &Prepared, out: &Outputs) -> Result<(), CliError> {
    let model_cfg = resolve_model(cfg, prep.full.channels().len())?;
    write_resolved(cfg, out)?;
    let mut model = KarinaModel::<f32>::build(model_cfg, cfg.seed)?;
    let source = one_day_pairs(&prep.train)?;
    let val = prep.val.as_ref().map(one_day_pairs).transpose()?;
    let report = train_observed(&mut model, &source, val.as_ref(), &cfg.train, &mut progress("train"))?;
    save_training(&model, &report, prep, out)
}

fn cmd_finetune(cfg: &mut RunConfig, prep: &Prepared, out: &Outputs) -> Result<(), CliError> {
    let init = required(&cfg.finetune_init, "finetune.init")?;
    let mut model = load_model(cfg, "finetune.init", &init, prep.full.channels().len())?;
    write_resolved(cfg, out)?;
    let val = prep.val.as_ref().map(one_day_pairs).transpose()?;
    let report = finetune(
        &mut model,
        &prep.train,
        val.as_ref(),
        &cfg.finetune_phases,
        &cfg.train,
        &mut progress("finetune"),
    )?;
    save_training(&model, &report, prep, out)
}

/// Absolute initial days in the test window with `horizon` days of truth after them.
fn init_days(prep: &Prepared, horizon: usize, key: &str) -> Result<std::ops::Range<usize>, CliError> {
    let end = prep.full.n_days().saturating_sub(horizon);
    if end <= prep.test_start {
        return Err(CliError::config(
            key,
            format!("test window of {} days is too short for {horizon} leads", prep.test.n_days()),
        ));
    }
    Ok(prep.test_start..end)
}

fn scored(statics: &[StaticChannel], n: usize) -> Result<Vec<usize>, CliError> {
    let c = scored_channels(statics, n);
    if c.is_empty() {
        return Err(CliError::config("statics", "every channel is static, nothing to score"));
    }
    Ok(c)
}

fn cmd_evaluate(cfg: &mut RunConfig, prep: &Prepared, out: &Outputs) -> Result<(), CliError> {
    let names = prep.full.channels().to_vec();
    let statics = resolve_statics(cfg, &names)?;
    let model = match cfg.eval_forecast {
        ForecastKind::Model => {
            let path = required(&cfg.eval_checkpoint, "eval.checkpoint")?;
            Some(load_model(cfg, "eval.checkpoint", &path, names.len())?)
        }
        _ => None,
    };
    write_resolved(cfg, out)?;
    let grid = prep.full.grid()?;
    let channels = scored(&statics, names.len())?;
    let horizon = cfg.eval_leads;
    let days = init_days(prep, horizon, "eval.leads")?;
    let clim = if cfg.eval_acc { Some(climatology(prep)?) } else { None };

    let forecaster = Forecaster {
        kind: cfg.eval_forecast,
        model: model.as_ref(),
        statics: &statics,
        full: &prep.full,
    };
    let spec = ScoreSpec {
        channels: &channels,
        horizon,
        grid: &grid,
        weighting: cfg.eval_weighting,
        acc: clim.as_ref().map(|c| (c, cfg.eval_acc_weighting)),
        rows: None,
    };
    let scores = verify(&forecaster, days.clone(), &spec)?;
    let persistence = verify(
        &Forecaster {
            kind: ForecastKind::Persistence,
            ..forecaster
        },
        days.clone(),
        &ScoreSpec { acc: None, ..spec },
    )?;

    let mut metrics = String::from("channel,lead_days,metric,value\n");
    let mut curve = String::from("lead_days,channel,rmse,persistence_rmse\n");
    for (i, &c) in channels.iter().enumerate() {
        for lead in 1..=horizon {
            let _ = writeln!(metrics, "{},{lead},rmse,{:.9e}", names[c], scores.rmse[i][lead - 1]);
            if let Some(a) = &scores.acc {
                let _ = writeln!(metrics, "{},{lead},acc,{:.9e}", names[c], a[i][lead - 1]);
            }
        }
    }
    for lead in 1..=horizon {
        for (i, &c) in channels.iter().enumerate() {
            let _ = writeln!(
                curve,
                "{lead},{},{:.9e},{:.9e}",
                names[c],
                scores.rmse[i][lead - 1],
                persistence.rmse[i][lead - 1]
            );
        }
    }
    out.write("metrics.csv", metrics)?;
    out.write("rmse_vs_lead.csv", curve)?;

    let first = forecaster.run(days.start, horizon)?;
    let dates = (1..=horizon).map(|l| date_of(&prep.full, days.start + l)).collect();
    GridFile::from_frames(names.clone(), dates, &first)?.write(out.path("first_forecast.gfld"))?;

    println!("{} initial days, leads 1..={horizon}", days.len());
    for (i, &c) in channels.iter().enumerate() {
        println!(
            "{:>10} lead 1 rmse {:.4e} (persistence {:.4e})",
            names[c], scores.rmse[i][0], persistence.rmse[i][0]
        );
    }
    Ok(())
}

fn cmd_rollout(cfg: &mut RunConfig, prep: &Prepared, out: &Outputs) -> Result<(), CliError> {
    let names = prep.full.channels().to_vec();
    let path = required(&cfg.rollout_checkpoint, "rollout.checkpoint")?;
    let model = load_model(cfg, "rollout.checkpoint", &path, names.len())?;
    let statics = resolve_statics(cfg, &names)?;
    write_resolved(cfg, out)?;
    let day = cfg.rollout_init_day.unwrap_or(prep.test_start);
    if day >= prep.full.n_days() {
        return Err(CliError::config(
            "rollout.init_day",
            format!("day {day} outside the {} days of data", prep.full.n_days()),
        ));
    }
    let full = &prep.full;
    let forcing = |lead: usize| truth_frame(full, day + lead);
    let opts = RolloutOptions {
        statics,
        forcing: Some(&forcing),
        init_date: date_of(full, day),
        checkpoint_id: sha256_file(&path)?,
        ..RolloutOptions::new(cfg.rollout_horizon)
    };
    let series = rollout(&model, &truth_frame(full, day)?, &full.stats, &opts)?;

    if cfg.rollout_single_file {
        if !series.steps.is_empty() {
            series.to_gridfile()?.write(out.path("forecast.gfld"))?;
        }
    } else {
        for lead in 1..=series.steps.len() {
            series.lead_gridfile(lead)?.write(out.path(&format!("lead_{lead:03}.gfld")))?;
        }
    }
    let mut summary = format!(
        "init_day={day}\ninit_date={}\nhorizon={}\ncompleted={}\n",
        series.init_date,
        series.horizon,
        series.steps.len()
    );
    if !series.steps.is_empty() {
        let drift = drift_report(&series, &full.grid()?)?;
        out.write("drift.csv", drift.to_csv())?;
        for (name, r) in names.iter().zip(drift.max_std_ratio()) {
            let _ = writeln!(summary, "max_std_ratio.{name}={r:.6e}");
        }
    }
    if let Some(b) = &series.blowup {
        let _ = writeln!(summary, "blowup_step={}\nblowup_reason={:?}", b.step, b.reason);
    }
    out.write("summary.txt", &summary)?;
    print!("{summary}");
    match series.blowup {
        Some(b) => Err(CliError::Runtime(format!(
            "rollout blew up at step {} ({:?}); partial outputs written",
            b.step, b.reason
        ))),
        None => Ok(()),
    }
}

struct Trained {
    config: ModelConfig,
    model: KarinaModel<f32>,
}

/// Trains each distinct configuration once and scores it on the test window.
struct Ablation<'a> {
    cfg: &'a RunConfig,
    prep: &'a Prepared,
    out: &'a Outputs,
    statics: Vec<StaticChannel>,
    spec: ScoreSpec<'a>,
    days: std::ops::Range<usize>,
    trained: Vec<Trained>,
}

impl Ablation<'_> {
    fn train(&mut self, name: &str, config: ModelConfig) -> Result<usize, CliError> {
        if let Some(i) = self.trained.iter().position(|t| t.config == config) {
            return Ok(i);
        }
        let mut model = KarinaModel::<f32>::build(config.clone(), self.cfg.seed)?;
        let source = one_day_pairs(&self.prep.train)?;
        let val = self.prep.val.as_ref().map(one_day_pairs).transpose()?;
        let report = train_observed(&mut model, &source, val.as_ref(), &self.cfg.train, &mut progress(name))?;
        save_model(&model, &format!("models/{name}.krna"), self.out)?;
        self.out.write(&format!("models/{name}_report.csv"), report.to_csv())?;
        self.trained.push(Trained { config, model });
        Ok(self.trained.len() - 1)
    }

    fn score(&mut self, name: &str, config: ModelConfig) -> Result<Verification, CliError> {
        let i = self.train(name, config)?;
        let forecaster = Forecaster {
            kind: ForecastKind::Model,
            model: Some(&self.trained[i].model),
            statics: &self.statics,
            full: &self.prep.full,
        };
        verify(&forecaster, self.days.clone(), &self.spec)
    }
}

fn lead_columns(names: &[String], channels: &[usize], leads: &[usize]) -> String {
    channels
        .iter()
        .flat_map(|&c| leads.iter().map(move |l| format!(",{}_d{l}", names[c])))
        .collect()
}

fn lead_values(v: &Verification, channels: &[usize], leads: &[usize]) -> String {
    (0..channels.len())
        .flat_map(|i| leads.iter().map(move |&l| format!(",{:.9e}", v.rmse[i][l - 1])))
        .collect()
}

fn cmd_ablate(cfg: &mut RunConfig, prep: &Prepared, out: &Outputs) -> Result<(), CliError> {
    let names = prep.full.channels().to_vec();
    let base = resolve_model(cfg, names.len())?;
    let statics = resolve_statics(cfg, &names)?;
    write_resolved(cfg, out)?;
    let grid = prep.full.grid()?;
    let channels = scored(&statics, names.len())?;
    let primary = match &cfg.ablate_channel {
        Some(name) => prep
            .full
            .channel_index(name)
            .and_then(|c| channels.iter().position(|&s| s == c))
            .ok_or_else(|| CliError::config("ablate.channel", format!("`{name}` is not a scored channel")))?,
        None => 0,
    };
    let leads = cfg.ablate_leads.clone();
    let horizon = *leads.iter().max().expect("validated non-empty");
    let rows = pole_rows(&grid, cfg.ablate_pole_rows);
    let mut ab = Ablation {
        cfg,
        prep,
        out,
        statics,
        spec: ScoreSpec {
            channels: &channels,
            horizon,
            grid: &grid,
            weighting: cfg.eval_weighting,
            acc: None,
            rows: Some(&rows),
        },
        days: init_days(prep, horizon, "ablate.leads")?,
        trained: Vec::new(),
    };

    let header = lead_columns(&names, &channels, &leads);
    let mut table = format!("variant{header}\n");
    let mut summary = Vec::new();
    for &variant in &cfg.ablate_variants {
        let v = ab.score(variant.key(), variant.apply(&base))?;
        let _ = writeln!(table, "{}{}", variant.key(), lead_values(&v, &channels, &leads));
        summary.push((variant.label().to_string(), v));
    }
    out.write("ablation.csv", &table)?;

    if cfg.ablate_pole_isolation {
        let mut csv = String::from("padding,channel,lead_days,pole_rmse,global_rmse\n");
        for mode in [PaddingMode::Geocyclic, PaddingMode::CircularZeroPole] {
            let config = ModelConfig {
                padding_mode: mode,
                ..Variant::Padded.apply(&base)
            };
            let name = if mode == PaddingMode::Geocyclic { "padded" } else { "circular" };
            let v = ab.score(name, config)?;
            let pole = v.rows_rmse.as_ref().expect("rows requested");
            for &l in &leads {
                let _ = writeln!(
                    csv,
                    "{mode},{},{l},{:.9e},{:.9e}",
                    names[channels[primary]],
                    pole[primary][l - 1],
                    v.rmse[primary][l - 1]
                );
            }
        }
        out.write("pole_isolation.csv", csv)?;
    }

    if cfg.ablate_kernel_sweep {
        let mut csv = format!("stem_kernel{header}\n");
        for &k in &cfg.ablate_kernels {
            let config = ModelConfig {
                stem_kernel: k,
                ..Variant::PaddedSe.apply(&base)
            };
            let v = ab.score(&format!("padded_se_k{k}"), config)?;
            let _ = writeln!(csv, "{k}{}", lead_values(&v, &channels, &leads));
        }
        out.write("kernel_sweep.csv", csv)?;
    }

    println!("{} RMSE by lead (days {:?})", names[channels[primary]], leads);
    for (label, v) in &summary {
        let cells: Vec<String> = leads.iter().map(|&l| format!("{:.4e}", v.rmse[primary][l - 1])).collect();
        println!("{label:>22} {}", cells.join(" "));
    }
    Ok(())
}
