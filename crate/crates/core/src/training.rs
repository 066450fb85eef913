//! L2 loss, AdamW, cosine schedule, the minibatch trainer and lag
//! fine-tuning phases.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{lag_augment, Dataset, PairRef, MAX_LAG_HOURS};
use crate::engine::{Graph, ParamStore, Real, Recording, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::KarinaModel;
use crate::padding::latitude_weights;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_min: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight the loss by cos(latitude); evaluation metrics always are.
    pub latitude_weighted_loss: bool,
    /// Channels left out of the loss, by name.
    pub loss_exclude: Vec<String>,
    /// Fill the `seconds` column of the report. Off keeps reports byte-stable.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 150,
            weight_decay: 0.05,
            batch_size: 16,
            lr_min: 0.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            latitude_weighted_loss: false,
            loss_exclude: Vec::new(),
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return Err(Error::config("lr_min", format!("must lie in [0, lr = {}]", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("latitude_weighted_loss", self.latitude_weighted_loss.to_string()),
            ("loss_exclude", self.loss_exclude.join(",")),
            ("record_time", self.record_time.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "latitude_weighted_loss" => self.latitude_weighted_loss = num(key, value)?,
            "loss_exclude" => {
                self.loss_exclude = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "record_time" => self.record_time = num(key, value)?,
            _ => return Err(Error::config(key, "unknown training key")),
        }
        Ok(())
    }

    /// Learning rate for `epoch`: `lr` at the first epoch, `lr_min` at the last.
    pub fn epoch_lr(&self, epoch: usize) -> Result<f64> {
        if self.epochs == 1 {
            return Ok(self.lr);
        }
        cosine_lr(epoch, self.epochs - 1, self.lr, self.lr_min)
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond schedule of {total_steps}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Per-element loss weights for one `[C, H, W]` field.
#[derive(Clone, Debug)]
pub struct LossWeights<T: Real> {
    weights: Option<Arc<[T]>>,
}

impl<T: Real> LossWeights<T> {
    /// Plain mean square over every element.
    pub fn uniform() -> Self {
        Self { weights: None }
    }

    pub fn new(shape: [usize; 3], lat_centers: Option<&[f64]>, exclude: &[usize]) -> Result<Self> {
        let [c, h, w] = shape;
        if lat_centers.is_none() && exclude.is_empty() {
            return Ok(Self::uniform());
        }
        if let Some(&bad) = exclude.iter().find(|&&e| e >= c) {
            return Err(Error::invalid(format!("loss excludes channel {bad} of {c}")));
        }
        if exclude.len() >= c && (0..c).all(|i| exclude.contains(&i)) {
            return Err(Error::invalid("loss excludes every channel"));
        }
        let rows = match lat_centers {
            Some(lat) if lat.len() != h => {
                return Err(Error::invalid(format!("{} latitudes for {h} rows", lat.len())));
            }
            Some(lat) => latitude_weights(lat),
            None => vec![1.0; h],
        };
        let data = (0..c * h * w)
            .map(|i| {
                let (ch, r) = (i / (h * w), (i / w) % h);
                if exclude.contains(&ch) {
                    T::zero()
                } else {
                    T::cast(rows[r])
                }
            })
            .collect::<Vec<_>>();
        Ok(Self {
            weights: Some(data.into()),
        })
    }

    pub fn as_arc(&self) -> Option<Arc<[T]>> {
        self.weights.clone()
    }
}

/// Mean square error node, optionally weighted.
pub fn l2_loss<T: Real>(g: &mut Graph<'_, T>, pred: Var, target: Var, weights: &LossWeights<T>) -> Result<Var> {
    g.mse(pred, target, weights.as_arc())
}

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update from the gradients held in `store`.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64, hp: &AdamW) -> Result<()> {
    if !(lr >= 0.0) || !(hp.eps > 0.0) {
        return Err(Error::invalid(format!("lr {lr} and eps {} must be non-negative/positive", hp.eps)));
    }
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match parameter store"));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (i, p) in store.iter_mut().enumerate() {
        let grad = p.grad.as_ref().expect("checked above");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            let g = g.as_f64();
            let mk = hp.beta1 * m.as_f64() + (1.0 - hp.beta1) * g;
            let vk = hp.beta2 * v.as_f64() + (1.0 - hp.beta2) * g * g;
            *m = T::cast(mk);
            *v = T::cast(vk);
            let decayed = theta.as_f64() * decay;
            *theta = T::cast(decayed - lr * (mk / c1) / ((vk / c2).sqrt() + hp.eps));
        }
    }
    Ok(())
}

/// Sums per-sample parameter gradients in the order samples are added.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T: Real> {
    sums: Vec<Option<Tensor<T>>>,
    loss_sum: f64,
    count: usize,
}

/// Loss and gradients of one sample.
pub struct SampleGrad<T: Real> {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Forward and backward on one `(input, target)` pair.
pub fn sample_grad<T: Real>(
    model: &KarinaModel<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    weights: &LossWeights<T>,
    ctx: &mut ForwardCtx,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::with_params(&model.params, Recording::On);
    let x = g.constant(input.clone())?;
    let y = g.constant(target.clone())?;
    let pred = model.forward_graph(&mut g, x, ctx)?;
    let loss = l2_loss(&mut g, pred, y, weights)?;
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let mut dense = vec![None; model.params.len()];
    for (id, t) in grads.params() {
        dense[id.index()] = Some(t.clone());
    }
    Ok(SampleGrad { loss: value, grads: dense })
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            sums: vec![None; n_params],
            loss_sum: 0.0,
            count: 0,
        }
    }

    pub fn add(&mut self, sample: SampleGrad<T>) {
        self.loss_sum += sample.loss;
        self.count += 1;
        for (sum, g) in self.sums.iter_mut().zip(sample.grads) {
            let Some(g) = g else { continue };
            match sum {
                Some(s) => {
                    for (a, &b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *sum = Some(g),
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    /// Mean gradients written into `store`. Parameters no sample reached get zeros.
    pub fn write_mean(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("no samples accumulated"));
        }
        let n = T::cast(self.count as f64);
        for (p, sum) in store.iter_mut().zip(&self.sums) {
            p.grad = Some(match sum {
                Some(s) => s.map(|v| v / n),
                None => Tensor::zeros(p.value.shape()),
            });
        }
        Ok(())
    }
}

/// Pairs drawn from one dataset.
#[derive(Clone, Debug)]
pub struct PairSource<'a> {
    pub dataset: &'a Dataset,
    pub pairs: Vec<PairRef>,
}

impl<'a> PairSource<'a> {
    pub fn new(dataset: &'a Dataset, pairs: Vec<PairRef>) -> Self {
        Self { dataset, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn load<T: Real>(&self, pair: &PairRef) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x, y) = self.dataset.load(pair)?;
        Ok((x.cast(), y.cast()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    /// Minibatch losses in step order.
    pub step_losses: Vec<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,train_loss,val_loss,seconds\n");
        let opt = |v: Option<f64>, prec: usize| v.map(|v| format!("{v:.prec$e}")).unwrap_or_default();
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{:.9e},{:.9e},{},{}\n",
                r.epoch,
                r.step,
                r.lr,
                r.train_loss,
                opt(r.val_loss, 9),
                opt(r.seconds, 3)
            ));
        }
        s
    }

    fn extend(&mut self, other: TrainReport) {
        self.epochs.extend(other.epochs);
        self.step_losses.extend(other.step_losses);
        self.seconds += other.seconds;
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn loss_weights<T: Real>(ds: &Dataset, cfg: &TrainConfig) -> Result<LossWeights<T>> {
    let exclude = cfg
        .loss_exclude
        .iter()
        .map(|name| {
            ds.channel_index(name)
                .ok_or_else(|| Error::config("loss_exclude", format!("unknown channel `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = ds.grid()?;
    let lat = cfg.latitude_weighted_loss.then_some(grid.lat_centers.as_slice());
    LossWeights::new(ds.shape(), lat, &exclude)
}

/// Mean eval-mode loss over every pair of `source`.
pub fn evaluate_loss<T: Real>(model: &KarinaModel<T>, source: &PairSource<'_>, cfg: &TrainConfig) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let weights = loss_weights::<T>(source.dataset, cfg)?;
    let losses = source
        .pairs
        .par_iter()
        .map(|p| {
            let (x, y) = source.load::<T>(p)?;
            let mut g = Graph::with_params(&model.params, Recording::Off);
            let xv = g.constant(x)?;
            let yv = g.constant(y)?;
            let pred = model.forward_graph(&mut g, xv, &mut ForwardCtx::eval())?;
            let l = l2_loss(&mut g, pred, yv, &weights)?;
            Ok(g.value(l).item().as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minibatch AdamW training with a per-epoch cosine schedule.
pub fn train<T: Real>(
    model: &mut KarinaModel<T>,
    source: &PairSource<'_>,
    val: Option<&PairSource<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_observed(model, source, val, cfg, &mut |_| {})
}

/// As [`train`], calling `observe` after every epoch.
pub fn train_observed<T: Real>(
    model: &mut KarinaModel<T>,
    source: &PairSource<'_>,
    val: Option<&PairSource<'_>>,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EpochRow),
) -> Result<TrainReport> {
    run_epochs(model, source, val, cfg, 0, 0, observe)
}

fn run_epochs<T: Real>(
    model: &mut KarinaModel<T>,
    source: &PairSource<'_>,
    val: Option<&PairSource<'_>>,
    cfg: &TrainConfig,
    epoch_offset: usize,
    step_offset: usize,
    observe: &mut dyn FnMut(&EpochRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let weights = loss_weights::<T>(source.dataset, cfg)?;
    let hp = AdamW::from(cfg);
    let mut state = OptimizerState::new(&model.params);
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut step = step_offset;
    let mut order: Vec<usize> = (0..source.len()).collect();
    for local_epoch in 0..cfg.epochs {
        let epoch = epoch_offset + local_epoch;
        let lr = cfg.epoch_lr(local_epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for (batch, idx) in batches.enumerate() {
            let samples = idx
                .par_iter()
                .map(|&i| {
                    let (x, y) = source.load::<T>(&source.pairs[i])?;
                    let mut ctx = ForwardCtx::train(mix(mix(cfg.seed, step as u64), i as u64));
                    sample_grad(model, &x, &y, &weights, &mut ctx)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                    e => e,
                })?;
            let mut acc = GradAccumulator::new(model.params.len());
            for s in samples {
                acc.add(s);
            }
            let loss = acc.mean_loss();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            acc.write_mean(&mut model.params)?;
            adamw_step(&mut model.params, &mut state, lr, &hp)?;
            model.params.zero_grad();
            step += 1;
            epoch_loss += loss;
            report.step_losses.push(loss);
        }
        let val_loss = val.map(|v| evaluate_loss(model, v, cfg)).transpose()?;
        let row = EpochRow {
            epoch,
            step,
            lr,
            train_loss: epoch_loss / n_batches as f64,
            val_loss,
            seconds: cfg.record_time.then(|| start.elapsed().as_secs_f64()),
        };
        observe(&row);
        report.epochs.push(row);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One fine-tuning stage: lag offsets to sample and its peak learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunePhase {
    pub lags: Vec<u32>,
    pub lr: f64,
    /// Falls back to the training config's epoch count.
    pub epochs: Option<usize>,
}

impl FinetunePhase {
    pub fn new(lags: Vec<u32>, lr: f64) -> Self {
        Self { lags, lr, epochs: None }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if self.lags.is_empty() {
            return Err(Error::config("lags", "phase has no lags"));
        }
        for &l in &self.lags {
            if l > MAX_LAG_HOURS || !seen.insert(l) {
                return Err(Error::config("lags", format!("lag {l} repeated or outside 0..=23")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(())
    }

    /// `lags@lr`, lags joined by `+`, e.g. `0+12@0.005`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::config("finetune.phases", format!("cannot parse phase `{text}`"));
        let (lags, rest) = text.trim().split_once('@').ok_or_else(bad)?;
        let (lr, epochs) = match rest.split_once('x') {
            Some((lr, e)) => (lr, Some(e.trim().parse().map_err(|_| bad())?)),
            None => (rest, None),
        };
        let lags = if lags.trim() == "all" {
            (0..=MAX_LAG_HOURS).collect()
        } else {
            lags.split('+').map(|l| l.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let phase = Self {
            lags,
            lr: lr.trim().parse().map_err(|_| bad())?,
            epochs,
        };
        phase.validate()?;
        Ok(phase)
    }

    pub fn render(&self) -> String {
        let lags = if self.lags.len() == 24 && self.lags.iter().copied().eq(0..=MAX_LAG_HOURS) {
            "all".to_string()
        } else {
            self.lags.iter().map(u32::to_string).collect::<Vec<_>>().join("+")
        };
        match self.epochs {
            Some(e) => format!("{lags}@{}x{e}", self.lr),
            None => format!("{lags}@{}", self.lr),
        }
    }
}

/// Lags {0,12} at 0.005, then {0,6,12,18} at 0.0025, then all 24 lags at 0.0001.
pub fn default_phases() -> Vec<FinetunePhase> {
    vec![
        FinetunePhase::new(vec![0, 12], 0.005),
        FinetunePhase::new(vec![0, 6, 12, 18], 0.0025),
        FinetunePhase::new((0..=MAX_LAG_HOURS).collect(), 0.0001),
    ]
}

/// Runs `phases` in order on one-day pairs of `train_ds`, each starting
/// from the previous phase's weights with a fresh optimizer.
pub fn finetune<T: Real>(
    model: &mut KarinaModel<T>,
    train_ds: &Dataset,
    val: Option<&PairSource<'_>>,
    phases: &[FinetunePhase],
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EpochRow),
) -> Result<TrainReport> {
    if phases.is_empty() {
        return Err(Error::config("finetune.phases", "no phases given"));
    }
    let mut report = TrainReport::default();
    let (mut epoch, mut step) = (0, 0);
    for phase in phases {
        phase.validate()?;
        let source = PairSource::new(train_ds, lag_augment(train_ds, &phase.lags, 1)?);
        let phase_cfg = TrainConfig {
            lr: phase.lr,
            lr_min: cfg.lr_min.min(phase.lr),
            epochs: phase.epochs.unwrap_or(cfg.epochs),
            ..cfg.clone()
        };
        let r = run_epochs(model, &source, val, &phase_cfg, epoch, step, observe)?;
        epoch += phase_cfg.epochs;
        step = r.epochs.last().map_or(step, |e| e.step);
        report.extend(r);
    }
    Ok(report)
}
