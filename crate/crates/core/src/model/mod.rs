//! The full network: stem, ConvNext stages with depth scaling, and a
//! prediction head mapping the state at day k to day k + 1.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{checkpoint_size, load_checkpoint, load_checkpoint_expecting, save_checkpoint};

use crate::engine::{Graph, ParamStore, Real, Recording, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{BlockSpec, Conv2d, Conv2dSpec, ConvNextBlock, DepthScale, ForwardCtx, Init, LayerNorm, Mode};
use crate::padding::PaddingMode;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stage_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub stem_kernel: usize,
    pub padding_mode: PaddingMode,
    pub se_enabled: bool,
    pub reduction_ratio: usize,
    pub layer_scale_init: f64,
    pub drop_path_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 67,
            out_channels: 67,
            stage_dims: vec![96, 192, 384, 768],
            depths: vec![3, 3, 9, 3],
            stem_kernel: 3,
            padding_mode: PaddingMode::Geocyclic,
            se_enabled: true,
            reduction_ratio: 4,
            layer_scale_init: 1e-6,
            drop_path_rate: 0.0,
        }
    }
}

/// Named architecture variants from the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Padded,
    PaddedSe,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::Padded, Variant::PaddedSe];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Plain => "KARINA Plain",
            Variant::Padded => "KARINA Padded",
            Variant::PaddedSe => "KARINA Padded+SENet",
        }
    }

    /// Short name used in configs and file names.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Padded => "padded",
            Variant::PaddedSe => "padded_se",
        }
    }

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (padding_mode, se_enabled) = match self {
            Variant::Plain => (PaddingMode::Zero, false),
            Variant::Padded => (PaddingMode::Geocyclic, false),
            Variant::PaddedSe => (PaddingMode::Geocyclic, true),
        };
        ModelConfig {
            padding_mode,
            se_enabled,
            ..config.clone()
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`, expected plain, padded or padded_se")))
    }
}

impl ModelConfig {
    /// Small configuration used in tests and desk-scale experiments.
    pub fn toy(channels: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            stage_dims: vec![8, 16],
            depths: vec![1, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.out_channels == 0 {
            return Err(Error::config("out_channels", "must be at least 1"));
        }
        if self.stage_dims.is_empty() {
            return Err(Error::config("stage_dims", "needs at least one stage"));
        }
        if self.stage_dims.len() != self.depths.len() {
            return Err(Error::config(
                "depths",
                format!("{} entries for {} stages", self.depths.len(), self.stage_dims.len()),
            ));
        }
        if self.stage_dims[0] == 0 || self.stage_dims.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("stage_dims", "must be positive and strictly increasing"));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::config("stem_kernel", format!("{} is not odd", self.stem_kernel)));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::config("reduction_ratio", "must be at least 1"));
        }
        if !(self.layer_scale_init.is_finite()) {
            return Err(Error::config("layer_scale_init", "must be finite"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config("drop_path_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Drop path rate of block `index`, ramping linearly from 0.
    pub fn block_drop_path(&self, index: usize) -> f64 {
        let n = self.total_blocks();
        if n <= 1 {
            0.0
        } else {
            self.drop_path_rate * index as f64 / (n - 1) as f64
        }
    }

    pub fn block_spec(&self, dim: usize, index: usize) -> BlockSpec {
        BlockSpec {
            layer_scale_init: self.layer_scale_init,
            drop_path_rate: self.block_drop_path(index),
            se_reduction: self.se_enabled.then_some(self.reduction_ratio),
            ..BlockSpec::new(dim, self.padding_mode)
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.stem_kernel);
        let d0 = self.stage_dims[0];
        let mut n = cin * d0 * k * k + d0 + 2 * d0;
        let mut prev = d0;
        let mut index = 0;
        for (&dim, &depth) in self.stage_dims.iter().zip(&self.depths) {
            if dim != prev {
                n += DepthScale::param_count(prev, dim);
            }
            for _ in 0..depth {
                n += self.block_spec(dim, index).param_count();
                index += 1;
            }
            prev = dim;
        }
        n + 9 * prev * prev + prev + prev * cout + cout
    }

    /// Canonical `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
            ("stage_dims", list(&self.stage_dims)),
            ("depths", list(&self.depths)),
            ("stem_kernel", self.stem_kernel.to_string()),
            ("padding_mode", self.padding_mode.to_string()),
            ("se_enabled", self.se_enabled.to_string()),
            ("reduction_ratio", self.reduction_ratio.to_string()),
            ("layer_scale_init", self.layer_scale_init.to_string()),
            ("drop_path_rate", self.drop_path_rate.to_string()),
        ]
    }

    pub fn to_canonical(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value.split(',').map(|s| num(key, s)).collect()
        }
        match key {
            "in_channels" => self.in_channels = num(key, value)?,
            "out_channels" => self.out_channels = num(key, value)?,
            "stage_dims" => self.stage_dims = list(key, value)?,
            "depths" => self.depths = list(key, value)?,
            "stem_kernel" => self.stem_kernel = num(key, value)?,
            "padding_mode" => self.padding_mode = num(key, value)?,
            "se_enabled" => self.se_enabled = num(key, value)?,
            "reduction_ratio" => self.reduction_ratio = num(key, value)?,
            "layer_scale_init" => self.layer_scale_init = num(key, value)?,
            "drop_path_rate" => self.drop_path_rate = num(key, value)?,
            _ => return Err(Error::config(key, "unknown model key")),
        }
        Ok(())
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key=value"))?;
            config.set(k.trim(), v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// First field whose canonical value differs from `other`.
    pub fn first_difference(&self, other: &Self) -> Option<(&'static str, String, String)> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .find(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| (k, a, b))
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub scale: Option<DepthScale>,
    pub blocks: Vec<ConvNextBlock>,
}

/// Assembled network. Layer structs hold ids into `params`, so a store cast
/// to another precision drives the same structure.
#[derive(Clone, Debug)]
pub struct KarinaModel<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub mode: Mode,
    stem: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    final_conv: Conv2d,
    head: Conv2d,
}

impl<T: Real> KarinaModel<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let pm = config.padding_mode;
        let d0 = config.stage_dims[0];
        let stem = Conv2d::new(
            &mut params,
            "stem.conv",
            Conv2dSpec::new(config.in_channels, d0, config.stem_kernel, pm),
            &mut init,
        )?;
        let stem_norm = LayerNorm::new(&mut params, "stem.norm", d0)?;
        let mut stages = Vec::with_capacity(config.stage_dims.len());
        let mut prev = d0;
        let mut index = 0;
        for (i, (&dim, &depth)) in config.stage_dims.iter().zip(&config.depths).enumerate() {
            let scale = (dim != prev)
                .then(|| DepthScale::new(&mut params, &format!("stages.{i}.scale"), prev, dim, pm, &mut init))
                .transpose()?;
            let mut blocks = Vec::with_capacity(depth);
            for j in 0..depth {
                let spec = config.block_spec(dim, index);
                blocks.push(ConvNextBlock::new(
                    &mut params,
                    &format!("stages.{i}.blocks.{j}"),
                    spec,
                    &mut init,
                )?);
                index += 1;
            }
            stages.push(Stage { scale, blocks });
            prev = dim;
        }
        let final_conv = Conv2d::new(&mut params, "final.conv", Conv2dSpec::new(prev, prev, 3, pm), &mut init)?;
        let head = Conv2d::new(
            &mut params,
            "head.conv",
            Conv2dSpec::new(prev, config.out_channels, 1, pm),
            &mut init,
        )?;
        debug_assert_eq!(params.numel(), config.param_count());
        Ok(Self {
            config,
            params,
            mode: Mode::Eval,
            stem,
            stem_norm,
            stages,
            final_conv,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> KarinaModel<U> {
        KarinaModel {
            config: self.config.clone(),
            params: self.params.cast(),
            mode: self.mode,
            stem: self.stem.clone(),
            stem_norm: self.stem_norm.clone(),
            stages: self.stages.clone(),
            final_conv: self.final_conv.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [c, h, w] if c == self.config.in_channels && h > 0 && w > 0 => {
                if self.config.padding_mode == PaddingMode::Geocyclic && w % 2 != 0 {
                    return Err(Error::shape("forward", format!("geocyclic grid needs even width, got {w}")));
                }
                Ok(())
            }
            _ => Err(Error::shape(
                "forward",
                format!("input {shape:?}, expected [{}, H, W]", self.config.in_channels),
            )),
        }
    }

    /// Records the network on a graph built over `self.params`.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut y = self.stem.forward(g, x)?;
        y = self.stem_norm.forward(g, y)?;
        for stage in &self.stages {
            if let Some(scale) = &stage.scale {
                y = scale.forward(g, y)?;
            }
            for block in &stage.blocks {
                y = block.forward(g, y, ctx)?;
            }
        }
        y = self.final_conv.forward(g, y)?;
        self.head.forward(g, y)
    }

    /// One-step prediction without recording.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::with_params(&self.params, Recording::Off);
        let xv = g.constant(x.clone())?;
        let y = self.forward_graph(&mut g, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests;
