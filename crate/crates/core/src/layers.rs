//! Convolution, squeeze-and-excitation, normalization and the ConvNext block.
//!
//! Every layer keeps the spatial extent of its input: convolutions are
//! stride 1 with `(k - 1) / 2` cells of padding in the configured mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::padding::{pad, PaddingMode};

pub const DEFAULT_LN_EPS: f64 = 1e-6;

/// Train or eval behaviour for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode plus the RNG that drives drop path in training.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn keep(&mut self, keep_prob: f64) -> Result<bool> {
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::invalid("training forward needs an RNG for drop path"))?;
        Ok(rng.random_bool(keep_prob))
    }
}

/// Parameter initializer: truncated normal for weights, zeros for biases.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: 0.02,
        }
    }

    /// Normal(0, std) resampled until it falls inside ±2·std.
    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let normal = Normal::new(0.0, self.std).expect("positive std");
        let bound = 2.0 * self.std;
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= bound {
                break T::cast(v);
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub groups: usize,
    pub padding_mode: PaddingMode,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, padding_mode: PaddingMode) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            groups: 1,
            padding_mode,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, padding_mode: PaddingMode) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, padding_mode)
        }
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel,
            self.kernel,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::invalid(format!(
                "{} -> {} channels not divisible into {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Same-size stride-1 cross-correlation with the spec's padding mode.
pub fn conv2d<T: Real>(g: &mut Graph<'_, T>, x: Var, spec: &Conv2dSpec, weight: Var, bias: Option<Var>) -> Result<Var> {
    spec.validate()?;
    let (c, h, w) = g.value(x).chw()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, layer expects {}", spec.in_channels),
        ));
    }
    if g.shape(weight) != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weight {:?}, expected {:?}", g.shape(weight), spec.weight_shape()),
        ));
    }
    let padded = match spec.pad() {
        0 => x,
        p => pad(g, x, p, spec.padding_mode)?,
    };
    let y = g.conv2d_valid(padded, weight, bias, spec.groups)?;
    debug_assert_eq!(&g.shape(y)[1..], &[h, w]);
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: Conv2dSpec, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&spec.weight_shape()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight)?, g.param(self.bias)?);
        conv2d(g, x, &self.spec, w, Some(b))
    }

    pub fn param_count(spec: &Conv2dSpec) -> usize {
        spec.weight_shape().iter().product::<usize>() + spec.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], T::one()))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            eps: DEFAULT_LN_EPS,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma)?, g.param(self.beta)?);
        g.layer_norm_channels(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeSpec {
    pub channels: usize,
    pub reduction_ratio: usize,
}

impl SeSpec {
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction_ratio.max(1)).max(1)
    }

    pub fn param_count(&self) -> usize {
        let (c, r) = (self.channels, self.hidden());
        c * r + r + r * c + c
    }
}

/// Squeeze-and-excitation: per-channel gates from pooled statistics.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub spec: SeSpec,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl SeBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: SeSpec, init: &mut Init) -> Result<Self> {
        if spec.reduction_ratio == 0 {
            return Err(Error::invalid("SE reduction ratio must be at least 1"));
        }
        let (c, r) = (spec.channels, spec.hidden());
        Ok(Self {
            spec,
            fc1_weight: store.add(format!("{name}.fc1.weight"), init.trunc_normal(&[r, c]))?,
            fc1_bias: store.add(format!("{name}.fc1.bias"), Tensor::zeros(&[r]))?,
            fc2_weight: store.add(format!("{name}.fc2.weight"), init.trunc_normal(&[c, r]))?,
            fc2_bias: store.add(format!("{name}.fc2.bias"), Tensor::zeros(&[c]))?,
        })
    }

    /// Channel gates in (0, 1) for input `x`.
    pub fn gates<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let (w1, b1) = (g.param(self.fc1_weight)?, g.param(self.fc1_bias)?);
        let hidden = g.linear(pooled, w1, b1)?;
        let hidden = g.relu(hidden)?;
        let (w2, b2) = (g.param(self.fc2_weight)?, g.param(self.fc2_bias)?);
        let logits = g.linear(hidden, w2, b2)?;
        g.sigmoid(logits)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gates = self.gates(g, x)?;
        g.mul(x, gates)
    }
}

/// Per-channel scaling by a learnable vector.
pub fn layer_scale<T: Real>(g: &mut Graph<'_, T>, x: Var, gamma: Var) -> Result<Var> {
    let c = g.value(x).chw()?.0;
    if g.shape(gamma) != [c] {
        return Err(Error::shape(
            "layer_scale",
            format!("gamma {:?} for {c} channels", g.shape(gamma)),
        ));
    }
    g.mul(x, gamma)
}

/// `x + residual`, with the residual dropped for the whole sample with
/// probability `rate` in training and rescaled by `1 / (1 - rate)` otherwise.
pub fn drop_path<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    residual: Var,
    rate: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("drop path rate {rate} outside [0, 1)")));
    }
    if g.shape(x) != g.shape(residual) {
        return Err(Error::shape(
            "drop_path",
            format!("{:?} vs {:?}", g.shape(x), g.shape(residual)),
        ));
    }
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return g.add(x, residual);
    }
    let keep = 1.0 - rate;
    let scale = if ctx.keep(keep)? { 1.0 / keep } else { 0.0 };
    let scaled = g.scale(residual, T::cast(scale))?;
    g.add(x, scaled)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub dim: usize,
    pub kernel: usize,
    pub expansion: usize,
    pub layer_scale_init: f64,
    pub drop_path_rate: f64,
    /// SE reduction ratio; `None` disables the SE stage.
    pub se_reduction: Option<usize>,
    pub padding_mode: PaddingMode,
}

impl BlockSpec {
    pub fn new(dim: usize, padding_mode: PaddingMode) -> Self {
        Self {
            dim,
            kernel: 7,
            expansion: 4,
            layer_scale_init: 1e-6,
            drop_path_rate: 0.0,
            se_reduction: Some(4),
            padding_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::invalid("drop path rate must lie in [0, 1)"));
        }
        if self.expansion == 0 {
            return Err(Error::invalid("expansion must be at least 1"));
        }
        Conv2dSpec::depthwise(self.dim, self.kernel, self.padding_mode).validate()
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = d * self.expansion;
        let dw = d * self.kernel * self.kernel + d;
        let se = self.se_reduction.map_or(0, |r| {
            SeSpec {
                channels: d,
                reduction_ratio: r,
            }
            .param_count()
        });
        dw + se + 2 * d + (d * hidden + hidden) + (hidden * d + d) + d
    }
}

/// Depthwise conv → SE → channel norm → pointwise expand → GELU →
/// pointwise project → layer scale → residual with drop path.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub spec: BlockSpec,
    pub dwconv: Conv2d,
    pub se: Option<SeBlock>,
    pub norm: LayerNorm,
    pub pwconv1: Conv2d,
    pub pwconv2: Conv2d,
    pub gamma: ParamId,
}

impl ConvNextBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: BlockSpec, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let hidden = d * spec.expansion;
        let dwconv = Conv2d::new(
            store,
            &format!("{name}.dwconv"),
            Conv2dSpec::depthwise(d, spec.kernel, spec.padding_mode),
            init,
        )?;
        let se = spec
            .se_reduction
            .map(|r| {
                SeBlock::new(
                    store,
                    &format!("{name}.se"),
                    SeSpec {
                        channels: d,
                        reduction_ratio: r,
                    },
                    init,
                )
            })
            .transpose()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        let pwconv1 = Conv2d::new(
            store,
            &format!("{name}.pwconv1"),
            Conv2dSpec::new(d, hidden, 1, spec.padding_mode),
            init,
        )?;
        let pwconv2 = Conv2d::new(
            store,
            &format!("{name}.pwconv2"),
            Conv2dSpec::new(hidden, d, 1, spec.padding_mode),
            init,
        )?;
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::full(&[d], T::cast(spec.layer_scale_init)),
        )?;
        Ok(Self {
            spec,
            dwconv,
            se,
            norm,
            pwconv1,
            pwconv2,
            gamma,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        if c != self.spec.dim {
            return Err(Error::shape(
                "convnext_block",
                format!("input has {c} channels, block dim is {}", self.spec.dim),
            ));
        }
        let mut y = self.dwconv.forward(g, x)?;
        if let Some(se) = &self.se {
            y = se.forward(g, y)?;
        }
        y = self.norm.forward(g, y)?;
        y = self.pwconv1.forward(g, y)?;
        y = g.gelu(y)?;
        y = self.pwconv2.forward(g, y)?;
        let gamma = g.param(self.gamma)?;
        y = layer_scale(g, y, gamma)?;
        let out = drop_path(g, x, y, self.spec.drop_path_rate, ctx)?;
        debug_assert_eq!(g.shape(out), &[c, h, w]);
        Ok(out)
    }
}

/// Channel norm followed by a kernel-3 convolution that widens the features.
#[derive(Clone, Debug)]
pub struct DepthScale {
    pub norm: LayerNorm,
    pub conv: Conv2d,
}

impl DepthScale {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        padding_mode: PaddingMode,
        init: &mut Init,
    ) -> Result<Self> {
        if out_channels <= in_channels {
            return Err(Error::invalid(format!(
                "depth scaling must widen channels, got {in_channels} -> {out_channels}"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), in_channels)?,
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                Conv2dSpec::new(in_channels, out_channels, 3, padding_mode),
                init,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(g, x)?;
        self.conv.forward(g, y)
    }

    pub fn param_count(in_channels: usize, out_channels: usize) -> usize {
        2 * in_channels + in_channels * out_channels * 9 + out_channels
    }
}

#[cfg(test)]
mod tests;
