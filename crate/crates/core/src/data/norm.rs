//! Per-channel z-score statistics.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use super::GridFile;
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels with no variation; their std is forced to 1.
    pub constant: Vec<bool>,
}

/// Mean and population std of every channel over the frames in `times`.
pub fn compute_norm_stats(file: &GridFile, times: Range<usize>) -> Result<NormStats> {
    if times.is_empty() || times.end > file.n_time() {
        return Err(Error::Data(format!(
            "statistics range {times:?} invalid for {} frames",
            file.n_time()
        )));
    }
    let plane = file.n_lat * file.n_lon;
    let c = file.n_channel();
    let count = (times.len() * plane) as f64;
    let mut sum = vec![0.0f64; c];
    for t in times.clone() {
        for (ch, s) in sum.iter_mut().enumerate() {
            *s += file.frame(t)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0f64; c];
    for t in times {
        for (ch, s) in sq.iter_mut().enumerate() {
            *s += file.frame(t)[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| (v as f64 - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let raw_std: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
    let constant: Vec<bool> = raw_std
        .iter()
        .zip(&mean)
        .map(|(s, m)| *s <= 1e-12 * m.abs().max(1.0))
        .collect();
    let std = raw_std
        .iter()
        .zip(&constant)
        .map(|(&s, &k)| if k { 1.0 } else { s })
        .collect();
    Ok(NormStats {
        channels: file.channels.clone(),
        mean,
        std,
        constant,
    })
}

impl NormStats {
    pub fn n_channel(&self) -> usize {
        self.channels.len()
    }

    fn check(&self, x: &Tensor<f32>) -> Result<usize> {
        let (c, h, w) = x.chw()?;
        if c != self.n_channel() {
            return Err(Error::Data(format!(
                "field has {c} channels, statistics cover {}",
                self.n_channel()
            )));
        }
        Ok(h * w)
    }

    pub fn normalize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let plane = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = ((*v as f64 - self.mean[c]) / self.std[c]) as f32;
        }
        Ok(out)
    }

    pub fn denormalize(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let plane = self.check(z)?;
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v as f64 * self.std[c] + self.mean[c]) as f32;
        }
        Ok(out)
    }

    /// `key=value` text; reals carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("channels={}\n", self.n_channel());
        for (i, name) in self.channels.iter().enumerate() {
            let _ = writeln!(s, "channel.{i}.name={name}");
            let _ = writeln!(s, "channel.{i}.mean={:.16e}", self.mean[i]);
            let _ = writeln!(s, "channel.{i}.std={:.16e}", self.std[i]);
            let _ = writeln!(s, "channel.{i}.constant={}", self.constant[i]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("normalization stats: {what}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("channels="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing channel count"))?;
        let mut stats = NormStats {
            channels: vec![String::new(); n],
            mean: vec![f64::NAN; n],
            std: vec![f64::NAN; n],
            constant: vec![false; n],
        };
        for line in lines {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            let mut parts = key.split('.');
            let (Some("channel"), Some(i), Some(field), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(&format!("unknown key `{key}`")));
            };
            let i: usize = i.parse().ok().filter(|&i| i < n).ok_or_else(|| bad(key))?;
            match field {
                "name" => stats.channels[i] = value.to_string(),
                "mean" => stats.mean[i] = value.parse().map_err(|_| bad(line))?,
                "std" => stats.std[i] = value.parse().map_err(|_| bad(line))?,
                "constant" => stats.constant[i] = value.parse().map_err(|_| bad(line))?,
                _ => return Err(bad(&format!("unknown key `{key}`"))),
            }
        }
        if stats.mean.iter().chain(&stats.std).any(|v| !v.is_finite()) || stats.std.iter().any(|&s| s <= 0.0) {
            return Err(bad("missing or invalid mean/std"));
        }
        Ok(stats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
