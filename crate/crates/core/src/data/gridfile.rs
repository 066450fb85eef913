//! `GFLD` container: magic, u32 version, n_time, n_channel, n_lat, n_lon,
//! then per channel a u32 length and UTF-8 name, n_time i32 dates (days
//! since 1970-01-01) and an f32 payload ordered time, channel, lat, lon.
//! Everything little-endian.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::padding::GridSpec;

const MAGIC: &[u8; 4] = b"GFLD";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub channels: Vec<String>,
    pub dates: Vec<i32>,
    pub n_lat: usize,
    pub n_lon: usize,
    pub data: Vec<f32>,
}

impl GridFile {
    pub fn new(channels: Vec<String>, dates: Vec<i32>, n_lat: usize, n_lon: usize, data: Vec<f32>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = channels.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::DuplicateName(dup.clone()));
        }
        let expected = dates.len() * channels.len() * n_lat * n_lon;
        if data.len() != expected {
            return Err(Error::Data(format!(
                "payload has {} values, header implies {expected}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dates,
            n_lat,
            n_lon,
            data,
        })
    }

    /// Stacks `[C, H, W]` frames, one per date.
    pub fn from_frames(channels: Vec<String>, dates: Vec<i32>, frames: &[Tensor<f32>]) -> Result<Self> {
        if frames.len() != dates.len() {
            return Err(Error::Data(format!("{} frames for {} dates", frames.len(), dates.len())));
        }
        let (n_lat, n_lon) = match frames.first() {
            Some(f) => {
                let (_, h, w) = f.chw()?;
                (h, w)
            }
            None => (0, 0),
        };
        let mut data = Vec::with_capacity(frames.len() * channels.len() * n_lat * n_lon);
        for f in frames {
            if f.shape() != [channels.len(), n_lat, n_lon] {
                return Err(Error::Data(format!(
                    "frame {:?} does not match [{}, {n_lat}, {n_lon}]",
                    f.shape(),
                    channels.len()
                )));
            }
            data.extend_from_slice(f.data());
        }
        Self::new(channels, dates, n_lat, n_lon, data)
    }

    pub fn n_time(&self) -> usize {
        self.dates.len()
    }

    pub fn n_channel(&self) -> usize {
        self.channels.len()
    }

    pub fn frame_len(&self) -> usize {
        self.n_channel() * self.n_lat * self.n_lon
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_tensor(&self, t: usize) -> Tensor<f32> {
        Tensor::new(vec![self.n_channel(), self.n_lat, self.n_lon], self.frame(t).to_vec())
            .expect("frame matches header")
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::regular(self.n_lat, self.n_lon)
    }

    /// Size in bytes of the encoded file.
    pub fn byte_len(&self) -> u64 {
        let words = 6 + self.n_channel() + self.n_time();
        let names: usize = self.channels.iter().map(String::len).sum();
        (4 * words + names + 4 * self.data.len()) as u64
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path.as_ref())?);
        out.write_all(MAGIC)?;
        for v in [VERSION, self.n_time() as u32, self.n_channel() as u32, self.n_lat as u32, self.n_lon as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for name in &self.channels {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
        }
        for d in &self.dates {
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        let format = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| truncated(at + 4))
        };
        if bytes.get(..4).ok_or_else(|| truncated(4))? != &MAGIC[..] {
            return Err(format("bad magic, not a grid file".into()));
        }
        let version = word(4)?;
        if version != VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let n_time = word(8)? as usize;
        let n_channel = word(12)? as usize;
        let n_lat = word(16)? as usize;
        let n_lon = word(20)? as usize;
        let mut pos = 24;
        let mut channels = Vec::with_capacity(n_channel);
        for _ in 0..n_channel {
            let len = word(pos)? as usize;
            pos += 4;
            let raw = bytes.get(pos..pos + len).ok_or_else(|| truncated(pos + len))?;
            channels.push(String::from_utf8(raw.to_vec()).map_err(|_| format("channel name is not UTF-8".into()))?);
            pos += len;
        }
        let mut dates = Vec::with_capacity(n_time);
        for _ in 0..n_time {
            dates.push(word(pos)? as i32);
            pos += 4;
        }
        let n = n_time * n_channel * n_lat * n_lon;
        let expected = pos + 4 * n;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(format(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let data = bytes[pos..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(channels, dates, n_lat, n_lon, data)
    }
}
