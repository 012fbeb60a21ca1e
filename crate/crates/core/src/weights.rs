//! The `VGGW` container holding pretrained convolution weights and the
//! per-channel preprocessing means.
//!
//! Layout (little-endian throughout):
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 0..4         | magic `VGGW`                                        |
//! | 4..6         | version, `u16` = 1                                  |
//! | 6..8         | record count, `u16`                                 |
//! | 8            | channel order (0 = RGB)                             |
//! | 9..16        | reserved, zero                                      |
//! | 16..28       | 3 × `f32` channel means                             |
//! | ...          | records                                             |
//! | last 4       | CRC-32 (IEEE) of every preceding byte               |
//!
//! A record is `u16` name length, UTF-8 name, `u32` `c_out, c_in, kh, kw`,
//! the kernel as `c_out·c_in·kh·kw` `f32` in `[out][in][kh][kw]` order, then
//! `c_out` `f32` biases.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ConvWeights, KERNEL};

pub const MAGIC: &[u8; 4] = b"VGGW";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelOrder {
    Rgb,
}

impl ChannelOrder {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ChannelOrder::Rgb),
            other => Err(Error::Format(format!("unknown channel order {other}"))),
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            ChannelOrder::Rgb => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRecord {
    pub name: String,
    pub c_out: u32,
    pub c_in: u32,
    pub kh: u32,
    pub kw: u32,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvRecord {
    pub fn new(name: impl Into<String>, c_out: u32, c_in: u32, kernel: Vec<f32>, bias: Vec<f32>) -> Self {
        ConvRecord {
            name: name.into(),
            c_out,
            c_in,
            kh: KERNEL as u32,
            kw: KERNEL as u32,
            kernel,
            bias,
        }
    }

    pub fn to_conv<T: Real>(&self) -> Result<ConvWeights<T>> {
        if self.kh as usize != KERNEL || self.kw as usize != KERNEL {
            return Err(Error::weights(
                &self.name,
                format!("kernel is {}x{}, expected 3x3", self.kh, self.kw),
            ));
        }
        ConvWeights::new(
            self.c_out as usize,
            self.c_in as usize,
            self.kernel.iter().map(|&v| T::of_f64(v as f64)).collect(),
            self.bias.iter().map(|&v| T::of_f64(v as f64)).collect(),
        )
        .map_err(|e| Error::weights(&self.name, e.to_string()))
    }

    /// CRC-32 of the record's kernel bytes followed by its bias bytes, as
    /// listed per layer in the exporter manifest.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.kernel.iter().chain(&self.bias) {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

/// Expected name and shape of one convolution record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub c_out: u32,
    pub c_in: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub version: u16,
    pub channel_order: ChannelOrder,
    /// Per-channel means in pixel units (0..255), subtracted during preprocessing.
    pub means: [f32; 3],
    pub records: Vec<ConvRecord>,
}

impl WeightSet {
    pub fn new(means: [f32; 3], records: Vec<ConvRecord>) -> Self {
        WeightSet {
            version: VERSION,
            channel_order: ChannelOrder::Rgb,
            means,
            records,
        }
    }

    pub fn record(&self, name: &str) -> Option<&ConvRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Structural checks every weight file must pass: 3×3 kernels, value
    /// counts matching the declared shapes, and a channel chain starting at
    /// 3 input channels.
    pub fn check_chain(&self) -> Result<()> {
        let mut prev_out = 3u32;
        for r in &self.records {
            if r.kh as usize != KERNEL || r.kw as usize != KERNEL {
                return Err(Error::weights(
                    &r.name,
                    format!("kernel is {}x{}, expected 3x3", r.kh, r.kw),
                ));
            }
            let expected = r.c_out as usize * r.c_in as usize * KERNEL * KERNEL;
            if r.kernel.len() != expected || r.bias.len() != r.c_out as usize {
                return Err(Error::weights(&r.name, "value count does not match shape"));
            }
            if r.c_in != prev_out {
                return Err(Error::weights(
                    &r.name,
                    format!("c_in = {} but the previous layer produces {}", r.c_in, prev_out),
                ));
            }
            prev_out = r.c_out;
        }
        Ok(())
    }

    /// Checks names, count and shapes against an expected chain, reporting
    /// the first offending record.
    pub fn validate_against(&self, expected: &[LayerShape]) -> Result<()> {
        for (i, want) in expected.iter().enumerate() {
            let Some(got) = self.records.get(i) else {
                return Err(Error::weights(&want.name, "record missing"));
            };
            if got.name != want.name {
                return Err(Error::weights(
                    &want.name,
                    format!("record {i} is named `{}`", got.name),
                ));
            }
            if got.c_out != want.c_out || got.c_in != want.c_in {
                return Err(Error::weights(
                    &got.name,
                    format!(
                        "shape ({}, {}) but expected ({}, {})",
                        got.c_out, got.c_in, want.c_out, want.c_in
                    ),
                ));
            }
        }
        if let Some(extra) = self.records.get(expected.len()) {
            return Err(Error::weights(&extra.name, "unexpected extra record"));
        }
        self.check_chain()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u16::try_from(self.records.len())
            .map_err(|_| Error::Format("too many records".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.push(self.channel_order.to_byte());
        out.extend_from_slice(&[0u8; HEADER_LEN - 9]);
        for m in self.means {
            out.extend_from_slice(&m.to_le_bytes());
        }
        for r in &self.records {
            let name = r.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("record name too long: {}", r.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            for d in [r.c_out, r.c_in, r.kh, r.kw] {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in r.kernel.iter().chain(&r.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u16()?;
        let channel_order = ChannelOrder::from_byte(cur.take(1)?[0])?;
        if cur.take(HEADER_LEN - 9)?.iter().any(|&b| b != 0) {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        let means = [cur.f32()?, cur.f32()?, cur.f32()?];

        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_owned();
            let (c_out, c_in, kh, kw) = (cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?);
            let n = (c_out as u64) * (c_in as u64) * (kh as u64) * (kw as u64);
            let kernel = cur.f32_vec(n)?;
            let bias = cur.f32_vec(c_out as u64)?;
            records.push(ConvRecord {
                name,
                c_out,
                c_in,
                kh,
                kw,
                kernel,
                bias,
            });
        }

        let body_len = cur.pos;
        let stored = cur.u32()?;
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - cur.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(Error::Corruption { stored, computed });
        }

        let ws = WeightSet {
            version,
            channel_order,
            means,
            records,
        };
        ws.check_chain()?;
        Ok(ws)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightSet> {
    WeightSet::from_bytes(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Io(io::Error::new(
                ErrorKind::UnexpectedEof,
                format!("weight file truncated at byte {}", self.bytes.len()),
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: u64) -> Result<Vec<f32>> {
        // Bounds-check before allocating so a corrupt shape cannot request
        // an absurd buffer.
        let bytes = n
            .checked_mul(4)
            .filter(|&b| b <= (self.bytes.len() - self.pos) as u64)
            .ok_or_else(|| {
                Error::Io(io::Error::new(
                    ErrorKind::UnexpectedEof,
                    "weight file truncated inside a record",
                ))
            })?;
        Ok(self
            .take(bytes as usize)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
