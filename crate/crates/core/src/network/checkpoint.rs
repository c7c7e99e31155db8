//! Model checkpoint format, all integers little-endian:
//!
//! ```text
//! "SVW1" | u32 layer count | layer*
//! layer := u8 tag | config | params
//!   1 conv      u32 c_out, c_in, k, stride, padding | f64 weights[c_out*c_in*k*k] | f64 bias[c_out]
//!   2 pool      u8 mode (0 max, 1 average) | u32 window
//!   3 dense     u32 out, in | f64 weights[out*in] | f64 bias[out]
//!   4 activation u8 base (0 sigmoid, 1 tanh, 2 relu)
//!   5 stepwise  u8 base | u32 n | f64 v
//!   6 flatten
//! ```

use std::io::{Read, Write};

use super::{Dense, Layer, Model};
use crate::activations::{Activation, StepWiseConfig};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolMode, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVW1";

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_DENSE: u8 = 3;
const TAG_ACTIVATION: u8 = 4;
const TAG_STEPWISE: u8 = 5;
const TAG_FLATTEN: u8 = 6;

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Capacity(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(out: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint(model: &Model, mut out: impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut out, model.len())?;
    for layer in model.layers() {
        match layer {
            Layer::Conv(spec) => {
                out.write_all(&[TAG_CONV])?;
                for v in [spec.out_channels(), spec.in_channels(), spec.kernel_size(), spec.stride(), spec.padding()] {
                    put_u32(&mut out, v)?;
                }
                put_f64s(&mut out, spec.weights().data())?;
                put_f64s(&mut out, spec.bias())?;
            }
            Layer::Pool { window, mode } => {
                let m = match mode {
                    PoolMode::Max => 0,
                    PoolMode::Average => 1,
                };
                out.write_all(&[TAG_POOL, m])?;
                put_u32(&mut out, *window)?;
            }
            Layer::Dense(d) => {
                out.write_all(&[TAG_DENSE])?;
                put_u32(&mut out, d.out_features())?;
                put_u32(&mut out, d.in_features())?;
                put_f64s(&mut out, d.weights.data())?;
                put_f64s(&mut out, &d.bias)?;
            }
            Layer::Activation(a) => out.write_all(&[TAG_ACTIVATION, a.tag()])?,
            Layer::StepWise(cfg) => {
                out.write_all(&[TAG_STEPWISE, cfg.base().tag()])?;
                out.write_all(&cfg.n().to_le_bytes())?;
                out.write_all(&cfg.v().to_le_bytes())?;
            }
            Layer::Flatten => out.write_all(&[TAG_FLATTEN])?,
        }
    }
    Ok(())
}

/// Byte reader that tracks its offset for error messages.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| self.fail(format!("truncated checkpoint: {e}")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 8];
        self.inner.read_exact(&mut raw).map_err(|e| self.fail(format!("truncated parameters: {e}")))?;
        self.offset += raw.len() as u64;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn fail(&self, message: String) -> Error {
        Error::Parse { offset: self.offset, message }
    }

    fn activation(&mut self) -> Result<Activation> {
        let tag = self.u8()?;
        Activation::from_tag(tag).ok_or_else(|| self.fail(format!("unknown activation tag {tag}")))
    }
}

pub fn read_checkpoint(input: impl Read) -> Result<Model> {
    let mut r = Cursor { inner: input, offset: 0 };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad checkpoint magic".into() });
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.offset;
        let layer = match r.u8()? {
            TAG_CONV => {
                let [c_out, c_in, k, stride, pad] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                let w = r.f64s(c_out * c_in * k * k)?;
                let b = r.f64s(c_out)?;
                let w = Tensor::new(vec![c_out, c_in, k, k], w).map_err(|e| r.fail(e.to_string()))?;
                Layer::Conv(ConvSpec::new(w, b, stride, pad).map_err(|e| r.fail(e.to_string()))?)
            }
            TAG_POOL => {
                let mode = match r.u8()? {
                    0 => PoolMode::Max,
                    1 => PoolMode::Average,
                    m => return Err(r.fail(format!("unknown pool mode {m}"))),
                };
                Layer::Pool { window: r.u32()?, mode }
            }
            TAG_DENSE => {
                let (out, inp) = (r.u32()?, r.u32()?);
                let w = r.f64s(out * inp)?;
                let b = r.f64s(out)?;
                let w = Tensor::new(vec![out, inp], w).map_err(|e| r.fail(e.to_string()))?;
                Layer::Dense(Dense::new(w, b).map_err(|e| r.fail(e.to_string()))?)
            }
            TAG_ACTIVATION => Layer::Activation(r.activation()?),
            TAG_STEPWISE => {
                let base = r.activation()?;
                let n = u32::from_le_bytes(r.bytes()?);
                let v = f64::from_le_bytes(r.bytes()?);
                Layer::StepWise(StepWiseConfig::new(base, n, v).map_err(|e| r.fail(e.to_string()))?)
            }
            TAG_FLATTEN => Layer::Flatten,
            tag => return Err(Error::Parse { offset: at, message: format!("unknown layer tag {tag}") }),
        };
        layers.push(layer);
    }
    Ok(Model::new(layers))
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        read_checkpoint(bytes)
    }
}
