//! Framing and message codecs.
//!
//! ```text
//! frame := "SVM1" | u8 type | u64 LE payload length | payload | u32 LE crc32(payload)
//! ```

use std::io::{self, Read, Write};

use super::{MetadataBatch, SessionConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"SVM1";
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    Batch = 0x02,
    Grad = 0x03,
    EvalReq = 0x04,
    EvalResp = 0x05,
    Bye = 0x06,
}

impl MessageType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Self::Hello,
            0x02 => Self::Batch,
            0x03 => Self::Grad,
            0x04 => Self::EvalReq,
            0x05 => Self::EvalResp,
            0x06 => Self::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageType,
    pub payload: Vec<u8>,
}

pub fn write_frame(out: &mut impl Write, frame: &Frame) -> Result<()> {
    let mut header = [0u8; 13];
    header[..4].copy_from_slice(FRAME_MAGIC);
    header[4] = frame.kind as u8;
    header[5..].copy_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    out.write_all(&header)?;
    out.write_all(&frame.payload)?;
    out.write_all(&crc32fast::hash(&frame.payload).to_le_bytes())?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream before the first
/// header byte.
pub fn read_frame(input: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; 13];
    let mut got = 0;
    while got < header.len() {
        match input.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol(format!("stream ended inside a frame header ({got} of 13 bytes)"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Protocol(format!("bad frame magic {:02x?}", &header[..4])));
    }
    let kind = MessageType::from_byte(header[4])
        .ok_or_else(|| Error::Protocol(format!("unknown message type 0x{:02x}", header[4])))?;
    let len = u64::from_le_bytes(header[5..].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload of {len} bytes exceeds the frame limit")));
    }
    let mut payload = vec![0u8; len as usize];
    let mut crc = [0u8; 4];
    input
        .read_exact(&mut payload)
        .and_then(|()| input.read_exact(&mut crc))
        .map_err(|e| Error::Protocol(format!("truncated {kind:?} frame: {e}")))?;
    let (want, have) = (u32::from_le_bytes(crc), crc32fast::hash(&payload));
    if want != have {
        return Err(Error::Protocol(format!("crc mismatch on {kind:?} frame: {want:08x} != {have:08x}")));
    }
    Ok(Some(Frame { kind, payload }))
}

/// Gradient of the trainer's loss with respect to one batch's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMessage {
    pub seq: u64,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalResponse {
    pub seq: u64,
    pub correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(SessionConfig),
    Batch(MetadataBatch),
    Grad(GradMessage),
    EvalReq(MetadataBatch),
    EvalResp(EvalResponse),
    /// Optional human-readable reason.
    Bye(String),
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    out.reserve(vs.len() * 8);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Capacity(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn encode_batch(b: &MetadataBatch) -> Result<Vec<u8>> {
    let n = b.labels.len();
    let mut out = Vec::with_capacity(32 + 2 * n + 8 * b.activations.len());
    out.extend_from_slice(&b.seq.to_le_bytes());
    out.extend_from_slice(&b.epoch.to_le_bytes());
    out.extend_from_slice(&u32::try_from(n).map_err(|_| Error::Capacity("batch too large".into()))?.to_le_bytes());
    put_shape(&mut out, b.activations.shape())?;
    for &l in &b.labels {
        let l = u16::try_from(l).map_err(|_| Error::Capacity(format!("label {l} exceeds u16")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    put_f64s(&mut out, b.activations.data());
    Ok(out)
}

/// Cursor over a payload; every read is bounds checked.
struct Payload<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Payload<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, at: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Protocol(format!("{} payload truncated at byte {} (need {n} more)", self.what, self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        (0..4).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Protocol("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Protocol(format!(
                "{} payload has {} trailing bytes",
                self.what,
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn tensor_from(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(shape, data).map_err(|e| Error::Protocol(format!("bad tensor in payload: {e}")))
}

fn decode_batch(bytes: &[u8], what: &'static str) -> Result<MetadataBatch> {
    let mut p = Payload::new(bytes, what);
    let seq = p.u64()?;
    let epoch = p.u32()?;
    let n = p.u32()? as usize;
    let shape = p.shape()?;
    if shape[0] != n {
        return Err(Error::Protocol(format!("{what}: shape {shape:?} disagrees with N={n}")));
    }
    let labels = (0..n).map(|_| p.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let data = p.f64s(len.ok_or_else(|| Error::Protocol("shape overflow".into()))?)?;
    p.finish()?;
    Ok(MetadataBatch { seq, epoch, activations: tensor_from(shape, data)?, labels })
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Self::Hello(_) => MessageType::Hello,
            Self::Batch(_) => MessageType::Batch,
            Self::Grad(_) => MessageType::Grad,
            Self::EvalReq(_) => MessageType::EvalReq,
            Self::EvalResp(_) => MessageType::EvalResp,
            Self::Bye(_) => MessageType::Bye,
        }
    }

    pub fn to_frame(&self) -> Result<Frame> {
        let payload = match self {
            Self::Hello(cfg) => cfg.canonical_text().into_bytes(),
            Self::Batch(b) | Self::EvalReq(b) => encode_batch(b)?,
            Self::Grad(g) => {
                let mut out = g.seq.to_le_bytes().to_vec();
                if g.grad.rank() != 4 {
                    return Err(Error::Dimension(format!("gradient must be rank 4, got {:?}", g.grad.shape())));
                }
                put_shape(&mut out, g.grad.shape())?;
                put_f64s(&mut out, g.grad.data());
                out
            }
            Self::EvalResp(r) => [r.seq, r.correct, r.total].iter().flat_map(|v| v.to_le_bytes()).collect(),
            Self::Bye(reason) => reason.as_bytes().to_vec(),
        };
        Ok(Frame { kind: self.kind(), payload })
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let bytes = &frame.payload;
        Ok(match frame.kind {
            MessageType::Hello => {
                let text = std::str::from_utf8(bytes).map_err(|e| Error::Protocol(format!("HELLO is not UTF-8: {e}")))?;
                Self::Hello(SessionConfig::parse_canonical(text)?)
            }
            MessageType::Batch => Self::Batch(decode_batch(bytes, "BATCH")?),
            MessageType::EvalReq => Self::EvalReq(decode_batch(bytes, "EVAL_REQ")?),
            MessageType::Grad => {
                let mut p = Payload::new(bytes, "GRAD");
                let seq = p.u64()?;
                let shape = p.shape()?;
                let data = p.f64s(shape.iter().product())?;
                p.finish()?;
                Self::Grad(GradMessage { seq, grad: tensor_from(shape, data)? })
            }
            MessageType::EvalResp => {
                let mut p = Payload::new(bytes, "EVAL_RESP");
                let r = EvalResponse { seq: p.u64()?, correct: p.u64()?, total: p.u64()? };
                p.finish()?;
                Self::EvalResp(r)
            }
            MessageType::Bye => Self::Bye(String::from_utf8_lossy(bytes).into_owned()),
        })
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        write_frame(out, &self.to_frame()?)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Option<Self>> {
        read_frame(input)?.map(|f| Self::from_frame(&f)).transpose()
    }
}
