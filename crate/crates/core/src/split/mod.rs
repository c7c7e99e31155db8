//! Layer-partitioned training: an edge party runs the first convolution and
//! step-wise activation on its private data and ships only the resulting
//! metadata; a trainer party fits the remaining layers.
//!
//! Both sides speak the framed protocol in [`wire`] over any byte stream.

pub mod wire;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;

use crate::activations::{Activation, StepWiseConfig};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{epoch_batches, sgd_momentum_step, GradientMode, Model, TrainConfig, Velocity};
use crate::tensor::Tensor;

pub use wire::{EvalResponse, Frame, GradMessage, Message, MessageType, FRAME_MAGIC};

/// Step-wise activations of one mini-batch plus its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataBatch {
    pub seq: u64,
    pub epoch: u32,
    /// `(N, C, H, W)`.
    pub activations: Tensor,
    pub labels: Vec<usize>,
}

impl MetadataBatch {
    /// Whether every activation is a plateau value of `cfg`.
    pub fn within_image(&self, cfg: &StepWiseConfig) -> bool {
        self.activations.data().iter().all(|&y| cfg.contains(y))
    }
}

/// What both parties must agree on before batches flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// [`Model::architecture_hash`] of the full, unsplit model.
    pub model_hash: String,
    pub stepwise: Option<StepWiseConfig>,
    pub train: TrainConfig,
    pub dataset: String,
    /// The trainer returns activation gradients (straight-through mode).
    pub gradient_return: bool,
    /// `(C, H, W)` of one metadata sample.
    pub activation_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Handshake {
    Accepted,
    /// Names the first mismatching field.
    Rejected(String),
}

impl SessionConfig {
    /// Session for `model` split after its first step-wise layer, on inputs
    /// of shape `(C, H, W)`.
    pub fn for_model(
        model: &Model,
        dataset: &str,
        input_dims: [usize; 3],
        train: TrainConfig,
    ) -> Result<Self> {
        let idx = model
            .first_stepwise()
            .ok_or_else(|| Error::Config("split sessions need a step-wise layer".into()))?;
        let Some(crate::network::Layer::StepWise(cfg)) = model.layers().get(idx) else {
            unreachable!("first_stepwise points at a step-wise layer")
        };
        let edge = Model::new(model.layers()[..=idx].to_vec());
        let [_, c, h, w] = <[usize; 4]>::try_from(edge.output_shape(&[1, input_dims[0], input_dims[1], input_dims[2]])?)
            .map_err(|s| Error::Dimension(format!("edge output {s:?} is not (N,C,H,W)")))?;
        Ok(Self {
            model_hash: model.architecture_hash(),
            stepwise: Some(*cfg),
            gradient_return: train.stepwise_gradient_mode == GradientMode::StraightThrough,
            train,
            dataset: dataset.to_string(),
            activation_shape: [c, h, w],
        })
    }

    fn fields(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let [c, h, w] = self.activation_shape;
        m.insert("activation_shape", format!("{c}x{h}x{w}"));
        m.insert("dataset", self.dataset.clone());
        m.insert("gradient_return", self.gradient_return.to_string());
        m.insert("model_hash", self.model_hash.clone());
        match &self.stepwise {
            None => {
                m.insert("stepwise", "none".into());
            }
            Some(s) => {
                m.insert("stepwise.base", s.base().name().into());
                m.insert("stepwise.n", s.n().to_string());
                m.insert("stepwise.v", s.v().to_string());
            }
        }
        let t = &self.train;
        m.insert("train.batch_size", t.batch_size.to_string());
        m.insert("train.epochs", t.epochs.to_string());
        m.insert("train.grad_mode", t.stepwise_gradient_mode.name().into());
        m.insert("train.learning_rate", t.learning_rate.to_string());
        m.insert("train.momentum", t.momentum.to_string());
        m.insert("train.seed", t.seed.to_string());
        m
    }

    /// `key=value` lines sorted by key. Floats use Rust's shortest
    /// round-trip formatting.
    pub fn canonical_text(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Protocol(format!("session config: {msg}"));
        let mut map = BTreeMap::new();
        let mut prev: Option<&str> = None;
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            if prev.is_some_and(|p| p >= k) {
                return Err(bad(format!("key `{k}` out of canonical order")));
            }
            prev = Some(k);
            map.insert(k, v);
        }
        fn take_from<'t>(map: &mut BTreeMap<&str, &'t str>, k: &str) -> Result<&'t str> {
            map.remove(k).ok_or_else(|| Error::Protocol(format!("session config: missing `{k}`")))
        }
        let mut take = |k: &str| take_from(&mut map, k);
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Protocol(format!("session config: bad value `{v}` for `{k}`")))
        }
        let shape = take("activation_shape")?;
        let dims: Vec<usize> = shape.split('x').map(|d| num("activation_shape", d)).collect::<Result<_>>()?;
        let activation_shape = <[usize; 3]>::try_from(dims).map_err(|_| bad(format!("bad shape `{shape}`")))?;
        let dataset = take("dataset")?.to_string();
        let gradient_return = num("gradient_return", take("gradient_return")?)?;
        let model_hash = take("model_hash")?.to_string();
        let stepwise = if let Ok(base_text) = take("stepwise.base") {
            let base: Activation = base_text.parse().map_err(|e: Error| bad(e.to_string()))?;
            let n = num("stepwise.n", take("stepwise.n")?)?;
            let v = num("stepwise.v", take("stepwise.v")?)?;
            Some(StepWiseConfig::new(base, n, v).map_err(|e| bad(e.to_string()))?)
        } else {
            match take("stepwise")? {
                "none" => None,
                other => return Err(bad(format!("bad stepwise `{other}`"))),
            }
        };
        let train = TrainConfig {
            batch_size: num("train.batch_size", take("train.batch_size")?)?,
            epochs: num("train.epochs", take("train.epochs")?)?,
            stepwise_gradient_mode: take("train.grad_mode")?.parse().map_err(|e: Error| bad(e.to_string()))?,
            learning_rate: num("train.learning_rate", take("train.learning_rate")?)?,
            momentum: num("train.momentum", take("train.momentum")?)?,
            seed: num("train.seed", take("train.seed")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(bad(format!("unknown key `{k}`")));
        }
        Ok(Self { model_hash, stepwise, train, dataset, gradient_return, activation_shape })
    }
}

impl fmt::Display for SessionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// Accepted iff the architecture hash, step-wise configuration, dataset and
/// gradient-return flag agree. Training hyper-parameters may differ.
pub fn handshake(edge: &SessionConfig, trainer: &SessionConfig) -> Handshake {
    let reject = |field: &str| Handshake::Rejected(field.to_string());
    if edge.model_hash != trainer.model_hash {
        return reject("model_hash");
    }
    match (&edge.stepwise, &trainer.stepwise) {
        (Some(a), Some(b)) => {
            if a.base() != b.base() {
                return reject("stepwise.base");
            }
            if a.n() != b.n() {
                return reject("stepwise.n");
            }
            if a.v().to_bits() != b.v().to_bits() {
                return reject("stepwise.v");
            }
        }
        (None, None) => {}
        _ => return reject("stepwise"),
    }
    if edge.dataset != trainer.dataset {
        return reject("dataset");
    }
    if edge.gradient_return != trainer.gradient_return {
        return reject("gradient_return");
    }
    Handshake::Accepted
}

/// Where the edge sends metadata.
pub trait MetadataSink {
    fn send_batch(&mut self, batch: &MetadataBatch) -> Result<()>;

    /// Activation gradient for batch `seq`; gradient-return sessions only.
    fn receive_grad(&mut self, seq: u64) -> Result<Tensor> {
        Err(Error::Capability(format!("sink cannot return gradients (batch {seq})")))
    }

    /// Sends held-out metadata and returns `(correct, total)`.
    fn evaluate(&mut self, batch: &MetadataBatch) -> Result<(u64, u64)> {
        let _ = batch;
        Err(Error::Capability("sink cannot evaluate".into()))
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Collects batches in memory.
impl MetadataSink for Vec<MetadataBatch> {
    fn send_batch(&mut self, batch: &MetadataBatch) -> Result<()> {
        self.push(batch.clone());
        Ok(())
    }
}

pub enum Incoming {
    Batch(MetadataBatch),
    Eval(MetadataBatch),
    End,
}

/// Where the trainer reads metadata from.
pub trait MetadataSource {
    fn next_message(&mut self) -> Result<Incoming>;

    fn send_grad(&mut self, msg: GradMessage) -> Result<()> {
        Err(Error::Capability(format!("source cannot carry gradients (batch {})", msg.seq)))
    }

    fn send_eval(&mut self, resp: EvalResponse) -> Result<()> {
        Err(Error::Capability(format!("source cannot carry evaluation results (seq {})", resp.seq)))
    }
}

/// Replays batches from memory; evaluation requests are not supported.
pub struct ReplaySource<I> {
    batches: I,
}

impl<I: Iterator<Item = MetadataBatch>> ReplaySource<I> {
    pub fn new(batches: impl IntoIterator<IntoIter = I>) -> Self {
        Self { batches: batches.into_iter() }
    }
}

impl<I: Iterator<Item = MetadataBatch>> MetadataSource for ReplaySource<I> {
    fn next_message(&mut self) -> Result<Incoming> {
        Ok(self.batches.next().map_or(Incoming::End, Incoming::Batch))
    }
}

/// Both ends of a framed byte stream.
pub struct Connection<R, W> {
    reader: R,
    writer: W,
}

impl Connection<BufReader<TcpStream>, BufWriter<TcpStream>> {
    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self { reader, writer: BufWriter::new(stream) })
    }
}

impl<R: Read, W: Write> Connection<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }

    pub fn into_parts(self) -> (R, W) {
        (self.reader, self.writer)
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        msg.write_to(&mut self.writer)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message> {
        Message::read_from(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("connection closed by peer".into()))
    }

    /// Edge side: announce `own` and wait for the trainer's verdict.
    pub fn edge_handshake(&mut self, own: &SessionConfig) -> Result<SessionConfig> {
        self.send(&Message::Hello(own.clone()))?;
        match self.recv()? {
            Message::Hello(peer) => Ok(peer),
            Message::Bye(reason) => Err(Error::HandshakeRejected(reason)),
            other => Err(Error::Protocol(format!("expected HELLO, got {:?}", other.kind()))),
        }
    }

    /// Trainer side: check the edge's announcement against `own` and the
    /// suffix model's input shape, then accept or reject.
    pub fn trainer_handshake(&mut self, own: &SessionConfig, suffix: &Model) -> Result<SessionConfig> {
        let peer = match self.recv()? {
            Message::Hello(peer) => peer,
            other => return Err(Error::Protocol(format!("expected HELLO, got {:?}", other.kind()))),
        };
        let [c, h, w] = peer.activation_shape;
        let verdict = match handshake(&peer, own) {
            Handshake::Accepted if suffix.output_shape(&[1, c, h, w]).is_err() => {
                Handshake::Rejected("activation_shape".into())
            }
            v => v,
        };
        match verdict {
            Handshake::Accepted => {
                self.send(&Message::Hello(own.clone()))?;
                Ok(peer)
            }
            Handshake::Rejected(reason) => {
                self.send(&Message::Bye(reason.clone()))?;
                Err(Error::HandshakeRejected(reason))
            }
        }
    }
}

impl<R: Read, W: Write> MetadataSink for Connection<R, W> {
    fn send_batch(&mut self, batch: &MetadataBatch) -> Result<()> {
        self.send(&Message::Batch(batch.clone()))
    }

    fn receive_grad(&mut self, seq: u64) -> Result<Tensor> {
        match self.recv()? {
            Message::Grad(g) if g.seq == seq => Ok(g.grad),
            Message::Grad(g) => Err(Error::Protocol(format!("GRAD for batch {} while waiting for {seq}", g.seq))),
            other => Err(Error::Protocol(format!("expected GRAD, got {:?}", other.kind()))),
        }
    }

    fn evaluate(&mut self, batch: &MetadataBatch) -> Result<(u64, u64)> {
        self.send(&Message::EvalReq(batch.clone()))?;
        match self.recv()? {
            Message::EvalResp(r) if r.seq == batch.seq => Ok((r.correct, r.total)),
            other => Err(Error::Protocol(format!("expected EVAL_RESP {}, got {other:?}", batch.seq))),
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.send(&Message::Bye(String::new()))
    }
}

impl<R: Read, W: Write> MetadataSource for Connection<R, W> {
    fn next_message(&mut self) -> Result<Incoming> {
        match self.recv()? {
            Message::Batch(b) => Ok(Incoming::Batch(b)),
            Message::EvalReq(b) => Ok(Incoming::Eval(b)),
            Message::Bye(_) => Ok(Incoming::End),
            other => Err(Error::Protocol(format!("unexpected {:?} from edge", other.kind()))),
        }
    }

    fn send_grad(&mut self, msg: GradMessage) -> Result<()> {
        self.send(&Message::Grad(msg))
    }

    fn send_eval(&mut self, resp: EvalResponse) -> Result<()> {
        self.send(&Message::EvalResp(resp))
    }
}

/// Edge-side model (first convolution through the step-wise layer) and its
/// momentum buffers, which only move in gradient-return sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    pub model: Model,
    pub velocity: Velocity,
}

impl EdgeState {
    pub fn new(model: Model) -> Self {
        let velocity = Velocity::zeros(&model);
        Self { model, velocity }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeReport {
    pub batches_sent: u64,
    pub next_seq: u64,
    /// `(epoch, accuracy)` from the trainer's evaluation replies.
    pub eval: Vec<(u32, f64)>,
}

/// Batch size used for held-out evaluation traffic.
pub const EVAL_CHUNK: usize = 500;

fn sink_failed(resume_seq: u64, source: Error) -> Error {
    Error::SinkFailed { resume_seq, source: Box::new(source) }
}

/// Runs the edge for `cfg.epochs` epochs, emitting one metadata batch per
/// mini-batch of `data` in the order given by [`epoch_batches`]. Batches with
/// `seq < start_seq` are skipped, which resumes an aborted session. When
/// `eval` is given, its metadata is sent for evaluation after every epoch.
///
/// Raw inputs never reach the sink: only `edge.model`'s outputs and the
/// labels are serialized.
pub fn edge_process(
    edge: &mut EdgeState,
    data: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    start_seq: u64,
    sink: &mut impl MetadataSink,
) -> Result<EdgeReport> {
    cfg.validate()?;
    let gradient_return = cfg.stepwise_gradient_mode == GradientMode::StraightThrough;
    let mut report = EdgeReport::default();
    let mut seq = 0u64;
    for epoch in 1..=cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let this = seq;
            seq += 1;
            if this < start_seq {
                continue;
            }
            let x = data.images.select_batch(&idx)?;
            let (activations, tape) = edge.model.forward(&x, cfg.stepwise_gradient_mode)?;
            let batch = MetadataBatch { seq: this, epoch, activations, labels: idx.iter().map(|&i| data.labels[i]).collect() };
            sink.send_batch(&batch).map_err(|e| sink_failed(this, e))?;
            report.batches_sent += 1;
            if gradient_return {
                let grad = sink.receive_grad(this).map_err(|e| sink_failed(this, e))?;
                let grads = edge.model.backward_from(&tape, grad, false)?;
                sgd_momentum_step(&mut edge.model, &grads, &mut edge.velocity, cfg);
            }
        }
        if let Some(test) = eval {
            if seq < start_seq {
                continue;
            }
            let (mut correct, mut total) = (0, 0);
            for (k, start) in (0..test.len()).step_by(EVAL_CHUNK).enumerate() {
                let end = (start + EVAL_CHUNK).min(test.len());
                let activations = edge.model.predict(&test.images.slice_batch(start, end)?)?;
                let batch = MetadataBatch { seq: k as u64, epoch, activations, labels: test.labels[start..end].to_vec() };
                let (c, t) = sink.evaluate(&batch).map_err(|e| sink_failed(seq, e))?;
                correct += c;
                total += t;
            }
            report.eval.push((epoch, correct as f64 / total.max(1) as f64));
        }
    }
    sink.finish().map_err(|e| sink_failed(seq, e))?;
    report.next_seq = seq;
    Ok(report)
}

/// One line of the metrics log: `epoch split metric value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: u32,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.epoch, self.split, self.metric, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct EpochAccum {
    epoch: u32,
    loss_sum: f64,
    batches: u64,
    correct: u64,
    total: u64,
}

/// Everything the trainer needs to resume after an abort.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub model: Model,
    pub velocity: Velocity,
    pub next_seq: u64,
    pub metrics: Vec<MetricRecord>,
    current: Option<EpochAccum>,
}

impl TrainerState {
    pub fn new(model: Model) -> Self {
        let velocity = Velocity::zeros(&model);
        Self { model, velocity, next_seq: 0, metrics: Vec::new(), current: None }
    }

    fn flush(&mut self) {
        if let Some(acc) = self.current.take() {
            if acc.batches > 0 {
                let value = acc.loss_sum / acc.batches as f64;
                self.metrics.push(MetricRecord { epoch: acc.epoch, split: "train", metric: "loss", value });
            }
            if acc.total > 0 {
                let value = acc.correct as f64 / acc.total as f64;
                self.metrics.push(MetricRecord { epoch: acc.epoch, split: "test", metric: "accuracy", value });
            }
        }
    }

    fn accum(&mut self, epoch: u32) -> Result<&mut EpochAccum> {
        match &self.current {
            Some(acc) if acc.epoch > epoch => {
                return Err(Error::Protocol(format!("epoch {epoch} after epoch {}", acc.epoch)));
            }
            Some(acc) if acc.epoch < epoch => self.flush(),
            _ => {}
        }
        Ok(self.current.get_or_insert_with(|| EpochAccum { epoch, ..EpochAccum::default() }))
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<u64> {
    let [_, k] = logits.dims2()?;
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        correct += u64::from(pred == label);
    }
    Ok(correct)
}

/// Trains `state.model` on metadata until the source ends. Each batch must
/// carry `state.next_seq`; a gap is a protocol error and leaves `state` at
/// the last completed batch.
pub fn trainer_process(
    source: &mut impl MetadataSource,
    state: &mut TrainerState,
    cfg: &TrainConfig,
    gradient_return: bool,
) -> Result<()> {
    cfg.validate()?;
    loop {
        match source.next_message()? {
            Incoming::Batch(batch) => {
                if batch.seq != state.next_seq {
                    return Err(Error::Protocol(format!(
                        "seq gap: expected batch {}, got {}",
                        state.next_seq, batch.seq
                    )));
                }
                let (_, tape) = state.model.forward(&batch.activations, GradientMode::FrozenPrefix)?;
                let grads = state.model.backward(&tape, &batch.labels, gradient_return)?;
                sgd_momentum_step(&mut state.model, &grads, &mut state.velocity, cfg);
                if gradient_return {
                    let grad = grads
                        .input
                        .ok_or_else(|| Error::Config("suffix model cannot return input gradients".into()))?;
                    source.send_grad(GradMessage { seq: batch.seq, grad })?;
                }
                state.next_seq += 1;
                let acc = state.accum(batch.epoch)?;
                acc.loss_sum += grads.loss;
                acc.batches += 1;
            }
            Incoming::Eval(batch) => {
                let logits = state.model.predict(&batch.activations)?;
                let correct = count_correct(&logits, &batch.labels)?;
                let total = batch.labels.len() as u64;
                let acc = state.accum(batch.epoch)?;
                if batch.seq == 0 {
                    // a resumed edge repeats the whole evaluation pass
                    (acc.correct, acc.total) = (0, 0);
                }
                acc.correct += correct;
                acc.total += total;
                source.send_eval(EvalResponse { seq: batch.seq, correct, total })?;
            }
            Incoming::End => {
                state.flush();
                return Ok(());
            }
        }
    }
}
