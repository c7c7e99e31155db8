//! End-to-end runs behind the command line: training, reconstruction
//! attacks, evaluation and the combined accuracy/reconstruction report.

use std::fmt;
use std::fs;
use std::io::BufRead;
use std::net::{TcpListener, TcpStream};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use crate::activations::{Activation, StepWiseConfig};
use crate::dataset::{encode_image_grid, load_cifar10, load_mnist, mnist_paths, tile_images, LabeledDataset};
use crate::error::{Error, Result};
use crate::inversion::{invert_conv_layer_with, AttackActivation, Strategy};
use crate::network::{
    build_reference_model, evaluate, read_checkpoint, train_epochs, write_checkpoint, DatasetKind,
    FirstActivation, Layer, Model, TrainConfig,
};
use crate::split::{
    edge_process, trainer_process, Connection, EdgeReport, EdgeState, MetricRecord, SessionConfig, TrainerState,
};
use crate::tensor::{conv2d, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    ServeEdge,
    ServeTrainer,
    Eval,
    Figure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Monolithic,
    /// Edge and trainer in one process, joined by a local socket pair.
    Split,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolithic" => Ok(Self::Monolithic),
            "split" => Ok(Self::Split),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Everything one command invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub command: Command,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Keep the first `limit` samples of the training and test splits.
    pub limit: Option<usize>,
    pub first_activation: FirstActivation,
    pub train: TrainConfig,
    pub mode: RunMode,
    pub out: PathBuf,
    pub strategy: Strategy,
    /// Images reconstructed by `attack` and `figure`.
    pub num_images: usize,
    pub checkpoint: Option<PathBuf>,
    /// Clipping value of the step-wise panels in attacks and figures.
    pub v: f64,
    /// `figure`: train missing accuracy rows in-line instead of failing.
    pub train_missing: bool,
}

impl ExperimentSpec {
    pub fn new(command: Command, dataset: DatasetKind, data_dir: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            command,
            dataset,
            data_dir: data_dir.into(),
            limit: None,
            first_activation: FirstActivation::Plain(Activation::Sigmoid),
            train: TrainConfig::default(),
            mode: RunMode::Monolithic,
            out: out.into(),
            strategy: Strategy::Joint,
            num_images: 16,
            checkpoint: None,
            v: 10.0,
            train_missing: false,
        }
    }

    pub fn input_dims(&self) -> [usize; 3] {
        let (c, h, w) = self.dataset.input_dims();
        [c, h, w]
    }

    fn session(&self, model: &Model) -> Result<SessionConfig> {
        SessionConfig::for_model(model, self.dataset.name(), self.input_dims(), self.train)
    }

    fn reference_model(&self) -> Model {
        build_reference_model(self.dataset, self.first_activation, self.train.seed)
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
    }
    Ok(())
}

/// Loads the training (`train = true`) or test split of `kind` from `dir`.
/// CIFAR-10 expects `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_dataset(kind: DatasetKind, dir: &Path, train: bool, limit: Option<usize>) -> Result<LabeledDataset> {
    match kind {
        DatasetKind::Mnist => {
            let (images, labels) = mnist_paths(dir, train);
            require(&images)?;
            require(&labels)?;
            load_mnist(&images, &labels, limit)
        }
        DatasetKind::Cifar10 => {
            let files: Vec<PathBuf> = if train {
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
            } else {
                vec![dir.join("test_batch.bin")]
            };
            files.iter().try_for_each(|f| require(f))?;
            load_cifar10(&files, limit)
        }
    }
}

fn write_metrics(path: &Path, metrics: &[MetricRecord]) -> Result<()> {
    let text: String = metrics.iter().map(|m| format!("{m}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

/// Last `test accuracy` value of a metrics file.
pub fn read_final_accuracy(path: &Path) -> Result<f64> {
    let file = fs::File::open(path)?;
    let mut last = None;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if let ["test", "accuracy", v] = fields.get(1..).unwrap_or_default() {
            last = Some(v.parse().map_err(|_| Error::Config(format!("{}: bad value `{v}`", path.display())))?);
        }
    }
    last.ok_or_else(|| Error::Config(format!("{} has no test accuracy record", path.display())))
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_checkpoint(model, std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRecord>,
    pub test_accuracy: f64,
    pub model: Model,
}

/// Trains the reference model and writes `metrics.txt` (`epoch split metric
/// value` per line) and `model.svw` into `spec.out`.
pub fn run_train(spec: &ExperimentSpec) -> Result<TrainOutcome> {
    spec.train.validate()?;
    let model = spec.reference_model();
    if spec.mode == RunMode::Split && model.first_stepwise().is_none() {
        return Err(Error::Config("split mode needs --activation stepwise".into()));
    }
    let train = load_dataset(spec.dataset, &spec.data_dir, true, spec.limit)?;
    let test = load_dataset(spec.dataset, &spec.data_dir, false, spec.limit)?;
    fs::create_dir_all(&spec.out)?;

    let (model, metrics) = match spec.mode {
        RunMode::Monolithic => {
            let mut model = model;
            let mut metrics = Vec::new();
            train_epochs(&mut model, &train.images, &train.labels, &spec.train, |m, stats| {
                let acc = evaluate(m, &test.images, &test.labels)?;
                metrics.push(MetricRecord { epoch: stats.epoch, split: "train", metric: "loss", value: stats.mean_loss });
                metrics.push(MetricRecord { epoch: stats.epoch, split: "test", metric: "accuracy", value: acc });
                Ok(())
            })?;
            (model, metrics)
        }
        RunMode::Split => split_in_process(spec, model, &train, &test)?,
    };
    let test_accuracy = metrics
        .iter()
        .rev()
        .find(|m| m.metric == "accuracy")
        .map_or_else(|| evaluate(&model, &test.images, &test.labels), |m| Ok(m.value))?;
    write_metrics(&spec.out.join("metrics.txt"), &metrics)?;
    save_model(&model, &spec.out.join("model.svw"))?;
    Ok(TrainOutcome { metrics, test_accuracy, model })
}

fn split_in_process(
    spec: &ExperimentSpec,
    model: Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(Model, Vec<MetricRecord>)> {
    let session = spec.session(&model)?;
    let (edge_model, suffix) = model.split_at_stepwise()?;
    let (a, b) = UnixStream::pair()?;
    let trainer_session = session.clone();
    let cfg = spec.train;
    let trainer = thread::spawn(move || -> Result<TrainerState> {
        let mut conn = Connection::new(b.try_clone()?, b);
        conn.trainer_handshake(&trainer_session, &suffix)?;
        let mut state = TrainerState::new(suffix);
        trainer_process(&mut conn, &mut state, &cfg, trainer_session.gradient_return)?;
        Ok(state)
    });
    let mut conn = Connection::new(a.try_clone()?, a);
    let edge_result = conn
        .edge_handshake(&session)
        .and_then(|_| {
            let mut edge = EdgeState::new(edge_model);
            edge_process(&mut edge, train, Some(test), &spec.train, 0, &mut conn).map(|_| edge)
        });
    drop(conn);
    let state = trainer.join().map_err(|_| Error::Protocol("trainer thread panicked".into()))?;
    let edge = edge_result?;
    let state = state?;
    Ok((edge.model.concat(state.model), state.metrics))
}

/// Trainer side of a TCP session: accepts one edge on `listen`, trains the
/// suffix, and writes `metrics.txt` and `suffix.svw` (plus `model.svw` when
/// the edge layer is frozen, since its weights are then known).
pub fn serve_trainer(spec: &ExperimentSpec, listen: &str) -> Result<Vec<MetricRecord>> {
    spec.train.validate()?;
    let model = spec.reference_model();
    let session = spec.session(&model)?;
    let (edge_model, suffix) = model.split_at_stepwise()?;
    fs::create_dir_all(&spec.out)?;
    let listener = TcpListener::bind(listen)?;
    let (stream, _) = listener.accept()?;
    let mut conn = Connection::tcp(stream)?;
    conn.trainer_handshake(&session, &suffix)?;
    let mut state = TrainerState::new(suffix);
    trainer_process(&mut conn, &mut state, &spec.train, session.gradient_return)?;
    write_metrics(&spec.out.join("metrics.txt"), &state.metrics)?;
    save_model(&state.model, &spec.out.join("suffix.svw"))?;
    if !session.gradient_return {
        save_model(&edge_model.concat(state.model), &spec.out.join("model.svw"))?;
    }
    Ok(state.metrics)
}

/// Edge side of a TCP session. Retries the connection for up to a minute so
/// the two processes can start in either order.
pub fn serve_edge(spec: &ExperimentSpec, connect: &str) -> Result<EdgeReport> {
    spec.train.validate()?;
    let model = spec.reference_model();
    let session = spec.session(&model)?;
    let (edge_model, _) = model.split_at_stepwise()?;
    let train = load_dataset(spec.dataset, &spec.data_dir, true, spec.limit)?;
    let test = load_dataset(spec.dataset, &spec.data_dir, false, spec.limit)?;
    fs::create_dir_all(&spec.out)?;
    let deadline = Instant::now() + Duration::from_secs(60);
    let stream = loop {
        match TcpStream::connect(connect) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                let _ = e;
                thread::sleep(Duration::from_millis(200));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let mut conn = Connection::tcp(stream)?;
    conn.edge_handshake(&session)?;
    let mut edge = EdgeState::new(edge_model);
    let report = edge_process(&mut edge, &train, Some(&test), &spec.train, 0, &mut conn)?;
    let lines: String = report.eval.iter().map(|(e, acc)| format!("{e} test accuracy {acc}\n")).collect();
    fs::write(spec.out.join("edge-metrics.txt"), lines)?;
    save_model(&edge.model, &spec.out.join("edge.svw"))?;
    Ok(report)
}

/// Test accuracy of the checkpoint in `spec.checkpoint`.
pub fn run_eval(spec: &ExperimentSpec) -> Result<f64> {
    let path = spec.checkpoint.as_ref().ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let model = load_model(path)?;
    let test = load_dataset(spec.dataset, &spec.data_dir, false, spec.limit)?;
    evaluate(&model, &test.images, &test.labels)
}

/// One reconstruction panel of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    /// Panel letter, `b` through `i`.
    pub panel: char,
    pub activation: String,
    pub n: Option<u32>,
    pub mse: f64,
    pub psnr_db: f64,
}

impl fmt::Display for AttackRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.n.map_or_else(|| "-".to_string(), |n| n.to_string());
        write!(f, "{} {n} {:e} {:.4}", self.activation, self.mse, self.psnr_db)
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub originals: Tensor,
    pub rows: Vec<AttackRow>,
    pub reconstructions: Vec<Tensor>,
}

/// Panels (b) to (i): no activation, sigmoid, tanh, relu, then step-wise
/// sigmoid with clipping `v` and n = 3, 5, 11, 21.
pub fn attack_panels(v: f64) -> Result<Vec<(char, Option<AttackActivation>)>> {
    let mut panels = vec![
        ('b', None),
        ('c', Some(AttackActivation::Sigmoid)),
        ('d', Some(AttackActivation::Tanh)),
        ('e', Some(AttackActivation::Relu)),
    ];
    for (letter, n) in ['f', 'g', 'h', 'i'].into_iter().zip([3, 5, 11, 21]) {
        panels.push((letter, Some(AttackActivation::StepWise(StepWiseConfig::new(Activation::Sigmoid, n, v)?))));
    }
    Ok(panels)
}

/// The convolution under attack: the first layer of `spec.checkpoint`, or of
/// the seeded reference model.
pub fn attacked_layer(spec: &ExperimentSpec) -> Result<ConvSpec> {
    let model = match &spec.checkpoint {
        Some(path) => load_model(path)?,
        None => spec.reference_model(),
    };
    match model.layers().first() {
        Some(Layer::Conv(c)) => Ok(c.clone()),
        _ => Err(Error::Config("the model's first layer is not a convolution".into())),
    }
}

/// Observed output of `layer` followed by `activation`.
pub fn observe(layer: &ConvSpec, x: &Tensor, activation: Option<AttackActivation>) -> Result<Tensor> {
    let z = conv2d(x, layer)?;
    Ok(match activation {
        None => z,
        Some(a) => z.map(|v| a.forward(v)),
    })
}

/// Reconstructs the first `spec.num_images` test images under every panel's
/// activation. Writes `originals.pgm`, `recon-<panel>.pgm` and `attack.txt`
/// (`activation n mse psnr`) into `spec.out`.
pub fn run_attack(spec: &ExperimentSpec) -> Result<AttackOutcome> {
    if spec.num_images == 0 {
        return Err(Error::Config("--num-images must be positive".into()));
    }
    let layer = attacked_layer(spec)?;
    let test = load_dataset(spec.dataset, &spec.data_dir, false, Some(spec.num_images))?;
    let panels = attack_panels(spec.v)?;
    fs::create_dir_all(&spec.out)?;
    let x = test.images;
    let mut rows = Vec::new();
    let mut reconstructions = Vec::new();
    for (panel, act) in panels {
        let y = observe(&layer, &x, act)?;
        let report = invert_conv_layer_with(&layer, &y, act, Some(&x), spec.strategy)?;
        let (activation, n) = match act {
            None => ("none".to_string(), None),
            Some(AttackActivation::StepWise(cfg)) => (format!("stepwise-{}", cfg.base()), Some(cfg.n())),
            Some(a) => (a.label(), None),
        };
        let mse = report.mse.expect("ground truth supplied");
        rows.push(AttackRow { panel, activation, n, mse, psnr_db: report.psnr_db.expect("ground truth supplied") });
        fs::write(spec.out.join(format!("recon-{panel}.pgm")), encode_image_grid(&report.reconstructed)?)?;
        reconstructions.push(report.reconstructed);
    }
    fs::write(spec.out.join("originals.pgm"), encode_image_grid(&x)?)?;
    let mut table = String::from("activation n mse psnr\n");
    for r in &rows {
        table.push_str(&format!("{r}\n"));
    }
    fs::write(spec.out.join("attack.txt"), table)?;
    Ok(AttackOutcome { originals: x, rows, reconstructions })
}

/// Table rows of the accuracy comparison: sigmoid, then step-wise sigmoid
/// with n = 3, 5, 11, 21.
pub fn accuracy_rows(v: f64) -> Result<Vec<FirstActivation>> {
    let mut rows = vec![FirstActivation::Plain(Activation::Sigmoid)];
    for n in [3, 5, 11, 21] {
        rows.push(FirstActivation::StepWise(StepWiseConfig::new(Activation::Sigmoid, n, v)?));
    }
    Ok(rows)
}

fn train_dir(out: &Path, first: FirstActivation) -> PathBuf {
    out.join(format!("train-{first}"))
}

fn train_command(spec: &ExperimentSpec, first: FirstActivation) -> String {
    let t = &spec.train;
    let act = match first {
        FirstActivation::Plain(a) => format!("--activation {a}"),
        FirstActivation::StepWise(cfg) => format!(
            "--activation stepwise --n {} --v {} --grad-mode {}",
            cfg.n(),
            cfg.v(),
            t.stepwise_gradient_mode.name()
        ),
    };
    let limit = spec.limit.map_or_else(String::new, |l| format!(" --limit {l}"));
    format!(
        "stepsplit train --dataset {} --data-dir {}{limit} {act} --lr {} --momentum {} --batch {} --epochs {} --seed {} --out {}",
        spec.dataset,
        spec.data_dir.display(),
        t.learning_rate,
        t.momentum,
        t.batch_size,
        t.epochs,
        t.seed,
        train_dir(&spec.out, first).display()
    )
}

#[derive(Debug, Clone)]
pub struct FigureOutcome {
    /// `(row label, accuracy)`.
    pub accuracy: Vec<(String, f64)>,
    pub attack: AttackOutcome,
}

/// Accuracy table plus the nine-panel reconstruction figure. Accuracy rows
/// come from `<out>/train-<activation>/metrics.txt`; missing runs are trained
/// first when `spec.train_missing` is set and reported otherwise.
pub fn run_figure(spec: &ExperimentSpec) -> Result<FigureOutcome> {
    let rows = accuracy_rows(spec.v)?;
    let missing: Vec<FirstActivation> =
        rows.iter().copied().filter(|r| !train_dir(&spec.out, *r).join("metrics.txt").is_file()).collect();
    if !missing.is_empty() && !spec.train_missing {
        let commands: Vec<String> = missing.iter().map(|r| format!("  {}", train_command(spec, *r))).collect();
        return Err(Error::Config(format!(
            "missing training results; run these first (or pass --train-missing):\n{}",
            commands.join("\n")
        )));
    }
    for first in missing {
        let mut sub = spec.clone();
        sub.command = Command::Train;
        sub.mode = RunMode::Monolithic;
        sub.first_activation = first;
        sub.out = train_dir(&spec.out, first);
        run_train(&sub)?;
    }
    let mut accuracy = Vec::new();
    let mut table = String::from("activation n accuracy\n");
    for first in rows {
        let acc = read_final_accuracy(&train_dir(&spec.out, first).join("metrics.txt"))?;
        let (name, n) = match first {
            FirstActivation::Plain(a) => (a.to_string(), "-".to_string()),
            FirstActivation::StepWise(cfg) => (format!("stepwise-{}", cfg.base()), cfg.n().to_string()),
        };
        table.push_str(&format!("{name} {n} {acc:.4}\n"));
        accuracy.push((first.to_string(), acc));
    }
    let mut attack_spec = spec.clone();
    attack_spec.out = spec.out.join("attack");
    if attack_spec.checkpoint.is_none() {
        attack_spec.first_activation = FirstActivation::Plain(Activation::Sigmoid);
    }
    let attack = run_attack(&attack_spec)?;

    let fig_dir = spec.out.join("figure");
    fs::create_dir_all(&fig_dir)?;
    fs::write(spec.out.join("accuracy.txt"), table)?;
    let mut panels = vec![tile_images(&attack.originals)?];
    for r in &attack.reconstructions {
        panels.push(tile_images(r)?);
    }
    for (letter, panel) in ('a'..='i').zip(&panels) {
        fs::write(fig_dir.join(format!("panel-{letter}.pgm")), encode_image_grid(panel)?)?;
    }
    let stacked = stack(&panels)?;
    fs::write(fig_dir.join("figure.pgm"), encode_image_grid(&stacked)?)?;
    Ok(FigureOutcome { accuracy, attack })
}

/// Stacks equally shaped `(1, C, H, W)` tensors along the batch axis.
fn stack(items: &[Tensor]) -> Result<Tensor> {
    let shape = items.first().ok_or_else(|| Error::Dimension("nothing to stack".into()))?.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("cannot stack {:?} with {shape:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new([vec![items.len()], shape[1..].to_vec()].concat(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tiny_mnist(dir: &Path, n: usize) {
        let images = Tensor::from_fn(&[n, 1, 28, 28], |i| ((i * 31) % 256) as f64 / 255.0).unwrap();
        let ds = LabeledDataset::new(images, (0..n).map(|i| i % 10).collect(), "mnist").unwrap();
        for train in [true, false] {
            let (img, lab) = mnist_paths(dir, train);
            crate::dataset::write_mnist(&ds, &img, &lab).unwrap();
        }
    }

    #[test]
    fn invalid_dataset_path_leaves_no_output() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let spec = ExperimentSpec::new(Command::Train, DatasetKind::Mnist, tmp.path().join("nope"), &out);
        let err = run_train(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("does not exist")), "{err}");
        assert!(!out.exists());
    }

    #[test]
    fn split_mode_needs_stepwise() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(Command::Train, DatasetKind::Mnist, tmp.path(), tmp.path().join("o"));
        spec.mode = RunMode::Split;
        assert!(matches!(run_train(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_train_split_matches_monolithic() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_mnist(tmp.path(), 24);
        let cfg = StepWiseConfig::new(Activation::Sigmoid, 5, 10.0).unwrap();
        let mut spec = ExperimentSpec::new(Command::Train, DatasetKind::Mnist, tmp.path(), tmp.path().join("mono"));
        spec.first_activation = FirstActivation::StepWise(cfg);
        spec.train = TrainConfig { batch_size: 8, epochs: 2, ..TrainConfig::default() };
        let mono = run_train(&spec).unwrap();
        spec.mode = RunMode::Split;
        spec.out = tmp.path().join("split");
        let split = run_train(&spec).unwrap();
        assert_eq!(mono.model, split.model);
        let read = |d: &str| fs::read(tmp.path().join(d).join("metrics.txt")).unwrap();
        assert_eq!(read("mono"), read("split"));
        assert_eq!(fs::read(tmp.path().join("mono/model.svw")).unwrap(), fs::read(tmp.path().join("split/model.svw")).unwrap());
        let text = String::from_utf8(read("mono")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("1 train loss "));
        assert_eq!(read_final_accuracy(&tmp.path().join("mono/metrics.txt")).unwrap(), mono.test_accuracy);

        let mut eval = spec.clone();
        eval.checkpoint = Some(tmp.path().join("mono/model.svw"));
        assert_eq!(run_eval(&eval).unwrap(), mono.test_accuracy);
    }

    #[test]
    fn figure_reports_missing_runs_then_builds_panels() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_mnist(tmp.path(), 12);
        let mut spec = ExperimentSpec::new(Command::Figure, DatasetKind::Mnist, tmp.path(), tmp.path().join("fig"));
        spec.num_images = 4;
        spec.strategy = Strategy::Patchwise;
        spec.train = TrainConfig { batch_size: 6, epochs: 1, ..TrainConfig::default() };
        let err = run_figure(&spec).unwrap_err().to_string();
        assert!(err.contains("stepsplit train") && err.contains("--n 21"), "{err}");

        spec.train_missing = true;
        let fig = run_figure(&spec).unwrap();
        assert_eq!(fig.accuracy.len(), 5);
        assert_eq!(fig.attack.rows.len(), 8);
        let out = tmp.path().join("fig");
        assert_eq!(fs::read(out.join("figure/panel-a.pgm")).unwrap(), fs::read(out.join("attack/originals.pgm")).unwrap());
        let figure = fs::read(out.join("figure/figure.pgm")).unwrap();
        assert!(figure.starts_with(b"P5\n168 168\n255\n"));
        let table = fs::read(out.join("accuracy.txt")).unwrap();

        let again = run_figure(&spec).unwrap();
        assert_eq!(again.accuracy, fig.accuracy);
        assert_eq!(fs::read(out.join("accuracy.txt")).unwrap(), table);
        let attack = fs::read_to_string(out.join("attack/attack.txt")).unwrap();
        assert!(attack.starts_with("activation n mse psnr\nnone - "));
    }
}
