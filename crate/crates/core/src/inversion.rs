//! Reconstructing a convolution layer's input from its output and weights.
//!
//! Each output location `(h, w)` gives one small linear system: row `o` is
//! kernel `o` flattened over the location's receptive field, and the
//! right-hand side is the output fiber `output[:, h, w]` minus the bias. The
//! per-location solutions are stitched back into an image by averaging the
//! estimates for each input cell.
//!
//! Activations are undone element-wise first (exact inverses for sigmoid and
//! tanh, plateau midpoints for step-wise outputs). ReLU is handled by solving
//! only over rows whose output is positive, topping up with zero-valued rows
//! while they still add rank.

use std::fmt;

use crate::activations::{step_wise_pseudo_inverse, Activation, StepWiseConfig, PLATEAU_TOL};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{self, PseudoInverse};
use crate::metrics;
use crate::tensor::{ConvSpec, Tensor};

/// Default residual tolerance for flagging a patch as inconsistent.
pub const DEFAULT_SOLVE_TOL: f64 = 1e-8;

/// Largest number of unknowns for which the full system is assembled.
pub const MAX_FULL_UNKNOWNS: usize = 4096;

/// Largest dense full-system matrix (rows x cols) we are willing to factor.
pub const MAX_FULL_ENTRIES: usize = 1 << 24;

/// Activation sitting between the attacked convolution and the observed
/// output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackActivation {
    Sigmoid,
    Tanh,
    Relu,
    StepWise(StepWiseConfig),
}

impl AttackActivation {
    pub fn label(&self) -> String {
        match self {
            Self::Sigmoid => "sigmoid".into(),
            Self::Tanh => "tanh".into(),
            Self::Relu => "relu".into(),
            Self::StepWise(cfg) => format!("stepwise-{}", cfg.base()),
        }
    }

    pub fn forward(&self, z: f64) -> f64 {
        match self {
            Self::Sigmoid => Activation::Sigmoid.apply(z),
            Self::Tanh => Activation::Tanh.apply(z),
            Self::Relu => Activation::Relu.apply(z),
            Self::StepWise(cfg) => crate::activations::step_wise(z, cfg),
        }
    }
}

impl From<Activation> for AttackActivation {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Sigmoid => Self::Sigmoid,
            Activation::Tanh => Self::Tanh,
            Activation::Relu => Self::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchStatus {
    Unique,
    Underdetermined,
    Inconsistent,
}

impl fmt::Display for PatchStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unique => "unique",
            Self::Underdetermined => "underdetermined",
            Self::Inconsistent => "inconsistent",
        })
    }
}

/// One sub-system `A_i x_i = b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSystem {
    /// Output spatial coordinates `(h_out, w_out)`.
    pub location: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub matrix: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `(c, h_in, w_in)` of each unknown, in column order.
    pub input_coords: Vec<(usize, usize, usize)>,
}

impl PatchSystem {
    /// A free-standing system with no receptive-field bookkeeping.
    pub fn from_rows(matrix: &[Vec<f64>], rhs: Vec<f64>) -> Result<Self> {
        let rows = matrix.len();
        let cols = matrix.first().map_or(0, Vec::len);
        if matrix.iter().any(|r| r.len() != cols) || rhs.len() != rows {
            return Err(dim_err!("ragged patch system"));
        }
        Ok(Self {
            location: (0, 0),
            rows,
            cols,
            matrix: matrix.concat(),
            rhs,
            input_coords: (0..cols).map(|j| (0, 0, j)).collect(),
        })
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.matrix[r * self.cols..(r + 1) * self.cols]
    }
}

/// Solution of one patch system.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSolution {
    pub x: Vec<f64>,
    pub status: PatchStatus,
    pub rank: usize,
    /// `|A x - b|_inf` over the rows that were solved.
    pub residual_inf: f64,
}

fn classify(rank: usize, cols: usize, residual: &[f64], rhs: &[f64], tol: f64) -> PatchStatus {
    if linalg::norm2(residual) > tol * (1.0 + linalg::norm2(rhs)) {
        PatchStatus::Inconsistent
    } else if rank == cols {
        PatchStatus::Unique
    } else {
        PatchStatus::Underdetermined
    }
}

/// Least-squares solution by SVD; minimum-norm when underdetermined.
pub fn solve_patch(system: &PatchSystem, tol: f64) -> PatchSolution {
    let pinv = PseudoInverse::new(system.rows, system.cols, &system.matrix);
    solve_with(&pinv, system.rows, system.cols, &system.matrix, &system.rhs, tol)
}

fn solve_with(
    pinv: &PseudoInverse,
    rows: usize,
    cols: usize,
    matrix: &[f64],
    rhs: &[f64],
    tol: f64,
) -> PatchSolution {
    let x = pinv.apply(rhs);
    let r = linalg::residual(rows, cols, matrix, &x, rhs);
    PatchSolution {
        status: classify(pinv.rank(), cols, &r, rhs, tol),
        rank: pinv.rank(),
        residual_inf: linalg::norm_inf(&r),
        x,
    }
}

/// Rows to keep when reversing ReLU: every positive row, then zero-valued
/// rows in ascending index order as long as each one raises the rank, until
/// the rank reaches `cols`.
fn relu_row_selection(system: &PatchSystem, positive: &[bool]) -> Vec<usize> {
    let mut selected: Vec<usize> = (0..system.rows).filter(|&r| positive[r]).collect();
    let gather = |rows: &[usize]| -> Vec<f64> {
        rows.iter().flat_map(|&r| system.row(r).iter().copied()).collect()
    };
    let mut rank = linalg::rank(selected.len(), system.cols, &gather(&selected));
    for r in (0..system.rows).filter(|&r| !positive[r]) {
        if rank >= system.cols {
            break;
        }
        selected.push(r);
        let next = linalg::rank(selected.len(), system.cols, &gather(&selected));
        if next > rank {
            rank = next;
        } else {
            selected.pop();
        }
    }
    selected.sort_unstable();
    selected
}

fn solve_relu_masked(system: &PatchSystem, positive: &[bool], tol: f64) -> PatchSolution {
    let rows = relu_row_selection(system, positive);
    let matrix: Vec<f64> = rows.iter().flat_map(|&r| system.row(r).iter().copied()).collect();
    let rhs: Vec<f64> = rows.iter().map(|&r| system.rhs[r]).collect();
    let pinv = PseudoInverse::new(rows.len(), system.cols, &matrix);
    solve_with(&pinv, rows.len(), system.cols, &matrix, &rhs, tol)
}

/// Reverses a ReLU'd patch system whose right-hand side holds post-ReLU
/// values (bias already zero): solves over positive rows, adds zero rows only
/// as needed for rank, then treats ReLU as the identity.
pub fn invert_relu_system(system: &PatchSystem, tol: f64) -> PatchSolution {
    let positive: Vec<bool> = system.rhs.iter().map(|&b| b > 0.0).collect();
    solve_relu_masked(system, &positive, tol)
}

/// Receptive-field bookkeeping for a stride-1 convolution over a known input
/// size.
#[derive(Debug, Clone, Copy)]
struct PatchLayout {
    c_in: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    s: usize,
    pad: usize,
}

impl PatchLayout {
    fn for_input(spec: &ConvSpec, c_in: usize, h_in: usize, w_in: usize) -> Result<Self> {
        require_stride_one(spec)?;
        let [_, _, h_out, w_out] = spec.output_shape(&[1, c_in, h_in, w_in])?;
        Ok(Self { c_in, h_in, w_in, h_out, w_out, s: spec.kernel_size(), pad: spec.padding() })
    }

    /// Input extents implied by an output of the given size (stride 1).
    fn for_output(spec: &ConvSpec, h_out: usize, w_out: usize) -> Result<Self> {
        require_stride_one(spec)?;
        let grow = |o: usize| (o + spec.kernel_size() - 1).checked_sub(2 * spec.padding());
        match (grow(h_out), grow(w_out)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => {
                Self::for_input(spec, spec.in_channels(), h, w)
            }
            _ => Err(dim_err!("output {h_out}x{w_out} is too small for this kernel and padding")),
        }
    }

    fn unknowns(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    /// `(kernel offset (c, i, j) flattened, input coordinate)` for every
    /// in-bounds receptive-field cell of `(ho, wo)`, in column order.
    fn field(&self, ho: usize, wo: usize) -> Vec<(usize, (usize, usize, usize))> {
        let mut out = Vec::with_capacity(self.c_in * self.s * self.s);
        for c in 0..self.c_in {
            for i in 0..self.s {
                let h = (ho + i) as isize - self.pad as isize;
                if h < 0 || h >= self.h_in as isize {
                    continue;
                }
                for j in 0..self.s {
                    let w = (wo + j) as isize - self.pad as isize;
                    if w < 0 || w >= self.w_in as isize {
                        continue;
                    }
                    out.push(((c * self.s + i) * self.s + j, (c, h as usize, w as usize)));
                }
            }
        }
        out
    }

    fn matrix(&self, spec: &ConvSpec, ho: usize, wo: usize) -> (Vec<f64>, Vec<(usize, usize, usize)>) {
        let field = self.field(ho, wo);
        let c_out = spec.out_channels();
        let k = self.c_in * self.s * self.s;
        let wt = spec.weights().data();
        let mut m = Vec::with_capacity(c_out * field.len());
        for o in 0..c_out {
            m.extend(field.iter().map(|&(off, _)| wt[o * k + off]));
        }
        (m, field.into_iter().map(|(_, coord)| coord).collect())
    }

    fn flat(&self, (c, h, w): (usize, usize, usize)) -> usize {
        (c * self.h_in + h) * self.w_in + w
    }
}

fn require_stride_one(spec: &ConvSpec) -> Result<()> {
    if spec.stride() != 1 {
        return Err(Error::Capability(format!(
            "inversion requires stride 1, layer has stride {}",
            spec.stride()
        )));
    }
    Ok(())
}

/// Accepts `(C_out, H, W)` or `(1, C_out, H, W)` and returns the 3-d extents.
fn single_output_dims(output: &Tensor) -> Result<[usize; 3]> {
    match *output.shape() {
        [c, h, w] | [1, c, h, w] => Ok([c, h, w]),
        _ => Err(dim_err!("expected a single (C_out,H,W) output, got {:?}", output.shape())),
    }
}

/// Builds the sub-system for one output location. The right-hand side is the
/// output fiber minus the bias; padding cells are known zeros and are not
/// unknowns.
pub fn build_patch_system(
    spec: &ConvSpec,
    output: &Tensor,
    location: (usize, usize),
) -> Result<PatchSystem> {
    let [c, h_out, w_out] = single_output_dims(output)?;
    if c != spec.out_channels() {
        return Err(dim_err!("output has {c} channels, layer has {}", spec.out_channels()));
    }
    let (ho, wo) = location;
    if ho >= h_out || wo >= w_out {
        return Err(Error::Bounds(format!(
            "location ({ho}, {wo}) outside output {h_out}x{w_out}"
        )));
    }
    let layout = PatchLayout::for_output(spec, h_out, w_out)?;
    let (matrix, input_coords) = layout.matrix(spec, ho, wo);
    let plane = h_out * w_out;
    let rhs = (0..c)
        .map(|o| output.data()[o * plane + ho * w_out + wo] - spec.bias()[o])
        .collect();
    Ok(PatchSystem {
        location,
        rows: c,
        cols: input_coords.len(),
        matrix,
        rhs,
        input_coords,
    })
}

/// Per-status patch counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UniquenessSummary {
    pub unique: usize,
    pub underdetermined: usize,
    pub inconsistent: usize,
}

impl UniquenessSummary {
    fn record(&mut self, status: PatchStatus) {
        match status {
            PatchStatus::Unique => self.unique += 1,
            PatchStatus::Underdetermined => self.underdetermined += 1,
            PatchStatus::Inconsistent => self.inconsistent += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.unique + self.underdetermined + self.inconsistent
    }

    /// Worst status seen: inconsistent beats underdetermined beats unique.
    pub fn aggregate(&self) -> PatchStatus {
        if self.inconsistent > 0 {
            PatchStatus::Inconsistent
        } else if self.underdetermined > 0 {
            PatchStatus::Underdetermined
        } else {
            PatchStatus::Unique
        }
    }
}

/// Outcome of an inversion attack.
#[derive(Debug, Clone)]
pub struct ReconstructionReport {
    pub reconstructed: Tensor,
    /// Present when ground truth was supplied.
    pub mse: Option<f64>,
    /// `10 log10(1 / mse)`; infinite for a perfect reconstruction.
    pub psnr_db: Option<f64>,
    pub max_abs_residual: f64,
    pub uniqueness: UniquenessSummary,
}

/// How per-location solutions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// One small system per output location, stitched by averaging.
    #[default]
    Patchwise,
    /// All locations jointly, via the normal equations of the full system.
    /// Limited to [`MAX_FULL_UNKNOWNS`] unknowns per sample.
    Joint,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Patchwise => "patchwise",
            Self::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patchwise" => Ok(Self::Patchwise),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Undoes the activation element-wise, returning pre-activation values.
fn undo_activation(output: &Tensor, activation: Option<AttackActivation>) -> Result<Tensor> {
    let clamp_open = |y: f64, lo: f64, hi: f64| -> Result<f64> {
        if !y.is_finite() || y < lo - PLATEAU_TOL || y > hi + PLATEAU_TOL {
            return Err(Error::Domain(format!("output {y} outside activation range ({lo}, {hi})")));
        }
        // Saturated values within tolerance move to the nearest interior float.
        Ok(if y <= lo {
            lo + f64::EPSILON.max(lo.abs() * f64::EPSILON)
        } else if y >= hi {
            hi - f64::EPSILON / 2.0 * hi.abs().max(1.0)
        } else {
            y
        })
    };
    match activation {
        None | Some(AttackActivation::Relu) => {
            if let Some(AttackActivation::Relu) = activation {
                if let Some(bad) = output.data().iter().find(|&&y| !(y >= -PLATEAU_TOL)) {
                    return Err(Error::Domain(format!("negative ReLU output {bad}")));
                }
            }
            Ok(output.clone())
        }
        Some(AttackActivation::Sigmoid) => {
            output.try_map(|y| crate::activations::sigmoid_inverse(clamp_open(y, 0.0, 1.0)?))
        }
        Some(AttackActivation::Tanh) => {
            output.try_map(|y| crate::activations::tanh_inverse(clamp_open(y, -1.0, 1.0)?))
        }
        Some(AttackActivation::StepWise(cfg)) => {
            output.try_map(|y| step_wise_pseudo_inverse(y, &cfg))
        }
    }
}

fn finish_report(
    reconstructed: Tensor,
    ground_truth: Option<&Tensor>,
    max_abs_residual: f64,
    uniqueness: UniquenessSummary,
) -> Result<ReconstructionReport> {
    let mse = match ground_truth {
        Some(truth) => {
            if truth.shape() != reconstructed.shape() {
                return Err(dim_err!(
                    "ground truth shape {:?} != reconstruction shape {:?}",
                    truth.shape(),
                    reconstructed.shape()
                ));
            }
            Some(metrics::mse(reconstructed.data(), truth.data()))
        }
        None => None,
    };
    Ok(ReconstructionReport {
        reconstructed,
        psnr_db: mse.map(metrics::psnr_db),
        mse,
        max_abs_residual,
        uniqueness,
    })
}

/// Reconstructs the input batch `(N, C_in, H_in, W_in)` of a stride-1
/// convolution from its (optionally activated) output `(N, C_out, H, W)`.
pub fn invert_conv_layer(
    spec: &ConvSpec,
    output: &Tensor,
    activation: Option<AttackActivation>,
    ground_truth: Option<&Tensor>,
) -> Result<ReconstructionReport> {
    invert_conv_layer_with(spec, output, activation, ground_truth, Strategy::Patchwise)
}

pub fn invert_conv_layer_with(
    spec: &ConvSpec,
    output: &Tensor,
    activation: Option<AttackActivation>,
    ground_truth: Option<&Tensor>,
    strategy: Strategy,
) -> Result<ReconstructionReport> {
    require_stride_one(spec)?;
    let [n, c_out, h_out, w_out] = output.dims4()?;
    if c_out != spec.out_channels() {
        return Err(dim_err!("output has {c_out} channels, layer has {}", spec.out_channels()));
    }
    let layout = PatchLayout::for_output(spec, h_out, w_out)?;
    let pre = undo_activation(output, activation)?;
    let relu = matches!(activation, Some(AttackActivation::Relu));
    match strategy {
        Strategy::Patchwise => patchwise(spec, &layout, n, output, &pre, relu, ground_truth),
        Strategy::Joint => joint(spec, &layout, n, output, &pre, relu, ground_truth),
    }
}

fn patchwise(
    spec: &ConvSpec,
    layout: &PatchLayout,
    n: usize,
    raw: &Tensor,
    pre: &Tensor,
    relu: bool,
    ground_truth: Option<&Tensor>,
) -> Result<ReconstructionReport> {
    let c_out = spec.out_channels();
    let plane = layout.h_out * layout.w_out;
    let in_len = layout.unknowns();
    let mut sums = vec![0.0; n * in_len];
    let mut counts = vec![0u32; in_len];
    let mut summary = UniquenessSummary::default();
    let mut worst = 0.0f64;

    for ho in 0..layout.h_out {
        for wo in 0..layout.w_out {
            let (matrix, coords) = layout.matrix(spec, ho, wo);
            let cols = coords.len();
            for &coord in &coords {
                counts[layout.flat(coord)] += 1;
            }
            let pinv = (!relu).then(|| PseudoInverse::new(c_out, cols, &matrix));
            for b in 0..n {
                let fiber = |t: &Tensor, o: usize| t.data()[(b * c_out + o) * plane + ho * layout.w_out + wo];
                let rhs: Vec<f64> = (0..c_out).map(|o| fiber(pre, o) - spec.bias()[o]).collect();
                let sol = match &pinv {
                    Some(p) => solve_with(p, c_out, cols, &matrix, &rhs, DEFAULT_SOLVE_TOL),
                    None => {
                        let positive: Vec<bool> = (0..c_out).map(|o| fiber(raw, o) > 0.0).collect();
                        let system = PatchSystem {
                            location: (ho, wo),
                            rows: c_out,
                            cols,
                            matrix: matrix.clone(),
                            rhs,
                            input_coords: coords.clone(),
                        };
                        solve_relu_masked(&system, &positive, DEFAULT_SOLVE_TOL)
                    }
                };
                summary.record(sol.status);
                worst = worst.max(sol.residual_inf);
                let dst = &mut sums[b * in_len..(b + 1) * in_len];
                for (&coord, x) in coords.iter().zip(&sol.x) {
                    dst[layout.flat(coord)] += x;
                }
            }
        }
    }

    for (i, s) in sums.iter_mut().enumerate() {
        let c = counts[i % in_len];
        // Cells outside every receptive field stay at zero.
        if c > 0 {
            *s /= f64::from(c);
        }
    }
    let reconstructed =
        Tensor::new(vec![n, layout.c_in, layout.h_in, layout.w_in], sums)?;
    finish_report(reconstructed, ground_truth, worst, summary)
}

/// Sparse rows of the full system: `(row index, [(unknown, weight)])`.
fn full_rows(spec: &ConvSpec, layout: &PatchLayout) -> Vec<Vec<(usize, f64)>> {
    let c_out = spec.out_channels();
    let mut rows = Vec::with_capacity(c_out * layout.h_out * layout.w_out);
    let k = layout.c_in * layout.s * layout.s;
    let wt = spec.weights().data();
    for o in 0..c_out {
        for ho in 0..layout.h_out {
            for wo in 0..layout.w_out {
                rows.push(
                    layout
                        .field(ho, wo)
                        .into_iter()
                        .map(|(off, coord)| (layout.flat(coord), wt[o * k + off]))
                        .filter(|&(_, w)| w != 0.0)
                        .collect(),
                );
            }
        }
    }
    rows
}

fn gram(unknowns: usize, rows: &[Vec<(usize, f64)>], keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut g = vec![0.0; unknowns * unknowns];
    for (r, row) in rows.iter().enumerate() {
        if !keep(r) {
            continue;
        }
        for &(i, wi) in row {
            for &(j, wj) in row {
                g[i * unknowns + j] += wi * wj;
            }
        }
    }
    g
}

/// Eigenvalue cutoff for the normal equations (singular values below about
/// `1e-6 * sigma_max` are dropped).
const GRAM_RTOL: f64 = 1e-12;

fn joint(
    spec: &ConvSpec,
    layout: &PatchLayout,
    n: usize,
    raw: &Tensor,
    pre: &Tensor,
    relu: bool,
    ground_truth: Option<&Tensor>,
) -> Result<ReconstructionReport> {
    let unknowns = layout.unknowns();
    if unknowns > MAX_FULL_UNKNOWNS {
        return Err(Error::Capacity(format!(
            "joint inversion supports at most {MAX_FULL_UNKNOWNS} unknowns, need {unknowns}"
        )));
    }
    let rows = full_rows(spec, layout);
    let plane = layout.h_out * layout.w_out;
    let per_sample = rows.len();
    let mut out = Vec::with_capacity(n * unknowns);
    let mut summary = UniquenessSummary::default();
    let mut worst = 0.0f64;
    let shared = (!relu).then(|| linalg::solve_symmetric_psd(unknowns, gram(unknowns, &rows, |_| true), GRAM_RTOL));

    for b in 0..n {
        let rhs: Vec<f64> = (0..per_sample)
            .map(|r| pre.data()[b * per_sample + r] - spec.bias()[r / plane])
            .collect();
        // ReLU: positive rows, and every zero row only if those lack rank.
        let mut keep: Vec<bool> = if relu {
            (0..per_sample).map(|r| raw.data()[b * per_sample + r] > 0.0).collect()
        } else {
            vec![true; per_sample]
        };
        let local;
        let (solve, rank): (&dyn Fn(&[f64]) -> Vec<f64>, usize) = match &shared {
            Some((f, r)) => (f, *r),
            None => {
                let (f, r) = linalg::solve_symmetric_psd(unknowns, gram(unknowns, &rows, |r| keep[r]), GRAM_RTOL);
                if r < unknowns {
                    keep.iter_mut().for_each(|k| *k = true);
                    local = linalg::solve_symmetric_psd(unknowns, gram(unknowns, &rows, |_| true), GRAM_RTOL);
                } else {
                    local = (f, r);
                }
                (&local.0, local.1)
            }
        };
        let mut atb = vec![0.0; unknowns];
        for (r, row) in rows.iter().enumerate().filter(|&(r, _)| keep[r]) {
            for &(i, w) in row {
                atb[i] += w * rhs[r];
            }
        }
        let x = solve(&atb);
        let mut residual = Vec::new();
        let mut kept_rhs = Vec::new();
        for (r, row) in rows.iter().enumerate().filter(|&(r, _)| keep[r]) {
            residual.push(row.iter().map(|&(i, w)| w * x[i]).sum::<f64>() - rhs[r]);
            kept_rhs.push(rhs[r]);
        }
        summary.record(classify(rank, unknowns, &residual, &kept_rhs, DEFAULT_SOLVE_TOL));
        worst = worst.max(linalg::norm_inf(&residual));
        out.extend(x);
    }
    let reconstructed = Tensor::new(vec![n, layout.c_in, layout.h_in, layout.w_in], out)?;
    finish_report(reconstructed, ground_truth, worst, summary)
}

/// Verdict of [`check_uniqueness_equivalence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equivalence {
    Equivalent,
    /// The full system and the patch systems disagree on uniqueness; the
    /// location is the first non-unique patch, if any.
    Counterexample { location: Option<(usize, usize)> },
}

/// Ranks behind an equivalence verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniquenessCheck {
    pub verdict: Equivalence,
    pub unknowns: usize,
    pub full_rank: usize,
    pub full_unique: bool,
    pub patches_unique: bool,
}

/// Compares uniqueness of the full system against uniqueness of every patch
/// system. `input_shape` is `(C_in, H, W)` or `(N, C_in, H, W)`.
pub fn check_uniqueness_equivalence(spec: &ConvSpec, input_shape: &[usize]) -> Result<UniquenessCheck> {
    let (c, h, w) = match *input_shape {
        [c, h, w] | [_, c, h, w] => (c, h, w),
        _ => return Err(dim_err!("input shape must be (C,H,W) or (N,C,H,W), got {input_shape:?}")),
    };
    let layout = PatchLayout::for_input(spec, c, h, w)?;
    let unknowns = layout.unknowns();
    let rows = full_rows(spec, &layout);
    if unknowns > MAX_FULL_UNKNOWNS || rows.len() * unknowns > MAX_FULL_ENTRIES {
        return Err(Error::Capacity(format!(
            "full system {}x{unknowns} exceeds the assembly cap ({MAX_FULL_UNKNOWNS} unknowns, {MAX_FULL_ENTRIES} entries)",
            rows.len()
        )));
    }
    let mut dense = vec![0.0; rows.len() * unknowns];
    for (r, row) in rows.iter().enumerate() {
        for &(i, wt) in row {
            dense[r * unknowns + i] = wt;
        }
    }
    let full_rank = linalg::rank(rows.len(), unknowns, &dense);
    let full_unique = full_rank == unknowns;

    let mut first_bad = None;
    'scan: for ho in 0..layout.h_out {
        for wo in 0..layout.w_out {
            let (m, coords) = layout.matrix(spec, ho, wo);
            if linalg::rank(spec.out_channels(), coords.len(), &m) < coords.len() {
                first_bad = Some((ho, wo));
                break 'scan;
            }
        }
    }
    let patches_unique = first_bad.is_none();
    let verdict = if full_unique == patches_unique {
        Equivalence::Equivalent
    } else {
        Equivalence::Counterexample { location: first_bad }
    };
    Ok(UniquenessCheck { verdict, unknowns, full_rank, full_unique, patches_unique })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_spec(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, s: usize, pad: usize) -> ConvSpec {
        let w = Tensor::from_fn(&[c_out, c_in, s, s], |_| StandardNormal.sample(rng)).unwrap();
        let bias = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        ConvSpec::new(w, bias, 1, pad).unwrap()
    }

    fn image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn one_by_one_patch_is_a_column() {
        let w = Tensor::new(vec![3, 1, 1, 1], vec![2.0, -1.0, 0.5]).unwrap();
        let spec = ConvSpec::without_bias(w, 1, 0).unwrap();
        let out = conv2d(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), &spec).unwrap();
        let sys = build_patch_system(&spec, &out, (1, 0)).unwrap();
        assert_eq!((sys.rows, sys.cols), (3, 1));
        assert_eq!(sys.matrix, vec![2.0, -1.0, 0.5]);
        assert_eq!(sys.rhs, vec![6.0, -3.0, 1.5]);
        assert_eq!(sys.input_coords, vec![(0, 1, 0)]);
    }

    #[test]
    fn interior_patch_enumerates_row_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = gaussian_spec(&mut rng, 4, 1, 3, 0);
        let out = conv2d(&image(&mut rng, &[1, 1, 6, 6]), &spec).unwrap();
        let sys = build_patch_system(&spec, &out, (1, 2)).unwrap();
        assert_eq!((sys.rows, sys.cols), (4, 9));
        let expected: Vec<_> = (0..3).flat_map(|i| (0..3).map(move |j| (0, 1 + i, 2 + j))).collect();
        assert_eq!(sys.input_coords, expected);
        assert_eq!(&sys.matrix[..9], &spec.weights().data()[..9]);
        let bias0 = spec.bias()[0];
        assert_eq!(sys.rhs[0], out.data()[1 * 4 + 2] - bias0);
    }

    #[test]
    fn padded_corner_drops_padding_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = gaussian_spec(&mut rng, 4, 1, 3, 1);
        let out = conv2d(&image(&mut rng, &[1, 1, 5, 5]), &spec).unwrap();
        assert_eq!(build_patch_system(&spec, &out, (0, 0)).unwrap().cols, 4);
        assert_eq!(build_patch_system(&spec, &out, (0, 2)).unwrap().cols, 6);
        assert_eq!(build_patch_system(&spec, &out, (2, 2)).unwrap().cols, 9);
        assert!(matches!(build_patch_system(&spec, &out, (5, 0)), Err(Error::Bounds(_))));
    }

    #[test]
    fn identity_matrix_solves_exactly() {
        let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let sys = PatchSystem::from_rows(&eye, vec![0.25, -1.0, 3.5]).unwrap();
        let sol = solve_patch(&sys, 1e-9);
        assert_eq!(sol.x, vec![0.25, -1.0, 3.5]);
        assert_eq!(sol.status, PatchStatus::Unique);
    }

    #[test]
    fn planted_square_gaussian_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..9).map(|_| (0..9).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = a.iter().map(|r| r.iter().zip(&x).map(|(p, q)| p * q).sum()).collect();
        let sol = solve_patch(&PatchSystem::from_rows(&a, b).unwrap(), 1e-9);
        assert_eq!(sol.status, PatchStatus::Unique);
        let err = linalg::norm2(&sol.x.iter().zip(&x).map(|(p, q)| p - q).collect::<Vec<_>>());
        assert!(err <= 1e-8 * linalg::norm2(&x));
    }

    #[test]
    fn underdetermined_returns_minimum_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec<f64>> = (0..4).map(|_| (0..9).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let planted: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|r| r.iter().zip(&planted).map(|(p, q)| p * q).sum()).collect();
        let sys = PatchSystem::from_rows(&a, b.clone()).unwrap();
        let sol = solve_patch(&sys, 1e-9);
        assert_eq!(sol.status, PatchStatus::Underdetermined);
        assert_eq!(sol.rank, 4);
        assert!(sol.residual_inf < 1e-10);
        assert!(linalg::norm2(&sol.x) <= linalg::norm2(&planted));
    }

    #[test]
    fn inconsistent_system_is_flagged() {
        let sys = PatchSystem::from_rows(&[vec![1.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        let sol = solve_patch(&sys, 1e-9);
        assert_eq!(sol.status, PatchStatus::Inconsistent);
        assert!((sol.x[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relu_hand_example() {
        // planted x = (3, -2); A x = (3, -2, 1); relu -> (3, 0, 1)
        let a = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let sys = PatchSystem::from_rows(&a, vec![3.0, 0.0, 1.0]).unwrap();
        let sol = invert_relu_system(&sys, 1e-9);
        assert_eq!(sol.status, PatchStatus::Unique);
        assert!((sol.x[0] - 3.0).abs() < 1e-12 && (sol.x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn relu_with_all_positive_matches_plain_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen_range(0.1..1.0)).collect()).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sys = PatchSystem::from_rows(&a, b).unwrap();
        assert_eq!(invert_relu_system(&sys, 1e-9), solve_patch(&sys, 1e-9));
    }

    #[test]
    fn relu_all_zero_gives_zero_preimage() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let sys = PatchSystem::from_rows(&a, vec![0.0; 5]).unwrap();
        let sol = invert_relu_system(&sys, 1e-9);
        assert_eq!(sol.rank, 3);
        assert!(sol.x.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn relu_adds_zero_rows_in_ascending_order_until_full_rank() {
        // one positive row; zero rows 0 (duplicate direction), 2, 3
        let a = [vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0], vec![1.0, 1.0]];
        let sys = PatchSystem::from_rows(&a, vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_row_selection(&sys, &[false, false, false, true]), vec![0, 3]);
        let sys = PatchSystem::from_rows(&a, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(relu_row_selection(&sys, &[true, false, false, false]), vec![0, 1]);
    }

    #[test]
    fn identity_kernel_reconstructs_exactly() {
        let spec = ConvSpec::without_bias(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = image(&mut rng, &[2, 1, 5, 5]);
        let report = invert_conv_layer(&spec, &conv2d(&x, &spec).unwrap(), None, Some(&x)).unwrap();
        assert_eq!(report.reconstructed, x);
        assert_eq!(report.psnr_db, Some(f64::INFINITY));
        assert_eq!(report.uniqueness.unique, 50);
    }

    #[test]
    fn random_3x3_with_nine_kernels_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = gaussian_spec(&mut rng, 9, 1, 3, 0);
        let x = image(&mut rng, &[1, 1, 8, 8]);
        let y = conv2d(&x, &spec).unwrap();
        let r = invert_conv_layer(&spec, &y, None, Some(&x)).unwrap();
        assert!(r.mse.unwrap() < 1e-12, "{:?}", r.mse);
        assert_eq!(r.uniqueness.aggregate(), PatchStatus::Unique);

        let act = y.map(crate::activations::sigmoid);
        let r = invert_conv_layer(&spec, &act, Some(AttackActivation::Sigmoid), Some(&x)).unwrap();
        assert!(r.mse.unwrap() < 1e-10);
    }

    #[test]
    fn unique_patches_agree_on_overlaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = gaussian_spec(&mut rng, 12, 1, 3, 1);
        let x = image(&mut rng, &[1, 1, 6, 6]);
        let y = conv2d(&x, &spec).unwrap();
        let mut estimates: std::collections::HashMap<(usize, usize, usize), Vec<f64>> = Default::default();
        for ho in 0..6 {
            for wo in 0..6 {
                let sys = build_patch_system(&spec, &y, (ho, wo)).unwrap();
                let sol = solve_patch(&sys, 1e-9);
                assert_eq!(sol.status, PatchStatus::Unique);
                for (c, v) in sys.input_coords.iter().zip(sol.x) {
                    estimates.entry(*c).or_default().push(v);
                }
            }
        }
        for vals in estimates.values() {
            for v in vals {
                assert!((v - vals[0]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn strided_layers_are_rejected() {
        let spec = ConvSpec::without_bias(Tensor::zeros(&[4, 1, 3, 3]).unwrap(), 2, 0).unwrap();
        let y = Tensor::zeros(&[1, 4, 3, 3]).unwrap();
        assert!(matches!(invert_conv_layer(&spec, &y, None, None), Err(Error::Capability(_))));
        assert!(matches!(check_uniqueness_equivalence(&spec, &[1, 7, 7]), Err(Error::Capability(_))));
    }

    #[test]
    fn out_of_range_activation_outputs_are_domain_errors() {
        let spec = ConvSpec::without_bias(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), 1, 0).unwrap();
        let y = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 1.2]).unwrap();
        assert!(matches!(
            invert_conv_layer(&spec, &y, Some(AttackActivation::Sigmoid), None),
            Err(Error::Domain(_))
        ));
        let y = Tensor::new(vec![1, 1, 1, 2], vec![0.5, -0.2]).unwrap();
        assert!(invert_conv_layer(&spec, &y, Some(AttackActivation::Relu), None).is_err());
        let cfg = StepWiseConfig::new(Activation::Sigmoid, 5, 10.0).unwrap();
        let y = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.6]).unwrap();
        assert!(matches!(
            invert_conv_layer(&spec, &y, Some(AttackActivation::StepWise(cfg)), None),
            Err(Error::NotAPlateau(_))
        ));
    }

    #[test]
    fn joint_strategy_recovers_when_patches_cannot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = gaussian_spec(&mut rng, 4, 1, 3, 1);
        let x = image(&mut rng, &[2, 1, 7, 7]);
        let y = conv2d(&x, &spec).unwrap();
        let patch = invert_conv_layer(&spec, &y, None, Some(&x)).unwrap();
        assert!(patch.uniqueness.underdetermined > 0);
        assert!(patch.mse.unwrap() > 1e-6);
        let joint = invert_conv_layer_with(&spec, &y, None, Some(&x), Strategy::Joint).unwrap();
        assert!(joint.mse.unwrap() < 1e-20, "{:?}", joint.mse);
        assert_eq!(joint.uniqueness.unique, 2);
    }

    #[test]
    fn uniqueness_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let one = gaussian_spec(&mut rng, 3, 2, 1, 0);
        let c = check_uniqueness_equivalence(&one, &[2, 4, 4]).unwrap();
        assert_eq!(c.verdict, Equivalence::Equivalent);
        assert!(c.full_unique && c.patches_unique);

        let nine = gaussian_spec(&mut rng, 9, 1, 3, 0);
        let c = check_uniqueness_equivalence(&nine, &[1, 6, 6]).unwrap();
        assert_eq!(c.verdict, Equivalence::Equivalent);
        assert!(c.full_unique);

        let single = gaussian_spec(&mut rng, 1, 1, 3, 0);
        let c = check_uniqueness_equivalence(&single, &[1, 6, 6]).unwrap();
        assert_eq!(c.verdict, Equivalence::Equivalent);
        assert!(!c.full_unique && !c.patches_unique);
    }

    #[test]
    fn patch_underdetermined_but_full_system_unique_is_a_counterexample() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = gaussian_spec(&mut rng, 4, 1, 3, 1);
        let c = check_uniqueness_equivalence(&spec, &[1, 6, 6]).unwrap();
        assert!(c.full_unique);
        assert!(!c.patches_unique);
        assert_eq!(c.verdict, Equivalence::Counterexample { location: Some((0, 1)) });
    }

    #[test]
    fn uniqueness_cap() {
        let spec = ConvSpec::without_bias(Tensor::zeros(&[1, 1, 3, 3]).unwrap(), 1, 1).unwrap();
        assert!(matches!(check_uniqueness_equivalence(&spec, &[1, 65, 65]), Err(Error::Capacity(_))));
    }
}
