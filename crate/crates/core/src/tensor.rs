//! Dense `f64` tensors and the four CNN primitives: matrix multiplication,
//! convolution, pooling and element-wise application of a function.
//!
//! Layout is always row-major `(N, C, H, W)`. Lower-rank tensors drop leading
//! axes, so a matrix is `(rows, cols)`.

use crate::error::{dim_err, Error, Result};

/// Dense tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(dim_err!("tensor rank must be 1..=4, got {}", shape.len()));
        }
        if shape.contains(&0) {
            return Err(dim_err!("tensor extents must be >= 1, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {len} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for internal construction of shapes that are
    /// correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; len])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same buffer, new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Shape as `(N, C, H, W)`; fails unless the tensor is rank 4.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(dim_err!("expected rank-4 (N,C,H,W) tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(dim_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    /// Applies `f` to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Fallible element-wise application.
    pub fn try_map(&self, f: impl Fn(f64) -> Result<f64>) -> Result<Self> {
        let data = self.data.iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Selects samples `indices` along the leading (batch) axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(stride * indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::Bounds(format!("batch index {i} >= {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Contiguous range of samples along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let indices: Vec<usize> = (start..end).collect();
        self.select_batch(&indices)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// First-layer convolution description: kernels `(C_out, C_in, S, S)`, a bias
/// per output channel, stride and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    weights: Tensor,
    bias: Vec<f64>,
    stride: usize,
    padding: usize,
}

impl ConvSpec {
    pub fn new(weights: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let [c_out, _, s1, s2] = weights.dims4()?;
        if s1 != s2 {
            return Err(dim_err!("kernels must be square, got {s1}x{s2}"));
        }
        if bias.len() != c_out {
            return Err(dim_err!("bias length {} != C_out {c_out}", bias.len()));
        }
        if stride == 0 {
            return Err(dim_err!("stride must be positive"));
        }
        Ok(Self { weights, bias, stride, padding })
    }

    /// Same kernels, zero bias.
    pub fn without_bias(weights: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let c_out = weights.dims4()?[0];
        Self::new(weights, vec![0.0; c_out], stride, padding)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    /// `(H_out, W_out)` for an `(H_in, W_in)` input.
    pub fn output_hw(&self, h_in: usize, w_in: usize) -> Result<(usize, usize)> {
        let s = self.kernel_size();
        let (hp, wp) = (h_in + 2 * self.padding, w_in + 2 * self.padding);
        if hp < s || wp < s {
            return Err(dim_err!(
                "kernel {s}x{s} larger than padded input {hp}x{wp}"
            ));
        }
        Ok(((hp - s) / self.stride + 1, (wp - s) / self.stride + 1))
    }

    /// Validates an input shape and returns the output shape.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<[usize; 4]> {
        let [n, c, h, w] = match *input_shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(dim_err!("conv input must be rank 4, got {input_shape:?}")),
        };
        if c != self.in_channels() {
            return Err(dim_err!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        Ok([n, self.out_channels(), ho, wo])
    }
}

/// Pooling aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Average,
}

/// `c = alpha * a * b + beta * c` on strided row/col-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Row-major strides for an `rows x cols` matrix.
pub(crate) const fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

/// Strides that read a row-major `cols`-wide matrix as its transpose.
pub(crate) const fn tr(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: ({m},{k}) x ({k2},{n})"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), rm(k), b.data(), rm(n), 0.0, &mut out, rm(n));
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Geometry of one convolution call, shared by forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub s: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(spec: &ConvSpec, input_shape: &[usize]) -> Result<Self> {
        let [_, _, h_out, w_out] = spec.output_shape(input_shape)?;
        Ok(Self {
            c_in: input_shape[1],
            h_in: input_shape[2],
            w_in: input_shape[3],
            s: spec.kernel_size(),
            stride: spec.stride(),
            pad: spec.padding(),
            h_out,
            w_out,
        })
    }

    /// Rows of the column matrix: `C_in * S * S`, ordered `(c, i, j)`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.s * self.s
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    /// Input row/col touched by kernel offset `i` at output position `o`, if
    /// it is not a padding cell.
    #[inline]
    fn src(&self, o: usize, i: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + i) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    /// Unfolds one `(C_in, H, W)` sample into a `(C_in*S*S, H_out*W_out)`
    /// row-major column matrix.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.out_len();
        for c in 0..self.c_in {
            let plane = &image[c * self.h_in * self.w_in..(c + 1) * self.h_in * self.w_in];
            for i in 0..self.s {
                for j in 0..self.s {
                    let row = (c * self.s + i) * self.s + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for ho in 0..self.h_out {
                        let src_h = self.src(ho, i, self.h_in);
                        for wo in 0..self.w_out {
                            dst[ho * self.w_out + wo] = match (src_h, self.src(wo, j, self.w_in)) {
                                (Some(h), Some(w)) => plane[h * self.w_in + w],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates a column matrix back
    /// onto an image buffer.
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.out_len();
        for c in 0..self.c_in {
            let plane =
                &mut image[c * self.h_in * self.w_in..(c + 1) * self.h_in * self.w_in];
            for i in 0..self.s {
                for j in 0..self.s {
                    let row = (c * self.s + i) * self.s + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for ho in 0..self.h_out {
                        let Some(h) = self.src(ho, i, self.h_in) else { continue };
                        for wo in 0..self.w_out {
                            if let Some(w) = self.src(wo, j, self.w_in) {
                                plane[h * self.w_in + w] += src[ho * self.w_out + wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with bias, stride and zero padding.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let geom = ConvGeom::new(spec, input.shape())?;
    let n = input.shape()[0];
    let c_out = spec.out_channels();
    let (k, p) = (geom.patch_len(), geom.out_len());
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; n * c_out * p];
    for b in 0..n {
        geom.im2col(&input.data()[b * geom.in_len()..(b + 1) * geom.in_len()], &mut cols);
        let dst = &mut out[b * c_out * p..(b + 1) * c_out * p];
        for (o, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(spec.bias()[o]);
        }
        gemm(c_out, k, p, 1.0, spec.weights().data(), rm(k), &cols, rm(p), 1.0, dst, rm(p));
    }
    Ok(Tensor::from_parts(vec![n, c_out, geom.h_out, geom.w_out], out))
}

/// Non-overlapping pooling; also returns, for max pooling, the flat input index
/// each output element was taken from.
pub(crate) fn pool2d_indexed(
    input: &Tensor,
    window: usize,
    mode: PoolMode,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(dim_err!(
            "pool window {window} must divide input extents {h}x{w}"
        ));
    }
    let (ho, wo) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.reserve(n * c * ho * wo);
    }
    let area = (window * window) as f64;
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                let mut sum = 0.0;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oh * window + i) * w + ow * window + j;
                        let x = data[idx];
                        sum += x;
                        if x > best {
                            best = x;
                            best_idx = idx;
                        }
                    }
                }
                match mode {
                    PoolMode::Max => {
                        out.push(best);
                        argmax.push(best_idx);
                    }
                    PoolMode::Average => out.push(sum / area),
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), argmax))
}

/// Non-overlapping `window x window` pooling. The window must tile the input.
pub fn pool2d(input: &Tensor, window: usize, mode: PoolMode) -> Result<Tensor> {
    pool2d_indexed(input, window, mode).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct six-loop convolution used as an oracle for the im2col path.
    fn conv_naive(input: &Tensor, spec: &ConvSpec) -> Tensor {
        let [n, c_in, h, w] = input.dims4().unwrap();
        let [_, c_out, ho, wo] = spec.output_shape(input.shape()).unwrap();
        let s = spec.kernel_size();
        let (st, pad) = (spec.stride() as isize, spec.padding() as isize);
        let wt = spec.weights().data();
        let mut out = vec![0.0; n * c_out * ho * wo];
        for b in 0..n {
            for o in 0..c_out {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = spec.bias()[o];
                        for c in 0..c_in {
                            for i in 0..s {
                                for j in 0..s {
                                    let hh = y as isize * st + i as isize - pad;
                                    let ww = x as isize * st + j as isize - pad;
                                    if hh < 0 || ww < 0 || hh >= h as isize || ww >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * c_in + c) * s + i) * s + j]
                                        * input.data()[((b * c_in + c) * h + hh as usize) * w
                                            + ww as usize];
                                }
                            }
                        }
                        out[((b * c_out + o) * ho + y) * wo + x] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, c_out, ho, wo], out).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let zero = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(matmul(&a, &zero).unwrap(), zero);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_scalar_kernel() {
        let spec = ConvSpec::without_bias(t(&[1, 1, 1, 1], &[2.0]), 1, 0).unwrap();
        let out = conv2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &spec).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let spec = ConvSpec::without_bias(t(&[1, 1, 3, 3], &k), 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[2, 1, 5, 6]);
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_sums() {
        let spec = ConvSpec::without_bias(t(&[1, 1, 2, 2], &[1.0; 4]), 1, 0).unwrap();
        let out = conv2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_errors() {
        let spec = ConvSpec::without_bias(Tensor::zeros(&[1, 2, 3, 3]).unwrap(), 1, 0).unwrap();
        assert!(conv2d(&Tensor::zeros(&[1, 1, 4, 4]).unwrap(), &spec).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 2, 2, 2]).unwrap(), &spec).is_err());
        assert!(ConvSpec::new(Tensor::zeros(&[2, 1, 3, 3]).unwrap(), vec![0.0], 1, 0).is_err());
        assert!(ConvSpec::without_bias(Tensor::zeros(&[1, 1, 3, 3]).unwrap(), 0, 0).is_err());
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (c_in, c_out, s, stride, pad, h, w) in
            [(1, 3, 3, 1, 0, 7, 7), (2, 4, 3, 2, 1, 8, 9), (3, 2, 5, 1, 2, 6, 6), (2, 2, 1, 3, 0, 7, 5)]
        {
            let wt = random_tensor(&mut rng, &[c_out, c_in, s, s]);
            let bias = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let spec = ConvSpec::new(wt, bias, stride, pad).unwrap();
            let x = random_tensor(&mut rng, &[2, c_in, h, w]);
            let fast = conv2d(&x, &spec).unwrap();
            let slow = conv_naive(&x, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn one_hot_kernels_reproduce_im2col() {
        let (c_in, s) = (2, 3);
        let k = c_in * s * s;
        let mut wt = vec![0.0; k * k];
        for r in 0..k {
            wt[r * k + r] = 1.0;
        }
        let spec = ConvSpec::without_bias(t(&[k, c_in, s, s], &wt), 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[1, c_in, 8, 8]);
        let out = conv2d(&x, &spec).unwrap();
        let geom = ConvGeom::new(&spec, x.shape()).unwrap();
        let mut cols = vec![0.0; k * geom.out_len()];
        geom.im2col(x.data(), &mut cols);
        assert_eq!(out.data(), &cols[..]);
        // and each channel is a shifted copy of the input
        for c in 0..c_in {
            for i in 0..s {
                for j in 0..s {
                    let o = (c * s + i) * s + j;
                    for y in 0..6 {
                        for xx in 0..6 {
                            assert_eq!(
                                out.data()[(o * 6 + y) * 6 + xx],
                                x.data()[(c * 8 + y + i) * 8 + xx + j]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool2d(&x, 2, PoolMode::Max).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&x, 2, PoolMode::Average).unwrap().data(), &[2.5]);
        let iota: Vec<f64> = (1..=16).map(f64::from).collect();
        let x = t(&[1, 1, 4, 4], &iota);
        assert_eq!(pool2d(&x, 2, PoolMode::Max).unwrap().data(), &[6.0, 8.0, 14.0, 16.0]);
        assert!(pool2d(&Tensor::zeros(&[1, 1, 3, 4]).unwrap(), 2, PoolMode::Max).is_err());
    }

    proptest! {
        #[test]
        fn conv_is_linear_without_bias(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ConvSpec::without_bias(random_tensor(&mut rng, &[3, 2, 3, 3]), 1, 1).unwrap();
            let x = random_tensor(&mut rng, &[1, 2, 6, 6]);
            let y = random_tensor(&mut rng, &[1, 2, 6, 6]);
            let combo = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
            ).unwrap();
            let lhs = conv2d(&combo, &spec).unwrap();
            let (cx, cy) = (conv2d(&x, &spec).unwrap(), conv2d(&y, &spec).unwrap());
            for ((l, a), b) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
                let r = alpha * a + beta * b;
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs().max(r.abs())));
            }
        }

        #[test]
        fn average_pool_preserves_mean(seed in any::<u64>(), win in 1usize..4, reps in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 3, win * reps, win * (reps + 1)]);
            let y = pool2d(&x, win, PoolMode::Average).unwrap();
            let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
            prop_assert!((mean(&x) - mean(&y)).abs() <= 1e-12);
        }

        #[test]
        fn max_pool_outputs_come_from_their_block(seed in any::<u64>(), win in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (win * 3, win * 2);
            let x = random_tensor(&mut rng, &[1, 2, h, w]);
            let y = pool2d(&x, win, PoolMode::Max).unwrap();
            for c in 0..2 {
                for oh in 0..3 {
                    for ow in 0..2 {
                        let v = y.data()[(c * 3 + oh) * 2 + ow];
                        let found = (0..win).any(|i| (0..win).any(|j| {
                            x.data()[(c * h + oh * win + i) * w + ow * win + j] == v
                        }));
                        prop_assert!(found);
                    }
                }
            }
        }
    }
}
