//! Dense row-major `f64` arrays and the handful of linear-algebra kernels
//! the layers and the least-squares oracle are built from.
//!
//! Activations that are matrices keep the batch as the *last* dimension
//! (`features x batch`), so second moments and im2col columns are contiguous
//! rows. Image activations use `[batch, channels, height, width]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("Tensor::new", format!("invalid shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for kernel outputs whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access. Callers own the tensor exclusively.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data))
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius norm of the whole tensor.
    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * k).collect())
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// `self += alpha * x`, in place.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &Tensor) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        self.data
            .iter_mut()
            .zip(&x.data)
            .for_each(|(s, v)| *s += alpha * v);
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

/// A rank-2 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix(Tensor);

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data).map(Matrix)
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Matrix(Tensor::from_parts(vec![rows, cols], data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("Matrix::from_rows", "ragged rows"));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::dim(
                "Matrix::from_tensor",
                format!("expected rank 2, got shape {:?}", t.shape()),
            ));
        }
        Ok(Matrix(t))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(Tensor::zeros(&[rows, cols]))
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Matrix(Tensor::from_fn(&[rows, cols], |idx| f(idx / cols, idx % cols)))
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.0.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn transpose(&self) -> Matrix {
        let (r, c) = (self.rows(), self.cols());
        Matrix::from_fn(c, r, |i, j| self.get(j, i))
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is stored
/// in its untransposed layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched for these strides.
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
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dim(
            "matmul",
            format!("({}x{}) x ({}x{})", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
    let out = Matrix::from_parts(m, n, out);
    out.0.ensure_finite("matmul")?;
    Ok(out)
}

/// `(1/batch) * A * A^T` for `A` of shape `dim x batch`.
pub fn mean_outer(a: &Matrix) -> Matrix {
    let (d, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; d * d];
    gemm(d, n, d, 1.0 / n as f64, a.data(), false, a.data(), true, 0.0, &mut out);
    // exact symmetry regardless of summation order inside the kernel
    for i in 0..d {
        for j in 0..i {
            out[j * d + i] = out[i * d + j];
        }
    }
    Matrix::from_parts(d, d, out)
}

const PIVOT_TOLERANCE: f64 = 1e-12;

/// Solves the square system `lhs * X = rhs` by Gaussian elimination with
/// partial pivoting. A pivot smaller than `1e-12` times the largest entry of
/// `lhs` is reported as singular.
pub fn solve_linear(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = lhs.rows();
    if lhs.cols() != n || rhs.rows() != n {
        return Err(Error::dim(
            "solve_linear",
            format!(
                "lhs {}x{}, rhs {}x{}",
                lhs.rows(),
                lhs.cols(),
                rhs.rows(),
                rhs.cols()
            ),
        ));
    }
    let p = rhs.cols();
    let scale = lhs.data().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tol = PIVOT_TOLERANCE * scale;
    let mut a = lhs.data().to_vec();
    let mut b = rhs.data().to_vec();

    for col in 0..n {
        let (piv_row, piv_val) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if scale == 0.0 || piv_val <= tol {
            return Err(Error::Singular {
                pivot: piv_val,
                column: col,
            });
        }
        if piv_row != col {
            for j in 0..n {
                a.swap(col * n + j, piv_row * n + j);
            }
            for j in 0..p {
                b.swap(col * p + j, piv_row * p + j);
            }
        }
        let pivot = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for j in 0..p {
                b[r * p + j] -= factor * b[col * p + j];
            }
        }
    }

    let mut x = vec![0.0; n * p];
    for r in (0..n).rev() {
        for j in 0..p {
            let mut acc = b[r * p + j];
            for k in r + 1..n {
                acc -= a[r * n + k] * x[k * p + j];
            }
            x[r * p + j] = acc / a[r * n + r];
        }
    }
    let x = Matrix::from_parts(n, p, x);
    x.0.ensure_finite("solve_linear")?;
    Ok(x)
}

/// Minimizes `||A X - B||_F^2 + ridge * ||X||_F^2` through the normal
/// equations `(A^T A + ridge I) X = A^T B`.
pub fn solve_least_squares(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::dim(
            "solve_least_squares",
            format!("A has {} rows, B has {}", a.rows(), b.rows()),
        ));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let (r, n, p) = (a.rows(), a.cols(), b.cols());
    let mut gram = vec![0.0; n * n];
    gemm(n, r, n, 1.0, a.data(), true, a.data(), false, 0.0, &mut gram);
    for i in 0..n {
        gram[i * n + i] += ridge;
    }
    let mut rhs = vec![0.0; n * p];
    gemm(n, r, p, 1.0, a.data(), true, b.data(), false, 0.0, &mut rhs);
    solve_linear(&Matrix::from_parts(n, n, gram), &Matrix::from_parts(n, p, rhs))
}

/// Kernel size, stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size `(q1, q2)` for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_dim(h, self.kernel_h, self.stride, self.padding)?,
            out_dim(w, self.kernel_w, self.stride, self.padding)?,
        ))
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel_h * self.kernel_w
    }
}

fn out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "(input {size} + 2*{padding} - kernel {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output columns `ox` whose input column `ox*stride + j - pad` lies in `[0, w)`.
fn valid_range(q2: usize, w: usize, j: usize, g: &ConvGeometry) -> std::ops::Range<usize> {
    let (pad, stride) = (g.padding, g.stride);
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    // largest ox with ox*stride + j - pad <= w - 1
    let hi = if w + pad > j { ((w + pad - j - 1) / stride + 1).min(q2) } else { 0 };
    lo.min(hi)..hi
}

/// Slice-level im2col for one `[c, h, w]` image into a `(c*kh*kw) x (q1*q2)`
/// buffer. Row index is `(ch*kh + i)*kw + j`, column index is `oy*q2 + ox`.
pub(crate) fn im2col_into(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (q1, q2): (usize, usize),
    out: &mut [f64],
) {
    let q = q1 * q2;
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let row = (ch * g.kernel_h + i) * g.kernel_w + j;
                let dst = &mut out[row * q..(row + 1) * q];
                let cols = valid_range(q2, w, j, g);
                for oy in 0..q1 {
                    let y = (oy * g.stride + i) as isize - pad;
                    let line = &mut dst[oy * q2..(oy + 1) * q2];
                    if y < 0 || y >= h as isize || cols.is_empty() {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    line[..cols.start].fill(0.0);
                    line[cols.end..].fill(0.0);
                    let x0 = cols.start * g.stride + j - g.padding;
                    if g.stride == 1 {
                        line[cols.clone()].copy_from_slice(&src[x0..x0 + cols.len()]);
                    } else {
                        for (k, slot) in line[cols.clone()].iter_mut().enumerate() {
                            *slot = src[x0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add adjoint of [`im2col_into`]; accumulates into `out`.
pub(crate) fn col2im_add(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (q1, q2): (usize, usize),
    out: &mut [f64],
) {
    let q = q1 * q2;
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let row = (ch * g.kernel_h + i) * g.kernel_w + j;
                let src = &cols[row * q..(row + 1) * q];
                let valid = valid_range(q2, w, j, g);
                if valid.is_empty() {
                    continue;
                }
                let x0 = valid.start * g.stride + j - g.padding;
                for oy in 0..q1 {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    let line = &src[oy * q2 + valid.start..oy * q2 + valid.end];
                    if g.stride == 1 {
                        for (d, s) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (k, s) in line.iter().enumerate() {
                            dst[x0 + k * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

fn image_dims(input: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(op, format!("expected [channels, h, w], got {s:?}"))),
    }
}

/// Rearranges the patches of a `[m, H, W]` image into the columns of a
/// `(m*kh*kw) x (q1*q2)` matrix. Padded positions contribute zero.
pub fn im2col(input: &Tensor, geometry: &ConvGeometry) -> Result<Matrix> {
    let dims = image_dims(input, "im2col")?;
    let (q1, q2) = geometry.output_size(dims.1, dims.2)?;
    let rows = geometry.patch_len(dims.0);
    let mut out = vec![0.0; rows * q1 * q2];
    im2col_into(input.data(), dims, geometry, (q1, q2), &mut out);
    Ok(Matrix::from_parts(rows, q1 * q2, out))
}

/// Adjoint of [`im2col`]: every input position accumulates the entries of
/// all patches that contain it.
pub fn col2im(cols: &Matrix, input_shape: [usize; 3], geometry: &ConvGeometry) -> Result<Tensor> {
    let [c, h, w] = input_shape;
    let (q1, q2) = geometry.output_size(h, w)?;
    if cols.rows() != geometry.patch_len(c) || cols.cols() != q1 * q2 {
        return Err(Error::dim(
            "col2im",
            format!(
                "expected {}x{}, got {}x{}",
                geometry.patch_len(c),
                q1 * q2,
                cols.rows(),
                cols.cols()
            ),
        ));
    }
    let mut out = vec![0.0; c * h * w];
    col2im_add(cols.data(), (c, h, w), geometry, (q1, q2), &mut out);
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
