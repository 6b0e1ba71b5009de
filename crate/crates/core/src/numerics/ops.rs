//! Forward and backward kernels for every operation the encoder uses.
//!
//! Each forward function has a matching `*_backward` that maps an upstream
//! gradient to gradients of the inputs. The graph is static, so there is no
//! tape: callers keep whatever the backward pass needs (inputs, outputs, or a
//! small cache struct) and hand it back explicitly.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{NumericError, Tensor2};

/// Output rows handed to each GEMM task. Fixed so that results do not depend
/// on the size of the worker pool.
const GEMM_ROW_BLOCK: usize = 128;

/// Below this many multiply-adds the GEMM runs on the calling thread.
const GEMM_PAR_THRESHOLD: usize = 1 << 20;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), where `op` is an
/// optional transpose. Shapes are checked by the caller-facing wrappers.
pub(crate) fn gemm(
    a: &Tensor2,
    trans_a: bool,
    b: &Tensor2,
    trans_b: bool,
    c: &mut Tensor2,
    accumulate: bool,
) {
    let (m, k) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let n = if trans_b { b.rows() } else { b.cols() };
    debug_assert_eq!(c.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1isize, a.cols() as isize)
    } else {
        (a.cols() as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b.cols() as isize)
    } else {
        (b.cols() as isize, 1isize)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    let a_data = a.data();
    let b_data = b.data();

    let run_block = |row0: usize, c_block: &mut [f64]| {
        let rows = c_block.len() / n;
        // SAFETY: the strides describe `a` and `b` exactly (row-major with
        // optional transpose), `row0 + rows <= m`, and `c_block` is a
        // contiguous row-major `rows x n` slice owned by this task.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_data.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b_data.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m * k * n < GEMM_PAR_THRESHOLD || m <= GEMM_ROW_BLOCK {
        run_block(0, c.data_mut());
    } else {
        c.data_mut()
            .par_chunks_mut(GEMM_ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, block)| run_block(i * GEMM_ROW_BLOCK, block));
    }
}

/// Single-threaded `c = alpha * op(a) * op(b)` (or `c += ...`) on strided
/// row-major views. Used for the per-sequence attention products, where the
/// operands are column blocks of larger matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k > 0, "gemm_view with empty inner dimension");
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm_view: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm_view: b out of bounds");
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm_view: c out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// `C = A * B`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2, NumericError> {
    if a.cols() != b.rows() {
        return Err(NumericError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut c = Tensor2::zeros(a.rows(), b.cols());
    gemm(a, false, b, false, &mut c, false);
    Ok(c)
}

/// `C = A * B^T`.
pub fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2, NumericError> {
    if a.cols() != b.cols() {
        return Err(NumericError::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut c = Tensor2::zeros(a.rows(), b.rows());
    gemm(a, false, b, true, &mut c, false);
    Ok(c)
}

/// `C = A^T * B`.
pub fn matmul_tn(a: &Tensor2, b: &Tensor2) -> Result<Tensor2, NumericError> {
    if a.rows() != b.rows() {
        return Err(NumericError::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut c = Tensor2::zeros(a.cols(), b.cols());
    gemm(a, true, b, false, &mut c, false);
    Ok(c)
}

/// Gradients of `C = A * B`: `dA = dC * B^T`, `dB = A^T * dC`.
pub fn matmul_backward(
    a: &Tensor2,
    b: &Tensor2,
    dc: &Tensor2,
) -> Result<(Tensor2, Tensor2), NumericError> {
    if dc.shape() != (a.rows(), b.cols()) {
        return Err(NumericError::Shape {
            op: "matmul_backward",
            lhs: (a.rows(), b.cols()),
            rhs: dc.shape(),
        });
    }
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// Adds `A^T * B` into `acc` (weight-gradient accumulation).
pub fn accumulate_tn(acc: &mut Tensor2, a: &Tensor2, b: &Tensor2) -> Result<(), NumericError> {
    if a.rows() != b.rows() || acc.shape() != (a.cols(), b.cols()) {
        return Err(NumericError::Shape {
            op: "accumulate_tn",
            lhs: (a.cols(), b.cols()),
            rhs: acc.shape(),
        });
    }
    gemm(a, true, b, false, acc, true);
    Ok(())
}

/// Adds a `1 x cols` bias to every row, in place.
pub fn add_row_bias(x: &mut Tensor2, bias: &Tensor2) -> Result<(), NumericError> {
    if bias.rows() != 1 || bias.cols() != x.cols() {
        return Err(NumericError::Shape {
            op: "add_row_bias",
            lhs: x.shape(),
            rhs: bias.shape(),
        });
    }
    let b = bias.data();
    for r in 0..x.rows() {
        for (v, bb) in x.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
    Ok(())
}

/// Bias gradient: column sums of the upstream gradient, added into `acc`.
pub fn accumulate_bias_grad(acc: &mut Tensor2, dy: &Tensor2) -> Result<(), NumericError> {
    if acc.rows() != 1 || acc.cols() != dy.cols() {
        return Err(NumericError::Shape {
            op: "accumulate_bias_grad",
            lhs: acc.shape(),
            rhs: dy.shape(),
        });
    }
    let acc = acc.data_mut();
    for r in 0..dy.rows() {
        for (a, g) in acc.iter_mut().zip(dy.row(r)) {
            *a += g;
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_in_place(y.row_mut(r));
    }
    y
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Backward of [`softmax_rows`] given its output `y`:
/// `dx_i = y_i * (dy_i - sum_j y_j dy_j)`.
pub fn softmax_rows_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2, NumericError> {
    y.check_same_shape("softmax_rows_backward", dy)?;
    let mut dx = Tensor2::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let inner: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    Ok(dx)
}

/// Values kept from the layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized input before gain and bias.
    pub xhat: Tensor2,
    /// `1 / sqrt(var + eps)` per row.
    pub rstd: Vec<f64>,
}

/// Per-row `(x - mean) / sqrt(var + eps) * gain + bias`, with the biased
/// (`1/d`) variance.
pub fn layernorm_rows(
    x: &Tensor2,
    gain: &Tensor2,
    bias: &Tensor2,
    eps: f64,
) -> Result<(Tensor2, LayerNormCache), NumericError> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(NumericError::Shape {
            op: "layernorm_rows",
            lhs: x.shape(),
            rhs: gain.shape(),
        });
    }
    if d < 2 {
        return Err(NumericError::Invalid(
            "layernorm needs at least two columns".into(),
        ));
    }
    let mut xhat = Tensor2::zeros(x.rows(), d);
    let mut y = Tensor2::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    let (g, b) = (gain.data(), bias.data());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for (j, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = xh[j] * g[j] + b[j];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Backward of [`layernorm_rows`]. Returns `dx` and adds the gain and bias
/// gradients into the supplied accumulators.
pub fn layernorm_rows_backward(
    cache: &LayerNormCache,
    gain: &Tensor2,
    dy: &Tensor2,
    dgain: &mut Tensor2,
    dbias: &mut Tensor2,
) -> Result<Tensor2, NumericError> {
    cache.xhat.check_same_shape("layernorm_rows_backward", dy)?;
    let d = dy.cols();
    let g = gain.data();
    let mut dx = Tensor2::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        {
            let dg = dgain.data_mut();
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        {
            let db = dbias.data_mut();
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok(dx)
}

/// Element-wise `max(0, x)`.
pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward of [`relu`] given its input; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor2, dy: &Tensor2) -> Result<Tensor2, NumericError> {
    x.check_same_shape("relu_backward", dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2::from_vec(x.rows(), x.cols(), data)
}

/// Per-element multipliers applied by an inverted-dropout forward pass.
/// `None` means the pass was the identity (eval mode or `p == 0`).
#[derive(Debug, Clone, Default)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        Self(None)
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }
}

/// Inverted dropout: in training mode each entry is zeroed with probability
/// `p` and survivors are scaled by `1 / (1 - p)`. Eval mode is the identity.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor2,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor2, DropoutMask), NumericError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumericError::Invalid(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor2::from_vec(x.rows(), x.cols(), data)?,
        DropoutMask(Some(mask)),
    ))
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Tensor2) -> Result<Tensor2, NumericError> {
    match &mask.0 {
        None => Ok(dy.clone()),
        Some(m) => {
            if m.len() != dy.len() {
                return Err(NumericError::Length {
                    what: "dropout_backward",
                    len: m.len(),
                    rows: dy.rows(),
                    cols: dy.cols(),
                });
            }
            let data = dy.data().iter().zip(m).map(|(g, k)| g * k).collect();
            Tensor2::from_vec(dy.rows(), dy.cols(), data)
        }
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of `targets` under row-softmax of `logits`,
/// and its gradient `(softmax - onehot) / R`.
pub fn cross_entropy_from_logits(
    logits: &Tensor2,
    targets: &[usize],
) -> Result<(f64, Tensor2), NumericError> {
    let (r, classes) = logits.shape();
    if targets.len() != r {
        return Err(NumericError::Shape {
            op: "cross_entropy_from_logits",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    if r == 0 {
        return Err(NumericError::Invalid(
            "cross entropy over zero rows".into(),
        ));
    }
    let inv_r = 1.0 / r as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(r, classes);
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(NumericError::TargetOutOfRange {
                row: i,
                target: t,
                classes,
            });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[t];
        for (g, &v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv_r;
        }
        grad.row_mut(i)[t] -= inv_r;
    }
    Ok((loss * inv_r, grad))
}
