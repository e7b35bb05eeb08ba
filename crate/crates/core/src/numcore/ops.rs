//! Forward and backward kernels. Matrices are the last two axes flattened
//! to `rows() x cols()`.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Probability clamp applied before taking logs in [`bce_masked`].
pub const BCE_EPS: f64 = 1e-7;

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

/// `c[m x n] = a[m x k] * b[k x n]` on raw row-major slices.
///
/// Every output element is summed over `p` in ascending order, whatever the tiling.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let m_main = m - m % TILE_R;
    let n_main = n - n % TILE_C;
    for i0 in (0..m_main).step_by(TILE_R) {
        let arows: [&[f64]; TILE_R] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        for j0 in (0..n_main).step_by(TILE_C) {
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
                let bv: &[f64; TILE_C] = brow[j0..j0 + TILE_C].try_into().expect("tile width");
                for r in 0..TILE_R {
                    let av = arows[r][p];
                    for j in 0..TILE_C {
                        acc[r][j] += av * bv[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_C].copy_from_slice(row);
            }
        }
        for i in i0..i0 + TILE_R {
            gemm_row_tail(a, b, &mut c, i, k, n, n_main);
        }
    }
    for i in m_main..m {
        gemm_row_tail(a, b, &mut c, i, k, n, 0);
    }
    c
}

/// Columns `from..n` of output row `i`.
fn gemm_row_tail(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    let crow = &mut c[i * n + from..(i + 1) * n];
    for p in 0..k {
        let av = a[i * k + p];
        for (cv, bv) in crow.iter_mut().zip(&b[p * n + from..(p + 1) * n]) {
            *cv += av * bv;
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            t[c * rows + r] = *v;
        }
    }
    t
}

/// `c[k x n] = a[m x k]^T * b[m x n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(&transpose(a, m, k), b, k, m, n)
}

/// `c[m x k] = a[m x n] * b[k x n]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    gemm(a, &transpose(b, k, n), m, n, k)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::from_vec(&[m, n], gemm(a.data(), b.data(), m, k, n))
}

/// Returns `(dA, dB) = (dC * B^T, A^T * dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 || dc.rows() != m || dc.cols() != n {
        return Err(Error::Shape(format!(
            "matmul backward {:?} x {:?} with dC {:?}",
            a.shape(),
            b.shape(),
            dc.shape()
        )));
    }
    let da = Tensor::from_vec(&[m, k], gemm_nt(dc.data(), b.data(), m, n, k))?;
    let db = Tensor::from_vec(&[k, n], gemm_tn(a.data(), dc.data(), m, k, n))?;
    Ok((da, db))
}

fn softmax_rows_impl(s: &Tensor, mask: &[bool], strict: bool) -> Result<Tensor> {
    if mask.len() != s.len() {
        return Err(Error::Shape(format!(
            "softmax mask has {} entries for {:?}",
            mask.len(),
            s.shape()
        )));
    }
    let n = s.cols();
    let mut out = Tensor::zeros(s.shape());
    for i in 0..s.rows() {
        let row = s.row(i);
        let m = &mask[i * n..(i + 1) * n];
        let max = row
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            if strict {
                return Err(Error::DegenerateRow(i));
            }
            continue;
        }
        let orow = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..n {
            if m[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Row-wise softmax over entries where `mask` is true; masked entries get 0.
pub fn masked_softmax_rows(s: &Tensor, mask: &[bool]) -> Result<Tensor> {
    softmax_rows_impl(s, mask, true)
}

/// Like [`masked_softmax_rows`] but a fully masked row yields all zeros.
pub(crate) fn masked_softmax_rows_lenient(s: &Tensor, mask: &[bool]) -> Result<Tensor> {
    softmax_rows_impl(s, mask, false)
}

/// `dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik)`.
pub fn masked_softmax_rows_backward(probs: &Tensor, dprobs: &Tensor) -> Result<Tensor> {
    if probs.shape() != dprobs.shape() {
        return Err(Error::Shape("softmax backward".into()));
    }
    let mut ds = Tensor::zeros(probs.shape());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp = dprobs.row(i);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (o, (pv, dv)) in ds.row_mut(i).iter_mut().zip(p.iter().zip(dp)) {
            *o = pv * (dv - dot);
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row of `x` to zero mean / unit variance, then applies `gain` and `bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer norm over {:?} with gain {:?} / bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = dy.cols();
    if cache.xhat.shape() != dy.shape() || gain.len() != d {
        return Err(Error::Shape("layer norm backward".into()));
    }
    let g = gain.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dgain.data_mut()[j] += dyr[j] * xh[j];
            dbias.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let sum_dxhat: f64 = dxhat.iter().sum();
        let sum_dxhat_xhat: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[i] / d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (d as f64 * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    Ok((dx, dgain, dbias))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::Shape("relu backward".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(xv, g)| if *xv > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    y
}

/// Backward from the sigmoid *output* `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape("sigmoid backward".into()));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(s, g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Gathers rows of `table` (`R x d`) at `ids`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let rows = table.rows();
    let d = table.cols();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(Error::Index { index: id, rows });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(&[ids.len(), d], out)
}

/// Scatter-adds `dy` rows into `grad` at `ids`; repeated ids accumulate.
pub fn embedding_backward(grad: &mut Tensor, ids: &[usize], dy: &Tensor) -> Result<()> {
    let rows = grad.rows();
    if dy.rows() != ids.len() || dy.cols() != grad.cols() {
        return Err(Error::Shape("embedding backward".into()));
    }
    for (i, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::Index { index: id, rows });
        }
        for (g, v) in grad.row_mut(id).iter_mut().zip(dy.row(i)) {
            *g += v;
        }
    }
    Ok(())
}

fn check_bce_inputs(p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<usize> {
    if p.len() != y.len() || p.len() != mask.len() {
        return Err(Error::Shape(format!(
            "bce over p {:?}, y {:?}, mask {}",
            p.shape(),
            y.shape(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(count)
}

/// Mean binary cross-entropy over mask-true positions, with `p` clamped to `[eps, 1-eps]`.
pub fn bce_masked(p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<f64> {
    let count = check_bce_inputs(p, y, mask)?;
    let mut total = 0.0;
    for ((pv, yv), _) in p
        .data()
        .iter()
        .zip(y.data())
        .zip(mask)
        .filter(|(_, &m)| m)
    {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
    }
    Ok(total / count as f64)
}

/// Gradient of [`bce_masked`] with respect to `p`; zero where the clamp is active.
pub fn bce_masked_backward(p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let count = check_bce_inputs(p, y, mask)? as f64;
    let data = p
        .data()
        .iter()
        .zip(y.data())
        .zip(mask)
        .map(|((pv, yv), &m)| {
            if !m || *pv < BCE_EPS || *pv > 1.0 - BCE_EPS {
                0.0
            } else {
                (-yv / pv + (1.0 - yv) / (1.0 - pv)) / count
            }
        })
        .collect();
    Tensor::from_vec(p.shape(), data)
}

/// Inverted dropout. Returns the output and, when active, the per-entry scale
/// (0 or `1/(1-rate)`) needed by [`dropout_backward`].
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} not in [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, s) in y.data_mut().iter_mut().zip(&scale) {
        *v *= s;
    }
    Ok((y, Some(scale)))
}

pub fn dropout_backward(dy: &Tensor, scale: Option<&[f64]>) -> Tensor {
    let mut dx = dy.clone();
    if let Some(scale) = scale {
        for (v, s) in dx.data_mut().iter_mut().zip(scale) {
            *v *= s;
        }
    }
    dx
}

/// Adds `bias` (length `cols`) to every row.
pub fn add_row_bias(x: &mut Tensor, bias: &Tensor) {
    let c = x.cols();
    debug_assert_eq!(bias.len(), c);
    for i in 0..x.rows() {
        for (v, b) in x.row_mut(i).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// Column sums of a matrix, i.e. the gradient of a broadcast row bias.
pub fn sum_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[x.cols()]);
    for i in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}
