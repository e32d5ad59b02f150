//! Forward and backward kernels on row-major slices.
//!
//! Reductions always run in index order so results are bit-reproducible.

use super::Scalar;

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), &mut c, n as isize, 1);
    c
}

/// `da += dc · bᵀ` and `db += aᵀ · dc` for `c = a·b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        T::gemm(m, n, k, T::one(), dc, n as isize, 1, b, 1, n as isize, T::one(), da, k as isize, 1);
    }
    if let Some(db) = db {
        T::gemm(k, m, n, T::one(), a, 1, k as isize, dc, n as isize, 1, T::one(), db, n as isize, 1);
    }
}

pub fn concat_cols<T: Scalar>(a: &[T], b: &[T], rows: usize, ca: usize, cb: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    out
}

pub fn slice_cols<T: Scalar>(x: &[T], rows: usize, cols: usize, start: usize, len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
    }
    out
}

const GELU_C: f64 = 0.044_715;

fn gelu_k<T: Scalar>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (gelu_k::<T>() * (x + T::of(GELU_C) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let k = gelu_k::<T>();
    let t = (k * (x + T::of(GELU_C) * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0 * GELU_C) * x * x)
}

/// Row-wise softmax. `-inf` entries get probability 0; a row that is entirely
/// `-inf` maps to all zeros instead of NaN.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        softmax_into(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    out
}

pub fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `dx = y ⊙ (dy − Σ dy·y)` per row.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let (yr, dyr) = (&y[r * cols..(r + 1) * cols], &dy[r * cols..(r + 1) * cols]);
        let dot: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for c in 0..cols {
            dx[r * cols + c] += yr[c] * (dyr[c] - dot);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Returns `(y, x̂, 1/σ)`.
pub fn layer_norm<T: Scalar>(x: &[T], rows: usize, cols: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); rows * cols];
    let mut rstd = vec![T::zero(); rows];
    let n = T::of(cols as f64);
    let eps = T::of(LAYER_NORM_EPS);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    rows: usize,
    cols: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    if let Some(dg) = dgain {
        for r in 0..rows {
            for c in 0..cols {
                dg[c] += dy[r * cols + c] * xhat[r * cols + c];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for c in 0..cols {
                db[c] += dy[r * cols + c];
            }
        }
    }
    if let Some(dx) = dx {
        let n = T::of(cols as f64);
        for r in 0..rows {
            let (mut mean_d, mut mean_dx) = (T::zero(), T::zero());
            for c in 0..cols {
                let d = dy[r * cols + c] * gain[c];
                mean_d += d;
                mean_dx += d * xhat[r * cols + c];
            }
            mean_d = mean_d / n;
            mean_dx = mean_dx / n;
            for c in 0..cols {
                let d = dy[r * cols + c] * gain[c];
                dx[r * cols + c] += rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
            }
        }
    }
}

/// Shape of a batched multi-head attention call: `batch` sequences of `seq`
/// positions, `width = heads · head_dim` channels per position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }

    #[inline]
    fn prob_index(&self, b: usize, h: usize, i: usize, j: usize) -> usize {
        ((b * self.heads + h) * self.seq + i) * self.seq + j
    }
}

/// Causal scaled dot-product attention. Inputs are `(batch·seq) × width`
/// row-major; returns the output and the `batch × heads × seq × seq`
/// probabilities (zero above the diagonal).
pub fn causal_attention<T: Scalar>(q: &[T], k: &[T], v: &[T], s: AttnShape) -> (Vec<T>, Vec<T>) {
    let d = s.head_dim();
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); s.batch * s.seq * s.width];
    let mut probs = vec![T::zero(); s.probs_len()];
    let mut scores = vec![T::zero(); s.seq];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * d;
            for i in 0..s.seq {
                let qi = &q[(b * s.seq + i) * s.width + off..][..d];
                for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * s.seq + j) * s.width + off..][..d];
                    *sc = qi.iter().zip(kj).map(|(x, y)| *x * *y).sum::<T>() * scale;
                }
                let p0 = s.prob_index(b, h, i, 0);
                softmax_into(&scores[..=i], &mut probs[p0..p0 + i + 1]);
                let o = &mut out[(b * s.seq + i) * s.width + off..][..d];
                for j in 0..=i {
                    let p = probs[p0 + j];
                    let vj = &v[(b * s.seq + j) * s.width + off..][..d];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p * *vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: AttnShape,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = s.head_dim();
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dp = vec![T::zero(); s.seq];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * d;
            for i in 0..s.seq {
                let row = (b * s.seq + i) * s.width + off;
                let doi = &dout[row..row + d];
                let p0 = s.prob_index(b, h, i, 0);
                let mut dot = T::zero();
                for j in 0..=i {
                    let vrow = (b * s.seq + j) * s.width + off;
                    let vj = &v[vrow..vrow + d];
                    dp[j] = doi.iter().zip(vj).map(|(x, y)| *x * *y).sum();
                    let p = probs[p0 + j];
                    dot += p * dp[j];
                    for c in 0..d {
                        dv[vrow + c] += p * doi[c];
                    }
                }
                for j in 0..=i {
                    let ds = probs[p0 + j] * (dp[j] - dot) * scale;
                    let krow = (b * s.seq + j) * s.width + off;
                    for c in 0..d {
                        dq[row + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[row + c];
                    }
                }
            }
        }
    }
}

/// Mean negative log-likelihood over the masked rows. Returns the loss, the
/// row softmax, and the number of masked rows.
pub fn cross_entropy<T: Scalar>(logits: &[T], targets: &[usize], mask: &[bool], cols: usize) -> (T, Vec<T>, usize) {
    let rows = targets.len();
    let mut probs = vec![T::zero(); rows * cols];
    let mut total = T::zero();
    let mut count = 0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
        for c in 0..cols {
            probs[r * cols + c] = (row[c] - lse).exp();
        }
        total += lse - row[targets[r]];
        count += 1;
    }
    (total / T::of(count.max(1) as f64), probs, count)
}
