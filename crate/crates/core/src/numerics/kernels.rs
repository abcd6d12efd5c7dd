//! Untracked compute kernels shared by the tape and the inference engine.
//!
//! Both paths call the same functions so that cached decoding and full
//! recomputation perform identical arithmetic.

use crate::error::{Error, Result};

use super::Scalar;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10000.0;

/// Strided matrix view over a slice. Element `(i, j)` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a·b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.span() <= a.data.len(), "gemm lhs view out of bounds");
    assert!(b.span() <= b.data.len(), "gemm rhs view out of bounds");
    let c_span = if c.rows == 0 || c.cols == 0 {
        0
    } else {
        (c.rows - 1) * c.rs + (c.cols - 1) * c.cs + 1
    };
    assert!(c_span <= c.data.len(), "gemm output view out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major `c = a·b` with `a: m×k`, `b: k×n`.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        MatRef::row_major(a, m, k),
        MatRef::row_major(b, k, n),
        T::zero(),
        MatMut::row_major(c, m, n),
    );
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

/// `c += aᵀ·b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        MatRef::row_major(a, m, k).t(),
        MatRef::row_major(b, m, n),
        T::one(),
        MatMut::row_major(c, k, n),
    );
}

/// `c += a·bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    gemm(
        T::one(),
        MatRef::row_major(a, m, n),
        MatRef::row_major(b, k, n).t(),
        T::one(),
        MatMut::row_major(c, m, k),
    );
}

/// RMS normalization over rows of width `d`; returns the output and the
/// per-row reciprocal RMS.
pub fn rms_norm_forward<T: Scalar>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(RMS_EPS);
    let dn = T::from_usize(d).expect("width fits");
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let s = T::one() / (ms + eps).sqrt();
        inv[r] = s;
        for ((o, &v), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = g * (v * s);
        }
    }
    (y, inv)
}

/// Gradients of [`rms_norm_forward`]: `(dx, dgain)`.
pub fn rms_norm_backward<T: Scalar>(dy: &[T], x: &[T], gain: &[T], inv: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let dn = T::from_usize(d).expect("width fits");
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); d];
    for (r, &s) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        // a = Σ dy_i g_i x_i
        let mut a = T::zero();
        for i in 0..d {
            a += dyr[i] * gain[i] * xr[i];
            dgain[i] += dyr[i] * xr[i] * s;
        }
        let coef = a * s * s * s / dn;
        for i in 0..d {
            dx[r * d + i] = dyr[i] * gain[i] * s - xr[i] * coef;
        }
    }
    (dx, dgain)
}

/// Rotary rotation of adjacent pairs, in place. `x` is `rows × (n_heads·dh)`;
/// row `r` is rotated by angle `positions[r] · base^(-2i/dh)` on pair `i`.
/// `inverse` applies the transpose rotation (used by the backward pass).
pub fn rotary_in_place<T: Scalar>(x: &mut [T], positions: &[usize], n_heads: usize, dh: usize, inverse: bool) {
    let d = n_heads * dh;
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half).map(|i| ROPE_BASE.powf(-2.0 * i as f64 / dh as f64)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        for (i, f) in freqs.iter().enumerate() {
            let theta = pos as f64 * f;
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::from_f64_lossy(if inverse { -s } else { s }), T::from_f64_lossy(c));
            for h in 0..n_heads {
                let base = r * d + h * dh + 2 * i;
                let (a, b) = (x[base], x[base + 1]);
                x[base] = a * c - b * s;
                x[base + 1] = a * s + b * c;
            }
        }
    }
}

/// Softmax over the entries of `logits` where `visible` is true; invisible
/// entries come out as exactly zero.
pub fn masked_softmax_row<T: Scalar>(logits: &[T], visible: &[bool], out: &mut [T]) -> bool {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (&z, &v) in logits.iter().zip(visible) {
        if v {
            any = true;
            if z > max {
                max = z;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = T::zero();
    for ((o, &z), &v) in out.iter_mut().zip(logits).zip(visible) {
        if v {
            let e = (z - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = T::zero();
        }
    }
    for (o, &v) in out.iter_mut().zip(visible) {
        if v {
            *o /= sum;
        }
    }
    true
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `nq × d`, `k` and `v` are `nk × d` with `d = n_heads · dh`.
/// `visible(i, j)` tells whether query row `i` may read key row `j`.
/// Returns the `nq × d` output and the `n_heads × nq × nk` attention
/// probabilities.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    n_heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let d = q.len() / nq.max(1);
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut probs = vec![T::zero(); n_heads * nq * nk];
    let mut scores = vec![T::zero(); nq * nk];
    let mut vis = vec![false; nk];
    for h in 0..n_heads {
        let qh = MatRef {
            data: &q[h * dh..],
            rows: nq,
            cols: dh,
            rs: d,
            cs: 1,
        };
        let kh_t = MatRef {
            data: &k[h * dh..],
            rows: nk,
            cols: dh,
            rs: d,
            cs: 1,
        }
        .t();
        gemm(scale, qh, kh_t, T::zero(), MatMut::row_major(&mut scores, nq, nk));
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        for i in 0..nq {
            for (j, slot) in vis.iter_mut().enumerate() {
                *slot = visible(i, j);
            }
            if !masked_softmax_row(&scores[i * nk..(i + 1) * nk], &vis, &mut ph[i * nk..(i + 1) * nk]) {
                return Err(Error::InvalidMask { row: i });
            }
        }
        let vh = MatRef {
            data: &v[h * dh..],
            rows: nk,
            cols: dh,
            rs: d,
            cs: 1,
        };
        let oh = MatMut {
            data: &mut out[h * dh..],
            rows: nq,
            cols: dh,
            rs: d,
            cs: 1,
        };
        gemm(T::one(), MatRef::row_major(ph, nq, nk), vh, T::zero(), oh);
    }
    Ok((out, probs))
}

/// Gradients of [`attention_forward`]: `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    nq: usize,
    nk: usize,
    n_heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = q.len() / nq.max(1);
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut dp = vec![T::zero(); nq * nk];
    for h in 0..n_heads {
        let ph = &probs[h * nq * nk..(h + 1) * nq * nk];
        let doh = MatRef {
            data: &dout[h * dh..],
            rows: nq,
            cols: dh,
            rs: d,
            cs: 1,
        };
        // dP = dO · Vᵀ
        let vh_t = MatRef {
            data: &v[h * dh..],
            rows: nk,
            cols: dh,
            rs: d,
            cs: 1,
        }
        .t();
        gemm(T::one(), doh, vh_t, T::zero(), MatMut::row_major(&mut dp, nq, nk));
        // dV += Pᵀ · dO
        gemm(
            T::one(),
            MatRef::row_major(ph, nq, nk).t(),
            doh,
            T::one(),
            MatMut {
                data: &mut dv[h * dh..],
                rows: nk,
                cols: dh,
                rs: d,
                cs: 1,
            },
        );
        // dS = P ⊙ (dP − Σ_j dP·P), folded with the score scale.
        for i in 0..nq {
            let pr = &ph[i * nk..(i + 1) * nk];
            let dpr = &mut dp[i * nk..(i + 1) * nk];
            let dot = pr.iter().zip(dpr.iter()).fold(T::zero(), |a, (&p, &g)| a + p * g);
            for (g, &p) in dpr.iter_mut().zip(pr) {
                *g = p * (*g - dot) * scale;
            }
        }
        let kh = MatRef {
            data: &k[h * dh..],
            rows: nk,
            cols: dh,
            rs: d,
            cs: 1,
        };
        gemm(
            T::one(),
            MatRef::row_major(&dp, nq, nk),
            kh,
            T::one(),
            MatMut {
                data: &mut dq[h * dh..],
                rows: nq,
                cols: dh,
                rs: d,
                cs: 1,
            },
        );
        let qh = MatRef {
            data: &q[h * dh..],
            rows: nq,
            cols: dh,
            rs: d,
            cs: 1,
        };
        gemm(
            T::one(),
            MatRef::row_major(&dp, nq, nk).t(),
            qh,
            T::one(),
            MatMut {
                data: &mut dk[h * dh..],
                rows: nk,
                cols: dh,
                rs: d,
                cs: 1,
            },
        );
    }
    (dq, dk, dv)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `silu(a) ⊙ b`.
pub fn swiglu_forward<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * sigmoid(x) * y).collect()
}

pub fn swiglu_backward<T: Scalar>(dy: &[T], a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let mut da = Vec::with_capacity(a.len());
    let mut db = Vec::with_capacity(a.len());
    for ((&g, &x), &y) in dy.iter().zip(a).zip(b) {
        let s = sigmoid(x);
        let silu = x * s;
        da.push(g * y * (s + silu * (T::one() - s)));
        db.push(g * silu);
    }
    (da, db)
}

/// Softmax of a full row.
pub fn softmax_row<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &z| if z > m { z } else { m });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &e| a + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean token cross-entropy over rows whose target differs from `ignore`.
/// Returns `(loss, softmax probabilities, counted rows)`; an all-ignored
/// input yields loss 0.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    ignore: usize,
) -> Result<(T, Vec<T>, usize)> {
    let rows = targets.len();
    if logits.len() != rows * vocab {
        return Err(Error::dim("cross_entropy", &[logits.len()], &[rows, vocab]));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        if t >= vocab {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: t,
                bound: vocab,
            });
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |m, &z| if z > m { z } else { m });
        let sum = row.iter().fold(T::zero(), |a, &z| a + (z - max).exp());
        let lse = max + sum.ln();
        total += lse - row[t];
        for (p, &z) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = (z - max).exp() / sum;
        }
        count += 1;
    }
    if count == 0 {
        return Ok((T::zero(), probs, 0));
    }
    Ok((total / T::from_usize(count).expect("count"), probs, count))
}
