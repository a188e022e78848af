// SPDX-License-Identifier: Apache-2.0

//! Row-major dense kernels with their backward passes.

use super::Real;
use crate::par;

pub const LN_EPS: f64 = 1e-5;

/// `c (m x n) = op(a) @ op(b)`, optionally accumulating into `c`.
/// `op(a)` is `m x k`: stored `m x k`, or `k x m` when `ta`.
/// `op(b)` is `k x n`: stored `k x n`, or `n x k` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

/// `out = x @ W + b` where `wb` holds `W (din x dout)` followed by `b`.
pub fn linear_fwd<T: Real>(x: &[T], rows: usize, din: usize, dout: usize, wb: &[T], out: &mut [T]) {
    let (w, b) = wb.split_at(din * dout);
    for row in out[..rows * dout].chunks_exact_mut(dout) {
        row.copy_from_slice(b);
    }
    matmul(x, false, w, false, out, rows, din, dout, true);
}

/// Accumulates weight/bias gradients into `gwb` and writes (or adds, when
/// `accumulate_dx`) the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    wb: &[T],
    gwb: &mut [T],
    dx: Option<&mut [T]>,
    accumulate_dx: bool,
) {
    let (gw, gb) = gwb.split_at_mut(din * dout);
    matmul(x, true, dy, false, gw, din, rows, dout, true);
    for row in dy[..rows * dout].chunks_exact(dout) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(dx) = dx {
        let w = &wb[..din * dout];
        matmul(dy, false, w, true, dx, rows, dout, din, accumulate_dx);
    }
}

#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_fwd<T: Real>(x: &[T], rows: usize, d: usize, gb: &[T], out: &mut [T], cache: Option<&mut LnCache<T>>) {
    let (gain, bias) = gb.split_at(d);
    let eps = T::of(LN_EPS);
    let inv_d = T::of(1.0 / d as f64);
    let mut store = cache.map(|c| {
        c.xhat.resize(rows * d, T::zero());
        c.rstd.resize(rows, T::zero());
        c
    });
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        let or = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            let xh = (xr[i] - mean) * rstd;
            or[i] = xh * gain[i] + bias[i];
        }
        if let Some(c) = store.as_deref_mut() {
            for i in 0..d {
                c.xhat[r * d + i] = (xr[i] - mean) * rstd;
            }
            c.rstd[r] = rstd;
        }
    }
}

/// Accumulates into `dx` and `ggb`.
pub fn layer_norm_bwd<T: Real>(dy: &[T], rows: usize, d: usize, gb: &[T], cache: &LnCache<T>, ggb: &mut [T], dx: &mut [T]) {
    let gain = &gb[..d];
    let (ggain, gbias) = ggb.split_at_mut(d);
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            ggain[i] += dyr[i] * xh[i];
            gbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rstd = cache.rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

/// Query rows `q_off..q_off+q_len` attend to key rows `kv_off..kv_off+kv_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_off: usize,
    pub q_len: usize,
    pub kv_off: usize,
    pub kv_len: usize,
}

impl Segment {
    fn probs_len(&self, heads: usize) -> usize {
        heads * self.q_len * self.kv_len
    }
}

pub fn probs_offsets(segs: &[Segment], heads: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(segs.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for s in segs {
        acc += s.probs_len(heads);
        offs.push(acc);
    }
    offs
}

pub struct AttnShape {
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
}

pub(crate) fn attend_segment<T: Real>(q: &[T], k: &[T], v: &[T], seg: &Segment, shape: &AttnShape) -> (Vec<T>, Vec<T>) {
    let AttnShape { d, heads, causal } = *shape;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (n, m) = (seg.q_len, seg.kv_len);
    let mut probs = vec![T::zero(); heads * n * m];
    let mut ctx = vec![T::zero(); n * d];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let qi = &q[(seg.q_off + i) * d + c0..(seg.q_off + i) * d + c0 + dh];
            let limit = if causal { i + 1 } else { m };
            let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            let mut max = T::neg_infinity();
            for j in 0..limit {
                let kj = &k[(seg.kv_off + j) * d + c0..(seg.kv_off + j) * d + c0 + dh];
                let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::zero();
            for p in row[..limit].iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let inv = z.recip();
            let ci = &mut ctx[i * d + c0..i * d + c0 + dh];
            for j in 0..limit {
                row[j] *= inv;
                let p = row[j];
                let vj = &v[(seg.kv_off + j) * d + c0..(seg.kv_off + j) * d + c0 + dh];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
        }
    }
    (probs, ctx)
}

/// Multi-head scaled dot-product attention over packed sequences. `probs` is
/// resized to hold every segment's `heads x q_len x kv_len` weights.
pub fn attention_fwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    segs: &[Segment],
    shape: &AttnShape,
    probs: &mut Vec<T>,
    ctx: &mut [T],
) {
    let d = shape.d;
    let offs = probs_offsets(segs, shape.heads);
    probs.resize(*offs.last().unwrap_or(&0), T::zero());
    let parts = par::map(segs, |seg| attend_segment(q, k, v, seg, shape));
    for ((seg, (p, c)), &off) in segs.iter().zip(parts).zip(&offs) {
        probs[off..off + p.len()].copy_from_slice(&p);
        ctx[seg.q_off * d..(seg.q_off + seg.q_len) * d].copy_from_slice(&c);
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_segment_bwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dctx: &[T],
    seg: &Segment,
    shape: &AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnShape { d, heads, causal } = *shape;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (n, m) = (seg.q_len, seg.kv_len);
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); m * d];
    let mut dv = vec![T::zero(); m * d];
    let mut dp = vec![T::zero(); m];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let limit = if causal { i + 1 } else { m };
            let p = &probs[(h * n + i) * m..(h * n + i) * m + limit];
            let gi = &dctx[(seg.q_off + i) * d + c0..(seg.q_off + i) * d + c0 + dh];
            let mut dot = T::zero();
            for j in 0..limit {
                let vj = &v[(seg.kv_off + j) * d + c0..(seg.kv_off + j) * d + c0 + dh];
                dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                dot += dp[j] * p[j];
                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                for (o, &g) in dvj.iter_mut().zip(gi) {
                    *o += p[j] * g;
                }
            }
            let qi = &q[(seg.q_off + i) * d + c0..(seg.q_off + i) * d + c0 + dh];
            for j in 0..limit {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = &k[(seg.kv_off + j) * d + c0..(seg.kv_off + j) * d + c0 + dh];
                let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                for (o, &kk) in dqi.iter_mut().zip(kj) {
                    *o += ds * kk;
                }
                let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                for (o, &qq) in dkj.iter_mut().zip(qi) {
                    *o += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Overwrites `dq`, `dk`, `dv` rows covered by the segments. Key rows of
/// different segments must not overlap.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dctx: &[T],
    segs: &[Segment],
    shape: &AttnShape,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = shape.d;
    let offs = probs_offsets(segs, shape.heads);
    let work: Vec<(Segment, usize)> = segs.iter().copied().zip(offs.iter().copied()).collect();
    let parts = par::map(&work, |(seg, off)| {
        attend_segment_bwd(q, k, v, &probs[*off..*off + seg.probs_len(shape.heads)], dctx, seg, shape)
    });
    for (seg, (gq, gk, gv)) in segs.iter().zip(parts) {
        dq[seg.q_off * d..(seg.q_off + seg.q_len) * d].copy_from_slice(&gq);
        dk[seg.kv_off * d..(seg.kv_off + seg.kv_len) * d].copy_from_slice(&gk);
        dv[seg.kv_off * d..(seg.kv_off + seg.kv_len) * d].copy_from_slice(&gv);
    }
}

pub fn relu_fwd<T: Real>(pre: &[T], act: &mut [T]) {
    for (a, &p) in act.iter_mut().zip(pre) {
        *a = if p > T::zero() { p } else { T::zero() };
    }
}

pub fn relu_bwd<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    let inv = z.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![1.0; m * n];
                matmul(aa, ta, bb, tb, &mut c, m, k, n, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut c = vec![1.0; m * n];
        matmul(&a, false, &b, false, &mut c, m, k, n, true);
        assert!((c[0] - want[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1000.0f64, 1001.0, -5.0, 0.0];
        softmax_row(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut out = vec![0.0; 4];
        log_softmax_row(&[1.0f64, 2.0, 3.0, 4.0], &mut out);
        assert!((out.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let d = 4;
        let seg = Segment { q_off: 0, q_len: 3, kv_off: 0, kv_len: 3 };
        let shape = AttnShape { d, heads: 2, causal: true };
        let q: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
        let k: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut probs = Vec::new();
        let mut ctx = vec![0.0; 12];
        attention_fwd(&q, &k, &v, &[seg], &shape, &mut probs, &mut ctx);
        let first = ctx[..4].to_vec();
        v[8..].fill(100.0);
        attention_fwd(&q, &k, &v, &[seg], &shape, &mut probs, &mut ctx);
        assert_eq!(&ctx[..4], first.as_slice());
        assert_eq!(&ctx[..4], &v[..4]);
    }
}
