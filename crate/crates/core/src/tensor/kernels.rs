//! Raw dense kernels over row-major slices.
//!
//! Everything here is shape-unaware plumbing: callers validate dimensions and
//! hand in correctly sized buffers. Matrix kernels accumulate into their
//! output (`c += ...`) so the same code paths serve forward products and
//! gradient accumulation. Parallel paths partition by output row, which keeps
//! results bit-identical regardless of thread count.

use super::Elem;
use rayon::prelude::*;

/// Multiply-accumulate count above which matrix kernels fan out to rayon.
const PAR_MACS: usize = 1 << 18;

/// Row count above which row-wise elementwise kernels fan out to rayon.
const PAR_ROWS: usize = 256;

/// c += a · b, with a: m×k, b: k×n, c: m×n.
pub fn matmul_nn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// c += a · bᵀ, with a: m×k, b: n×k, c: m×n. Both operands are read row-wise.
pub fn matmul_nt<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s = s + av * bv;
            }
            *cv = *cv + s;
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// c += aᵀ · b, with a: m×k, b: m×n, c: k×n.
pub fn matmul_tn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let row = |p: usize, crow: &mut [E]| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(p, crow)| row(p, crow));
    } else {
        for (p, crow) in c.chunks_mut(n).enumerate() {
            row(p, crow);
        }
    }
}

/// Numerically stabilized softmax over the middle extent of an
/// (outer, axis, inner) decomposition, written into `out`.
pub fn softmax<E: Elem>(x: &[E], out: &mut [E], outer: usize, asize: usize, inner: usize) {
    if inner == 1 {
        let row = |xrow: &[E], orow: &mut [E]| {
            let mut mx = xrow[0];
            for &v in xrow {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = E::one() / sum;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        };
        if outer >= PAR_ROWS {
            out.par_chunks_mut(asize)
                .zip(x.par_chunks(asize))
                .for_each(|(orow, xrow)| row(xrow, orow));
        } else {
            for (orow, xrow) in out.chunks_mut(asize).zip(x.chunks(asize)) {
                row(xrow, orow);
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * asize * inner + i;
            let mut mx = x[base];
            for a in 1..asize {
                let v = x[base + a * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for a in 0..asize {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                sum = sum + e;
            }
            let inv = E::one() / sum;
            for a in 0..asize {
                out[base + a * inner] = out[base + a * inner] * inv;
            }
        }
    }
}

/// Backward of softmax: dx_i = s_i · (g_i − Σ_j g_j s_j) along the axis.
pub fn softmax_backward<E: Elem>(
    s: &[E],
    g: &[E],
    dx: &mut [E],
    outer: usize,
    asize: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * asize * inner + i;
            let mut dot = E::zero();
            for a in 0..asize {
                let idx = base + a * inner;
                dot = dot + g[idx] * s[idx];
            }
            for a in 0..asize {
                let idx = base + a * inner;
                dx[idx] = dx[idx] + s[idx] * (g[idx] - dot);
            }
        }
    }
}

/// Layer norm over the last axis: per row, standardize then apply gain/bias.
pub fn layer_norm<E: Elem>(x: &[E], gain: &[E], bias: &[E], eps: E, out: &mut [E], d: usize) {
    let row = |xrow: &[E], orow: &mut [E]| {
        let df = E::from_f64(d as f64);
        let mut mean = E::zero();
        for &v in xrow {
            mean = mean + v;
        }
        mean = mean / df;
        let mut var = E::zero();
        for &v in xrow {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / df;
        let inv_std = E::one() / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in orow.iter_mut().zip(xrow).zip(gain.iter().zip(bias)) {
            *o = (v - mean) * inv_std * g + b;
        }
    };
    let rows = x.len() / d;
    if rows >= PAR_ROWS {
        out.par_chunks_mut(d)
            .zip(x.par_chunks(d))
            .for_each(|(orow, xrow)| row(xrow, orow));
    } else {
        for (orow, xrow) in out.chunks_mut(d).zip(x.chunks(d)) {
            row(xrow, orow);
        }
    }
}

/// Backward of layer norm. Accumulates into dx, dgain, dbias.
pub fn layer_norm_backward<E: Elem>(
    x: &[E],
    gain: &[E],
    g: &[E],
    eps: E,
    dx: &mut [E],
    dgain: &mut [E],
    dbias: &mut [E],
    d: usize,
) {
    let df = E::from_f64(d as f64);
    let rows = x.len() / d;
    for r in 0..rows {
        let xrow = &x[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let mut mean = E::zero();
        for &v in xrow {
            mean = mean + v;
        }
        mean = mean / df;
        let mut var = E::zero();
        for &v in xrow {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / df;
        let inv_std = E::one() / (var + eps).sqrt();

        let mut dxhat_sum = E::zero();
        let mut dxhat_xhat_sum = E::zero();
        for j in 0..d {
            let xhat = (xrow[j] - mean) * inv_std;
            let dxhat = grow[j] * gain[j];
            dgain[j] = dgain[j] + grow[j] * xhat;
            dbias[j] = dbias[j] + grow[j];
            dxhat_sum = dxhat_sum + dxhat;
            dxhat_xhat_sum = dxhat_xhat_sum + dxhat * xhat;
        }
        let dxrow = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xrow[j] - mean) * inv_std;
            let dxhat = grow[j] * gain[j];
            dxrow[j] =
                dxrow[j] + inv_std / df * (df * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
        }
    }
}

/// Tanh-approximation GELU.
pub fn gelu<E: Elem>(x: &[E], out: &mut [E]) {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    for (o, &v) in out.iter_mut().zip(x) {
        let inner = c * (v + k * v * v * v);
        *o = half * v * (E::one() + inner.tanh());
    }
}

/// Backward of the tanh-approximation GELU (exact derivative of the approximation).
pub fn gelu_backward<E: Elem>(x: &[E], g: &[E], dx: &mut [E]) {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    for ((d, &v), &gv) in dx.iter_mut().zip(x).zip(g) {
        let inner = c * (v + k * v * v * v);
        let t = inner.tanh();
        let sech2 = E::one() - t * t;
        let dinner = c * (E::one() + three * k * v * v);
        *d = *d + gv * (half * (E::one() + t) + half * v * sech2 * dinner);
    }
}

/// Broadcast two shapes by numpy trailing-alignment rules.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// True when `small` tiles `big` contiguously from the trailing axes, i.e.
/// `big` is `small` repeated whole. Covers bias adds and mask adds.
pub fn is_suffix_shape(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Expand `src` (shape `from`) into `dst` (shape `to`), both row-major,
/// where `from` broadcasts to `to`.
pub fn broadcast_expand<E: Elem>(src: &[E], from: &[usize], dst: &mut [E], to: &[usize]) {
    if is_suffix_shape(to, from) {
        for chunk in dst.chunks_mut(src.len().max(1)) {
            chunk.copy_from_slice(src);
        }
        return;
    }
    let nd = to.len();
    let mut padded = vec![1usize; nd];
    padded[nd - from.len()..].copy_from_slice(from);
    let mut coords = vec![0usize; nd];
    for (flat, d) in dst.iter_mut().enumerate() {
        let mut rem = flat;
        for i in (0..nd).rev() {
            coords[i] = rem % to[i];
            rem /= to[i];
        }
        let mut sf = 0usize;
        let mut stride = 1usize;
        for i in (0..nd).rev() {
            let c = if padded[i] == 1 { 0 } else { coords[i] };
            sf += c * stride;
            stride *= padded[i];
        }
        *d = src[sf];
    }
}

/// Reduce `grad` (shape `from`) into `dst` (shape `to`) by summing over the
/// broadcast axes; the inverse of `broadcast_expand`.
pub fn broadcast_reduce<E: Elem>(grad: &[E], from: &[usize], dst: &mut [E], to: &[usize]) {
    if from == to {
        for (d, &g) in dst.iter_mut().zip(grad) {
            *d = *d + g;
        }
        return;
    }
    if is_suffix_shape(from, to) {
        let len = dst.len().max(1);
        for chunk in grad.chunks(len) {
            for (d, &g) in dst.iter_mut().zip(chunk) {
                *d = *d + g;
            }
        }
        return;
    }
    let nd = from.len();
    let mut padded = vec![1usize; nd];
    padded[nd - to.len()..].copy_from_slice(to);
    let mut coords = vec![0usize; nd];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for i in (0..nd).rev() {
            coords[i] = rem % from[i];
            rem /= from[i];
        }
        let mut sf = 0usize;
        let mut stride = 1usize;
        for i in (0..nd).rev() {
            let c = if padded[i] == 1 { 0 } else { coords[i] };
            sf += c * stride;
            stride *= padded[i];
        }
        dst[sf] = dst[sf] + g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_identity() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        let mut c = vec![0.0; 4];
        matmul_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_variants_agree() {
        // (a·b) computed three ways via explicit transposes.
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect(); // 3x4
        let mut c_nn = vec![0.0; 8];
        matmul_nn(&a, &b, &mut c_nn, 2, 3, 4);

        // bᵀ is 4x3; nt path should reproduce c.
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c_nt = vec![0.0; 8];
        matmul_nt(&a, &bt, &mut c_nt, 2, 3, 4);
        assert_eq!(c_nn, c_nt);

        // aᵀ is 3x2; tn path should reproduce c.
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c_tn = vec![0.0; 8];
        matmul_tn(&at, &b, &mut c_tn, 3, 2, 4);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![0.1f64, 0.7, -0.3, 2.0, 1.0, -1.0];
        let mut out = vec![0.0; 6];
        softmax(&x, &mut out, 2, 3, 1);
        for row in out.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        // shape (2,2,2), softmax over axis 1 -> outer=2, asize=2, inner=2
        let x = vec![1.0f64, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0];
        let mut out = vec![0.0; 8];
        softmax(&x, &mut out, 2, 2, 2);
        for o in 0..2 {
            for i in 0..2 {
                let s = out[o * 4 + i] + out[o * 4 + 2 + i];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_suffix_detection() {
        assert!(is_suffix_shape(&[5, 3, 4], &[4]));
        assert!(is_suffix_shape(&[5, 3, 4], &[3, 4]));
        assert!(!is_suffix_shape(&[5, 3, 4], &[5, 4]));
        assert_eq!(broadcast_shapes(&[5, 1, 4], &[3, 1]), Some(vec![5, 3, 4]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_expand_reduce_roundtrip() {
        let src = vec![1.0f64, 2.0];
        let mut big = vec![0.0; 6];
        broadcast_expand(&src, &[2], &mut big, &[3, 2]);
        assert_eq!(big, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let mut back = vec![0.0; 2];
        broadcast_reduce(&big, &[3, 2], &mut back, &[2]);
        assert_eq!(back, vec![3.0, 6.0]);
    }
}
