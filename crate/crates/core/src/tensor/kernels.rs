use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m × k` and `op(b)` of shape `k × n`.
///
/// With `ta` set, `a` is stored as `k × m`; with `tb` set, `b` is stored as
/// `n × k`. `accumulate` adds into `c` instead of overwriting it.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are bounds-checked above against the strides used.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape of a same-rank broadcast where each axis either matches or is 1.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` read through a broadcast to `out`: zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == o { st } else { 0 })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub(crate) fn broadcast_for_each(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if a == out && b == out {
        for o in 0..out.iter().product() {
            f(o, o, o);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let base_a: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(o, base_a + j * ia_step, base_b + j * ib_step);
            o += 1;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Rational minimax approximation of `tanh`, within a few ulp over f32.
pub(crate) fn fast_tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    if x.abs() < 4e-4 {
        return x;
    }
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = x2 * -2.760_768_5e-16 + 2.000_188e-13;
    p = x2 * p + -8.604_672e-11;
    p = x2 * p + 5.122_297e-8;
    p = x2 * p + 1.485_722_4e-5;
    p = x2 * p + 6.372_619_3e-4;
    p = x2 * p + 4.893_524_6e-3;
    p *= x;
    let mut q = x2 * 1.198_258_4e-6 + 1.185_347e-4;
    q = x2 * q + 2.268_434_6e-3;
    q = x2 * q + 4.893_525e-3;
    p / q
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = data.len() / inner;
    for _ in 0..outer {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&src_strides)
            .map(|(i, s)| i * s)
            .sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.71).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, k, n, &a, &b, &mut c, false);
                let r = naive(ta, tb, m, k, n, &a, &b);
                for (x, y) in c.iter().zip(&r) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let (s, out) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[k * 6 + i * 3 + j], data[i * 12 + j * 4 + k]);
                }
            }
        }
        let (s2, back) = permute(&out, &s, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn fast_tanh_matches_std() {
        let worst = (-4000..=4000)
            .map(|i| i as f32 / 400.0)
            .map(|x| (fast_tanh(x) - x.tanh()).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 1, 3], &[1, 4, 3]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 3]).is_err());
        assert!(broadcast_shape("t", &[2, 3], &[3]).is_err());
        let mut pairs = vec![];
        broadcast_for_each(&[2, 2], &[2, 1], &[1, 2], |o, a, b| pairs.push((o, a, b)));
        assert_eq!(pairs, vec![(0, 0, 0), (1, 0, 1), (2, 1, 0), (3, 1, 1)]);
    }
}
