//! Sequential reference kernels over row-major `f64` buffers.

/// `C[m,n] = op(A) * op(B)` where `op` optionally transposes. `a` is stored
/// as `[m,k]` (or `[k,m]` when `ta`), `b` as `[k,n]` (or `[n,k]` when `tb`).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (r, bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        }
    }
    c
}

/// Product of dims before `axis` and after it.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Splits along `axis` into `num` equal parts.
pub fn split(data: &[f64], shape: &[usize], axis: usize, num: usize) -> Vec<Vec<f64>> {
    let (outer, inner) = outer_inner(shape, axis);
    let part = shape[axis] / num;
    let block = part * inner;
    let mut parts = vec![Vec::with_capacity(outer * block); num];
    for o in 0..outer {
        let base = o * shape[axis] * inner;
        for (j, p) in parts.iter_mut().enumerate() {
            let s = base + j * block;
            p.extend_from_slice(&data[s..s + block]);
        }
    }
    parts
}

/// Concatenates along `axis`; all shapes agree off-axis.
pub fn concat(parts: &[(&[f64], &[usize])], axis: usize) -> Vec<f64> {
    let (outer, inner) = outer_inner(parts[0].1, axis);
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, shape) in parts {
            let block = shape[axis] * inner;
            out.extend_from_slice(&data[o * block..(o + 1) * block]);
        }
    }
    out
}

pub fn transpose(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * strides[p]).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
