// Forward kernels shared by the tape and the gradient-free evaluation path.
// Every reduction runs in a fixed index order so a row's result never
// depends on how many other rows share the batch.

use super::Tensor;
use crate::error::{DddmError, Result};

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(DddmError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `A · Bᵀ` for `A:[m,k]`, `B:[n,k]`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).expect("shape computed above")
}

/// `Aᵀ · B` for `A:[k,m]`, `B:[k,n]`; rows of the batch are summed in order.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("shape computed above")
}

/// Broadcast result of two matrices whose extents are either equal or 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<(usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return None;
    }
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a[0], b[0])?, dim(a[1], b[1])?))
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (r, c) = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| DddmError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let av = a.data()[ia * ac + if ac == 1 { 0 } else { j }];
            let bv = b.data()[ib * bc + if bc == 1 { 0 } else { j }];
            out.push(f(av, bv));
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Sum a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let (r, c) = (grad.shape()[0], grad.shape()[1]);
    let (tr, tc) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(shape.to_vec());
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out.data_mut()[oi * tc + oj] += grad.data()[i * c + j];
        }
    }
    out
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts
        .first()
        .ok_or_else(|| DddmError::Contract("concat of zero tensors".into()))?
        .rows();
    let mut total = 0;
    for p in parts {
        p.require_matrix("concat")?;
        if p.rows() != rows {
            return Err(DddmError::shape(
                "concat",
                format!("row counts {} vs {}", p.rows(), rows),
            ));
        }
        total += p.cols();
    }
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], out)
}

/// Mean over consecutive groups of `group` rows.
pub(crate) fn mean_pool(x: &Tensor, group: usize) -> Result<Tensor> {
    let (r, c) = x.require_matrix("mean_pool")?;
    if group == 0 || r % group != 0 {
        return Err(DddmError::shape("mean_pool", format!("{r} rows in groups of {group}")));
    }
    let g = r / group;
    let mut out = vec![0.0; g * c];
    for gi in 0..g {
        let orow = &mut out[gi * c..(gi + 1) * c];
        for k in 0..group {
            for (o, &v) in orow.iter_mut().zip(x.row(gi * group + k)) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o /= group as f64;
        }
    }
    Tensor::new(vec![g, c], out)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
