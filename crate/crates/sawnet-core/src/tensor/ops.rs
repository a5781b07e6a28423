//! Raw kernels behind the tape ops.
//!
//! All kernels accumulate in a fixed order. Rayon is only ever applied
//! across disjoint output blocks, so results are bit-identical whatever the
//! thread count. That property is load bearing: run-to-run determinism of
//! training is asserted by tests.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Work threshold (multiply-adds) below which parallel dispatch costs more
/// than it saves.
const PAR_MIN: usize = 1 << 19;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Batched matmul plan: `a` is `[.., m, p]`, `b` is `[.., p, q]`, leading
/// dims broadcast against each other after left-padding with 1s.
pub struct MatmulPlan {
    pub batch: Vec<usize>,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    /// Per-batch-axis element offsets into `a`/`b`; zero on broadcast axes.
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    pub a_broadcast: bool,
    pub b_broadcast: bool,
}

impl MatmulPlan {
    pub fn new(a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(mismatch());
        }
        let (m, p) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (p2, q) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if p != p2 {
            return Err(mismatch());
        }
        let ab = &a_shape[..a_shape.len() - 2];
        let bb = &b_shape[..b_shape.len() - 2];
        let rank = ab.len().max(bb.len());
        let mut batch = vec![0usize; rank];
        let mut a_dims = vec![1usize; rank];
        let mut b_dims = vec![1usize; rank];
        a_dims[rank - ab.len()..].copy_from_slice(ab);
        b_dims[rank - bb.len()..].copy_from_slice(bb);
        for i in 0..rank {
            batch[i] = match (a_dims[i], b_dims[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            };
        }
        let a_full = strides(&a_dims.iter().chain([&m, &p]).copied().collect::<Vec<_>>());
        let b_full = strides(&b_dims.iter().chain([&p, &q]).copied().collect::<Vec<_>>());
        let a_strides: Vec<usize> = (0..rank)
            .map(|i| if a_dims[i] == 1 { 0 } else { a_full[i] })
            .collect();
        let b_strides: Vec<usize> = (0..rank)
            .map(|i| if b_dims[i] == 1 { 0 } else { b_full[i] })
            .collect();
        let a_broadcast = a_dims.iter().zip(&batch).any(|(a, b)| a != b);
        let b_broadcast = b_dims.iter().zip(&batch).any(|(a, b)| a != b);
        Ok(Self {
            batch,
            m,
            p,
            q,
            a_broadcast,
            b_broadcast,
            a_strides,
            b_strides,
        })
    }

    pub fn batch_numel(&self) -> usize {
        self.batch.iter().product()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.q);
        s
    }

    fn offsets(&self, mut flat: usize) -> (usize, usize) {
        let (mut ao, mut bo) = (0usize, 0usize);
        for i in (0..self.batch.len()).rev() {
            let idx = flat % self.batch[i];
            flat /= self.batch[i];
            ao += idx * self.a_strides[i];
            bo += idx * self.b_strides[i];
        }
        (ao, bo)
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn mm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            orow[j] += s;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
fn mm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub fn matmul_forward<T: Element>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let plan = MatmulPlan::new(a_shape, b_shape)?;
    let nb = plan.batch_numel();
    let (m, p, q) = (plan.m, plan.p, plan.q);
    let mut out = vec![T::zero(); nb * m * q];
    let work = nb * m * p * q;
    if work >= PAR_MIN && nb > 1 {
        out.par_chunks_mut(m * q).enumerate().for_each(|(f, block)| {
            let (ao, bo) = plan.offsets(f);
            mm_nn(m, p, q, &a[ao..ao + m * p], &b[bo..bo + p * q], block);
        });
    } else if work >= PAR_MIN && m > 1 {
        // single large matrix: split output rows
        let rows_per = (m / rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(rows_per * q)
            .enumerate()
            .for_each(|(c, block)| {
                let i0 = c * rows_per;
                let rows = block.len() / q;
                mm_nn(rows, p, q, &a[i0 * p..(i0 + rows) * p], b, block);
            });
    } else {
        for f in 0..nb {
            let (ao, bo) = plan.offsets(f);
            mm_nn(
                m,
                p,
                q,
                &a[ao..ao + m * p],
                &b[bo..bo + p * q],
                &mut out[f * m * q..(f + 1) * m * q],
            );
        }
    }
    Ok((plan.out_shape(), out))
}

/// Gradients of batched matmul. Broadcast batch axes accumulate in flat
/// batch order.
pub fn matmul_backward<T: Element>(
    g: &[T],
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    need_da: bool,
    need_db: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let plan = MatmulPlan::new(a_shape, b_shape)?;
    let nb = plan.batch_numel();
    let (m, p, q) = (plan.m, plan.p, plan.q);
    let work = nb * m * p * q;
    let da = if need_da {
        let mut da = vec![T::zero(); a.len()];
        if !plan.a_broadcast && work >= PAR_MIN && nb > 1 {
            da.par_chunks_mut(m * p).enumerate().for_each(|(f, block)| {
                let (_, bo) = plan.offsets(f);
                mm_nt(m, q, p, &g[f * m * q..(f + 1) * m * q], &b[bo..bo + p * q], block);
            });
        } else {
            for f in 0..nb {
                let (ao, bo) = plan.offsets(f);
                mm_nt(
                    m,
                    q,
                    p,
                    &g[f * m * q..(f + 1) * m * q],
                    &b[bo..bo + p * q],
                    &mut da[ao..ao + m * p],
                );
            }
        }
        Some(da)
    } else {
        None
    };
    let db = if need_db {
        let mut db = vec![T::zero(); b.len()];
        if !plan.b_broadcast && work >= PAR_MIN && nb > 1 {
            db.par_chunks_mut(p * q).enumerate().for_each(|(f, block)| {
                let (ao, _) = plan.offsets(f);
                mm_tn(p, m, q, &a[ao..ao + m * p], &g[f * m * q..(f + 1) * m * q], block);
            });
        } else {
            for f in 0..nb {
                let (ao, bo) = plan.offsets(f);
                mm_tn(
                    p,
                    m,
                    q,
                    &a[ao..ao + m * p],
                    &g[f * m * q..(f + 1) * m * q],
                    &mut db[bo..bo + p * q],
                );
            }
        }
        Some(db)
    } else {
        None
    };
    Ok((da, db))
}

/// Splits a shape at `axis` into (outer, extent, inner) for reductions.
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max over `axis`, plus the winning index per output slot. Ties keep the
/// lowest index, so results are stable under reordering of equal values
/// elsewhere.
pub fn reduce_max_forward<T: Element>(
    x: &[T],
    shape: &[usize],
    axis: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    let (outer, extent, inner) = axis_split(shape, axis)?;
    if extent == 0 {
        return Err(Error::BadShape {
            op: "reduce_max",
            msg: "cannot reduce an empty axis".into(),
            shape: shape.to_vec(),
        });
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let mut vals = vec![T::zero(); outer * inner];
    let mut args = vec![0usize; outer * inner];
    for o in 0..outer {
        let base = o * extent * inner;
        for i in 0..inner {
            let mut best = x[base + i];
            let mut arg = 0usize;
            for e in 1..extent {
                let v = x[base + e * inner + i];
                if v > best {
                    best = v;
                    arg = e;
                }
            }
            vals[o * inner + i] = best;
            args[o * inner + i] = arg;
        }
    }
    Ok((out_shape, vals, args))
}

pub fn concat_forward<T: Element>(
    parts: &[(&[T], &[usize])],
    axis: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let (first_data, first_shape) = parts[0];
    let rank = first_shape.len();
    if axis >= rank {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    let mut total_axis = first_shape[axis];
    for &(_, s) in &parts[1..] {
        let compatible = s.len() == rank
            && s.iter()
                .zip(first_shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first_shape.to_vec(),
                rhs: s.to_vec(),
            });
        }
        total_axis += s[axis];
    }
    let mut out_shape = first_shape.to_vec();
    out_shape[axis] = total_axis;
    let (outer, _, inner) = axis_split(&out_shape, axis)?;
    let mut out = vec![T::zero(); outer * total_axis * inner];
    let _ = first_data;
    let mut offset = 0usize;
    for &(data, shape) in parts {
        let extent = shape[axis];
        let chunk = extent * inner;
        for o in 0..outer {
            let dst = (o * total_axis + offset) * inner;
            out[dst..dst + chunk].copy_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
        offset += extent;
    }
    Ok((out_shape, out))
}

pub fn slice_forward<T: Element>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let (outer, extent, inner) = axis_split(shape, axis)?;
    if start + len > extent || len == 0 {
        return Err(Error::BadShape {
            op: "slice",
            msg: format!("range {start}..{} exceeds axis extent {extent}", start + len),
            shape: shape.to_vec(),
        });
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = (o * extent + start) * inner;
        out[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&x[src..src + len * inner]);
    }
    Ok((out_shape, out))
}

/// Repeats a length-1 axis `n` times.
pub fn broadcast_axis_forward<T: Element>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    n: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    let (outer, extent, inner) = axis_split(shape, axis)?;
    if extent != 1 {
        return Err(Error::BadShape {
            op: "broadcast_axis",
            msg: format!("axis {axis} must have extent 1 to broadcast"),
            shape: shape.to_vec(),
        });
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = n;
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &x[o * inner..(o + 1) * inner];
        for e in 0..n {
            out[(o * n + e) * inner..(o * n + e + 1) * inner].copy_from_slice(src);
        }
    }
    Ok((out_shape, out))
}

/// out[b, i, s, :] = x[b, idx[b, i, s], :] for x `[B, N, C]`, idx `[B, I, S]`.
pub fn gather_points_forward<T: Element>(
    x: &[T],
    x_shape: &[usize],
    idx: &[usize],
    idx_shape: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    if x_shape.len() != 3 || idx_shape.len() != 3 || x_shape[0] != idx_shape[0] {
        return Err(Error::ShapeMismatch {
            op: "gather_points",
            lhs: x_shape.to_vec(),
            rhs: idx_shape.to_vec(),
        });
    }
    let (b, n, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let (i_n, s) = (idx_shape[1], idx_shape[2]);
    let mut out = vec![T::zero(); b * i_n * s * c];
    for bi in 0..b {
        for ii in 0..i_n {
            for si in 0..s {
                let j = idx[(bi * i_n + ii) * s + si];
                if j >= n {
                    return Err(Error::Corruption(format!(
                        "neighbor index {j} out of range for {n} points"
                    )));
                }
                let src = (bi * n + j) * c;
                let dst = ((bi * i_n + ii) * s + si) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    Ok((vec![b, i_n, s, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2d() {
        // [[1,2,3]] x [[1],[1],[1]] = [[6]]
        let (shape, out) =
            matmul_forward::<f64>(&[1.0, 2.0, 3.0], &[1, 3], &[1.0, 1.0, 1.0], &[3, 1]).unwrap();
        assert_eq!(shape, vec![1, 1]);
        assert_eq!(out, vec![6.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let (_, out) = matmul_forward(&a, &[2, 2], &eye, &[2, 2]).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
        let zero = [0.0; 4];
        let (_, out) = matmul_forward(&a, &[2, 2], &zero, &[2, 2]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        // a: [2,1,2,2] times b: [2,2] -> [2,1,2,2]
        let a: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let b = [1.0, 0.0, 0.0, 1.0];
        let (shape, out) = matmul_forward(&a, &[2, 1, 2, 2], &b, &[2, 2]).unwrap();
        assert_eq!(shape, vec![2, 1, 2, 2]);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul_forward::<f32>(&[0.0; 4], &[2, 2], &[0.0; 3], &[3, 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_backward_reduces_broadcast_axes() {
        // b [2,2] shared across batch of 3: db must sum over the batch.
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let b = [1.0, 2.0, 3.0, 4.0];
        let g = vec![1.0; 12];
        let (da, db) =
            matmul_backward(&g, &a, &[3, 2, 2], &b, &[2, 2], true, true).unwrap();
        let da = da.unwrap();
        let db = db.unwrap();
        assert_eq!(da.len(), 12);
        assert_eq!(db.len(), 4);
        // db[p,q] = sum over batch,m of a[.,m,p] * g = column sums of a
        let col0: f64 = (0..6).map(|r| a[r * 2]).sum();
        let col1: f64 = (0..6).map(|r| a[r * 2 + 1]).sum();
        assert_eq!(db, vec![col0, col0, col1, col1]);
        // da rows: g row . b^T => [b00+b01, b10+b11]
        assert_eq!(&da[..2], &[3.0, 7.0]);
    }

    #[test]
    fn reduce_max_rows() {
        let (shape, vals, args) =
            reduce_max_forward(&[1.0f32, 5.0, 3.0, 2.0], &[2, 2], 1).unwrap();
        assert_eq!(shape, vec![2]);
        assert_eq!(vals, vec![5.0, 3.0]);
        assert_eq!(args, vec![1, 0]);
    }

    #[test]
    fn reduce_max_tie_takes_lowest_index() {
        let (_, vals, args) = reduce_max_forward(&[2.0f32, 2.0, 2.0], &[3], 0).unwrap();
        assert_eq!(vals, vec![2.0]);
        assert_eq!(args, vec![0]);
    }

    #[test]
    fn reduce_max_singleton_axis() {
        let (shape, vals, args) = reduce_max_forward(&[4.0f32, 7.0], &[2, 1], 1).unwrap();
        assert_eq!(shape, vec![2]);
        assert_eq!(vals, vec![4.0, 7.0]);
        assert_eq!(args, vec![0, 0]);
    }

    #[test]
    fn reduce_max_axis_out_of_range() {
        assert!(matches!(
            reduce_max_forward(&[1.0f32], &[1], 3),
            Err(Error::AxisOutOfRange { axis: 3, rank: 1 })
        ));
    }

    #[test]
    fn concat_vectors() {
        let (shape, out) =
            concat_forward::<f64>(&[(&[1.0, 2.0], &[2]), (&[3.0], &[1])], 0).unwrap();
        assert_eq!(shape, vec![3]);
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_feature_axis() {
        let a: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let (shape, _) = concat_forward(&[(&a[..], &[2, 3, 2][..]), (&a[..], &[2, 3, 2][..])], 2)
            .unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
    }

    #[test]
    fn concat_rejects_mismatched_other_axes() {
        let err = concat_forward::<f32>(
            &[(&[0.0; 6], &[2, 3][..]), (&[0.0; 8], &[2, 4][..])],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("concat"));
    }

    #[test]
    fn slice_then_concat_round_trip() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let shape = [2, 3, 4];
        let (s1, p1) = slice_forward(&x, &shape, 1, 0, 1).unwrap();
        let (s2, p2) = slice_forward(&x, &shape, 1, 1, 2).unwrap();
        let (shape2, back) =
            concat_forward(&[(&p1[..], &s1[..]), (&p2[..], &s2[..])], 1).unwrap();
        assert_eq!(shape2.as_slice(), &shape);
        assert_eq!(back, x);
    }

    #[test]
    fn broadcast_axis_repeats() {
        let (shape, out) = broadcast_axis_forward(&[1.0f32, 2.0], &[2, 1], 1, 3).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(out, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_points_basic() {
        // x: batch 1, 3 points, 2 channels
        let x = [10.0f32, 11.0, 20.0, 21.0, 30.0, 31.0];
        let idx = [2usize, 0, 1, 1];
        let (shape, out) = gather_points_forward(&x, &[1, 3, 2], &idx, &[1, 2, 2]).unwrap();
        assert_eq!(shape, vec![1, 2, 2, 2]);
        assert_eq!(out, vec![30.0, 31.0, 10.0, 11.0, 20.0, 21.0, 20.0, 21.0]);
    }

    #[test]
    fn gather_points_rejects_out_of_range() {
        let x = [0.0f32; 6];
        let idx = [5usize];
        assert!(matches!(
            gather_points_forward(&x, &[1, 3, 2], &idx, &[1, 1, 1]),
            Err(Error::Corruption(_))
        ));
    }
}
