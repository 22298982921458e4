//! Data-movement operations: reshape, permute, narrow, concat, pad, roll and
//! table gather. All are pure index shuffles, so their backward rules are the
//! inverse shuffles (with scatter-add where an output cell has fan-in).

use super::{numel, strides_of, Element, OpRecord, Result, Tape, Tensor, TensorError, TensorId};
use std::sync::Arc;

impl<E: Element> Tape<E> {
    /// Reinterpret under a new shape with the same element count. No data
    /// movement; the output shares the input buffer.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let value = self.value(a).reshaped(shape)?;
        self.push_op(value, OpRecord::Reshape { a }, "reshape")
    }

    /// Reorder axes; `perm[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        if !is_permutation(perm, in_shape.len()) {
            return Err(TensorError::DimensionMismatch {
                op: "permute",
                detail: format!("perm {:?} is not a permutation of 0..{}", perm, in_shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut out = vec![E::ZERO; numel(&out_shape)];
        permute_into(&mut out, self.data(a), &in_shape, perm);
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::Permute { a, perm: perm.to_vec() }, "permute")
    }

    /// Contiguous slice `[start, start+len)` along one axis.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] || len == 0 {
            return Err(TensorError::DimensionMismatch {
                op: "narrow",
                detail: format!("axis {axis} [{start}, {start}+{len}) of {in_shape:?}"),
            });
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut out = vec![E::ZERO; numel(&out_shape)];
        copy_axis_block(&mut out, self.data(a), &in_shape, axis, start, len);
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::Narrow { a, axis, start }, "narrow")
    }

    /// Concatenate along one axis; all other extents must match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::DimensionMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut cat_len = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (&a, &b))| i != axis && a != b)
            {
                return Err(TensorError::DimensionMismatch {
                    op: "concat",
                    detail: format!("{s:?} vs {first:?} (axis {axis})"),
                });
            }
            cat_len += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = cat_len;
        let mut out = vec![E::ZERO; numel(&out_shape)];
        let mut offset = 0usize;
        for &id in inputs {
            let part_len = self.shape(id)[axis];
            scatter_axis_block(&mut out, self.data(id), &out_shape, axis, offset, part_len);
            offset += part_len;
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::Concat { inputs: inputs.to_vec(), axis }, "concat")
    }

    /// Zero-pad one axis with `before` leading and `after` trailing slots.
    pub fn pad_zero(&mut self, a: TensorId, axis: usize, before: usize, after: usize) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() {
            return Err(TensorError::DimensionMismatch {
                op: "pad_zero",
                detail: format!("axis {axis} out of range for {in_shape:?}"),
            });
        }
        if before == 0 && after == 0 {
            let value = self.value(a).clone();
            return self.push_op(value, OpRecord::Reshape { a }, "pad_zero");
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] += before + after;
        let mut out = vec![E::ZERO; numel(&out_shape)];
        scatter_axis_block(&mut out, self.data(a), &out_shape, axis, before, in_shape[axis]);
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::Pad { a, axis, before }, "pad_zero")
    }

    /// Cyclic shift along each axis; positive shift moves content toward
    /// higher indices, wrapping around.
    pub fn roll(&mut self, a: TensorId, shifts: &[isize]) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shifts.len() != shape.len() {
            return Err(TensorError::DimensionMismatch {
                op: "roll",
                detail: format!("{} shifts for rank {}", shifts.len(), shape.len()),
            });
        }
        let mut out = vec![E::ZERO; self.value(a).numel()];
        roll_into(&mut out, self.data(a), &shape, shifts);
        let value = Tensor::from_vec(shape, out)?;
        self.push_op(value, OpRecord::Roll { a, shifts: shifts.to_vec() }, "roll")
    }

    /// Row lookup into a 2-D table: output row `k` is `table[indices[k], :]`.
    /// Differentiable with respect to the table (scatter-add backward).
    pub fn gather_rows(&mut self, table: TensorId, indices: &Arc<Vec<u32>>) -> Result<TensorId> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(TensorError::DimensionMismatch {
                op: "gather_rows",
                detail: format!("table must be 2-D, got {tshape:?}"),
            });
        }
        let (rows, cols) = (tshape[0], tshape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(TensorError::DimensionMismatch {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let tdata = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            let base = i as usize * cols;
            out.extend_from_slice(&tdata[base..base + cols]);
        }
        let value = Tensor::from_vec(vec![indices.len(), cols], out)?;
        self.push_op(value, OpRecord::Gather { table, indices: Arc::clone(indices) }, "gather_rows")
    }
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn permute_into<E: Element>(out: &mut [E], input: &[E], in_shape: &[usize], perm: &[usize]) {
    let rank = in_shape.len();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // stride in the input for each output axis
    let gather_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut coords = vec![0usize; rank];
    let mut in_idx = 0usize;
    for slot in out.iter_mut() {
        *slot = input[in_idx];
        // odometer increment over output coordinates
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            in_idx += gather_strides[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            in_idx -= gather_strides[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
}

pub(crate) fn permute_backward<E: Element>(buf: &mut [E], grad: &[E], in_shape: &[usize], perm: &[usize]) {
    // Walk the output in row-major order, accumulating into the input slot.
    let rank = in_shape.len();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let gather_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut coords = vec![0usize; rank];
    let mut in_idx = 0usize;
    for &g in grad.iter() {
        buf[in_idx] += g;
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            in_idx += gather_strides[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            in_idx -= gather_strides[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
}

/// Copy the block `[start, start+len)` along `axis` of `input` (shaped
/// `in_shape`) into `out` (shaped like `in_shape` with `axis` extent `len`).
fn copy_axis_block<E: Element>(
    out: &mut [E],
    input: &[E],
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) {
    let inner: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let in_block = in_shape[axis] * inner;
    let out_block = len * inner;
    for o in 0..outer {
        let src = o * in_block + start * inner;
        let dst = o * out_block;
        out[dst..dst + out_block].copy_from_slice(&input[src..src + out_block]);
    }
}

/// Write `part` (with `axis` extent `part_len`) into `out` (shaped
/// `out_shape`) at offset `offset` along `axis`.
fn scatter_axis_block<E: Element>(
    out: &mut [E],
    part: &[E],
    out_shape: &[usize],
    axis: usize,
    offset: usize,
    part_len: usize,
) {
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let out_block = out_shape[axis] * inner;
    let part_block = part_len * inner;
    for o in 0..outer {
        let dst = o * out_block + offset * inner;
        let src = o * part_block;
        out[dst..dst + part_block].copy_from_slice(&part[src..src + part_block]);
    }
}

pub(crate) fn narrow_backward<E: Element>(
    buf: &mut [E],
    grad: &[E],
    in_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    start: usize,
) {
    let inner: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let in_block = in_shape[axis] * inner;
    let len = out_shape[axis];
    let out_block = len * inner;
    for o in 0..outer {
        let dst = o * in_block + start * inner;
        let src = o * out_block;
        for k in 0..out_block {
            buf[dst + k] += grad[src + k];
        }
    }
}

pub(crate) fn pad_backward<E: Element>(
    buf: &mut [E],
    grad: &[E],
    in_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    before: usize,
) {
    // Gradient of zero-pad is narrow back to the original block.
    let inner: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let in_block = in_shape[axis] * inner;
    let out_block = out_shape[axis] * inner;
    for o in 0..outer {
        let src = o * out_block + before * inner;
        let dst = o * in_block;
        for k in 0..in_block {
            buf[dst + k] += grad[src + k];
        }
    }
}

pub(crate) fn concat_backward<E: Element>(
    tape: &Tape<E>,
    grad: &[E],
    inputs: &[TensorId],
    axis: usize,
    out_shape: &[usize],
    grads: &mut [Option<Vec<E>>],
) {
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let out_block = out_shape[axis] * inner;
    let mut offset = 0usize;
    for &id in inputs {
        let part_len = tape.shape(id)[axis];
        let part_block = part_len * inner;
        if tape.requires_grad(id) {
            if grads[id].is_none() {
                grads[id] = Some(vec![E::ZERO; tape.value(id).numel()]);
            }
            let buf = grads[id].as_mut().unwrap();
            for o in 0..outer {
                let src = o * out_block + offset * inner;
                let dst = o * part_block;
                for k in 0..part_block {
                    buf[dst + k] += grad[src + k];
                }
            }
        }
        offset += part_len;
    }
}

fn roll_into<E: Element>(out: &mut [E], input: &[E], shape: &[usize], shifts: &[isize]) {
    let rank = shape.len();
    let strides = strides_of(shape);
    // normalized non-negative shifts
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &d)| {
            let d = d as isize;
            (((s % d) + d) % d) as usize
        })
        .collect();
    let mut coords = vec![0usize; rank];
    for (flat, &v) in input.iter().enumerate() {
        let _ = flat;
        let mut dst = 0usize;
        for ax in 0..rank {
            let c = (coords[ax] + norm[ax]) % shape[ax];
            dst += c * strides[ax];
        }
        out[dst] = v;
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
}

pub(crate) fn roll_backward<E: Element>(buf: &mut [E], grad: &[E], shape: &[usize], shifts: &[isize]) {
    // Inverse of a roll is the roll by the negated shifts; accumulate.
    let rank = shape.len();
    let strides = strides_of(shape);
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &d)| {
            let d = d as isize;
            (((s % d) + d) % d) as usize
        })
        .collect();
    let mut coords = vec![0usize; rank];
    for slot in buf.iter_mut() {
        // forward wrote input[coords] to out[dst], so d input[coords] += grad[dst]
        let mut dst = 0usize;
        for ax in 0..rank {
            let c = (coords[ax] + norm[ax]) % shape[ax];
            dst += c * strides[ax];
        }
        *slot += grad[dst];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
}

pub(crate) fn gather_backward<E: Element>(buf: &mut [E], grad: &[E], table_shape: &[usize], indices: &[u32]) {
    let cols = table_shape[1];
    for (k, &i) in indices.iter().enumerate() {
        let dst = i as usize * cols;
        let src = k * cols;
        for c in 0..cols {
            buf[dst + c] += grad[src + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn permute_roundtrip_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.leaf(t(&[2, 3, 4], &data), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).as_slice(), data.as_slice());
    }

    #[test]
    fn narrow_concat_inverse() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = tape.leaf(t(&[3, 4], &data), false);
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(back).as_slice(), data.as_slice());
    }

    #[test]
    fn roll_wraps_and_inverts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[0.0, 1.0, 2.0, 3.0]), false);
        let r = tape.roll(x, &[1]).unwrap();
        assert_eq!(tape.value(r).as_slice(), &[3.0, 0.0, 1.0, 2.0]);
        let back = tape.roll(r, &[-1]).unwrap();
        assert_eq!(tape.value(back).as_slice(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pad_then_narrow_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = tape.pad_zero(x, 0, 1, 2).unwrap();
        assert_eq!(tape.shape(p), &[5, 2]);
        assert_eq!(tape.value(p).as_slice()[0..2], [0.0, 0.0]);
        let n = tape.narrow(p, 0, 1, 2).unwrap();
        assert_eq!(tape.value(n).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_rows_and_scatter_grad() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let idx = Arc::new(vec![2u32, 0, 2]);
        let g = tape.gather_rows(table, &idx).unwrap();
        assert_eq!(tape.value(g).as_slice(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
