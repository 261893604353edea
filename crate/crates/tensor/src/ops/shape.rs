use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::{numel, strides, Tensor};

/// Gathers `src` (shape `shape`) into the axis order `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        for i in 0..inner {
            out.push(src[offset + i * inner_step]);
        }
        // advance the odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= step[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Float> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(TensorError::mismatch("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x.0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(Tensor::from_parts(out_shape, data), Op::Permute { x: x.0, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(TensorError::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let chunk = ext * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat { parts: parts.iter().map(|v| v.0).collect(), axis })
    }

    /// The slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid("narrow", format!("{start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        self.push(Tensor::from_parts(out, data), Op::Narrow { x: x.0, axis, start })
    }
}

pub(crate) fn narrow_backward<T: Float>(tape: &Tape<T>, x: usize, axis: usize, start: usize, g: &[T]) -> Contribs<T> {
    let shape = tape.val(x).shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = g.len() / (outer * inner);
    let mut grad = vec![T::zero(); tape.val(x).numel()];
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        grad[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    vec![(x, grad)]
}

pub(crate) fn permute_backward<T: Float>(tape: &Tape<T>, x: usize, perm: &[usize], g: &[T]) -> Contribs<T> {
    let in_shape = tape.val(x).shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    vec![(x, permute_data(g, &out_shape, &inverse(perm)))]
}

pub(crate) fn concat_backward<T: Float>(tape: &Tape<T>, parts: &[usize], axis: usize, g: &[T]) -> Contribs<T> {
    let first = tape.val(parts[0]).shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let exts: Vec<usize> = parts.iter().map(|&p| tape.val(p).shape()[axis]).collect();
    let total: usize = exts.iter().sum();
    let mut grads: Vec<Vec<T>> = exts.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (k, &e) in exts.iter().enumerate() {
            grads[k].extend_from_slice(&g[off..off + e * inner]);
            off += e * inner;
        }
    }
    parts.iter().copied().zip(grads).collect()
}
