use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::{numel, strides, Tensor};

/// How the broadcast batch axes of a matmul pair up.
#[derive(Debug, Clone)]
pub(crate) struct BatchPlan {
    n: usize,
    d: usize,
    m: usize,
    /// `(lhs batch index, rhs batch index)` per output batch index.
    pairs: Vec<(usize, usize)>,
    /// Rhs is one matrix shared by every lhs row: a single flat GEMM.
    shared_rhs: bool,
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn batch_index(out_idx: usize, out_shape: &[usize], src_shape: &[usize]) -> usize {
    // src_shape is right-aligned against out_shape; size-1 axes broadcast.
    let offset = out_shape.len() - src_shape.len();
    let out_strides = strides(out_shape);
    let src_strides = strides(src_shape);
    let mut idx = 0;
    for (axis, (&os, &ext)) in out_strides.iter().zip(out_shape).enumerate() {
        let coord = (out_idx / os) % ext;
        if axis >= offset {
            let s = axis - offset;
            if src_shape[s] != 1 {
                idx += coord * src_strides[s];
            }
        }
    }
    idx
}

impl<T: Float> Tape<T> {
    /// `[..., N, D] x [..., D, M] -> [..., N, M]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_counted(a, b, "matmul")
    }

    /// Matmul whose multiply-accumulates are tallied under `counter`.
    pub fn matmul_counted(&mut self, a: Var, b: Var, counter: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::invalid("matmul", "operands need rank >= 2"));
        }
        let (n, d) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (d2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if d != d2 {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let out_batch = broadcast_batch(ba, bb).ok_or_else(|| TensorError::mismatch("matmul", &sa, &sb))?;
        let batches = numel(&out_batch);
        let shared_rhs = numel(bb) == 1 && numel(ba) == batches;
        let pairs = (0..batches).map(|o| (batch_index(o, &out_batch, ba), batch_index(o, &out_batch, bb))).collect();
        let plan = BatchPlan { n, d, m, pairs, shared_rhs };

        let mut out = vec![T::zero(); batches * n * m];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            if plan.shared_rhs {
                gemm(
                    batches * n,
                    d,
                    m,
                    T::one(),
                    va,
                    MatRef::row_major(0, d),
                    vb,
                    MatRef::row_major(0, m),
                    T::zero(),
                    &mut out,
                    MatRef::row_major(0, m),
                );
            } else {
                for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm(
                        n,
                        d,
                        m,
                        T::one(),
                        va,
                        MatRef::row_major(ia * n * d, d),
                        vb,
                        MatRef::row_major(ib * d * m, m),
                        T::zero(),
                        &mut out,
                        MatRef::row_major(o * n * m, m),
                    );
                }
            }
        }
        self.count_macs(counter, (batches * n * d * m) as u64);
        let mut shape = out_batch;
        shape.extend_from_slice(&[n, m]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a: a.0, b: b.0, plan })
    }
}

pub(crate) fn matmul_backward<T: Float>(tape: &Tape<T>, a: usize, b: usize, plan: &BatchPlan, g: &[T]) -> Contribs<T> {
    let BatchPlan { n, d, m, .. } = *plan;
    let (va, vb) = (tape.val(a).data(), tape.val(b).data());
    let mut out = Vec::new();
    if tape.needs(a) {
        let mut ga = vec![T::zero(); va.len()];
        if plan.shared_rhs {
            let rows = plan.pairs.len() * n;
            gemm(
                rows,
                m,
                d,
                T::one(),
                g,
                MatRef::row_major(0, m),
                vb,
                MatRef::transposed(0, m),
                T::zero(),
                &mut ga,
                MatRef::row_major(0, d),
            );
        } else {
            for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm(
                    n,
                    m,
                    d,
                    T::one(),
                    g,
                    MatRef::row_major(o * n * m, m),
                    vb,
                    MatRef::transposed(ib * d * m, m),
                    T::one(),
                    &mut ga,
                    MatRef::row_major(ia * n * d, d),
                );
            }
        }
        out.push((a, ga));
    }
    if tape.needs(b) {
        let mut gb = vec![T::zero(); vb.len()];
        if plan.shared_rhs {
            let rows = plan.pairs.len() * n;
            gemm(
                d,
                rows,
                m,
                T::one(),
                va,
                MatRef::transposed(0, d),
                g,
                MatRef::row_major(0, m),
                T::zero(),
                &mut gb,
                MatRef::row_major(0, m),
            );
        } else {
            for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm(
                    d,
                    n,
                    m,
                    T::one(),
                    va,
                    MatRef::transposed(ia * n * d, d),
                    g,
                    MatRef::row_major(o * n * m, m),
                    T::one(),
                    &mut gb,
                    MatRef::row_major(ib * d * m, m),
                );
            }
        }
        out.push((b, gb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm(a: Tensor<f64>, b: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(a, b)?;
        Ok(tape.value(c).clone())
    }

    #[test]
    fn small_product() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(mm(a, b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_and_zero() {
        let a = Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(mm(eye, a.clone()).unwrap(), a);
        assert!(mm(Tensor::zeros(&[3, 3]), a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_dim_mismatch_is_an_error() {
        assert!(mm(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])).is_err());
        assert!(mm(Tensor::zeros(&[2, 2, 3]), Tensor::zeros(&[3, 3, 1])).is_err());
    }

    #[test]
    fn broadcast_batch_shapes() {
        let out = mm(Tensor::ones(&[2, 1, 3, 4]), Tensor::ones(&[5, 4, 2])).unwrap();
        assert_eq!(out.shape(), &[2, 5, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn counter_tallies_macs() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[2, 3, 4]));
        let b = tape.constant(Tensor::ones(&[2, 4, 5]));
        tape.matmul_counted(a, b, "probe").unwrap();
        assert_eq!(tape.macs("probe"), 2 * 3 * 4 * 5);
        assert_eq!(tape.macs("other"), 0);
    }
}
