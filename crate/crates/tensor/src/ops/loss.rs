use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Float> Tape<T> {
    /// Soft dice loss averaged over every `(batch, class)` pair.
    ///
    /// `pred` and `target` are `[B, C, ...]`; for each pair the term is
    /// `1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape != target.shape() {
            return Err(TensorError::mismatch("dice_loss", &shape, target.shape()));
        }
        if shape.len() < 2 {
            return Err(TensorError::invalid("dice_loss", "input needs rank >= 2"));
        }
        if eps <= 0.0 {
            return Err(TensorError::invalid("dice_loss", "eps must be > 0"));
        }
        if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(TensorError::invalid("dice_loss", "target must be binary"));
        }
        let rows = shape[0] * shape[1];
        let len = target.numel() / rows;
        let p = self.value(pred).data();
        let e = T::c(eps);
        let mut total = T::zero();
        for r in 0..rows {
            let (pr, tr) = (&p[r * len..(r + 1) * len], &target.data()[r * len..(r + 1) * len]);
            let inter: T = pr.iter().zip(tr).map(|(&a, &b)| a * b).sum();
            let union = pr.iter().copied().sum::<T>() + tr.iter().copied().sum::<T>() + e;
            total += T::one() - (T::c(2.0) * inter + e) / union;
        }
        let loss = total / T::c(rows as f64);
        self.push(Tensor::scalar(loss), Op::Dice { pred: pred.0, target: target.data().to_vec(), eps: e, rows })
    }
}

pub(crate) fn dice_backward<T: Float>(tape: &Tape<T>, pred: usize, target: &[T], eps: T, rows: usize, g: &[T]) -> Contribs<T> {
    let p = tape.val(pred).data();
    let len = p.len() / rows;
    let scale = g[0] / T::c(rows as f64);
    let mut dp = vec![T::zero(); p.len()];
    for r in 0..rows {
        let (pr, tr) = (&p[r * len..(r + 1) * len], &target[r * len..(r + 1) * len]);
        let inter: T = pr.iter().zip(tr).map(|(&a, &b)| a * b).sum();
        let union = pr.iter().copied().sum::<T>() + tr.iter().copied().sum::<T>() + eps;
        let num = T::c(2.0) * inter + eps;
        for j in 0..len {
            // d/dp_j of -(num / union)
            dp[r * len + j] = -scale * (T::c(2.0) * tr[j] * union - num) / (union * union);
        }
    }
    vec![(pred, dp)]
}
