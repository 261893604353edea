use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics; `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> BatchStats<T> {
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn blend_into(&self, mean: &mut [T], var: &mut [T], momentum: f64) {
        let (m, r) = (T::c(momentum), T::c(1.0 - momentum));
        mean.iter_mut().zip(&self.mean).for_each(|(a, &b)| *a = m * *a + r * b);
        var.iter_mut().zip(&self.var).for_each(|(a, &b)| *a = m * *a + r * b);
    }
}

fn check_eps(op: &'static str, eps: f64) -> Result<()> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::invalid(op, format!("eps must be > 0, got {eps}")));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    /// Batch normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        check_eps("batch_norm", eps)?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "input needs rank >= 2"));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::mismatch("batch_norm", &shape, self.shape(gamma)));
        }
        let plane: usize = shape[2..].iter().product();
        let batch = shape[0];
        let n = batch * plane;
        let xv = self.value(x).data();
        // Visits each contiguous `(image, channel)` plane.
        let planes = || (0..batch * c).map(|bc| (bc % c, bc * plane..(bc + 1) * plane));

        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                for (ch, r) in planes() {
                    mean[ch] += xv[r].iter().copied().sum::<T>();
                }
                mean.iter_mut().for_each(|m| *m /= T::c(n as f64));
                let mut var = vec![T::zero(); c];
                for (ch, r) in planes() {
                    let m = mean[ch];
                    var[ch] += xv[r].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                var.iter_mut().for_each(|v| *v /= T::c(n as f64));
                let correction = if n > 1 { T::c(n as f64 / (n as f64 - 1.0)) } else { T::one() };
                let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|&v| v * correction).collect() };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::invalid("batch_norm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(eps)).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for (ch, r) in planes() {
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xv[r]) {
                *h = (v - m) * is;
                *o = ga * *h + be;
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        let out = Tensor::from_parts(shape, y);
        let v = self.push(out, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train })?;
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        check_eps("layer_norm", eps)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::invalid("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + T::c(eps)).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                y[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let out = Tensor::from_parts(shape, y);
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std })
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Float>(
    tape: &Tape<T>,
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &[T],
) -> Contribs<T> {
    let shape = tape.val(x).shape();
    let (batch, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let n = T::c((batch * plane) as f64);
    let gv = tape.val(gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
                let dh = g[i] * gv[ch];
                sum_dxhat[ch] += dh;
                sum_dxhat_xhat[ch] += dh * xhat[i];
            }
        }
    }
    let mut out = Vec::new();
    if tape.needs(x) {
        let mut dx = vec![T::zero(); g.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let dh = g[i] * gv[ch];
                    dx[i] =
                        if train { inv_std[ch] / n * (n * dh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch]) } else { dh * inv_std[ch] };
                }
            }
        }
        out.push((x, dx));
    }
    out.push((gamma, dgamma));
    out.push((beta, dbeta));
    out
}

pub(crate) fn layer_norm_backward<T: Float>(
    tape: &Tape<T>,
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> Contribs<T> {
    let gv = tape.val(gamma).data();
    let d = gv.len();
    let dn = T::c(d as f64);
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = vec![T::zero(); g.len()];
    for (r, &inv) in inv_std.iter().enumerate() {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            let dh = gr[j] * gv[j];
            s1 += dh;
            s2 += dh * hr[j];
        }
        for j in 0..d {
            let dh = gr[j] * gv[j];
            dx[r * d + j] = inv / dn * (dn * dh - s1 - hr[j] * s2);
        }
    }
    vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
}
