use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::rng::Rng;
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Gelu,
    Sigmoid,
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Float>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Logistic function, kept strictly inside `(0, 1)`: large logits clamp to
/// the nearest representable values instead of rounding onto the bounds.
pub fn sigmoid<T: Float>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::c(2.0))
}

impl<T: Float> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Adds `bias` broadcast over the leading axes; its shape must equal the
    /// trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(TensorError::mismatch("add_bias", xs, bs));
        }
        let b = self.value(bias).data();
        let n = b.len();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddBias { x: x.0, bias: bias.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::c(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn pointwise(&mut self, kind: Pointwise, a: Var) -> Result<Var> {
        match kind {
            Pointwise::Relu => self.relu(a),
            Pointwise::Gelu => self.gelu(a),
            Pointwise::Sigmoid => self.sigmoid(a),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let n = *xv.shape().last().expect("rank >= 1");
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Softmax(a.0))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel()).map(|_| if rng.bernoulli(rate) { T::zero() } else { keep }).collect();
        let xv = self.value(a);
        let data = xv.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Dropout { x: a.0, mask })
    }
}

pub(crate) fn mul_backward<T: Float>(tape: &Tape<T>, a: usize, b: usize, g: &[T]) -> Contribs<T> {
    let (va, vb) = (tape.val(a).data(), tape.val(b).data());
    let mut out = Vec::new();
    if tape.needs(a) {
        out.push((a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
    }
    if tape.needs(b) {
        out.push((b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
    }
    out
}

pub(crate) fn add_bias_backward<T: Float>(tape: &Tape<T>, x: usize, bias: usize, g: &[T]) -> Contribs<T> {
    let n = tape.val(bias).numel();
    let mut gb = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    vec![(x, g.to_vec()), (bias, gb)]
}

pub(crate) fn relu_backward<T: Float>(tape: &Tape<T>, a: usize, g: &[T]) -> Contribs<T> {
    let x = tape.val(a).data();
    vec![(a, g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect())]
}

pub(crate) fn gelu_backward<T: Float>(tape: &Tape<T>, a: usize, g: &[T]) -> Contribs<T> {
    let x = tape.val(a).data();
    vec![(a, g.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect())]
}

pub(crate) fn softmax_backward<T: Float>(shape: &[usize], a: usize, y: &[T], g: &[T]) -> Contribs<T> {
    let n = *shape.last().expect("rank >= 1");
    let mut dx = vec![T::zero(); y.len()];
    for ((dxr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
        for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
            *d = y * (g - dot);
        }
    }
    vec![(a, dx)]
}
