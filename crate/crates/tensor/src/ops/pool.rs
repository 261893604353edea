use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Bilinear with the half-pixel (`align_corners = false`) convention:
    /// output pixel `i` samples source coordinate `(i + 0.5) / f - 0.5`,
    /// clamped to the valid range.
    Bilinear,
}

/// Source taps `(i0, i1, w1)` for one bilinear output coordinate.
pub fn bilinear_taps(out: usize, factor: usize, size: usize) -> (usize, usize, f64) {
    let src = ((out as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, src - i0 as f64)
}

fn split_hw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::invalid(op, "input needs rank >= 2"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((shape.iter().product::<usize>() / (h * w), h, w))
}

impl<T: Float> Tape<T> {
    /// Non-overlapping `factor x factor` max pooling over the last two axes.
    /// Ties route the gradient to the first maximum in raster order.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = split_hw(&shape, "max_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::invalid("max_pool", format!("factor {factor} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * factor * w + ox * factor;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let i = base + (oy * factor + dy) * w + ox * factor + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.push(Tensor::from_parts(out_shape, y), Op::MaxPool { x: x.0, argmax })
    }

    /// Multiplies the last two extents by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::invalid("upsample", "factor must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = split_hw(&shape, "upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); planes * oh * ow];
        match mode {
            UpsampleMode::Nearest => {
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y[(p * oh + oy) * ow + ox] = xv[(p * h + oy / factor) * w + ox / factor];
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                let ys: Vec<_> = (0..oh).map(|o| bilinear_taps(o, factor, h)).collect();
                let xs: Vec<_> = (0..ow).map(|o| bilinear_taps(o, factor, w)).collect();
                for p in 0..planes {
                    let src = &xv[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        let ly = T::c(ly);
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let lx = T::c(lx);
                            let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                            let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                            y[(p * oh + oy) * ow + ox] = top * (T::one() - ly) + bot * ly;
                        }
                    }
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.push(Tensor::from_parts(out_shape, y), Op::Upsample { x: x.0, factor, mode })
    }
}

pub(crate) fn max_pool_backward<T: Float>(tape: &Tape<T>, x: usize, argmax: &[usize], g: &[T]) -> Contribs<T> {
    let mut dx = vec![T::zero(); tape.val(x).numel()];
    for (&i, &gv) in argmax.iter().zip(g) {
        dx[i] += gv;
    }
    vec![(x, dx)]
}

pub(crate) fn upsample_backward<T: Float>(tape: &Tape<T>, x: usize, factor: usize, mode: UpsampleMode, g: &[T]) -> Contribs<T> {
    let shape = tape.val(x).shape();
    let (planes, h, w) = split_hw(shape, "upsample").expect("validated in forward");
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[(p * h + oy / factor) * w + ox / factor] += g[(p * oh + oy) * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ys: Vec<_> = (0..oh).map(|o| bilinear_taps(o, factor, h)).collect();
            let xs: Vec<_> = (0..ow).map(|o| bilinear_taps(o, factor, w)).collect();
            for p in 0..planes {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    let ly = T::c(ly);
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let lx = T::c(lx);
                        let gv = g[(p * oh + oy) * ow + ox];
                        dst[y0 * w + x0] += gv * (T::one() - ly) * (T::one() - lx);
                        dst[y0 * w + x1] += gv * (T::one() - ly) * lx;
                        dst[y1 * w + x0] += gv * ly * (T::one() - lx);
                        dst[y1 * w + x1] += gv * ly * lx;
                    }
                }
            }
        }
    }
    vec![(x, dx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(x: Tensor<f64>, f: usize) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let y = tape.max_pool(x, f)?;
        Ok(tape.value(y).clone())
    }

    fn up(x: Tensor<f64>, f: usize, mode: UpsampleMode) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let y = tape.upsample(x, f, mode)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn pool_basics() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool(x.clone(), 1).unwrap(), x);
        assert_eq!(pool(x, 2).unwrap().data(), &[4.0]);
        assert!(pool(Tensor::zeros(&[1, 1, 3, 3]), 2).is_err());
    }

    #[test]
    fn pool_ties_route_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), true);
        let y = tape.max_pool(x, 2).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_basics() {
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        assert_eq!(up(one.clone(), 2, UpsampleMode::Nearest).unwrap().data(), &[1.0; 4]);
        assert_eq!(up(one.clone(), 1, UpsampleMode::Bilinear).unwrap(), one);
        assert!(up(one, 0, UpsampleMode::Nearest).is_err());
    }

    #[test]
    fn bilinear_ramp_by_hand() {
        // Row [0, 1] at factor 2 samples source x = -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped).
        let x = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = up(x, 2, UpsampleMode::Bilinear).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }
}
