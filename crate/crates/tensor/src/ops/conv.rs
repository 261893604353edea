//! 2-D convolution as im2col + GEMM.
//!
//! Convolution is cross-correlation (no kernel flip). Normal mode takes a
//! weight of shape `[O, C, k, k]`; transposed mode takes `[C_in, C_out, k, k]`
//! and computes the adjoint of the normal convolution with the same stride
//! and padding, so its output size is `(H - 1) * s - 2p + k + output_padding`.

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::tape::{Contribs, Op, Tape, Var};
use crate::tensor::Tensor;

/// Elements per im2col scratch buffer before images are split into chunks.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
    pub output_padding: usize,
}

pub(crate) type ConvGeom = Conv2dSpec;

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, transposed: false, output_padding: 0 }
    }

    pub const fn transposed(stride: usize, padding: usize, output_padding: usize) -> Self {
        Self { stride, padding, transposed: true, output_padding }
    }
}

/// Output extent of a normal convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

/// Geometry of one "image side" of the im2col transform.
#[derive(Debug, Clone, Copy)]
struct Grid {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Grid {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn source(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        (y < self.h).then_some(y)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the image, and
    /// the source column of `lo`.
    fn valid_x(&self, kx: usize) -> (usize, usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx { ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.ow) } else { 0 };
        let lo = lo.min(hi);
        (lo, hi, (lo * self.stride + kx).saturating_sub(self.pad))
    }
}

fn im2col<T: Float>(src: &[T], g: &Grid, dst: &mut [T], row_len: usize, col_off: usize) {
    for ci in 0..g.c {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let base = row * row_len + col_off;
                let (lo, hi, x0) = g.valid_x(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[base + oy * g.ow..base + (oy + 1) * g.ow];
                    let Some(y) = g.source(oy, ky) else {
                        out.fill(T::zero());
                        continue;
                    };
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let line = &plane[y * g.w..(y + 1) * g.w];
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&line[x0..x0 + hi - lo]);
                    } else {
                        for (o, &v) in out[lo..hi].iter_mut().zip(line[x0..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &Grid, dst: &mut [T], row_len: usize, col_off: usize) {
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let base = row * row_len + col_off;
                let (lo, hi, x0) = g.valid_x(kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, ky) else { continue };
                    let src = &cols[base + oy * g.ow + lo..base + oy * g.ow + hi];
                    let line = &mut plane[y * g.w..(y + 1) * g.w];
                    if g.stride == 1 {
                        line[x0..x0 + src.len()].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                    } else {
                        for (o, &v) in line[x0..].iter_mut().step_by(g.stride).zip(src) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

struct Dims {
    batch: usize,
    /// Channels of the tensor on the im2col "image" side.
    grid: Grid,
    /// Channels on the GEMM side (O for normal, C_in for transposed).
    other: usize,
    out_shape: [usize; 4],
}

fn dims(xs: &[usize], ws: &[usize], spec: &Conv2dSpec) -> Result<Dims> {
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::mismatch("conv2d", xs, ws));
    }
    if spec.stride < 1 {
        return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
    }
    let k = ws[2];
    if k.is_multiple_of(2) {
        return Err(TensorError::invalid("conv2d", format!("kernel size {k} must be odd")));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let weight_in = if spec.transposed { ws[0] } else { ws[1] };
    if weight_in != c {
        return Err(TensorError::mismatch("conv2d", xs, ws));
    }
    if !spec.transposed {
        if spec.output_padding != 0 {
            return Err(TensorError::invalid("conv2d", "output padding only applies to transposed mode"));
        }
        let oh =
            conv_out(h, k, spec.stride, spec.padding).ok_or_else(|| TensorError::invalid("conv2d", "kernel larger than padded input"))?;
        let ow =
            conv_out(w, k, spec.stride, spec.padding).ok_or_else(|| TensorError::invalid("conv2d", "kernel larger than padded input"))?;
        Ok(Dims {
            batch: b,
            grid: Grid { c, h, w, k, stride: spec.stride, pad: spec.padding, oh, ow },
            other: ws[0],
            out_shape: [b, ws[0], oh, ow],
        })
    } else {
        if spec.output_padding >= spec.stride {
            return Err(TensorError::invalid("conv2d", "output padding must be < stride"));
        }
        let out = |n: usize| ((n - 1) * spec.stride + k + spec.output_padding).checked_sub(2 * spec.padding);
        let oh = out(h).filter(|&v| v > 0).ok_or_else(|| TensorError::invalid("conv2d", "empty transposed output"))?;
        let ow = out(w).filter(|&v| v > 0).ok_or_else(|| TensorError::invalid("conv2d", "empty transposed output"))?;
        let cout = ws[1];
        Ok(Dims {
            batch: b,
            grid: Grid { c: cout, h: oh, w: ow, k, stride: spec.stride, pad: spec.padding, oh: h, ow: w },
            other: c,
            out_shape: [b, cout, oh, ow],
        })
    }
}

fn chunk_len(rows: usize, cols: usize) -> usize {
    (COL_BUDGET / (rows * cols).max(1)).max(1)
}

fn scatter<T: Float>(mat: &[T], dst: &mut [T], ch: usize, p: usize, b0: usize, nb: usize, accumulate: bool) {
    for c in 0..ch {
        for i in 0..nb {
            let src = &mat[(c * nb + i) * p..(c * nb + i + 1) * p];
            let off = ((b0 + i) * ch + c) * p;
            let out = &mut dst[off..off + p];
            if accumulate {
                out.iter_mut().zip(src).for_each(|(o, &s)| *o += s);
            } else {
                out.copy_from_slice(src);
            }
        }
    }
}

/// Copies images `b0..b0+nb` of a `[B, ch, P]` buffer into a `[ch, nb*P]` matrix.
fn gather_t<T: Float>(src: &[T], ch: usize, p: usize, b0: usize, nb: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(ch * nb * p);
    for c in 0..ch {
        for i in 0..nb {
            let off = ((b0 + i) * ch + c) * p;
            out.extend_from_slice(&src[off..off + p]);
        }
    }
    out
}

impl<T: Float> Tape<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let d = dims(self.shape(x), self.shape(weight), &spec)?;
        let [_, cout, oh, ow] = d.out_shape;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::mismatch("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(weight).data());
        let g = d.grid;
        let (rows, cols) = (g.rows(), g.cols());
        let mut y = vec![T::zero(); d.out_shape.iter().product()];
        let step = chunk_len(rows, cols);
        let mut b0 = 0;
        while b0 < d.batch {
            let nb = step.min(d.batch - b0);
            let width = nb * cols;
            if !spec.transposed {
                let mut colbuf = vec![T::zero(); rows * width];
                let img = g.c * g.h * g.w;
                for i in 0..nb {
                    im2col(&xv[(b0 + i) * img..(b0 + i + 1) * img], &g, &mut colbuf, width, i * cols);
                }
                let mut tmp = vec![T::zero(); d.other * width];
                gemm(
                    d.other,
                    rows,
                    width,
                    T::one(),
                    wv,
                    MatRef::row_major(0, rows),
                    &colbuf,
                    MatRef::row_major(0, width),
                    T::zero(),
                    &mut tmp,
                    MatRef::row_major(0, width),
                );
                scatter(&tmp, &mut y, d.other, cols, b0, nb, false);
            } else {
                let xin = gather_t(xv, d.other, cols, b0, nb);
                let mut colbuf = vec![T::zero(); rows * width];
                gemm(
                    rows,
                    d.other,
                    width,
                    T::one(),
                    wv,
                    MatRef::transposed(0, rows),
                    &xin,
                    MatRef::row_major(0, width),
                    T::zero(),
                    &mut colbuf,
                    MatRef::row_major(0, width),
                );
                let img = g.c * g.h * g.w;
                for i in 0..nb {
                    col2im(&colbuf, &g, &mut y[(b0 + i) * img..(b0 + i + 1) * img], width, i * cols);
                }
            }
            b0 += nb;
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let plane = oh * ow;
            for (idx, chunk) in y.chunks_exact_mut(plane).enumerate() {
                let bias = bv[idx % cout];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let out = Tensor::from_parts(d.out_shape.to_vec(), y);
        self.push(out, Op::Conv2d { x: x.0, w: weight.0, bias: bias.map(|b| b.0), geom: spec })
    }
}

pub(crate) fn conv2d_backward<T: Float>(tape: &Tape<T>, x: usize, w: usize, bias: Option<usize>, spec: &ConvGeom, gy: &[T]) -> Contribs<T> {
    let (xt, wt) = (tape.val(x), tape.val(w));
    let d = dims(xt.shape(), wt.shape(), spec).expect("validated in forward");
    let g = d.grid;
    let (rows, cols) = (g.rows(), g.cols());
    let (xv, wv) = (xt.data(), wt.data());
    let need_x = tape.needs(x);
    let need_w = tape.needs(w);
    let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
    let step = chunk_len(rows, cols);
    let img = g.c * g.h * g.w;
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = step.min(d.batch - b0);
        let width = nb * cols;
        if !spec.transposed {
            let gmat = gather_t(gy, d.other, cols, b0, nb);
            if need_w {
                let mut colbuf = vec![T::zero(); rows * width];
                for i in 0..nb {
                    im2col(&xv[(b0 + i) * img..(b0 + i + 1) * img], &g, &mut colbuf, width, i * cols);
                }
                gemm(
                    d.other,
                    width,
                    rows,
                    T::one(),
                    &gmat,
                    MatRef::row_major(0, width),
                    &colbuf,
                    MatRef::transposed(0, width),
                    T::one(),
                    &mut gw,
                    MatRef::row_major(0, rows),
                );
            }
            if need_x {
                let mut dcols = vec![T::zero(); rows * width];
                gemm(
                    rows,
                    d.other,
                    width,
                    T::one(),
                    wv,
                    MatRef::transposed(0, rows),
                    &gmat,
                    MatRef::row_major(0, width),
                    T::zero(),
                    &mut dcols,
                    MatRef::row_major(0, width),
                );
                for i in 0..nb {
                    col2im(&dcols, &g, &mut gx[(b0 + i) * img..(b0 + i + 1) * img], width, i * cols);
                }
            }
        } else {
            let mut dcols = vec![T::zero(); rows * width];
            for i in 0..nb {
                im2col(&gy[(b0 + i) * img..(b0 + i + 1) * img], &g, &mut dcols, width, i * cols);
            }
            if need_x {
                let mut dx = vec![T::zero(); d.other * width];
                gemm(
                    d.other,
                    rows,
                    width,
                    T::one(),
                    wv,
                    MatRef::row_major(0, rows),
                    &dcols,
                    MatRef::row_major(0, width),
                    T::zero(),
                    &mut dx,
                    MatRef::row_major(0, width),
                );
                scatter(&dx, &mut gx, d.other, cols, b0, nb, false);
            }
            if need_w {
                let xin = gather_t(xv, d.other, cols, b0, nb);
                gemm(
                    d.other,
                    width,
                    rows,
                    T::one(),
                    &xin,
                    MatRef::row_major(0, width),
                    &dcols,
                    MatRef::transposed(0, width),
                    T::one(),
                    &mut gw,
                    MatRef::row_major(0, rows),
                );
            }
        }
        b0 += nb;
    }
    let mut out = Vec::new();
    if need_x {
        out.push((x, gx));
    }
    if need_w {
        out.push((w, gw));
    }
    if let Some(b) = bias {
        let cout = d.out_shape[1];
        let plane = d.out_shape[2] * d.out_shape[3];
        let mut gb = vec![T::zero(); cout];
        for (idx, chunk) in gy.chunks_exact(plane).enumerate() {
            gb[idx % cout] += chunk.iter().copied().sum::<T>();
        }
        out.push((b, gb));
    }
    out
}
