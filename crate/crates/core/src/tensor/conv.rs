use super::gemm::gemm;
use super::graph::{Backward, GradAcc, Graph, Var};
use super::{conv_out_size, Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Geometry shared by plain and deformable convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        op: &'static str,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input.dims4(op)?;
        let (o, wc, kh, kw) = weight.dims4(op)?;
        if wc != c {
            return Err(Error::shape(
                op,
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(op, format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be at least 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {:?} does not match {o} output channels", b.shape()),
                ));
            }
        }
        let (Some(ho), Some(wo)) = (conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)) else {
            return Err(Error::shape(
                op,
                format!("{kh}x{kw} kernel does not fit a {h}x{w} input with padding {pad}"),
            ));
        };
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn kk(&self) -> usize {
        self.k * self.k
    }

    pub fn cols_rows(&self) -> usize {
        self.c * self.kk()
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap at kernel offset `kj` lands inside a
/// row of width `w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(s) } else { 0 };
    let hi = if g.w + g.pad > kj { (g.w + g.pad - kj - 1) / s + 1 } else { 0 };
    (lo.min(g.wo), hi.min(g.wo).max(lo.min(g.wo)))
}

/// Unfolds one image `(c, h, w)` into the `(c*k*k, ho*wo)` column block of a
/// matrix whose rows are `ld` apart, so several images can share one wide
/// column matrix.
fn im2col_strided<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize) {
    let (k, s) = (g.k, g.stride);
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * s + kj - g.pad;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in drow[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_strided`]: accumulates columns back into an image
/// gradient.
fn col2im_strided<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T], ld: usize) {
    let (k, s) = (g.k, g.stride);
    for c in 0..g.c {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * s + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(s).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn add_bias<T: Real>(out: &mut [T], bias: &[T], pixels: usize) {
    for (row, &b) in out.chunks_mut(pixels).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// Bias gradient: per-channel sum over batch and pixels.
pub(crate) fn bias_grad<T: Real>(grad_out: &[T], o: usize, pixels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); o];
    for img in grad_out.chunks(o * pixels) {
        for (ch, row) in img.chunks(pixels).enumerate() {
            db[ch] += row.iter().copied().sum::<T>();
        }
    }
    db
}

struct Conv2dOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
}

impl<T: Real> Graph<T> {
    /// 2-D convolution with square kernels, symmetric zero padding and no
    /// dilation. Output size is `floor((h + 2*padding - k) / stride) + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            "conv2d",
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Conv2dOp {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }
}

/// Images per GEMM. Small inputs (pooled regions) are unfolded side by side
/// so each product is wide enough to run near peak. Depends only on the
/// geometry, so grouping never changes with the thread count.
fn group_size(g: &ConvGeom) -> usize {
    (1024 / g.out_pixels().max(1)).clamp(1, g.n.max(1))
}

/// Unfolds images `first..first + count` side by side into `(c*k*k, count*p)`.
fn unfold_group<T: Real>(g: &ConvGeom, x: &[T], first: usize, count: usize) -> Vec<T> {
    let (p, wide, img) = (g.out_pixels(), count * g.out_pixels(), g.c * g.in_plane());
    let mut cols = vec![T::zero(); g.cols_rows() * wide];
    for t in 0..count {
        let x_t = &x[(first + t) * img..(first + t + 1) * img];
        im2col_strided(g, x_t, &mut cols[t * p..], wide);
    }
    cols
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.out_pixels();
    let gs = group_size(g);
    let mut out = vec![T::zero(); g.n * g.o * p];
    par::for_each_chunk(&mut out, gs * g.o * p, |gi, out_g| {
        let count = out_g.len() / (g.o * p);
        let first = gi * gs;
        if count == 1 {
            let x_n = &x[first * g.c * g.in_plane()..(first + 1) * g.c * g.in_plane()];
            if g.is_pointwise() {
                gemm(false, false, g.o, p, g.c, T::one(), w, x_n, T::zero(), out_g);
            } else {
                let cols = unfold_group(g, x, first, 1);
                gemm(false, false, g.o, p, g.cols_rows(), T::one(), w, &cols, T::zero(), out_g);
            }
        } else {
            let wide = count * p;
            let cols = unfold_group(g, x, first, count);
            let mut res = vec![T::zero(); g.o * wide];
            gemm(false, false, g.o, wide, g.cols_rows(), T::one(), w, &cols, T::zero(), &mut res);
            for t in 0..count {
                for ch in 0..g.o {
                    out_g[(t * g.o + ch) * p..(t * g.o + ch + 1) * p]
                        .copy_from_slice(&res[ch * wide + t * p..ch * wide + (t + 1) * p]);
                }
            }
        }
        if let Some(b) = bias {
            for img in out_g.chunks_mut(g.o * p) {
                add_bias(img, b, p);
            }
        }
    });
    out
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let g = &self.geom;
        let x = graph.value(self.input).data();
        let w = graph.value(self.weight).data();
        let dy = grad_out.data();
        let p = g.out_pixels();
        let (want_x, want_w) = (acc.wants(self.input), acc.wants(self.weight));

        // Per-group partial results, reduced in group order below.
        let gs = group_size(g);
        let img_in = g.c * g.in_plane();
        let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = par::map(g.n.div_ceil(gs), |gi| {
            let first = gi * gs;
            let count = gs.min(g.n - first);
            let wide = count * p;
            let dy_g = if count == 1 {
                dy[first * g.o * p..(first + 1) * g.o * p].to_vec()
            } else {
                let mut m = vec![T::zero(); g.o * wide];
                for t in 0..count {
                    for ch in 0..g.o {
                        let src = &dy[((first + t) * g.o + ch) * p..((first + t) * g.o + ch + 1) * p];
                        m[ch * wide + t * p..ch * wide + (t + 1) * p].copy_from_slice(src);
                    }
                }
                m
            };
            let direct = count == 1 && g.is_pointwise();
            let dw = want_w.then(|| {
                let mut dw = vec![T::zero(); g.o * g.cols_rows()];
                if direct {
                    let x_n = &x[first * img_in..(first + 1) * img_in];
                    gemm(false, true, g.o, g.c, p, T::one(), &dy_g, x_n, T::zero(), &mut dw);
                } else {
                    let cols = unfold_group(g, x, first, count);
                    gemm(false, true, g.o, g.cols_rows(), wide, T::one(), &dy_g, &cols, T::zero(), &mut dw);
                }
                dw
            });
            let dx = want_x.then(|| {
                let mut dcols = vec![T::zero(); g.cols_rows() * wide];
                gemm(true, false, g.cols_rows(), wide, g.o, T::one(), w, &dy_g, T::zero(), &mut dcols);
                if direct {
                    return dcols;
                }
                let mut dx = vec![T::zero(); count * img_in];
                for t in 0..count {
                    col2im_strided(g, &dcols[t * p..], &mut dx[t * img_in..(t + 1) * img_in], wide);
                }
                dx
            });
            (dx, dw)
        });

        if want_x {
            let buf = acc.buf(self.input, graph.shape(self.input)).data_mut();
            for (gi, (dx, _)) in parts.iter().enumerate() {
                let dx = dx.as_ref().unwrap();
                let dst = &mut buf[gi * gs * img_in..gi * gs * img_in + dx.len()];
                for (d, &s) in dst.iter_mut().zip(dx) {
                    *d += s;
                }
            }
        }
        if want_w {
            let buf = acc.buf(self.weight, graph.shape(self.weight)).data_mut();
            for (_, dw) in &parts {
                for (d, &s) in buf.iter_mut().zip(dw.as_ref().unwrap()) {
                    *d += s;
                }
            }
        }
        if let Some(b) = self.bias {
            if acc.wants(b) {
                let db = bias_grad(dy, g.o, p);
                let buf = acc.buf(b, graph.shape(b)).data_mut();
                for (d, s) in buf.iter_mut().zip(db) {
                    *d += s;
                }
            }
        }
    }
}
