use super::bilinear::Taps;
use super::conv::{add_bias, bias_grad, ConvGeom};
use super::gemm::gemm;
use super::graph::{Backward, GradAcc, Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

struct DeformConv2dOp {
    input: Var,
    weight: Var,
    offsets: Var,
    bias: Option<Var>,
    geom: ConvGeom,
}

/// Sampling taps for every (kernel tap, output pixel) of one image.
///
/// Offset channel `2t` holds the row displacement and `2t + 1` the column
/// displacement of kernel tap `t` (row-major tap order), in input pixels.
fn taps_for_image<T: Real>(g: &ConvGeom, off: &[T]) -> Vec<Option<Taps<T>>> {
    let p = g.out_pixels();
    let mut taps = Vec::with_capacity(g.kk() * p);
    for ki in 0..g.k {
        for kj in 0..g.k {
            let t = ki * g.k + kj;
            let dy = &off[2 * t * p..(2 * t + 1) * p];
            let dx = &off[(2 * t + 1) * p..(2 * t + 2) * p];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let pi = oy * g.wo + ox;
                    let y = T::of((oy * g.stride + ki) as f64 - g.pad as f64) + dy[pi];
                    let x = T::of((ox * g.stride + kj) as f64 - g.pad as f64) + dx[pi];
                    taps.push(Taps::new(g.h, g.w, y, x));
                }
            }
        }
    }
    taps
}

fn deform_im2col<T: Real>(g: &ConvGeom, x: &[T], taps: &[Option<Taps<T>>], cols: &mut [T]) {
    let p = g.out_pixels();
    let kk = g.kk();
    for c in 0..g.c {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for t in 0..kk {
            let row = c * kk + t;
            let dst = &mut cols[row * p..(row + 1) * p];
            let tt = &taps[t * p..(t + 1) * p];
            for (d, tap) in dst.iter_mut().zip(tt) {
                *d = tap.as_ref().map_or(T::zero(), |tp| tp.sample(plane));
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Deformable convolution: every kernel tap samples the input at its
    /// regular grid position plus a learned `(dy, dx)` displacement, using
    /// bilinear interpolation with zero outside the feature map.
    ///
    /// `offsets` has shape `(n, 2*k*k, ho, wo)`.
    pub fn deformable_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        offsets: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            "deformable_conv2d",
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let want = [geom.n, 2 * geom.kk(), geom.ho, geom.wo];
        if self.shape(offsets) != want {
            return Err(Error::shape(
                "deformable_conv2d",
                format!(
                    "offsets must have shape {want:?} (2 x {} taps), got {:?}",
                    geom.kk(),
                    self.shape(offsets)
                ),
            ));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let off = self.value(offsets).data();
        let b = bias.map(|b| self.value(b).data());
        let g = geom;
        let p = g.out_pixels();
        let mut out = vec![T::zero(); g.n * g.o * p];
        par::for_each_chunk(&mut out, g.o * p, |n, out_n| {
            let x_n = &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
            let off_n = &off[n * 2 * g.kk() * p..(n + 1) * 2 * g.kk() * p];
            let taps = taps_for_image(&g, off_n);
            let mut cols = vec![T::zero(); g.cols_rows() * p];
            deform_im2col(&g, x_n, &taps, &mut cols);
            gemm(false, false, g.o, p, g.cols_rows(), T::one(), w, &cols, T::zero(), out_n);
            if let Some(b) = b {
                add_bias(out_n, b, p);
            }
        });
        let value = Tensor::new(&[g.n, g.o, g.ho, g.wo], out)?;
        let mut inputs = vec![input, weight, offsets];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            DeformConv2dOp {
                input,
                weight,
                offsets,
                bias,
                geom,
            },
        ))
    }
}

struct ImageGrads<T> {
    dx: Option<Vec<T>>,
    doff: Option<Vec<T>>,
    dw: Option<Vec<T>>,
}

impl<T: Real> Backward<T> for DeformConv2dOp {
    fn name(&self) -> &'static str {
        "deformable_conv2d"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let g = self.geom;
        let x = graph.value(self.input).data();
        let w = graph.value(self.weight).data();
        let off = graph.value(self.offsets).data();
        let dy = grad_out.data();
        let p = g.out_pixels();
        let kk = g.kk();
        let (want_x, want_w, want_off) = (
            acc.wants(self.input),
            acc.wants(self.weight),
            acc.wants(self.offsets),
        );

        let parts: Vec<ImageGrads<T>> = par::map(g.n, |n| {
            let x_n = &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
            let off_n = &off[n * 2 * kk * p..(n + 1) * 2 * kk * p];
            let dy_n = &dy[n * g.o * p..(n + 1) * g.o * p];
            let taps = taps_for_image(&g, off_n);

            let dw = want_w.then(|| {
                let mut cols = vec![T::zero(); g.cols_rows() * p];
                deform_im2col(&g, x_n, &taps, &mut cols);
                let mut dw = vec![T::zero(); g.o * g.cols_rows()];
                gemm(false, true, g.o, g.cols_rows(), p, T::one(), dy_n, &cols, T::zero(), &mut dw);
                dw
            });

            let (dx, doff) = if want_x || want_off {
                let mut dcols = vec![T::zero(); g.cols_rows() * p];
                gemm(true, false, g.cols_rows(), p, g.o, T::one(), w, dy_n, T::zero(), &mut dcols);
                let mut dx = want_x.then(|| vec![T::zero(); g.c * g.in_plane()]);
                let mut doff = want_off.then(|| vec![T::zero(); 2 * kk * p]);
                for c in 0..g.c {
                    let plane = &x_n[c * g.in_plane()..(c + 1) * g.in_plane()];
                    for t in 0..kk {
                        let row = &dcols[(c * kk + t) * p..(c * kk + t + 1) * p];
                        let tt = &taps[t * p..(t + 1) * p];
                        for (pi, (tap, &gv)) in tt.iter().zip(row).enumerate() {
                            let Some(tap) = tap else { continue };
                            if let Some(dx) = dx.as_mut() {
                                tap.scatter(&mut dx[c * g.in_plane()..(c + 1) * g.in_plane()], gv);
                            }
                            if let Some(doff) = doff.as_mut() {
                                let (gy, gx) = tap.coord_grad(plane);
                                doff[2 * t * p + pi] += gv * gy;
                                doff[(2 * t + 1) * p + pi] += gv * gx;
                            }
                        }
                    }
                }
                (dx, doff)
            } else {
                (None, None)
            };
            ImageGrads { dx, doff, dw }
        });

        if want_x {
            let buf = acc.buf(self.input, graph.shape(self.input)).data_mut();
            let len = g.c * g.in_plane();
            for (n, part) in parts.iter().enumerate() {
                for (d, &s) in buf[n * len..(n + 1) * len].iter_mut().zip(part.dx.as_ref().unwrap()) {
                    *d += s;
                }
            }
        }
        if want_off {
            let buf = acc.buf(self.offsets, graph.shape(self.offsets)).data_mut();
            let len = 2 * kk * p;
            for (n, part) in parts.iter().enumerate() {
                for (d, &s) in buf[n * len..(n + 1) * len].iter_mut().zip(part.doff.as_ref().unwrap()) {
                    *d += s;
                }
            }
        }
        if want_w {
            let buf = acc.buf(self.weight, graph.shape(self.weight)).data_mut();
            for part in &parts {
                for (d, &s) in buf.iter_mut().zip(part.dw.as_ref().unwrap()) {
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
