use super::bilinear::Taps;
use super::graph::{Backward, GradAcc, Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// A region to pool: image index in the batch, index into the list of
/// feature levels, and corner box `[x1, y1, x2, y2]` in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub level: usize,
    pub bbox: [f64; 4],
}

struct RoiAlignOp {
    features: Vec<Var>,
    strides: Vec<f64>,
    rois: Vec<Roi>,
    output_size: usize,
    sampling: usize,
}

/// Sample taps of one roi, `sampling^2` per bin, bins in row-major order.
///
/// Feature pixel `j` on a level with stride `s` covers image coordinates
/// `[j*s, (j+1)*s)`, so image coordinate `X` maps to `X/s - 0.5`.
fn roi_taps<T: Real>(roi: &Roi, stride: f64, h: usize, w: usize, out: usize, sr: usize) -> Vec<Option<Taps<T>>> {
    let [x1, y1, x2, y2] = roi.bbox;
    let (sx, sy) = (x1 / stride - 0.5, y1 / stride - 0.5);
    let bin_w = (x2 - x1) / stride / out as f64;
    let bin_h = (y2 - y1) / stride / out as f64;
    let mut taps = Vec::with_capacity(out * out * sr * sr);
    for ph in 0..out {
        for pw in 0..out {
            for iy in 0..sr {
                let y = sy + (ph as f64 + (iy as f64 + 0.5) / sr as f64) * bin_h;
                for ix in 0..sr {
                    let x = sx + (pw as f64 + (ix as f64 + 0.5) / sr as f64) * bin_w;
                    taps.push(Taps::new(h, w, T::of(y), T::of(x)));
                }
            }
        }
    }
    taps
}

impl<T: Real> Graph<T> {
    /// Pools each roi into an `output_size x output_size` grid per channel.
    /// Every bin averages `sampling^2` bilinear samples at evenly spaced
    /// points inside the bin; samples outside the map read zero.
    ///
    /// Output shape is `(rois, c, output_size, output_size)`.
    pub fn roi_align(
        &mut self,
        features: &[Var],
        strides: &[f64],
        rois: &[Roi],
        output_size: usize,
        sampling: usize,
    ) -> Result<Var> {
        const OP: &str = "roi_align";
        if features.is_empty() || features.len() != strides.len() {
            return Err(Error::invalid(OP, "need one stride per feature level"));
        }
        if output_size == 0 || sampling == 0 {
            return Err(Error::invalid(OP, "output size and sampling must be positive"));
        }
        let mut dims = Vec::with_capacity(features.len());
        for &f in features {
            dims.push(self.value(f).dims4(OP)?);
        }
        let c = dims[0].1;
        if dims.iter().any(|d| d.1 != c) {
            return Err(Error::shape(OP, "feature levels disagree on channel count"));
        }
        for r in rois {
            let [x1, y1, x2, y2] = r.bbox;
            if !(x2 > x1 && y2 > y1) || r.bbox.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(OP, format!("degenerate box {:?}", r.bbox)));
            }
            let Some(d) = dims.get(r.level) else {
                return Err(Error::invalid(OP, format!("level {} out of range", r.level)));
            };
            if r.batch >= d.0 {
                return Err(Error::invalid(OP, format!("batch index {} out of range", r.batch)));
            }
        }

        let bins = output_size * output_size;
        let per_roi = c * bins;
        let mut out = vec![T::zero(); rois.len() * per_roi];
        let planes: Vec<&[T]> = features.iter().map(|&f| self.value(f).data()).collect();
        let norm = T::of(1.0 / (sampling * sampling) as f64);
        let ss = sampling * sampling;
        par::for_each_chunk(&mut out, per_roi, |ri, out_r| {
            let r = &rois[ri];
            let (_, _, h, w) = dims[r.level];
            let taps = roi_taps::<T>(r, strides[r.level], h, w, output_size, sampling);
            let base = r.batch * c * h * w;
            for ch in 0..c {
                let plane = &planes[r.level][base + ch * h * w..base + (ch + 1) * h * w];
                for b in 0..bins {
                    let mut s = T::zero();
                    for t in taps[b * ss..(b + 1) * ss].iter().flatten() {
                        s += t.sample(plane);
                    }
                    out_r[ch * bins + b] = s * norm;
                }
            }
        });
        let value = Tensor::new(&[rois.len(), c, output_size, output_size], out)?;
        Ok(self.push(
            value,
            features,
            RoiAlignOp {
                features: features.to_vec(),
                strides: strides.to_vec(),
                rois: rois.to_vec(),
                output_size,
                sampling,
            },
        ))
    }
}

impl<T: Real> Backward<T> for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi_align"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let bins = self.output_size * self.output_size;
        let ss = self.sampling * self.sampling;
        let norm = T::of(1.0 / ss as f64);
        let gy = grad_out.data();
        for (level, &f) in self.features.iter().enumerate() {
            if !acc.wants(f) {
                continue;
            }
            let shape = graph.shape(f).to_vec();
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let buf = acc.buf(f, &shape).data_mut();
            for (ri, r) in self.rois.iter().enumerate().filter(|(_, r)| r.level == level) {
                let taps = roi_taps::<T>(r, self.strides[level], h, w, self.output_size, self.sampling);
                let base = r.batch * c * h * w;
                for ch in 0..c {
                    let plane = &mut buf[base + ch * h * w..base + (ch + 1) * h * w];
                    let g_r = &gy[(ri * c + ch) * bins..(ri * c + ch + 1) * bins];
                    for b in 0..bins {
                        let gv = g_r[b] * norm;
                        for t in taps[b * ss..(b + 1) * ss].iter().flatten() {
                            t.scatter(plane, gv);
                        }
                    }
                }
            }
        }
    }
}
