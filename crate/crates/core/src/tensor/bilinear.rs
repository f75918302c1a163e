//! Bilinear sampling on a single `h x w` plane.
//!
//! Pixel `(i, j)` sits at integer coordinate `(i, j)`. Each of the four
//! neighbouring corners that falls outside the plane contributes zero, so the
//! sampled surface is continuous and decays to zero one pixel past the border.
//! At exact integer coordinates the cell whose top-left corner is the sample
//! point is used for derivatives.

use super::Real;

/// Corner indices and weights of one sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    /// Flat plane indices; `usize::MAX` marks a corner outside the plane.
    pub idx: [usize; 4],
    pub w: [T; 4],
    /// Fractional parts, needed for coordinate derivatives.
    pub ly: T,
    pub lx: T,
}

const OUT: usize = usize::MAX;

impl<T: Real> Taps<T> {
    pub fn new(h: usize, w: usize, y: T, x: T) -> Option<Self> {
        let one = T::one();
        let (hf, wf) = (T::of(h as f64), T::of(w as f64));
        if !(y > -one && y < hf && x > -one && x < wf) {
            return None;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let (hy, hx) = (one - ly, one - lx);
        let y0i = y0.to_i64().unwrap_or(-1);
        let x0i = x0.to_i64().unwrap_or(-1);
        let at = |yy: i64, xx: i64| -> usize {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                yy as usize * w + xx as usize
            } else {
                OUT
            }
        };
        Some(Taps {
            idx: [at(y0i, x0i), at(y0i, x0i + 1), at(y0i + 1, x0i), at(y0i + 1, x0i + 1)],
            w: [hy * hx, hy * lx, ly * hx, ly * lx],
            ly,
            lx,
        })
    }

    #[inline]
    fn corner(&self, plane: &[T], k: usize) -> T {
        let i = self.idx[k];
        if i == OUT {
            T::zero()
        } else {
            plane[i]
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for k in 0..4 {
            if self.idx[k] != OUT {
                acc += self.w[k] * plane[self.idx[k]];
            }
        }
        acc
    }

    /// Derivatives of the sampled value with respect to `(y, x)`.
    #[inline]
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let one = T::one();
        let v00 = self.corner(plane, 0);
        let v01 = self.corner(plane, 1);
        let v10 = self.corner(plane, 2);
        let v11 = self.corner(plane, 3);
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    /// Adds `g` times the interpolation weights into `plane_grad`.
    #[inline]
    pub fn scatter(&self, plane_grad: &mut [T], g: T) {
        for k in 0..4 {
            if self.idx[k] != OUT {
                plane_grad[self.idx[k]] += self.w[k] * g;
            }
        }
    }
}

/// One-shot sampling helper.
#[cfg(test)]
fn sample<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Taps::new(h, w, y, x).map_or(T::zero(), |t| t.sample(plane))
}
