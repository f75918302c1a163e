use super::gemm::gemm;
use super::graph::{Backward, GradAcc, Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

fn add_into<T: Real>(acc: &mut GradAcc<T>, graph: &Graph<T>, v: Var, g: &[T]) {
    if !acc.wants(v) {
        return;
    }
    let buf = acc.buf(v, graph.shape(v)).data_mut();
    for (d, &s) in buf.iter_mut().zip(g) {
        *d += s;
    }
}

// ---------------------------------------------------------------- linear

struct LinearOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
}

impl<T: Real> Graph<T> {
    /// `y = x W^T + b` for `x: (n, d_in)`, `W: (d_out, d_in)`, `b: (d_out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.value(input).dims2("linear")?;
        let (d_out, w_in) = self.value(weight).dims2("linear")?;
        if w_in != d_in {
            return Err(Error::shape(
                "linear",
                format!("input width {d_in} does not match weight width {w_in}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear", format!("bias must have length {d_out}")));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        gemm(
            false,
            true,
            n,
            d_out,
            d_in,
            T::one(),
            self.value(input).data(),
            self.value(weight).data(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (v, &bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::new(&[n, d_out], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, &inputs, LinearOp { input, weight, bias }))
    }
}

impl<T: Real> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let (n, d_in) = (graph.shape(self.input)[0], graph.shape(self.input)[1]);
        let d_out = graph.shape(self.weight)[0];
        let gy = grad_out.data();
        if acc.wants(self.input) {
            let buf = acc.buf(self.input, &[n, d_in]).data_mut();
            gemm(false, false, n, d_in, d_out, T::one(), gy, graph.value(self.weight).data(), T::one(), buf);
        }
        if acc.wants(self.weight) {
            let buf = acc.buf(self.weight, &[d_out, d_in]).data_mut();
            gemm(true, false, d_out, d_in, n, T::one(), gy, graph.value(self.input).data(), T::one(), buf);
        }
        if let Some(b) = self.bias {
            if acc.wants(b) {
                let buf = acc.buf(b, &[d_out]).data_mut();
                for row in gy.chunks(d_out) {
                    for (d, &s) in buf.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// ----------------------------------------------------------- elementwise

struct ReluOp {
    input: Var,
}

struct SigmoidOp {
    input: Var,
}

struct AddOp {
    a: Var,
    b: Var,
}

struct AffineOp {
    input: Var,
    mul: f64,
}

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(T::zero())).collect()).unwrap();
        self.push(value, &[input], ReluOp { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| sigmoid(v)).collect()).unwrap();
        self.push(value, &[input], SigmoidOp { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, &[a, b], AddOp { a, b }))
    }

    /// `mul * x + add`, elementwise.
    pub fn affine(&mut self, input: Var, mul: f64, add: f64) -> Var {
        let (m, c) = (T::of(mul), T::of(add));
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| m * v + c).collect()).unwrap();
        self.push(value, &[input], AffineOp { input, mul })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.affine(input, factor, 0.0)
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let x = graph.value(self.input).data();
        let g: Vec<T> = x
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
            .collect();
        add_into(acc, graph, self.input, &g);
    }
}

impl<T: Real> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, graph: &Graph<T>, out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let y = graph.value(out).data();
        let g: Vec<T> = y
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &gv)| gv * s * (T::one() - s))
            .collect();
        add_into(acc, graph, self.input, &g);
    }
}

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        add_into(acc, graph, self.a, grad_out.data());
        add_into(acc, graph, self.b, grad_out.data());
    }
}

impl<T: Real> Backward<T> for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let m = T::of(self.mul);
        let g: Vec<T> = grad_out.data().iter().map(|&v| v * m).collect();
        add_into(acc, graph, self.input, &g);
    }
}

// ---------------------------------------------------------------- softmax

struct SoftmaxOp {
    input: Var,
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl<T: Real> Graph<T> {
    /// Softmax along `axis`, computed with a max shift.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let m = (0..axis_len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..axis_len {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..axis_len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[input],
            SoftmaxOp {
                input,
                outer,
                axis_len,
                inner,
            },
        ))
    }
}

impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, graph: &Graph<T>, out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let y = graph.value(out).data();
        let gy = grad_out.data();
        let mut g = vec![T::zero(); y.len()];
        let (axis_len, inner) = (self.axis_len, self.inner);
        for o in 0..self.outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let dot: T = (0..axis_len).map(|k| y[at(k)] * gy[at(k)]).sum();
                for k in 0..axis_len {
                    g[at(k)] = y[at(k)] * (gy[at(k)] - dot);
                }
            }
        }
        add_into(acc, graph, self.input, &g);
    }
}

// ------------------------------------------------------------- reshaping

struct Upsample2xOp {
    input: Var,
}

struct ReshapeOp {
    input: Var,
}

impl<T: Real> Graph<T> {
    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample2x")?;
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for (plane, src) in out.chunks_mut(h2 * w2).zip(x.chunks(h * w)) {
            for y in 0..h2 {
                for xx in 0..w2 {
                    plane[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(value, &[input], Upsample2xOp { input }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, &[input], ReshapeOp { input }))
    }
}

impl<T: Real> Backward<T> for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        if !acc.wants(self.input) {
            return;
        }
        let shape = graph.shape(self.input).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let w2 = 2 * w;
        let buf = acc.buf(self.input, &shape).data_mut();
        for (plane, src) in buf.chunks_mut(h * w).zip(grad_out.data().chunks(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..w2 {
                    plane[(y / 2) * w + x / 2] += src[y * w2 + x];
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        add_into(acc, graph, self.input, grad_out.data());
    }
}

// ------------------------------------------------------------ reductions

struct SumOp {
    input: Var,
}

struct WeightedSumOp<T> {
    input: Var,
    weights: Vec<T>,
}

impl<T: Real> Graph<T> {
    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[input], SumOp { input })
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(input).numel() {
            return Err(Error::shape("weighted_sum", "weights must match input size"));
        }
        let s: T = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), &[input], WeightedSumOp { input, weights }))
    }

    /// Sum of any number of scalars.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        if !acc.wants(self.input) {
            return;
        }
        let g = grad_out.item();
        let buf = acc.buf(self.input, graph.shape(self.input)).data_mut();
        buf.iter_mut().for_each(|d| *d += g);
    }
}

impl<T: Real> Backward<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        if !acc.wants(self.input) {
            return;
        }
        let g = grad_out.item();
        let buf = acc.buf(self.input, graph.shape(self.input)).data_mut();
        for (d, &w) in buf.iter_mut().zip(&self.weights) {
            *d += g * w;
        }
    }
}

// ----------------------------------------------------------------- gather

/// One pixel of one of several NCHW maps: `(source, image, row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub source: usize,
    pub batch: usize,
    pub y: usize,
    pub x: usize,
}

struct GatherOp {
    sources: Vec<Var>,
    cells: Vec<Cell>,
}

impl<T: Real> Graph<T> {
    /// Reads the channel vector at each cell into a `(cells, c)` matrix.
    /// All sources must share the channel count.
    pub fn gather_cells(&mut self, sources: &[Var], cells: &[Cell]) -> Result<Var> {
        const OP: &str = "gather_cells";
        if sources.is_empty() {
            return Err(Error::invalid(OP, "no sources"));
        }
        let mut dims = Vec::with_capacity(sources.len());
        for &s in sources {
            dims.push(self.value(s).dims4(OP)?);
        }
        let c = dims[0].1;
        if dims.iter().any(|d| d.1 != c) {
            return Err(Error::shape(OP, "sources disagree on channel count"));
        }
        let mut out = Vec::with_capacity(cells.len() * c);
        for cell in cells {
            let Some(&(n, _, h, w)) = dims.get(cell.source) else {
                return Err(Error::invalid(OP, format!("source {} out of range", cell.source)));
            };
            if cell.batch >= n || cell.y >= h || cell.x >= w {
                return Err(Error::invalid(OP, format!("cell {cell:?} outside its map")));
            }
            let data = self.value(sources[cell.source]).data();
            for ch in 0..c {
                out.push(data[((cell.batch * c + ch) * h + cell.y) * w + cell.x]);
            }
        }
        let value = Tensor::new(&[cells.len(), c], out)?;
        Ok(self.push(
            value,
            sources,
            GatherOp {
                sources: sources.to_vec(),
                cells: cells.to_vec(),
            },
        ))
    }
}

impl<T: Real> Backward<T> for GatherOp {
    fn name(&self) -> &'static str {
        "gather_cells"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let gy = grad_out.data();
        let c = grad_out.shape()[1];
        for (si, &src) in self.sources.iter().enumerate() {
            if !acc.wants(src) {
                continue;
            }
            let shape = graph.shape(src).to_vec();
            let (h, w) = (shape[2], shape[3]);
            let buf = acc.buf(src, &shape).data_mut();
            for (i, cell) in self.cells.iter().enumerate().filter(|(_, c)| c.source == si) {
                for ch in 0..c {
                    buf[((cell.batch * c + ch) * h + cell.y) * w + cell.x] += gy[i * c + ch];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_identity() {
        let mut g = Graph::<f64>::new();
        let xs = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        let x = g.constant(xs.clone());
        let w = g.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y), &xs);
    }

    #[test]
    fn linear_width_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.linear(x, w, None).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.0));
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![1000.0, 0.0, -1000.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn upsample_block_replicates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.upsample2x(x).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y).data(), &want);
    }

    #[test]
    fn gather_reads_cells() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| 100.0 + i as f64));
        let cells = [
            Cell { source: 0, batch: 0, y: 1, x: 2 },
            Cell { source: 1, batch: 1, y: 0, x: 1 },
        ];
        let y = g.gather_cells(&[a, b], &cells).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 14.0, 109.0, 113.0]);
    }

    #[test]
    fn consumer_twice_accumulates() {
        // f(x) = sum(relu(x)) + sum(relu(x)) has gradient 2 on positive x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -1.0, 2.0]).unwrap(), true);
        let r = g.relu(x);
        let s1 = g.sum(r);
        let s2 = g.sum(r);
        let f = g.add(s1, s2).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 0.0, 2.0]);
    }
}
