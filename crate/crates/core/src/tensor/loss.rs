use super::graph::{Backward, GradAcc, Graph, Var};
use super::nn::sigmoid;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// How a per-element loss is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    /// Mean over contributing elements (mask non-zero). No contributors gives 0.
    Mean,
    Sum,
    /// Sum multiplied by a constant.
    Scaled(f64),
}

impl Reduction {
    fn factor(self, contributing: usize) -> f64 {
        match self {
            Reduction::Mean if contributing == 0 => 0.0,
            Reduction::Mean => 1.0 / contributing as f64,
            Reduction::Sum => 1.0,
            Reduction::Scaled(s) => s,
        }
    }
}

fn contributing<T: Real>(mask: Option<&[T]>, n: usize) -> usize {
    mask.map_or(n, |m| m.iter().filter(|&&v| v != T::zero()).count())
}

fn add_into<T: Real>(acc: &mut GradAcc<T>, graph: &Graph<T>, v: Var, g: &[T]) {
    if !acc.wants(v) {
        return;
    }
    let buf = acc.buf(v, graph.shape(v)).data_mut();
    for (d, &s) in buf.iter_mut().zip(g) {
        *d += s;
    }
}

/// `max(z, 0) - z t + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_value<T: Real>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

/// `logsumexp(z) - z[label]` for each row of a `(rows, k)` logit matrix.
pub fn cross_entropy_per_row<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> Vec<T> {
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect()
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

struct BceOp<T> {
    logits: Var,
    targets: Vec<T>,
    mask: Option<Vec<T>>,
    factor: T,
}

struct CrossEntropyOp {
    logits: Var,
    labels: Vec<usize>,
    factor: f64,
}

struct L1Op<T> {
    pred: Var,
    target: Vec<T>,
    mask: Option<Vec<T>>,
    factor: T,
}

struct CosineRowsOp<T> {
    a: Var,
    b: Var,
    eps: T,
}

impl<T: Real> Graph<T> {
    /// Binary cross-entropy on logits, optionally masked elementwise.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[T],
        mask: Option<&[T]>,
        reduction: Reduction,
    ) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(Error::shape("bce_with_logits", "targets/mask must match logits"));
        }
        let factor = T::of(reduction.factor(contributing(mask, n)));
        let z = self.value(logits).data();
        let mut s = T::zero();
        for i in 0..n {
            let w = mask.map_or(T::one(), |m| m[i]);
            if w != T::zero() {
                s += w * bce_with_logits_value(z[i], targets[i]);
            }
        }
        Ok(self.push(
            Tensor::scalar(s * factor),
            &[logits],
            BceOp {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(|m| m.to_vec()),
                factor,
            },
        ))
    }

    /// Softmax cross-entropy of `(rows, k)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (rows, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("class index {bad} out of range for {k} classes"),
            ));
        }
        let factor = reduction.factor(rows);
        let per = cross_entropy_per_row(self.value(logits).data(), k, labels);
        let s: T = per.into_iter().sum();
        Ok(self.push(
            Tensor::scalar(s * T::of(factor)),
            &[logits],
            CrossEntropyOp {
                logits,
                labels: labels.to_vec(),
                factor,
            },
        ))
    }

    /// Absolute error against a constant target, optionally masked.
    pub fn l1_loss(&mut self, pred: Var, target: &[T], mask: Option<&[T]>, reduction: Reduction) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(Error::shape("l1_loss", "target/mask must match prediction"));
        }
        let factor = T::of(reduction.factor(contributing(mask, n)));
        let p = self.value(pred).data();
        let mut s = T::zero();
        for i in 0..n {
            let w = mask.map_or(T::one(), |m| m[i]);
            if w != T::zero() {
                s += w * (p[i] - target[i]).abs();
            }
        }
        Ok(self.push(
            Tensor::scalar(s * factor),
            &[pred],
            L1Op {
                pred,
                target: target.to_vec(),
                mask: mask.map(|m| m.to_vec()),
                factor,
            },
        ))
    }

    /// Row-wise `dot(a, b) / (max(|a|, eps) * max(|b|, eps))` for two
    /// `(rows, d)` matrices. Returns a `(rows)` vector.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(a).dims2("cosine_similarity")?;
        if self.shape(b) != [rows, d] {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let eps = T::of(eps);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..rows)
            .map(|r| cosine(&x[r * d..(r + 1) * d], &y[r * d..(r + 1) * d], eps))
            .collect();
        let value = Tensor::new(&[rows], out)?;
        Ok(self.push(value, &[a, b], CosineRowsOp { a, b, eps }))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if na != nb {
            return Err(Error::shape("cosine_similarity", format!("lengths {na} and {nb}")));
        }
        let a2 = self.reshape(a, &[1, na])?;
        let b2 = self.reshape(b, &[1, nb])?;
        let c = self.cosine_rows(a2, b2, eps)?;
        self.reshape(c, &[])
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn cosine<T: Real>(a: &[T], b: &[T], eps: T) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    dot / (norm(a).max(eps) * norm(b).max(eps))
}

impl<T: Real> Backward<T> for BceOp<T> {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let z = graph.value(self.logits).data();
        let g0 = grad_out.item() * self.factor;
        let g: Vec<T> = (0..z.len())
            .map(|i| {
                let w = self.mask.as_ref().map_or(T::one(), |m| m[i]);
                g0 * w * (sigmoid(z[i]) - self.targets[i])
            })
            .collect();
        add_into(acc, graph, self.logits, &g);
    }
}

impl<T: Real> Backward<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let k = graph.shape(self.logits)[1];
        let z = graph.value(self.logits).data();
        let g0 = grad_out.item() * T::of(self.factor);
        let mut g = vec![T::zero(); z.len()];
        for (r, (row, &y)) in z.chunks(k).zip(&self.labels).enumerate() {
            let lse = log_sum_exp(row);
            for j in 0..k {
                let p = (row[j] - lse).exp();
                let t = if j == y { T::one() } else { T::zero() };
                g[r * k + j] = g0 * (p - t);
            }
        }
        add_into(acc, graph, self.logits, &g);
    }
}

impl<T: Real> Backward<T> for L1Op<T> {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let p = graph.value(self.pred).data();
        let g0 = grad_out.item() * self.factor;
        let g: Vec<T> = (0..p.len())
            .map(|i| {
                let w = self.mask.as_ref().map_or(T::one(), |m| m[i]);
                let d = p[i] - self.target[i];
                let sign = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g0 * w * sign
            })
            .collect();
        add_into(acc, graph, self.pred, &g);
    }
}

impl<T: Real> Backward<T> for CosineRowsOp<T> {
    fn name(&self) -> &'static str {
        "cosine_similarity"
    }

    fn backward(&self, graph: &Graph<T>, _out: Var, grad_out: &Tensor<T>, acc: &mut GradAcc<T>) {
        let d = graph.shape(self.a)[1];
        let (x, y) = (graph.value(self.a).data(), graph.value(self.b).data());
        let gy = grad_out.data();
        let mut ga = vec![T::zero(); x.len()];
        let mut gb = vec![T::zero(); y.len()];
        for (r, &g) in gy.iter().enumerate() {
            let a = &x[r * d..(r + 1) * d];
            let b = &y[r * d..(r + 1) * d];
            let (na, nb) = (norm(a), norm(b));
            let (da, db) = (na.max(self.eps), nb.max(self.eps));
            let dot: T = a.iter().zip(b).map(|(&p, &q)| p * q).sum();
            let cos = dot / (da * db);
            // The norm only depends on the vector while it exceeds eps.
            let ka = if na > self.eps { cos / (da * da) } else { T::zero() };
            let kb = if nb > self.eps { cos / (db * db) } else { T::zero() };
            for i in 0..d {
                ga[r * d + i] = g * (b[i] / (da * db) - ka * a[i]);
                gb[r * d + i] = g * (a[i] / (da * db) - kb * b[i]);
            }
        }
        add_into(acc, graph, self.a, &ga);
        add_into(acc, graph, self.b, &gb);
    }
}
