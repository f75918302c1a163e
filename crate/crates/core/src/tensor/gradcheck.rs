//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::Reduction;
use super::nn::Cell;
use super::roi_align::Roi;
use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::heads::mimic_loss_on;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Fixed, non-degenerate projection weights used to reduce a non-scalar
/// output to a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 + ((i as f64) * 0.618_034 + 0.1).fract())
        .collect()
}

fn scalar_output<F>(f: &F, g: &mut Graph<f64>, vars: &[Var]) -> Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, vars)?;
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = projection(g.value(out).numel());
    g.weighted_sum(out, w)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = scalar_output(f, &mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the analytic gradient of `f` with central differences of step
/// `h` for every element of every input. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = scalar_output(&f, &mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[ii].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for e in 0..inputs[ii].numel() {
            let orig = inputs[ii].data()[e];
            probe[ii].data_mut()[e] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[ii].data_mut()[e] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[ii].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ii, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Relative-error bound every op must meet in 64-bit mode.
pub const SUITE_TOLERANCE: f64 = 1e-4;
const SUITE_STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Finite-difference check of every differentiable op on small random
/// inputs. Returns `(op name, report)` pairs in a fixed order.
pub fn standard_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = SUITE_STEP;
    let mut out = Vec::new();

    out.push((
        "linear",
        grad_check(
            |g, v| g.linear(v[0], v[1], Some(v[2])),
            &[rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[5])],
            h,
        )?,
    ));
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)] {
        let name = match (stride, k) {
            (1, 3) => "conv2d 3x3",
            (2, _) => "conv2d 3x3 stride 2",
            (_, 5) => "conv2d 5x5",
            _ => "conv2d 1x1",
        };
        out.push((
            name,
            grad_check(
                move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
                &[rand_tensor(&mut rng, &[2, 2, 5, 5]), rand_tensor(&mut rng, &[3, 2, k, k]), rand_tensor(&mut rng, &[3])],
                h,
            )?,
        ));
    }
    // offsets kept away from integers, where bilinear sampling has kinks
    let off = Tensor::from_fn(&[1, 18, 4, 4], |_| {
        let base: f64 = rng.random_range(-2.0..2.0);
        base.floor() + rng.random_range(0.15..0.85)
    });
    out.push((
        "deformable_conv2d",
        grad_check(
            |g, v| g.deformable_conv2d(v[0], v[1], v[2], Some(v[3]), 1, 1),
            &[rand_tensor(&mut rng, &[1, 2, 4, 4]), rand_tensor(&mut rng, &[2, 2, 3, 3]), off, rand_tensor(&mut rng, &[2])],
            h,
        )?,
    ));
    let rois = [
        Roi { batch: 0, level: 0, bbox: [3.3, 2.1, 25.7, 19.9] },
        Roi { batch: 1, level: 1, bbox: [-5.2, 10.4, 14.9, 31.3] },
    ];
    out.push((
        "roi_align",
        grad_check(
            move |g, v| g.roi_align(&v[..2], &[4.0, 8.0], &rois, 3, 2),
            &[rand_tensor(&mut rng, &[2, 2, 8, 8]), rand_tensor(&mut rng, &[2, 2, 4, 4])],
            h,
        )?,
    ));

    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let mask = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    out.push((
        "bce_with_logits",
        grad_check(
            |g, v| g.bce_with_logits(v[0], &targets, Some(&mask), Reduction::Mean),
            &[rand_tensor(&mut rng, &[6])],
            h,
        )?,
    ));
    out.push((
        "cross_entropy",
        grad_check(|g, v| g.cross_entropy(v[0], &[0, 3, 2], Reduction::Mean), &[rand_tensor(&mut rng, &[3, 4])], h)?,
    ));
    out.push((
        "l1_loss",
        grad_check(
            |g, v| g.l1_loss(v[0], &[0.5; 6], Some(&mask), Reduction::Scaled(0.25)),
            &[rand_tensor(&mut rng, &[6])],
            h,
        )?,
    ));
    out.push((
        "cosine_similarity",
        grad_check(
            |g, v| g.cosine_rows(v[0], v[1], 1e-8),
            &[rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[3, 5])],
            h,
        )?,
    ));
    out.push((
        "mimic_loss",
        grad_check(
            |g, v| mimic_loss_on(g, v[0], v[1], v[2], v[3]),
            &[
                rand_tensor(&mut rng, &[4, 3]),
                rand_tensor(&mut rng, &[4, 6]),
                rand_tensor(&mut rng, &[4, 3]),
                rand_tensor(&mut rng, &[4, 6]),
            ],
            h,
        )?,
    ));
    out.push((
        "softmax",
        grad_check(|g, v| g.softmax(v[0], 1), &[rand_tensor(&mut rng, &[2, 4, 3])], h)?,
    ));
    out.push(("sigmoid", grad_check(|g, v| Ok(g.sigmoid(v[0])), &[rand_tensor(&mut rng, &[5])], h)?));
    out.push((
        "relu",
        grad_check(|g, v| Ok(g.relu(v[0])), &[Tensor::new(&[4], vec![0.3, -0.2, 1.1, -0.7])?], h)?,
    ));
    out.push((
        "upsample2x",
        grad_check(|g, v| g.upsample2x(v[0]), &[rand_tensor(&mut rng, &[1, 2, 2, 3])], h)?,
    ));
    out.push((
        "gather_cells",
        grad_check(
            |g, v| {
                let cells = [
                    Cell { source: 0, batch: 0, y: 1, x: 0 },
                    Cell { source: 1, batch: 0, y: 0, x: 0 },
                    Cell { source: 0, batch: 0, y: 1, x: 0 },
                ];
                g.gather_cells(&v[..2], &cells)
            },
            &[rand_tensor(&mut rng, &[1, 3, 2, 2]), rand_tensor(&mut rng, &[1, 3, 1, 1])],
            h,
        )?,
    ));
    Ok(out)
}
