//! Central finite-difference checks for graph gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is
//! independent of the backward rules it verifies.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
    /// At most this many elements per input are probed (evenly strided).
    pub max_probes: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_probes: 64 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric, floor));
        self.probes += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.probes += other.probes;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x+h) − f(x−h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Probe indices for a tensor of `len` elements.
pub fn probe_indices(len: usize, max_probes: usize) -> Vec<usize> {
    if len <= max_probes {
        return (0..len).collect();
    }
    let stride = len as f64 / max_probes as f64;
    (0..max_probes).map(|i| (i as f64 * stride) as usize).collect()
}

/// Builds a scalar function of `inputs` with `build`, differentiates it by
/// backward, and compares every probed element against central differences.
pub fn check<F>(build: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(id).len()]))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ids)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in probe_indices(input.len(), opts.max_probes) {
            let x0 = input.data()[idx];
            let numeric = central_difference(
                |x| {
                    work[k].data_mut()[idx] = x;
                    eval(&work)
                },
                x0,
                opts.step,
            )?;
            work[k].data_mut()[idx] = x0;
            let a = analytic[k][idx];
            if !numeric.is_finite() {
                return Err(Error::NumericFault(format!("finite difference not finite at input {k}[{idx}]")));
            }
            report.record(a, numeric, opts.floor);
        }
    }
    Ok(report)
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    let mut r = crate::rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape")
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element gets a distinct gradient.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = g.constant(random(g.shape(y), seed, -1.0, 1.0))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (&'static str, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>, Vec<Tensor>);

fn case(
    name: &'static str,
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
    inputs: Vec<Tensor>,
) -> Case {
    let seed = name.len() as u64 * 7919;
    (name, Box::new(move |g: &mut Graph, ids: &[NodeId]| {
        let y = op(g, ids)?;
        weighted_sum(g, y, seed)
    }), inputs)
}

/// Checks every differentiable op once on small random inputs.
pub fn layer_suite(opts: GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let x4 = random(&[2, 3, 6, 6], 1, -1.0, 1.0);
    let x3 = random(&[2, 3, 4], 2, -1.0, 1.0);
    let gate = random(&[2, 3, 1, 1], 3, 0.5, 1.5);
    let mut kinked = random(&[4, 5], 4, -1.0, 1.0);
    // keep relu kinks outside the finite-difference step
    kinked.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
    let cases = vec![
        case("conv2d", |g, i| g.conv2d(i[0], i[1], Some(i[2]), 2, 1),
            vec![random(&[2, 3, 7, 7], 5, -1.0, 1.0), random(&[4, 3, 3, 3], 6, -0.5, 0.5), random(&[4], 7, -0.1, 0.1)]),
        case("maxpool2d", |g, i| g.maxpool2d(i[0], 2, 2), vec![x4.clone()]),
        case("avgpool2d", |g, i| g.avgpool2d(i[0], 2, 2), vec![x4.clone()]),
        case("global_maxpool", |g, i| g.global_maxpool(i[0]), vec![x4.clone()]),
        case("global_avgpool", |g, i| g.global_avgpool(i[0]), vec![x4.clone()]),
        case("sum_axis", |g, i| g.sum_axis(i[0], 1), vec![x3.clone()]),
        case("mean_axis", |g, i| g.mean_axis(i[0], 2), vec![x3.clone()]),
        case("max_axis", |g, i| g.max_axis(i[0], 1), vec![x3.clone()]),
        case("linear", |g, i| g.linear(i[0], i[1], Some(i[2])),
            vec![random(&[3, 5], 8, -1.0, 1.0), random(&[5, 4], 9, -1.0, 1.0), random(&[4], 10, -1.0, 1.0)]),
        case("matmul", |g, i| g.matmul(i[0], i[1]),
            vec![random(&[2, 3, 4], 11, -1.0, 1.0), random(&[2, 4, 2], 12, -1.0, 1.0)]),
        case("softmax", |g, i| g.softmax(i[0]), vec![random(&[3, 5], 13, -2.0, 2.0)]),
        case("relu", |g, i| g.relu(i[0]), vec![kinked]),
        case("sigmoid", |g, i| g.sigmoid(i[0]), vec![random(&[4, 5], 14, -4.0, 4.0)]),
        case("softplus", |g, i| g.softplus(i[0]), vec![random(&[4, 5], 15, -4.0, 4.0)]),
        case("scale", |g, i| g.scale(i[0], -2.5), vec![random(&[4], 16, -1.0, 1.0)]),
        case("acos_clamped", |g, i| g.acos_clamped(i[0], -1.0 + 1e-7, 1.0 - 1e-7), vec![random(&[6], 17, -0.9, 0.9)]),
        case("l2_normalize", |g, i| g.l2_normalize(i[0], 1), vec![x3.clone()]),
        case("add", |g, i| g.add(i[0], i[1]), vec![x4.clone(), gate.clone()]),
        case("sub", |g, i| g.sub(i[0], i[1]), vec![x4.clone(), gate.clone()]),
        case("mul", |g, i| g.mul(i[0], i[1]), vec![x4.clone(), gate.clone()]),
        case("div", |g, i| g.div(i[0], i[1]), vec![x4.clone(), gate]),
        case("reshape", |g, i| g.reshape(i[0], &[6, 4]), vec![x3.clone()]),
        case("permute", |g, i| g.permute(i[0], &[2, 0, 1]), vec![x3.clone()]),
        case("concat", |g, i| g.concat(&[i[0], i[1], i[0]], 2), vec![x3.clone(), random(&[2, 3, 2], 18, -1.0, 1.0)]),
        case("slice", |g, i| g.slice(i[0], 2, 1, 2), vec![x3]),
    ];
    cases.into_iter().map(|(name, build, inputs)| Ok((name, check(build, &inputs, opts)?))).collect()
}
