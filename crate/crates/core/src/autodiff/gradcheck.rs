use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use rand::seq::index::sample;
use rand::Rng as _;

use super::graph::{Graph, Var};
use super::tensor::{Shape, Tensor};
use crate::Result;

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input; all of them when the input is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over probed coordinates.
    pub max_rel_error: f64,
    /// Worst normwise `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)` over inputs, taken over
    /// the probed coordinates of each input. Unlike the coordinate-wise
    /// figure it is not dominated by near-zero partials, where the O(step²)
    /// truncation of the central difference exceeds any relative bound.
    pub max_norm_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a kink (see
    /// [`Graph::branch_pattern`]); these are replaced by fresh coordinates.
    pub skipped: usize,
    /// (input, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>, seed: u64, trainable: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out);
    let loss = if shape.is_scalar() {
        out
    } else {
        // random projection so every output element contributes
        let proj = projection.get_or_insert_with(|| {
            let mut rng = crate::rng::derived(seed, 0x9c, 1);
            Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
        });
        let r = g.constant(proj.clone());
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    Ok((g, vars, loss))
}

/// Compares analytic gradients of `f` at `inputs` with central differences
/// in double precision. Coordinates whose `±step` stencil changes the
/// branch of a kinked op are skipped, since the difference quotient is
/// meaningless there.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut projection = None;
    let (mut g, vars, loss) = evaluate(&f, inputs, &mut projection, opts.seed, true)?;
    g.backward(loss)?;
    let pattern = g.branch_pattern();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect();

    let mut rng = crate::rng::derived(opts.seed, 0x9c, 2);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_norm_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        // random visiting order; stop after `max_coords` smooth coordinates
        let order = sample(&mut rng, input.len(), input.len()).into_vec();
        let mut taken = 0;
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for j in order {
            if taken == opts.max_coords {
                break;
            }
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let (gp, _, lp) = evaluate(&f, &probe, &mut projection, opts.seed, false)?;
            probe[i].data_mut()[j] = orig - opts.step;
            let (gm, _, lm) = evaluate(&f, &probe, &mut projection, opts.seed, false)?;
            probe[i].data_mut()[j] = orig;
            if gp.branch_pattern() != pattern || gm.branch_pattern() != pattern {
                report.skipped += 1;
                continue;
            }
            taken += 1;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * opts.step);
            let a = analytic[i][j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j, a, numeric));
            }
        }
        let scale = a2.max(n2).sqrt();
        if scale > 0.0 {
            report.max_norm_rel_error = report.max_norm_rel_error.max(diff2.sqrt() / scale);
        } else if diff2 > 0.0 {
            report.max_norm_rel_error = f64::INFINITY;
        }
    }
    Ok(report)
}

/// [`grad_check`] at inputs drawn uniformly from `[-1, 1]` with `seed`.
pub fn grad_check_shapes<F>(f: F, shapes: &[Shape], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = crate::rng::derived(seed, 0x9c, 0);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|&s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
        .collect();
    grad_check(f, &inputs, &GradCheckOptions { seed, ..Default::default() })
}
