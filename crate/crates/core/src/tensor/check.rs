use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences `(f(x + eps) - f(x - eps)) / 2 eps`.
///
/// Checks every coordinate of `params` when there are at most `max_coords`
/// of them, otherwise a seeded random subset of `max_coords`. Returns the
/// largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`. The
/// graph is left evaluated at the original parameter values.
pub fn finite_diff_check(
    graph: &mut Graph,
    output: Var,
    params: &[Var],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("finite difference step {eps}")));
    }
    let out = graph.value(output);
    if out.len() != 1 {
        return Err(Error::Shape(format!("finite differences need a scalar output, got {:?}", out.shape())));
    }
    graph.evaluate(&[])?;
    let grads = graph.backward(output)?;

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, &p)| (0..graph.value(p).len()).map(move |c| (pi, c)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let originals: Vec<Tensor> = params.iter().map(|&p| graph.value(p).clone()).collect();
    let mut worst: f64 = 0.0;
    for (pi, c) in coords {
        let p = params[pi];
        let analytic = grads.get(p).map_or(0.0, |g| g.data()[c]);
        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut t = originals[pi].clone();
            t.data_mut()[c] += delta;
            graph.evaluate(&[(p, t)])?;
            Ok(graph.value(output).data()[0])
        };
        let plus = eval_at(eps)?;
        let minus = eval_at(-eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
        graph.evaluate(&[(p, originals[pi].clone())])?;
    }
    Ok(worst)
}
