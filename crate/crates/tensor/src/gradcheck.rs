//! Finite-difference verification of reverse-mode gradients.
//!
//! Relative error per coordinate is `|a - fd| / max(|a|, |fd|, floor)` with
//! central differences `fd = (L(x+h) - L(x-h)) / 2h`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, OpKind, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error. Central differences carry
    /// roundoff of roughly `eps * |L| / step`, so gradients below this
    /// magnitude are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per parameter; 0 checks every coordinate.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            coords_per_param: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub passed: bool,
    /// On failure, the first recorded op whose local backward rule
    /// disagrees with finite differences.
    pub failing_op: Option<OpKind>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(n: usize, per: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if per == 0 || per >= n {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, per).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks the gradient of the scalar produced by `loss_fn` with respect to
/// every tensor in `params`. `loss_fn` receives a fresh graph and one
/// parameter leaf per tensor, and must be deterministic.
pub fn gradient_check<F>(
    params: &[Tensor<f64>],
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new(cfg.seed);
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (graph, vars, loss) = eval(params)?;
    let grads = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perturbed = params.to_vec();
    let mut worst: Option<Coordinate> = None;
    let mut checked = 0;
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter leaf").data().to_vec();
        for index in coords(params[p].numel(), cfg.coords_per_param, &mut rng) {
            let orig = params[p].data()[index];
            perturbed[p].data_mut()[index] = orig + cfg.step;
            let (g, _, l) = eval(&perturbed)?;
            let plus = g.value(l).data()[0];
            perturbed[p].data_mut()[index] = orig - cfg.step;
            let (g, _, l) = eval(&perturbed)?;
            let minus = g.value(l).data()[0];
            perturbed[p].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = relative_error(analytic[index], numeric, cfg.floor);
            checked += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(Coordinate {
                    param: p,
                    index,
                    analytic: analytic[index],
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    let passed = max_rel_error < cfg.tolerance;
    let failing_op = if passed {
        None
    } else {
        locate_faulty_op(&graph, cfg)?.map(|(kind, _)| kind)
    };
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        checked,
        passed,
        failing_op,
    })
}

/// Re-checks every recorded op in isolation, in recording order, against
/// finite differences of `sum(r * op(x))` for a random projection `r`.
/// Returns the first op exceeding the tolerance with its error.
pub fn locate_faulty_op(graph: &Graph<f64>, cfg: &GradCheckConfig) -> Result<Option<(OpKind, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    for i in 0..graph.len() {
        let var = Var(i);
        if graph.kind(var) == OpKind::Leaf {
            continue;
        }
        let inputs: Vec<Tensor<f64>> = graph
            .inputs_of(var)
            .iter()
            .map(|v| graph.value(*v).clone())
            .collect();
        let err = local_check(graph, var, inputs, cfg, &mut rng)?;
        if err >= cfg.tolerance {
            return Ok(Some((graph.kind(var), err)));
        }
    }
    Ok(None)
}

fn local_check(
    graph: &Graph<f64>,
    var: Var,
    inputs: Vec<Tensor<f64>>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (mini, leaves, out) = graph.replay(var, inputs.clone())?;
    let proj = Tensor::<f64>::randn(mini.shape(out), 1.0, rng);
    let grads = mini.backward_from(out, proj.clone())?;
    let objective = |values: Vec<Tensor<f64>>| -> Result<f64> {
        let (g, _, o) = graph.replay(var, values)?;
        Ok(g.value(o)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut worst = 0.0f64;
    for (j, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("leaf gradient").data().to_vec();
        for index in coords(inputs[j].numel(), 8, rng) {
            let mut plus = inputs.clone();
            plus[j].data_mut()[index] += cfg.step;
            let mut minus = inputs.clone();
            minus[j].data_mut()[index] -= cfg.step;
            let numeric = (objective(plus)? - objective(minus)?) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic[index], numeric, cfg.floor));
        }
    }
    Ok(worst)
}
