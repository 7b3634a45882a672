//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Entries whose ±h evaluations straddled a ReLU/PReLU kink.
    pub entries_skipped: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

/// Relative error of one tensor's checked entries, scaled by the larger of the
/// two gradients' magnitudes over those entries.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    diff / scale
}

/// Entries to perturb: all of them for small tensors, otherwise the largest
/// analytic entries plus a random sample.
fn pick_entries(grad: &Tensor, max_entries: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    if n <= max_entries {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
    let mut picked: Vec<usize> = order[..max_entries / 2].to_vec();
    while picked.len() < max_entries {
        let i = rng.random_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Compares `analytic` against central differences of `loss` around `inputs`.
pub fn check_function<F>(
    name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    loss: F,
    max_entries: usize,
    seed: u64,
) -> Result<Vec<GradcheckResult>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    check_piecewise(name, inputs, analytic, |t| Ok((loss(t)?, 0)), max_entries, seed)
}

/// Like [`check_function`] for piecewise-smooth losses: `loss` also returns an
/// activation pattern, and entries whose perturbed patterns differ from the
/// unperturbed one are skipped, since a central difference across a kink
/// does not estimate the derivative.
pub fn check_piecewise<F>(
    name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    loss: F,
    max_entries: usize,
    seed: u64,
) -> Result<Vec<GradcheckResult>>
where
    F: Fn(&[Tensor]) -> Result<(f64, u64)>,
{
    let (_, base_pattern) = loss(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let entries = pick_entries(grad, max_entries, &mut rng);
        let mut a = Vec::with_capacity(entries.len());
        let mut n = Vec::with_capacity(entries.len());
        let mut skipped = 0;
        for &i in &entries {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let (up, p_up) = loss(&probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let (down, p_down) = loss(&probe)?;
            probe[k].data_mut()[i] = orig;
            if p_up != base_pattern || p_down != base_pattern {
                skipped += 1;
                continue;
            }
            a.push(grad.data()[i]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
        let label = if analytic.len() == 1 {
            name.to_string()
        } else {
            format!("{name}[{k}]")
        };
        out.push(GradcheckResult {
            name: label,
            max_rel_error: rel_error(&a, &n),
            entries_checked: a.len(),
            entries_skipped: skipped,
        });
    }
    Ok(out)
}

type Builder = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Scalarizes `build` with fixed random weights and checks every input.
fn op_case(name: &str, inputs: Vec<Tensor>, build: Builder, seed: u64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let (r, c) = g.shape(out);
        Tensor::uniform(r, c, 1.0, &mut rng)
    };
    let forward = |ts: &[Tensor]| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = if g.shape(out) == (1, 1) {
            out
        } else {
            let w = g.input(weights.clone());
            let weighted = g.mul(out, w)?;
            g.sum(weighted)
        };
        Ok((g, loss, vars))
    };
    let (g, loss, vars) = forward(&inputs)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    let per_input = check_function(
        name,
        &inputs,
        &analytic,
        |ts| {
            let (g, loss, _) = forward(ts)?;
            Ok(g.value(loss).item())
        },
        64,
        seed,
    )?;
    Ok(per_input
        .into_iter()
        .fold(
            GradcheckResult {
                name: name.to_string(),
                max_rel_error: 0.0,
                entries_checked: 0,
                entries_skipped: 0,
            },
            |acc, r| GradcheckResult {
                name: acc.name,
                max_rel_error: acc.max_rel_error.max(r.max_rel_error),
                entries_checked: acc.entries_checked + r.entries_checked,
                entries_skipped: acc.entries_skipped + r.entries_skipped,
            },
        ))
}

/// Random values kept at least 0.1 away from zero so piecewise-linear ops
/// have no kink within a finite-difference step.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Gradient check of every graph operator on small random shapes.
pub fn check_operators(seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r: usize, c: usize| Tensor::uniform(r, c, 1.0, &mut rng);
    let cases: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        ("pointwise_conv", vec![u(3, 7), u(4, 3), u(4, 1)], |g, v| g.pointwise_conv(v[0], v[1], v[2])),
        ("dense", vec![u(5, 1), u(3, 5), u(3, 1)], |g, v| g.dense(v[0], v[1], v[2])),
        ("conv1d", vec![u(2, 23), u(3, 8)], |g, v| g.conv1d(v[0], v[1], 4, 2)),
        ("conv_transpose1d", vec![u(3, 6), u(3, 4)], |g, v| g.conv_transpose1d(v[0], v[1], 2)),
        ("depthwise_conv1d", vec![u(3, 12), u(3, 3)], |g, v| g.depthwise_conv1d(v[0], v[1], 2)),
        ("channelwise_norm", vec![u(4, 6), u(4, 1), u(4, 1)], |g, v| g.channelwise_norm(v[0], v[1], v[2])),
        ("global_layer_norm", vec![u(4, 6), u(4, 1), u(4, 1)], |g, v| g.global_layer_norm(v[0], v[1], v[2])),
        ("sigmoid", vec![u(3, 5)], |g, v| Ok(g.sigmoid(v[0]))),
        ("concat_channels", vec![u(2, 5), u(3, 5)], |g, v| g.concat_channels(v[0], v[1])),
        ("repeat_vector", vec![u(3, 1)], |g, v| g.repeat_vector(v[0], 4)),
        ("elementwise_mul", vec![u(3, 4), u(3, 4)], |g, v| g.mul(v[0], v[1])),
        ("add", vec![u(3, 4), u(3, 4)], |g, v| g.add(v[0], v[1])),
        ("trim_cols", vec![u(2, 9)], |g, v| g.trim_cols(v[0], 6)),
        ("neg_si_sdr", vec![u(1, 16)], |g, v| {
            let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
            g.neg_si_sdr(v[0], &target)
        }),
    ];
    let mut results = Vec::new();
    for (i, (name, inputs, build)) in cases.into_iter().enumerate() {
        results.push(op_case(name, inputs, build, seed.wrapping_add(i as u64))?);
    }
    let kinked: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        ("relu", vec![away_from_zero(3, 5, &mut rng)], |g, v| Ok(g.relu(v[0]))),
        ("prelu", vec![away_from_zero(3, 5, &mut rng), away_from_zero(3, 1, &mut rng)], |g, v| g.prelu(v[0], v[1])),
    ];
    for (i, (name, inputs, build)) in kinked.into_iter().enumerate() {
        results.push(op_case(name, inputs, build, seed.wrapping_add(100 + i as u64))?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes() {
        for r in check_operators(11).unwrap() {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_error);
            assert!(r.entries_checked > 0);
        }
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = vec![Tensor::row(vec![3e-6, 0.5, -0.4])];
        let run = |t: &[Tensor]| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let v = g.input(t[0].clone());
            let r = g.relu(v);
            let s = g.sum(r);
            Ok((g.value(s).item(), g.activation_pattern()))
        };
        let analytic = vec![Tensor::row(vec![1.0, 1.0, 0.0])];
        let r = check_piecewise("relu", &x, &analytic, run, 8, 0).unwrap();
        assert_eq!(r[0].entries_skipped, 1);
        assert_eq!(r[0].entries_checked, 2);
        assert!(r[0].passed());
        let plain = check_function("relu", &x, &analytic, |t| Ok(run(t)?.0), 8, 0).unwrap();
        assert!(!plain[0].passed());
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = vec![Tensor::vector(vec![1.0, 2.0])];
        let wrong = vec![Tensor::vector(vec![2.0, 4.5])];
        let r = check_function("sq", &x, &wrong, |t| Ok(t[0].data().iter().map(|v| v * v).sum()), 8, 0).unwrap();
        assert!(!r[0].passed());
    }
}
