//! Central finite-difference verification of graph gradients.
//!
//! The analytic gradient of a scalar function of some input tensors and every
//! stored parameter is compared coordinate-wise against
//! `(f(x + ε) − f(x − ε)) / 2ε`. Non-scalar outputs are reduced with a fixed
//! random weighting so that normalization layers do not zero the signal.
//!
//! Piecewise-linear ops (ReLU, max pooling, probability clamps) make the
//! finite difference meaningless when a perturbation crosses a kink. The graph
//! fingerprints every such decision; a coordinate whose perturbed passes change
//! the fingerprint is retried with a smaller step and skipped if it still
//! crosses.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Lower bound of the relative-error denominator.
    pub abs_floor: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub samples_per_tensor: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            abs_floor: 1e-6,
            samples_per_tensor: None,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst coordinate, e.g. `input0[12]` or `tff.gate1.weight[3]`.
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Eval {
    value: f64,
    fingerprint: u64,
}

/// Checks gradients of `forward` w.r.t. `inputs` and all parameters in `store`.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reduce_weights: Option<Tensor> = None;

    // Analytic pass; also fixes the reduction weights.
    let (analytic_inputs, analytic_params, base_fp) = {
        let mut g = Graph::new(store, opts.mode);
        g.track_kinks();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = forward(&mut g, &vars)?;
        let root = if g.value(out).numel() == 1 {
            out
        } else {
            let w = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut rng);
            reduce_weights = Some(w.clone());
            g.weighted_sum(out, w)?
        };
        if !g.value(root).all_finite() {
            return Err(Error::numerical("gradient check objective is not finite"));
        }
        let grads = g.backward(root)?;
        let ins: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut ps = Vec::new();
        for (name, p) in store.params() {
            let grad = grads
                .param(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            ps.push((name.clone(), grad));
        }
        (ins, ps, g.kink_fingerprint().unwrap_or(0))
    };
    for t in analytic_inputs.iter().chain(analytic_params.iter().map(|(_, g)| g)) {
        if !t.all_finite() {
            return Err(Error::numerical("analytic gradient is not finite"));
        }
    }

    let evaluate = |store: &ParamStore, inputs: &[Tensor]| -> Result<Eval> {
        let mut g = Graph::new(store, opts.mode);
        g.track_kinks();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = forward(&mut g, &vars)?;
        let value = match &reduce_weights {
            Some(w) => g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
            None => g.value(out).data()[0],
        };
        if !value.is_finite() {
            return Err(Error::numerical("gradient check objective is not finite"));
        }
        Ok(Eval {
            value,
            fingerprint: g.kink_fingerprint().unwrap_or(0),
        })
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    let record = |report: &mut GradCheckReport, label: String, analytic: f64, numeric: Option<f64>| match numeric {
        Some(n) => {
            report.checked += 1;
            let e = relative_error(analytic, n, opts.abs_floor);
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = format!("{label} (analytic {analytic:.6e}, numeric {n:.6e})");
            }
        }
        None => report.skipped_kinks += 1,
    };

    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.samples_per_tensor {
            Some(k) if k < len => {
                let mut idx = sample(rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    };

    // Inputs.
    let mut perturbed = inputs.to_vec();
    for (ti, grad) in analytic_inputs.iter().enumerate() {
        for i in pick(grad.numel(), &mut rng) {
            let original = perturbed[ti].data()[i];
            let numeric = central_difference(opts.epsilon, base_fp, |delta| {
                perturbed[ti].data_mut()[i] = original + delta;
                let r = evaluate(store, &perturbed);
                perturbed[ti].data_mut()[i] = original;
                r
            })?;
            record(&mut report, format!("input{ti}[{i}]"), grad.data()[i], numeric);
        }
    }

    // Parameters.
    let mut work = store.clone();
    for (name, grad) in &analytic_params {
        for i in pick(grad.numel(), &mut rng) {
            let original = work.get(name)?.value.data()[i];
            let numeric = central_difference(opts.epsilon, base_fp, |delta| {
                work.get_mut(name)?.value.data_mut()[i] = original + delta;
                let r = evaluate(&work, inputs);
                work.get_mut(name)?.value.data_mut()[i] = original;
                r
            })?;
            record(&mut report, format!("{name}[{i}]"), grad.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Central difference with kink detection; `None` when every step size tried
/// crossed a non-smooth point.
fn central_difference(
    epsilon: f64,
    base_fp: u64,
    mut f: impl FnMut(f64) -> Result<Eval>,
) -> Result<Option<f64>> {
    let mut eps = epsilon;
    for _ in 0..3 {
        let plus = f(eps)?;
        let minus = f(-eps)?;
        if plus.fingerprint == base_fp && minus.fingerprint == base_fp {
            return Ok(Some((plus.value - minus.value) / (2.0 * eps)));
        }
        eps *= 0.1;
    }
    Ok(None)
}
