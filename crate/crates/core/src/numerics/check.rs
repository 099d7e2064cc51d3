//! Gradient verification against central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, VarId};
use super::tensor::Tensor;
use super::NumericsError;
use crate::real::Real;

/// A scalar-valued function assembled on a fresh graph from
/// gradient-tracked input leaves.
pub type ScalarFn<'a, S> = dyn Fn(&mut Graph<S>, &[VarId]) -> Result<VarId, NumericsError> + 'a;

/// Compare the reverse-mode gradient of `f` at `inputs` against central
/// finite differences, component by component. Returns the maximum
/// relative error, with `max(|a|, |b|, 1e-8)` in the denominator.
pub fn grad_check<S: Real>(
    f: &ScalarFn<'_, S>,
    inputs: &[Tensor<S>],
    step: S,
) -> Result<S, NumericsError> {
    grad_check_impl(f, inputs, step, None)
}

/// Like [`grad_check`] but probing at most `max_components` randomly
/// chosen components per input tensor; full-model checks use this to stay
/// inside the acceptance-suite time budget while still touching every
/// parameter tensor.
pub fn grad_check_sampled<S: Real>(
    f: &ScalarFn<'_, S>,
    inputs: &[Tensor<S>],
    step: S,
    max_components: usize,
    seed: u64,
) -> Result<S, NumericsError> {
    grad_check_impl(f, inputs, step, Some((max_components, seed)))
}

fn grad_check_impl<S: Real>(
    f: &ScalarFn<'_, S>,
    inputs: &[Tensor<S>],
    step: S,
    sampling: Option<(usize, u64)>,
) -> Result<S, NumericsError> {
    // Reverse-mode gradients.
    let mut graph = Graph::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| graph.input(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    graph.value(loss).item()?;
    let grads = graph.backward(loss, S::one())?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<S>]| -> Result<S, NumericsError> {
        let mut graph = Graph::new();
        let vars: Vec<VarId> = perturbed.iter().map(|t| graph.input(t.clone())).collect();
        let loss = f(&mut graph, &vars)?;
        graph.value(loss).item()
    };

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let floor = S::cast(1e-8);
    let two = S::cast(2.0);
    let mut max_err = S::zero();
    let mut workspace: Vec<Tensor<S>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let components: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Some((cap, _))) if n > cap => sample(rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        for comp in components {
            let original = workspace[i].data()[comp];
            workspace[i].data_mut()[comp] = original + step;
            let plus = eval(&workspace)?;
            workspace[i].data_mut()[comp] = original - step;
            let minus = eval(&workspace)?;
            workspace[i].data_mut()[comp] = original;

            let fd = (plus - minus) / (two * step);
            let a = analytic[i].data()[comp];
            let denom = a.abs().max(fd.abs()).max(floor);
            let err = (a - fd).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
