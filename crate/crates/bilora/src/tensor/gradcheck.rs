//! Finite-difference gradient checking.
//!
//! This is the independent route against the analytic backward pass: it
//! only ever calls the forward evaluation and pokes raw parameter entries,
//! so it cannot inherit a bug from a vector-Jacobian rule. Both routes are
//! compared through the scale-aware relative error
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// Forward evaluation under check: records into the supplied graph and
/// returns a scalar loss built from `params`.
pub type LossFn<'a, F> = dyn FnMut(&mut Graph<F>) -> Result<Tensor<F>> + 'a;

/// Compare analytic gradients against central differences with the given
/// `step`, over every entry of every parameter. Returns the worst relative
/// error seen. Errors out if any evaluation turns non-finite.
pub fn grad_check<F: Scalar>(f: &mut LossFn<'_, F>, params: &[Tensor<F>], step: F) -> Result<F> {
    let plans: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    check_entries(f, params, step, &plans)
}

/// Like [`grad_check`] but probing at most `max_entries` randomly chosen
/// entries per parameter (seeded, so reruns probe the same entries). The
/// analytic pass still covers everything; only the finite-difference side
/// is subsampled, which is what makes big layers checkable in bounded time.
pub fn grad_check_sampled<F: Scalar>(
    f: &mut LossFn<'_, F>,
    params: &[Tensor<F>],
    step: F,
    max_entries: usize,
    seed: u64,
) -> Result<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.numel();
            if n <= max_entries {
                (0..n).collect()
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, n, max_entries).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_entries(f, params, step, &plans)
}

fn check_entries<F: Scalar>(
    f: &mut LossFn<'_, F>,
    params: &[Tensor<F>],
    step: F,
    plans: &[Vec<usize>],
) -> Result<F> {
    if step <= F::zero() {
        return Err(Error::contract("grad_check", "step must be positive"));
    }
    for p in params {
        if !p.requires_grad() {
            return Err(Error::contract(
                "grad_check",
                "every checked parameter must have requires_grad set",
            ));
        }
        p.zero_grad();
    }

    // Analytic route: one forward, one backward.
    let mut graph = Graph::new();
    let loss = f(&mut graph)?;
    let base = scalar_loss(&loss)?;
    if !base.is_finite() {
        return Err(Error::Numeric("loss is not finite at the base point".into()));
    }
    graph.backward(&loss)?;
    let analytic: Vec<Vec<F>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![F::zero(); p.numel()]))
        .collect();

    // Numeric route: two forwards per probed entry, nothing shared with the
    // backward code.
    let two = F::c(2.0);
    let mut worst = F::zero();
    for (pi, p) in params.iter().enumerate() {
        for &i in &plans[pi] {
            let original = p.data()[i];
            let plus = eval_at(f, p, i, original + step)?;
            let minus = eval_at(f, p, i, original - step)?;
            restore(p, i, original);
            let numeric = (plus - minus) / (two * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite difference diverged at parameter {pi} entry {i}"
                )));
            }
            let a = analytic[pi][i];
            let denom = F::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn eval_at<F: Scalar>(f: &mut LossFn<'_, F>, p: &Tensor<F>, i: usize, value: F) -> Result<F> {
    restore(p, i, value);
    let mut graph = Graph::new();
    let loss = f(&mut graph)?;
    // Forward only; the graph drops without a backward pass.
    scalar_loss(&loss)
}

fn restore<F: Scalar>(p: &Tensor<F>, i: usize, value: F) {
    let mut data = p.to_vec();
    data[i] = value;
    p.set_data(data).expect("length unchanged");
}

fn scalar_loss<F: Scalar>(loss: &Tensor<F>) -> Result<F> {
    loss.item().map_err(|_| {
        Error::contract("grad_check", format!("loss must be scalar, got {:?}", loss.shape()))
    })
}
