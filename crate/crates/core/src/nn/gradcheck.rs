//! Central finite-difference oracle for analytic gradients.

use crate::error::Result;
use crate::nn::layers::{BoundParams, ParamStore};
use crate::nn::tape::{Tape, Var};

/// Compare the tape's analytic gradients of a scalar function against central
/// finite differences, returning the maximum relative error with denominator
/// max(1, |analytic|, |numeric|).
///
/// `build` must construct the same loss whenever called with the same store
/// contents (it is re-run 2 * numel times for the differences).
pub fn grad_check<F>(mut build: F, store: &mut ParamStore, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &BoundParams) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&tape, &bound);
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|i| store.grad_at(i).data.clone())
        .collect();

    let eval = |store: &ParamStore, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = build(&mut tape, &bound)?;
        tape.scalar_value(loss)
    };

    let mut max_rel = 0.0f64;
    for i in 0..store.len() {
        for j in 0..store.param_at(i).numel() {
            let orig = store.param_at(i).data[j];
            store.param_at_mut(i).data[j] = orig + step;
            let plus = eval(store, &mut build)?;
            store.param_at_mut(i).data[j] = orig - step;
            let minus = eval(store, &mut build)?;
            store.param_at_mut(i).data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{self, init_linear};
    use crate::nn::tensor::Tensor;
    use crate::util::seeded_rng;

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = seeded_rng(0, "gc-linear");
        let mut store = ParamStore::new();
        init_linear(&mut store, "l", 3, 4, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let target: Vec<f64> = (0..6).map(|i| (i as f64) * 0.1).collect();
        let err = grad_check(
            |tape, bound| {
                let xv = tape.leaf(Tensor::new(vec![2, 4], x.clone()).unwrap(), false);
                let tv = tape.leaf(Tensor::new(vec![2, 3], target.clone()).unwrap(), false);
                let y = layers::linear(tape, bound, "l", xv)?;
                layers::mse_loss(tape, y, tv)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
