//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::nn::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Result of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

/// Compare analytic gradients against central differences on randomly
/// sampled parameter coordinates.
///
/// `loss_fn` must be a deterministic scalar function of the store; `analytic`
/// holds one gradient tensor per parameter in registration order. Coordinates
/// where both gradients are below `1e-10` in magnitude count as exact.
pub fn gradient_check(
    store: &mut ParamStore,
    loss_fn: impl Fn(&ParamStore) -> f64,
    analytic: &[Tensor],
    num_coordinates: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    assert_eq!(analytic.len(), store.len(), "gradient count mismatch");
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "no parameters to check");

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    while checked < num_coordinates {
        let flat = rng.gen_range(0..total);
        let (param_idx, coord) = locate(&sizes, flat);
        let id = param_id_at(store, param_idx);

        store.nudge(id, coord, step);
        let plus = loss_fn(store);
        store.nudge(id, coord, -2.0 * step);
        let minus = loss_fn(store);
        store.nudge(id, coord, step);

        let numeric = (plus - minus) / (2.0 * step);
        let exact = analytic[param_idx].data()[coord];
        let denom = exact.abs().max(numeric.abs());
        let rel = if denom < 1e-10 {
            0.0
        } else {
            (exact - numeric).abs() / denom
        };
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    GradCheckReport {
        max_relative_error: max_rel,
        coordinates_checked: checked,
    }
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("flat coordinate out of range")
}

fn param_id_at(store: &ParamStore, index: usize) -> ParamId {
    store.by_name(store.name_at(index)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;
    use rand::SeedableRng;

    #[test]
    fn quadratic_norm_has_exact_gradient() {
        // f(p) = sum(p^2) at p = (1, 2): analytic gradient (2, 4).
        let mut store = ParamStore::new();
        store.register("p", Tensor::row_vector(&[1.0, 2.0]));

        let loss_fn = |s: &ParamStore| {
            let id = s.by_name("p").unwrap();
            s.get(id).data().iter().map(|x| x * x).sum::<f64>()
        };
        let analytic = vec![Tensor::row_vector(&[2.0, 4.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = gradient_check(&mut store, loss_fn, &analytic, 100, 1e-4, &mut rng);
        assert!(
            report.max_relative_error < 1e-8,
            "rel err {}",
            report.max_relative_error
        );
    }

    #[test]
    fn mlp2_matches_finite_differences() {
        use crate::autodiff::nn::{Activation, Mlp2, OutputHead};

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mlp = Mlp2::new(
            &mut store,
            &mut rng,
            "m",
            3,
            5,
            2,
            Activation::Selu,
            OutputHead::Softplus,
        );
        let input = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64) * 0.17 - 0.9).collect());

        let forward = |s: &ParamStore| {
            let mut tape = Tape::new();
            let bind = s.bind(&mut tape);
            let x = tape.leaf(input.clone());
            let y = mlp.apply(&mut tape, &bind, x);
            let loss = tape.mean_all(y);
            tape.value(loss).item()
        };

        let analytic = {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let x = tape.leaf(input.clone());
            let y = mlp.apply(&mut tape, &bind, x);
            let loss = tape.mean_all(y);
            let grads = tape.backward(loss);
            bind.collect_grads(&store, &grads)
        };

        let mut check_rng = ChaCha8Rng::seed_from_u64(8);
        let report = gradient_check(&mut store, forward, &analytic, 120, 1e-4, &mut check_rng);
        assert!(
            report.max_relative_error < 1e-5,
            "rel err {}",
            report.max_relative_error
        );
    }

    #[test]
    fn gru_matches_finite_differences() {
        use crate::autodiff::nn::GruCell;

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, &mut rng, "g", 3, 4);
        let x_in = Tensor::from_vec(2, 3, vec![0.3, -0.8, 1.1, 0.0, 0.5, -0.2]);
        let h_in = Tensor::from_vec(2, 4, vec![0.1, -0.1, 0.4, 0.9, -0.7, 0.2, 0.0, 0.3]);

        let forward = |s: &ParamStore| {
            let mut tape = Tape::new();
            let bind = s.bind(&mut tape);
            let x = tape.leaf(x_in.clone());
            let h = tape.leaf(h_in.clone());
            let h2 = gru.apply(&mut tape, &bind, x, h);
            let loss = tape.mean_all(h2);
            tape.value(loss).item()
        };

        let analytic = {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let x = tape.leaf(x_in.clone());
            let h = tape.leaf(h_in.clone());
            let h2 = gru.apply(&mut tape, &bind, x, h);
            let loss = tape.mean_all(h2);
            let grads = tape.backward(loss);
            bind.collect_grads(&store, &grads)
        };

        let mut check_rng = ChaCha8Rng::seed_from_u64(10);
        let report = gradient_check(&mut store, forward, &analytic, 150, 1e-4, &mut check_rng);
        assert!(
            report.max_relative_error < 1e-5,
            "rel err {}",
            report.max_relative_error
        );
    }
}
