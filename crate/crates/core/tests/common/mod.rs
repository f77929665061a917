#![allow(dead_code)]

pub mod reference_vit;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volmoe::graph::{Graph, Var};
use volmoe::tensor::Tensor;
use volmoe::ParamStore64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalar `mean_r Σ_c x[r,c]·proj[c]` so every output entry reaches the loss
/// with a distinct weight.
pub fn project(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Var {
    let c = g.value(x).cols();
    let n = g.value(x).rows();
    let mut r = rng(seed);
    let w = g.constant(uniform(&mut r, &[1, c], -1.0, 1.0));
    let y = g.linear(x, w, None);
    g.mean_rows(y, vec![(0..n).collect()])
}

/// Central differences against the tape gradient for every parameter in
/// `store` (at most `per_tensor` entries each). Returns the worst relative
/// error seen.
pub fn fd_check(
    store: &mut ParamStore64,
    per_tensor: usize,
    tol: f64,
    f: impl Fn(&mut Graph<'_, f64>) -> Var,
) -> f64 {
    let grads = {
        let mut g = Graph::new(store, |_| true);
        let l = f(&mut g);
        g.backward(l)
    };
    let eval = |s: &ParamStore64| {
        let mut g = Graph::inference(s);
        let l = f(&mut g);
        g.value(l).item()
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in names {
        let n = store.tensor(&name).numel();
        let step = (n / per_tensor).max(1);
        for i in (0..n).step_by(step).take(per_tensor) {
            let orig = store.tensor(&name).data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let lp = eval(store);
            store.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let lm = eval(store);
            store.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            if (fd - an).abs() > 1e-8 {
                let err = (fd - an).abs() / fd.abs().max(an.abs());
                worst = worst.max(err);
                assert!(err < tol, "{name}[{i}]: analytic {an:.10e} vs numeric {fd:.10e}");
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
    worst
}
