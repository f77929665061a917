//! Named-parameter building blocks shared by the encoder and the language model.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// `{prefix}.weight`, plus `{prefix}.bias` when present in the store.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let bias_name = format!("{prefix}.bias");
    let b = g.store().contains(&bias_name).then(|| g.param(&bias_name));
    g.linear(x, w, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Var {
    let gamma = g.param(&format!("{prefix}.weight"));
    let beta = g.param(&format!("{prefix}.bias"));
    g.layer_norm(x, gamma, beta)
}

/// fc1 → GELU → fc2
pub fn ffn<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Var {
    let h = linear(g, x, &format!("{prefix}.fc1"));
    let h = g.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Every token sees every token.
pub fn full_ranges(n: usize) -> Arc<Vec<(usize, usize)>> {
    Arc::new(vec![(0, n); n])
}

/// Token `i` sees tokens `0..=i`.
pub fn causal_ranges(n: usize) -> Arc<Vec<(usize, usize)>> {
    Arc::new((0..n).map(|i| (0, i + 1)).collect())
}

/// Contiguous blocks of `block` tokens attend only within themselves.
pub fn block_ranges(n: usize, block: usize) -> Arc<Vec<(usize, usize)>> {
    assert!(block > 0 && n % block == 0);
    Arc::new(
        (0..n)
            .map(|i| {
                let lo = i / block * block;
                (lo, lo + block)
            })
            .collect(),
    )
}
