//! Text-guided hierarchical mixture of experts.
//!
//! Two levels:
//! - a task router reads the gradient-blocked prompt indicator `h_T`, takes a
//!   softmax over two task experts and binarizes it, so every image token of a
//!   sample goes through exactly one task expert;
//! - each task expert is a token-level MoE whose router keeps the top-k logits
//!   per token (the rest masked to −∞) and mixes the selected FFN experts.
//!
//! Task index convention: 0 = report generation (MRG), 1 = VQA (MVQA).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{top_k_indices, Graph, Var};
use crate::nn::{ffn, linear};
use crate::params::{normal_tensor, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit_adapt::insert_ffn_shapes;

/// Clamp applied to the router probability inside the cross-entropy.
pub const ROUTER_LOSS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    /// Token-level experts per task expert (`M`).
    pub experts: usize,
    pub top_k: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            top_k: 2,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 2 {
            return Err(Error::Config(format!(
                "need at least 2 experts, got {}",
                self.experts
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.experts, self.top_k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "MRG")]
    Mrg,
    #[serde(rename = "MVQA")]
    Mvqa,
}

impl Task {
    pub fn index(self) -> usize {
        match self {
            Task::Mrg => 0,
            Task::Mvqa => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Task::Mrg
        } else {
            Task::Mvqa
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mrg => "MRG",
            Task::Mvqa => "MVQA",
        })
    }
}

/// Which MoE variant a layer's weights describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeKind {
    /// A single token-level MoE (first training stage).
    Token,
    /// Two token-level MoEs under a hard task router.
    Task,
}

pub fn moe_kind<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Option<MoeKind> {
    if store.contains(&format!("{prefix}.task_router.weight")) {
        Some(MoeKind::Task)
    } else if store.contains(&format!("{prefix}.router.weight")) {
        Some(MoeKind::Token)
    } else {
        None
    }
}

/// Pooled text-encoder output for the prompt, cut off from its producer.
#[derive(Clone, Debug)]
pub struct IndicatorVector<T> {
    pub var: Var,
    pub values: Tensor<T>,
    pub grad_blocked: bool,
}

/// Runs the first `layers` LM layers on the prompt, mean-pools over
/// positions and blocks the gradient.
pub fn text_indicator<T: Scalar>(
    g: &mut Graph<'_, T>,
    lm: &crate::mllm::LmConfig,
    lora_scale: f64,
    prompt_ids: &[usize],
) -> Result<IndicatorVector<T>> {
    if prompt_ids.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let hidden = crate::mllm::text_hidden(g, lm, lora_scale, prompt_ids)?;
    let pooled = g.mean_rows(hidden, vec![(0..prompt_ids.len()).collect()]);
    let var = g.detach(pooled);
    Ok(IndicatorVector {
        var,
        values: g.value(var).clone(),
        grad_blocked: true,
    })
}

/// Soft task weights `wt` and their binarization `wt'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskRoute {
    pub wt: [f64; 2],
    pub onehot: [u8; 2],
}

impl TaskRoute {
    pub fn choice(&self) -> usize {
        if self.onehot[0] == 1 {
            0
        } else {
            1
        }
    }
}

/// Softmax over two logits then one-hot at the argmax, ties to index 0.
pub fn task_route(logits: [f64; 2]) -> Result<TaskRoute> {
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite task-router logits {logits:?}"
        )));
    }
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let z = e[0] + e[1];
    let wt = [e[0] / z, e[1] / z];
    let onehot = if wt[1] > wt[0] { [0, 1] } else { [1, 0] };
    Ok(TaskRoute { wt, onehot })
}

/// Task-router logits `W · h_T` and the routing decision.
pub fn task_router<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: &IndicatorVector<T>,
    prefix: &str,
) -> Result<(Var, TaskRoute)> {
    debug_assert!(h.grad_blocked);
    let w = g.param(&format!("{prefix}.task_router.weight"));
    let wv = g.value(w);
    if wv.cols() != h.values.numel() {
        return Err(Error::Config(format!(
            "task router expects indicator width {}, got {}",
            wv.cols(),
            h.values.numel()
        )));
    }
    let logits = g.linear(h.var, w, None);
    let l = g.value(logits).data();
    let route = task_route([l[0].as_f64(), l[1].as_f64()])?;
    Ok((logits, route))
}

/// `−log wt[yt]` from the task-router logits, clamped at `1e-12`.
pub fn router_loss<T: Scalar>(g: &mut Graph<'_, T>, task_logits: Var, yt: Task) -> Var {
    g.cross_entropy(task_logits, &[Some(yt.index())], Some(T::of(ROUTER_LOSS_EPS)))
}

/// Top-k softmax weights for one token; non-selected experts get exactly 0.
pub fn token_route<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let sel = top_k_indices(logits, k);
    let mx = sel.iter().map(|&i| logits[i]).fold(T::neg_infinity(), T::max);
    let mut w = vec![T::zero(); logits.len()];
    let mut z = T::zero();
    for &i in &sel {
        w[i] = (logits[i] - mx).exp();
        z += w[i];
    }
    for &i in &sel {
        w[i] /= z;
    }
    w
}

/// Routing of one MoE layer for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// `wt`; absent for a plain token-level MoE.
    pub task_probs: Option<[f64; 2]>,
    /// `wt'`
    pub task_onehot: Option<[u8; 2]>,
    /// `wk`, one row of `M` weights per token.
    pub expert_weights: Vec<Vec<f64>>,
    /// Ground-truth task label `yt`, filled in by the caller when known.
    pub task_label: Option<Task>,
}

impl RoutingRecord {
    /// Selection counts per expert; sums to `N_tokens · k`.
    pub fn expert_histogram(&self) -> Vec<usize> {
        let m = self.expert_weights.first().map_or(0, Vec::len);
        let mut h = vec![0; m];
        for row in &self.expert_weights {
            for (e, w) in row.iter().enumerate() {
                if *w > 0.0 {
                    h[e] += 1;
                }
            }
        }
        h
    }

    pub fn selected_task(&self) -> Option<usize> {
        self.task_onehot.map(|o| if o[0] == 1 { 0 } else { 1 })
    }
}

/// One line of the routing export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingExport {
    pub sample_id: String,
    pub layer: usize,
    pub yt: Option<Task>,
    pub wt: Option<[f64; 2]>,
    #[serde(rename = "wt_prime")]
    pub wt_prime: Option<[u8; 2]>,
    pub expert_histogram: Vec<usize>,
    pub top_k: usize,
}

impl RoutingExport {
    pub fn new(sample_id: &str, layer: usize, rec: &RoutingRecord, top_k: usize) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            layer,
            yt: rec.task_label,
            wt: rec.task_probs,
            wt_prime: rec.task_onehot,
            expert_histogram: rec.expert_histogram(),
            top_k,
        }
    }
}

fn num_experts<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> usize {
    store.tensor(&format!("{prefix}.router.weight")).rows()
}

/// `Σ_i wk_i · expert_i(h)` per token, evaluating only the selected experts.
pub fn token_moe_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    k: usize,
) -> Result<(Var, RoutingRecord)> {
    let m = num_experts(g.store(), prefix);
    if k == 0 || k > m {
        return Err(Error::Config(format!("top_k {k} invalid for {m} experts")));
    }
    let logits = linear(g, x, &format!("{prefix}.router"));
    let wk = g.topk_softmax(logits, k);
    let n = g.value(x).rows();
    let c = g.value(x).cols();
    let selected: Vec<Vec<usize>> = {
        let lv = g.value(logits);
        (0..n).map(|r| top_k_indices(lv.row(r), k)).collect()
    };
    let mut out = g.constant(Tensor::zeros(&[n, c]));
    for e in 0..m {
        let rows: Vec<usize> = (0..n).filter(|r| selected[*r].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_concat(x, rows.clone(), 1);
        let ye = ffn(g, xe, &format!("{prefix}.experts.{e}"));
        let ye = g.mul_rows_by_col(ye, wk, e, rows.clone());
        out = g.index_add_rows(out, ye, rows);
    }
    let wkv = g.value(wk);
    let record = RoutingRecord {
        task_probs: None,
        task_onehot: None,
        expert_weights: (0..n)
            .map(|r| wkv.row(r).iter().map(|v| v.as_f64()).collect())
            .collect(),
        task_label: None,
    };
    Ok((out, record))
}

pub struct TghOutput {
    pub tokens: Var,
    pub record: RoutingRecord,
    pub task_logits: Var,
}

/// Hard task routing over two token-level MoEs: the selected task expert
/// processes every token; the other is not evaluated at all.
pub fn tgh_moe_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    h: &IndicatorVector<T>,
    prefix: &str,
    k: usize,
) -> Result<TghOutput> {
    let (task_logits, route) = task_router(g, h, prefix)?;
    let t = route.choice();
    let (tokens, mut record) = token_moe_forward(g, x, &format!("{prefix}.tasks.{t}"), k)?;
    record.task_probs = Some(route.wt);
    record.task_onehot = Some(route.onehot);
    Ok(TghOutput {
        tokens,
        record,
        task_logits,
    })
}

/// Turns the token-level MoE under `prefix` into two identical task experts
/// and adds a zero-initialized task router `[2, text_dim]`.
pub fn replicate_for_stage2<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    text_dim: usize,
) -> Result<()> {
    if moe_kind(store, prefix) != Some(MoeKind::Token) {
        return Err(Error::Config(format!(
            "`{prefix}` is not a token-level MoE"
        )));
    }
    let shared: Vec<String> = store
        .names()
        .filter(|n| {
            n.starts_with(&format!("{prefix}.router.")) || n.starts_with(&format!("{prefix}.experts."))
        })
        .map(str::to_string)
        .collect();
    for name in shared {
        let t = store.remove(&name).expect("listed above");
        let suffix = &name[prefix.len() + 1..];
        for task in 0..2 {
            store.insert(format!("{prefix}.tasks.{task}.{suffix}"), t.clone());
        }
    }
    store.insert(
        format!("{prefix}.task_router.weight"),
        Tensor::zeros(&[2, text_dim]),
    );
    Ok(())
}

/// Replaces the FFN under `ffn_prefix` by `experts` copies under
/// `moe_prefix` and a Gaussian router; returns the router's name.
pub fn upcycle_ffn<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    ffn_prefix: &str,
    moe_prefix: &str,
    experts: usize,
    rng: &mut R,
) -> String {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&format!("{ffn_prefix}.")))
        .map(str::to_string)
        .collect();
    let mut width = 0;
    for name in names {
        let t = store.remove(&name).expect("listed above");
        let suffix = &name[ffn_prefix.len() + 1..];
        if suffix == "fc1.weight" {
            width = t.cols();
        }
        for e in 0..experts {
            store.insert(format!("{moe_prefix}.experts.{e}.{suffix}"), t.clone());
        }
    }
    let router = format!("{moe_prefix}.router.weight");
    store.insert(router.clone(), normal_tensor(rng, &[experts, width], 0.02));
    router
}

/// Name → shape of one MoE layer.
pub fn moe_shapes(
    prefix: &str,
    c: usize,
    f: usize,
    moe: &MoeConfig,
    kind: MoeKind,
) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    let token = |m: &mut BTreeMap<String, Vec<usize>>, p: &str| {
        m.insert(format!("{p}.router.weight"), vec![moe.experts, c]);
        for e in 0..moe.experts {
            insert_ffn_shapes(m, &format!("{p}.experts.{e}"), c, f);
        }
    };
    match kind {
        MoeKind::Token => token(&mut m, prefix),
        MoeKind::Task => {
            for t in 0..2 {
                token(&mut m, &format!("{prefix}.tasks.{t}"));
            }
        }
    }
    m
}
