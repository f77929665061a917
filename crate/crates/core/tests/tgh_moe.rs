mod common;

use common::{fd_check, project, rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use volmoe::graph::{gelu, Graph};
use volmoe::mllm::{init_lm, text_hidden, LmConfig};
use volmoe::tensor::Tensor;
use volmoe::tgh_moe::*;
use volmoe::ParamStore64;

const C: usize = 6;
const F: usize = 10;
const M: usize = 4;

/// A token-level MoE under `moe` with distinct experts.
fn token_moe(seed: u64) -> ParamStore64 {
    let mut r = rng(seed);
    let mut s = ParamStore64::new();
    s.insert("ffn.fc1.weight", uniform(&mut r, &[F, C], -0.5, 0.5));
    s.insert("ffn.fc1.bias", uniform(&mut r, &[F], -0.1, 0.1));
    s.insert("ffn.fc2.weight", uniform(&mut r, &[C, F], -0.5, 0.5));
    s.insert("ffn.fc2.bias", uniform(&mut r, &[C], -0.1, 0.1));
    upcycle_ffn(&mut s, "ffn", "moe", M, &mut r);
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for n in names {
        let spread = if n.contains("router") { 1.0 } else { 0.2 };
        for v in s.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-spread..spread);
        }
    }
    s
}

fn indicator(g: &mut Graph<'_, f64>, values: Tensor<f64>) -> IndicatorVector<f64> {
    IndicatorVector {
        var: g.constant(values.clone()),
        values,
        grad_blocked: true,
    }
}

fn expert_oracle(s: &ParamStore64, prefix: &str, x: &[f64]) -> Vec<f64> {
    let lin = |x: &[f64], name: &str, d_out: usize| -> Vec<f64> {
        let w = s.tensor(&format!("{prefix}.{name}.weight"));
        let b = s.tensor(&format!("{prefix}.{name}.bias"));
        (0..d_out)
            .map(|o| b.data()[o] + w.row(o).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = lin(x, "fc1", F).into_iter().map(gelu).collect();
    lin(&h, "fc2", C)
}

#[test]
fn task_router_examples() {
    let r = task_route([0.0, 0.0]).unwrap();
    assert_eq!(r.wt, [0.5, 0.5]);
    assert_eq!(r.onehot, [1, 0]);
    let r = task_route([1.0, 3.0]).unwrap();
    assert!((r.wt[0] - 0.1192).abs() < 1e-4 && (r.wt[1] - 0.8808).abs() < 1e-4);
    assert_eq!(r.onehot, [0, 1]);
    let s = task_route([1.0 + 7.5, 3.0 + 7.5]).unwrap();
    assert!((s.wt[0] - r.wt[0]).abs() < 1e-12);
    assert_eq!(s.onehot, r.onehot);
}

#[test]
fn router_loss_values_and_gradient() {
    let s = ParamStore64::new();
    let mut g = Graph::inference(&s);
    // wt = [1, 0] up to float precision
    let sure = g.constant(Tensor::from_vec(&[1, 2], vec![60.0, 0.0]));
    let l = router_loss(&mut g, sure, Task::Mrg);
    assert!(g.value(l).item() < 1e-12);
    let even = g.constant(Tensor::from_vec(&[1, 2], vec![0.3, 0.3]));
    for t in [Task::Mrg, Task::Mvqa] {
        let l = router_loss(&mut g, even, t);
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
    drop(g);

    for (yt, logits) in [(Task::Mrg, [0.4, -1.1]), (Task::Mvqa, [2.0, 0.5])] {
        let mut s = ParamStore64::new();
        s.insert("l", Tensor::from_vec(&[1, 2], logits.to_vec()));
        let grads = {
            let mut g = Graph::new(&s, |_| true);
            let l = g.param("l");
            let loss = router_loss(&mut g, l, yt);
            g.backward(loss)
        };
        let wt = task_route(logits).unwrap().wt;
        let gl = grads["l"].data();
        for i in 0..2 {
            let want = wt[i] - if i == yt.index() { 1.0 } else { 0.0 };
            assert!((gl[i] - want).abs() < 1e-12);
        }
        fd_check(&mut s, 2, 1e-6, |g| {
            let l = g.param("l");
            router_loss(g, l, yt)
        });
    }
}

#[test]
fn token_router_examples() {
    let w = token_route(&[0.1, 0.5, 0.2, 0.4], 2);
    let e = (0.5f64 - 0.4).exp();
    let want = [0.0, e / (e + 1.0), 0.0, 1.0 / (e + 1.0)];
    for i in 0..4 {
        assert!((w[i] - want[i]).abs() < 1e-12);
    }
    assert!((w[1] - 0.5250).abs() < 1e-4 && (w[3] - 0.4750).abs() < 1e-4);
    assert_eq!(token_route(&[0.7; 4], 2), vec![0.5, 0.5, 0.0, 0.0]);
    let l: [f64; 4] = [0.3, -1.0, 2.0, 0.5];
    let full = token_route(&l, 4);
    let z: f64 = l.iter().map(|v| v.exp()).sum();
    for i in 0..4 {
        assert!((full[i] - l[i].exp() / z).abs() < 1e-12);
    }
}

#[test]
fn ten_thousand_router_calls_keep_the_contract() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let m = r.gen_range(2..9);
        let k = r.gen_range(1..=m);
        let logits: Vec<f64> = (0..m).map(|_| r.gen_range(-5.0..5.0)).collect();
        let w = token_route(&logits, k);
        assert_eq!(w.iter().filter(|v| **v != 0.0).count(), k);
        assert!(w.iter().all(|v| *v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let t = task_route([r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)]).unwrap();
        assert_eq!(t.onehot[0] + t.onehot[1], 1);
    }
}

#[test]
fn token_moe_matches_dense_oracle() {
    let s = token_moe(2);
    let mut r = rng(3);
    let x = uniform(&mut r, &[7, C], -1.0, 1.0);
    for k in 1..=M {
        let mut g = Graph::inference(&s);
        let xv = g.constant(x.clone());
        let (y, rec) = token_moe_forward(&mut g, xv, "moe", k).unwrap();
        let y = g.value(y);
        let router = s.tensor("moe.router.weight");
        for t in 0..7 {
            let logits: Vec<f64> = (0..M)
                .map(|e| router.row(e).iter().zip(x.row(t)).map(|(a, b)| a * b).sum())
                .collect();
            let wk = token_route(&logits, k);
            for (e, w) in wk.iter().enumerate() {
                assert!((rec.expert_weights[t][e] - w).abs() < 1e-12);
            }
            let mut want = vec![0.0; C];
            for e in 0..M {
                let o = expert_oracle(&s, &format!("moe.experts.{e}"), x.row(t));
                for j in 0..C {
                    want[j] += wk[e] * o[j];
                }
            }
            for j in 0..C {
                assert!((y.row(t)[j] - want[j]).abs() < 1e-6);
            }
            if k == 1 {
                let e = wk.iter().position(|v| *v > 0.0).unwrap();
                let o = expert_oracle(&s, &format!("moe.experts.{e}"), x.row(t));
                for j in 0..C {
                    assert!((y.row(t)[j] - o[j]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(rec.expert_histogram().iter().sum::<usize>(), 7 * k);
    }
}

#[test]
fn identical_experts_ignore_routing() {
    let mut s = ParamStore64::new();
    let mut r = rng(4);
    s.insert("ffn.fc1.weight", uniform(&mut r, &[F, C], -0.5, 0.5));
    s.insert("ffn.fc1.bias", uniform(&mut r, &[F], -0.1, 0.1));
    s.insert("ffn.fc2.weight", uniform(&mut r, &[C, F], -0.5, 0.5));
    s.insert("ffn.fc2.bias", uniform(&mut r, &[C], -0.1, 0.1));
    let dense = s.clone();
    upcycle_ffn(&mut s, "ffn", "moe", M, &mut r);
    let x = uniform(&mut r, &[5, C], -1.0, 1.0);
    let mut g = Graph::inference(&s);
    let xv = g.constant(x.clone());
    let (y, _) = token_moe_forward(&mut g, xv, "moe", 2).unwrap();
    for t in 0..5 {
        let o = expert_oracle(&dense, "ffn", x.row(t));
        for j in 0..C {
            assert!((g.value(y).row(t)[j] - o[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn token_moe_gradients_match_finite_differences() {
    let mut s = token_moe(5);
    let mut r = rng(6);
    s.insert("x", uniform(&mut r, &[5, C], -1.0, 1.0));
    fd_check(&mut s, 8, 1e-4, |g| {
        let x = g.param("x");
        let (y, _) = token_moe_forward(g, x, "moe", 2).unwrap();
        project(g, y, 7)
    });
}

fn stage2_moe(seed: u64) -> ParamStore64 {
    let mut s = token_moe(seed);
    replicate_for_stage2(&mut s, "moe", 3).unwrap();
    s
}

#[test]
fn replication_is_bit_exact_and_independent() {
    let s1 = token_moe(8);
    let mut s2 = s1.clone();
    replicate_for_stage2(&mut s2, "moe", 3).unwrap();
    assert_eq!(moe_kind(&s2, "moe"), Some(MoeKind::Task));
    let mut r = rng(9);
    for _ in 0..100 {
        let x = uniform(&mut r, &[4, C], -2.0, 2.0);
        let h = uniform(&mut r, &[1, 3], -1.0, 1.0);
        let mut g1 = Graph::inference(&s1);
        let x1 = g1.constant(x.clone());
        let (a, ra) = token_moe_forward(&mut g1, x1, "moe", 2).unwrap();
        let mut g2 = Graph::inference(&s2);
        let x2 = g2.constant(x);
        let hv = indicator(&mut g2, h);
        let out = tgh_moe_forward(&mut g2, x2, &hv, "moe", 2).unwrap();
        assert_eq!(out.record.task_probs, Some([0.5, 0.5]));
        assert_eq!(out.record.expert_weights, ra.expert_weights);
        let (av, bv) = (g1.value(a).data(), g2.value(out.tokens).data());
        assert!(av.iter().zip(bv).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let before = s2.tensor("moe.tasks.1.experts.2.fc1.weight").clone();
    s2.get_mut("moe.tasks.0.experts.2.fc1.weight").unwrap().data_mut()[0] += 1.0;
    assert_eq!(s2.tensor("moe.tasks.1.experts.2.fc1.weight"), &before);
    assert!(replicate_for_stage2(&mut s2, "moe", 3).is_err());
}

#[test]
fn identical_task_experts_agree_under_either_route() {
    let mut s = stage2_moe(10);
    let mut r = rng(11);
    let x = uniform(&mut r, &[4, C], -1.0, 1.0);
    let h = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]);
    let run = |s: &ParamStore64| {
        let mut g = Graph::inference(s);
        let xv = g.constant(x.clone());
        let hv = indicator(&mut g, h.clone());
        let out = tgh_moe_forward(&mut g, xv, &hv, "moe", 2).unwrap();
        (g.value(out.tokens).clone(), out.record)
    };
    let w = s.get_mut("moe.task_router.weight").unwrap().data_mut();
    w[0] = 1.0; // logits [1, 0] → task 0
    let (a, ra) = run(&s);
    s.get_mut("moe.task_router.weight").unwrap().data_mut()[0] = -1.0;
    let (b, rb) = run(&s);
    assert_eq!(ra.selected_task(), Some(0));
    assert_eq!(rb.selected_task(), Some(1));
    assert_eq!(a, b);
    for rec in [ra, rb] {
        let oh = rec.task_onehot.unwrap();
        assert_eq!(oh[0] + oh[1], 1);
        assert!(rec.expert_weights.iter().all(|row| row.iter().filter(|v| **v > 0.0).count() == 2));
    }
}

#[test]
fn label_enters_only_the_router_loss() {
    let mut s = stage2_moe(12);
    let mut r = rng(13);
    s.insert("moe.task_router.weight", uniform(&mut r, &[2, 3], -1.0, 1.0));
    let x = uniform(&mut r, &[4, C], -1.0, 1.0);
    let h = uniform(&mut r, &[1, 3], -1.0, 1.0);
    let mut outs = Vec::new();
    for yt in [Task::Mrg, Task::Mvqa] {
        let mut g = Graph::inference(&s);
        let xv = g.constant(x.clone());
        let hv = indicator(&mut g, h.clone());
        let out = tgh_moe_forward(&mut g, xv, &hv, "moe", 2).unwrap();
        let lr = router_loss(&mut g, out.task_logits, yt);
        outs.push((g.value(out.tokens).clone(), g.value(lr).item()));
    }
    assert_eq!(outs[0].0, outs[1].0);
    assert_ne!(outs[0].1, outs[1].1);
}

#[test]
fn unselected_task_expert_gets_exactly_zero_gradient() {
    let mut s = stage2_moe(14);
    let mut r = rng(15);
    // Make the two task experts differ so the check is not vacuous.
    for v in s.get_mut("moe.tasks.1.experts.0.fc1.weight").unwrap().data_mut() {
        *v += r.gen_range(-0.1..0.1);
    }
    s.insert("moe.task_router.weight", uniform(&mut r, &[2, 3], -1.0, 1.0));
    for trial in 0..20 {
        let x = uniform(&mut r, &[4, C], -1.0, 1.0);
        let h = uniform(&mut r, &[1, 3], -1.0, 1.0);
        let mut g = Graph::new(&s, |_| true);
        let xv = g.constant(x);
        let hv = indicator(&mut g, h);
        let out = tgh_moe_forward(&mut g, xv, &hv, "moe", 2).unwrap();
        let yt = if trial % 2 == 0 { Task::Mrg } else { Task::Mvqa };
        let lr = router_loss(&mut g, out.task_logits, yt);
        let p = project(&mut g, out.tokens, trial);
        let grads = g.backward(p);
        let router_grads = g.backward(lr);
        let chosen = out.record.selected_task().unwrap();
        let other = format!("moe.tasks.{}.", 1 - chosen);
        for gs in [&grads, &router_grads] {
            for name in s.names().filter(|n| n.starts_with(&other)) {
                if let Some(t) = gs.get(name) {
                    assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
                }
            }
        }
        assert!(grads
            .iter()
            .any(|(n, t)| n.starts_with(&format!("moe.tasks.{chosen}.")) && t.sq_norm() > 0.0));
        assert!(router_grads["moe.task_router.weight"].sq_norm() > 0.0);
    }
}

fn lm_cfg() -> LmConfig {
    LmConfig {
        layers: 4,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        max_len: 16,
        text_encoder_layers: 4,
        ..LmConfig::default()
    }
}

#[test]
fn indicator_is_pooled_and_gradient_blocked() {
    let lm = lm_cfg();
    let mut s: ParamStore64 = init_lm(&lm, 20, &mut rng(16));
    let a = {
        let mut g = Graph::inference(&s);
        text_indicator(&mut g, &lm, 1.0, &[4, 7, 9]).unwrap().values
    };
    let b = {
        let mut g = Graph::inference(&s);
        text_indicator(&mut g, &lm, 1.0, &[4, 7, 9]).unwrap().values
    };
    assert_eq!(a, b);
    let mut g = Graph::inference(&s);
    let one = text_indicator(&mut g, &lm, 1.0, &[5]).unwrap();
    let hid = text_hidden(&mut g, &lm, 1.0, &[5]).unwrap();
    assert_eq!(&one.values, g.value(hid));
    assert!(text_indicator(&mut g, &lm, 1.0, &[]).is_err());
    drop(g);

    s.insert("moe.task_router.weight", uniform(&mut rng(17), &[2, 8], -1.0, 1.0));
    let mut g = Graph::new(&s, |_| true);
    let h = text_indicator(&mut g, &lm, 1.0, &[4, 7, 9]).unwrap();
    assert!(h.grad_blocked);
    let (logits, _) = task_router(&mut g, &h, "moe").unwrap();
    let l = router_loss(&mut g, logits, Task::Mvqa);
    let grads = g.backward(l);
    for (name, t) in &grads {
        if name.starts_with("lm.") {
            assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
    assert!(grads["moe.task_router.weight"].sq_norm() > 0.0);
}

proptest! {
    #[test]
    fn wk_rows_have_k_positive_entries(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        k_frac in 0.0f64..1.0,
    ) {
        let m = logits.len();
        let k = 1 + ((m - 1) as f64 * k_frac) as usize;
        let w = token_route(&logits, k);
        prop_assert_eq!(w.iter().filter(|v| **v > 0.0).count(), k.min(m));
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wt_is_a_distribution_and_onehot_is_its_argmax(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let r = task_route([a, b]).unwrap();
        prop_assert!((r.wt[0] + r.wt[1] - 1.0).abs() < 1e-12);
        prop_assert!(r.wt.iter().all(|v| (0.0..=1.0).contains(v)));
        let arg = if r.wt[1] > r.wt[0] { 1 } else { 0 };
        prop_assert_eq!(r.choice(), arg);
    }

    #[test]
    fn histogram_sums_to_tokens_times_k(seed in any::<u64>(), n in 1usize..9, k in 1usize..=M) {
        let s = token_moe(seed);
        let mut r = rng(seed);
        let mut g = Graph::inference(&s);
        let x = g.constant(uniform(&mut r, &[n, C], -3.0, 3.0));
        let (_, rec) = token_moe_forward(&mut g, x, "moe", k).unwrap();
        prop_assert_eq!(rec.expert_histogram().iter().sum::<usize>(), n * k);
    }
}
