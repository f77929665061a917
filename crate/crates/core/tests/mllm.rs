mod common;

use common::{fd_check, project, rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use volmoe::graph::{gelu, Graph};
use volmoe::mllm::*;
use volmoe::synth_data::{gen_scene, gen_vqa, render, tokenizer, Topic};
use volmoe::tensor::Tensor;
use volmoe::tgh_moe::Task;
use volmoe::{Mllm64, ParamStore64};

fn desk_model(seed: u64) -> Mllm64 {
    Mllm::new(ModelSpec::default(), tokenizer(), seed).unwrap()
}

fn connector(seed: u64, c: usize, d: usize) -> ParamStore64 {
    let mut r = rng(seed);
    let mut s = ParamStore64::new();
    s.insert("connector.fc1.weight", uniform(&mut r, &[d, c], -0.5, 0.5));
    s.insert("connector.fc1.bias", uniform(&mut r, &[d], -0.2, 0.2));
    s.insert("connector.fc2.weight", uniform(&mut r, &[d, d], -0.5, 0.5));
    s.insert("connector.fc2.bias", uniform(&mut r, &[d], -0.2, 0.2));
    s
}

#[test]
fn connector_matches_matmul_oracle() {
    let s = connector(1, 5, 7);
    let mut r = rng(2);
    let f = uniform(&mut r, &[9, 5], -1.0, 1.0);
    let mut g = Graph::inference(&s);
    let fv = g.constant(f.clone());
    let t = connect(&mut g, fv).unwrap();
    let t = g.value(t);
    assert_eq!(t.shape(), &[9, 7]);
    let (w1, b1) = (s.tensor("connector.fc1.weight"), s.tensor("connector.fc1.bias"));
    let (w2, b2) = (s.tensor("connector.fc2.weight"), s.tensor("connector.fc2.bias"));
    for i in 0..9 {
        let h: Vec<f64> = (0..7)
            .map(|o| gelu(b1.data()[o] + (0..5).map(|j| w1.row(o)[j] * f.row(i)[j]).sum::<f64>()))
            .collect();
        for o in 0..7 {
            let want = b2.data()[o] + (0..7).map(|j| w2.row(o)[j] * h[j]).sum::<f64>();
            assert!((t.row(i)[o] - want).abs() < 1e-6);
        }
    }
    let mut z = s.clone();
    z.insert("connector.fc1.bias", Tensor::zeros(&[7]));
    z.insert("connector.fc2.bias", Tensor::zeros(&[7]));
    let mut g = Graph::inference(&z);
    let zero = g.constant(Tensor::zeros(&[3, 5]));
    let out = connect(&mut g, zero).unwrap();
    assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    let wrong = g.constant(Tensor::zeros(&[3, 4]));
    assert!(connect(&mut g, wrong).is_err());
}

#[test]
fn connector_gradients_match_finite_differences() {
    let mut s = connector(3, 4, 5);
    let mut r = rng(4);
    s.insert("f", uniform(&mut r, &[3, 4], -1.0, 1.0));
    fd_check(&mut s, 10, 1e-4, |g| {
        let f = g.param("f");
        let t = connect(g, f).unwrap();
        project(g, t, 5)
    });
}

#[test]
fn alignment_error_value_and_gradient() {
    let mut r = rng(6);
    let target = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let mut s = connector(7, 4, 4);
    s.insert("f", uniform(&mut r, &[3, 4], -1.0, 1.0));
    let x = s.tensor("f").clone();
    let want: f64 = x.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0;
    let mut g = Graph::inference(&s);
    let f = g.param("f");
    let l = g.mse(f, target.clone());
    assert!((g.value(l).item() - want).abs() < 1e-12);
    drop(g);
    fd_check(&mut s, 10, 1e-4, |g| {
        let f = g.param("f");
        let t = connect(g, f).unwrap();
        g.mse(t, target.clone())
    });
}

#[test]
fn context_layout_and_masks() {
    let tok = tokenizer();
    let ctx = assemble_context(&tok, "which plane is this scan ?", 8, Some("axial")).unwrap();
    assert_eq!(ctx.len(), 1 + 6 + 1 + 8 + 1 + 1);
    let gen = assemble_context(&tok, "which plane is this scan ?", 8, None).unwrap();
    assert!(gen.loss_mask().iter().all(|m| !m));
    assert_eq!(gen.len(), 1 + 6 + 1 + 8);
    let again = assemble_context(&tok, "which plane is this scan ?", 8, Some("axial")).unwrap();
    assert_eq!(ctx, again);
    // Scored positions predict the answer then EOS.
    let scored: Vec<usize> = ctx.targets.iter().flatten().copied().collect();
    assert_eq!(scored, vec![tok.encode("axial").unwrap()[0], EOS]);
}

#[test]
fn uniform_and_certain_logits() {
    let s = ParamStore64::new();
    let mut g = Graph::inference(&s);
    let ctx = assemble_context_ids(&[10, 11], 3, Some(&[12, 13, 14]));
    let n = ctx.len();
    let flat = g.constant(Tensor::zeros(&[n, 512]));
    let l = autoregressive_loss(&mut g, &ctx, flat).unwrap();
    assert!((g.value(l).item() - 512f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 6.2383).abs() < 1e-4);
    let mut sure = Tensor::zeros(&[n, 512]);
    for (p, t) in ctx.targets.iter().enumerate() {
        if let Some(t) = t {
            sure.data_mut()[p * 512 + t] = 60.0;
        }
    }
    let sure = g.constant(sure);
    let l = autoregressive_loss(&mut g, &ctx, sure).unwrap();
    assert!(g.value(l).item() < 1e-20);
    let gen = assemble_context_ids(&[10], 3, None);
    let z = g.constant(Tensor::zeros(&[gen.len(), 512]));
    assert!(autoregressive_loss(&mut g, &gen, z).is_err());
}

#[test]
fn masked_labels_never_change_the_loss() {
    let s = ParamStore64::new();
    let mut r = rng(6);
    for _ in 0..20 {
        let prompt: Vec<usize> = (0..4).map(|_| r.gen_range(4..30)).collect();
        let other: Vec<usize> = (0..4).map(|_| r.gen_range(4..30)).collect();
        let answer = [7, 8];
        let a = assemble_context_ids(&prompt, 2, Some(&answer));
        let b = assemble_context_ids(&other, 2, Some(&answer));
        let logits = uniform(&mut r, &[a.len(), 30], -3.0, 3.0);
        let mut g = Graph::inference(&s);
        let lv = g.constant(logits);
        let la = autoregressive_loss(&mut g, &a, lv).unwrap();
        let lb = autoregressive_loss(&mut g, &b, lv).unwrap();
        assert_eq!(g.value(la).item(), g.value(lb).item());
    }
}

#[test]
fn total_loss_combines_linearly() {
    let mut s = ParamStore64::new();
    s.insert("reg", Tensor::scalar(2.0));
    s.insert("r", Tensor::scalar(0.5));
    let mut g = Graph::new(&s, |_| true);
    let (reg, r) = (g.param("reg"), g.param("r"));
    let t = total_loss(&mut g, reg, Some(r), 0.1);
    assert!((g.value(t).item() - 2.05).abs() < 1e-12);
    let grads = g.backward(t);
    assert!((grads["r"].item() - 0.1).abs() < 1e-15);
    assert_eq!(grads["reg"].item(), 1.0);
    let t0 = total_loss(&mut g, reg, Some(r), 0.0);
    assert_eq!(g.value(t0).item(), 2.0);
    let none = total_loss(&mut g, reg, None, 0.3);
    assert_eq!(g.value(none).item(), 2.0);
}

fn small_lm() -> LmConfig {
    LmConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        max_len: 16,
        text_encoder_layers: 1,
        lora: LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        },
    }
}

#[test]
fn lm_loss_gradients_match_finite_differences() {
    let lm = small_lm();
    let mut s: ParamStore64 = init_lm(&lm, 9, &mut rng(7));
    lora_wrap(&mut s, &lm, &lm.lora, &mut rng(8)).unwrap();
    let mut r = rng(9);
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for n in names {
        for v in s.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    s.insert("img", uniform(&mut r, &[1, 8], -1.0, 1.0));
    let ctx = assemble_context_ids(&[5], 1, Some(&[6, 7, 8]));
    fd_check(&mut s, 6, 1e-4, |g| {
        let img = g.param("img");
        let emb = embed_context(g, &ctx, img);
        let logits = lm_logits(g, &lm, emb).unwrap();
        autoregressive_loss(g, &ctx, logits).unwrap()
    });
}

#[test]
fn any_image_token_count_gives_a_finite_loss() {
    let m = desk_model(10);
    let mut r = rng(11);
    for n_img in 1..=12 {
        let ctx = assemble_context_ids(&[5, 6], n_img, Some(&[7]));
        let mut g = Graph::inference(&m.params);
        let img = g.constant(uniform(&mut r, &[n_img, 64], -1.0, 1.0));
        let emb = embed_context(&mut g, &ctx, img);
        let logits = lm_logits(&mut g, &m.spec.lm, emb).unwrap();
        let l = autoregressive_loss(&mut g, &ctx, logits).unwrap();
        assert!(g.value(l).item().is_finite());
    }
}

#[test]
fn lora_identity_at_init_merge_and_count() {
    let lm = LmConfig::default();
    let base: ParamStore64 = init_lm(&lm, 50, &mut rng(12));
    let mut wrapped = base.clone();
    let names = lora_wrap(&mut wrapped, &lm, &lm.lora, &mut rng(13)).unwrap();
    assert_eq!(names.len(), 2 * lm.layers);
    let extra: usize = wrapped
        .iter()
        .filter(|(n, _)| is_lora_param(n))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(extra, names.len() * lm.lora.rank * (lm.dim + lm.dim));

    let ctx = assemble_context_ids(&[5, 6, 7], 2, Some(&[8, 9]));
    let mut r = rng(14);
    let img = uniform(&mut r, &[2, lm.dim], -1.0, 1.0);
    let logits = |s: &ParamStore64| {
        let mut g = Graph::inference(s);
        let i = g.constant(img.clone());
        let emb = embed_context(&mut g, &ctx, i);
        let l = lm_logits(&mut g, &lm, emb).unwrap();
        g.value(l).clone()
    };
    let a = logits(&base);
    let b = logits(&wrapped);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    // "Train" the adapters, then fold them in.
    for n in wrapped.names().filter(|n| is_lora_param(n)).map(str::to_string).collect::<Vec<_>>() {
        for v in wrapped.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    let trained = logits(&wrapped);
    let mut merged = wrapped.clone();
    assert_eq!(lora_merge(&mut merged, &lm.lora), names.len());
    assert!(merged.names().all(|n| !is_lora_param(n)));
    assert!(logits(&merged).max_abs_diff(&trained) < 1e-6);
    assert!(trained.max_abs_diff(&a) > 1e-3);
}

#[test]
fn generation_is_deterministic_and_clean() {
    let m = desk_model(15);
    let scene = gen_scene(16);
    let vol = render::<f64>(&scene, 17);
    let item = gen_vqa(&scene, Topic::Plane, true, 18).unwrap();
    for max_new in [0, 1, 5, 12] {
        let a = m.generate(&item.prompt, &vol, max_new).unwrap();
        let b = m.generate(&item.prompt, &vol, max_new).unwrap();
        assert_eq!(a, b);
        assert!(a.split_whitespace().count() <= max_new);
        assert!(!a.contains("<pad>") && !a.contains("<img>") && !a.contains("<bos>"));
    }
}

#[test]
fn desk_gradient_sampled_parameters() {
    let mut m = desk_model(19);
    let mut r = rng(20);
    // Non-zero adapters and biases so every sampled tensor carries gradient.
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for n in names {
        let spread = if n.ends_with("lora_b") { 0.1 } else { 0.01 };
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-spread..spread);
        }
    }
    let scene = gen_scene(21);
    let vol = render::<f64>(&scene, 22);
    let item = gen_vqa(&scene, Topic::Organ, false, 23).unwrap();
    let prompt = m.tokenizer.encode(&item.prompt).unwrap();
    let answer = m.tokenizer.encode(&item.answer).unwrap();
    let s = SampleInput {
        id: "x",
        volume: &vol,
        prompt_ids: &prompt,
        answer_ids: &answer,
        task: Task::Mvqa,
    };
    let loss = |m: &Mllm64| {
        let mut g = Graph::inference(&m.params);
        let out = m.forward_sample(&mut g, &s, 0.1).unwrap();
        g.value(out.total).item()
    };
    let grads = {
        let mut g = Graph::new(&m.params, |_| true);
        let out = m.forward_sample(&mut g, &s, 0.1).unwrap();
        g.backward(out.total)
    };
    let picks = [
        "encoder.patch_embed.weight",
        "encoder.layers.3.attn.qkv.weight",
        "encoder.layers.5.moe.experts.1.fc1.weight",
        "connector.fc1.weight",
        "lm.layers.2.attn.q.lora_a",
    ];
    for name in picks {
        let g = &grads[name];
        // largest-magnitude entries keep the check away from round-off
        let mut idx: Vec<usize> = (0..g.numel()).collect();
        idx.sort_by(|a, b| g.data()[*b].abs().total_cmp(&g.data()[*a].abs()));
        for &i in idx.iter().take(3) {
            let eps = 1e-5;
            let orig = m.params.tensor(name).data()[i];
            m.params.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let lp = loss(&m);
            m.params.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let lm = loss(&m);
            m.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = g.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(err < 1e-3, "{name}[{i}]: analytic {an:e} numeric {fd:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn context_length_formula(p in 1usize..10, n_img in 1usize..12, a in 0usize..6) {
        let prompt: Vec<usize> = (0..p).map(|i| 4 + i).collect();
        let answer: Vec<usize> = (0..a).map(|i| 4 + i).collect();
        let ctx = assemble_context_ids(&prompt, n_img, Some(&answer));
        prop_assert_eq!(ctx.len(), 1 + p + 1 + n_img + a + 1);
        prop_assert_eq!(ctx.targets.iter().filter(|t| t.is_some()).count(), a + 1);
        prop_assert_eq!(ctx.image_start(), p + 2);
    }
}
