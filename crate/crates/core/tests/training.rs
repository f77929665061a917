use std::path::Path;

use volmoe::mllm::{is_lora_param, Mllm};
use volmoe::synth_data::{build_corpus, tokenizer, CorpusConfig, Dataset};
use volmoe::training::*;
use volmoe::{Error, Mllm32};

fn corpus(dir: &Path, n_train: usize) -> Dataset<f32> {
    let cfg = CorpusConfig {
        n_train,
        n_test: 4,
        seed: 11,
        ..Default::default()
    };
    build_corpus(&cfg, dir).unwrap();
    Dataset::load(dir, "train").unwrap()
}

fn config(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    for s in [&mut cfg.stage1, &mut cfg.stage2] {
        s.total_steps = steps;
        s.batch_size = 2;
        s.lm_warmup_steps = 0;
        s.encoder_warmup_steps = 0;
    }
    cfg
}

fn fresh(cfg: &RunConfig) -> Mllm32 {
    Mllm::new(cfg.spec(), tokenizer(), cfg.stage1.seed).unwrap()
}

fn no_hook() -> impl FnMut(&Mllm32, &TrainState<f32>) -> volmoe::Result<bool> {
    |_, _| Ok(true)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 8);
    let cfg = config(3);
    let (model, state) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    save_checkpoint(&a, &cfg, &model, Some(&state)).unwrap();
    let ck = load_checkpoint::<f32>(&a).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.state.as_ref().unwrap().meta, state.meta);
    save_checkpoint(&b, &ck.config, &ck.model, ck.state.as_ref()).unwrap();
    for f in ["manifest.json", "tensors.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupted_tensor_byte_is_a_checksum_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(1);
    let model = fresh(&cfg);
    save_checkpoint(d.path(), &cfg, &model, None).unwrap();
    let path = d.path().join("tensors.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    match load_checkpoint::<f32>(d.path()) {
        Err(Error::Checksum(_)) => {}
        other => panic!("expected checksum error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 8);
    let cfg = config(6);
    let (full, full_state) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();

    let mut stop_at_3 = |_: &Mllm32, st: &TrainState<f32>| Ok(st.meta.step < 3);
    let (half, half_state) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut stop_at_3).unwrap();
    assert_eq!(half_state.meta.step, 3);
    let ck_dir = d.path().join("ck");
    save_checkpoint(&ck_dir, &cfg, &half, Some(&half_state)).unwrap();
    let ck = load_checkpoint::<f32>(&ck_dir).unwrap();
    let (resumed, resumed_state) = run_stage1(&data, ck.model, &cfg, ck.state, &mut no_hook()).unwrap();

    assert_eq!(resumed_state.meta.trace, full_state.meta.trace);
    assert_eq!(resumed.params, full.params);
}

#[test]
fn training_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 8);
    let mut cfg = config(3);
    cfg.stage1.lm_warmup_steps = 2;
    cfg.stage1.encoder_warmup_steps = 2;
    let (m1, s1) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();
    let (m2, s2) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();
    assert_eq!(s1.meta, s2.meta);
    assert_eq!(m1.params, m2.params);
    assert!(s1.meta.warmup.is_some() && s1.meta.encoder_warmup.is_some());
    assert!(!m1.params.names().any(|n| n.contains("warmup")));
}

#[test]
fn freeze_masks_hold_in_both_stages() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 8);
    let cfg = config(4);
    let init = fresh(&cfg);
    let (m1, st1) = run_stage1(&data, init.clone(), &cfg, None, &mut no_hook()).unwrap();
    let mut lora_moved = false;
    for (n, t) in init.params.iter() {
        let after = m1.params.tensor(n);
        if n.starts_with("lm.") && !is_lora_param(n) {
            assert_eq!(t, after, "{n} changed in stage 1");
        }
        lora_moved |= is_lora_param(n) && t != after;
    }
    assert!(lora_moved);

    let (m2, _) = run_stage2(&data, m1.clone(), &cfg, Some(&st1.meta), None, &mut no_hook()).unwrap();
    for (n, t) in m1.params.iter().filter(|(n, _)| n.starts_with("lm.")) {
        assert_eq!(t, m2.params.tensor(n), "{n} changed in stage 2");
    }
    assert!(m1.params.iter().any(|(n, t)| n.starts_with("encoder.") && m2.params.tensor(n) != t));
}

#[test]
fn stage2_starts_where_stage1_ended() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 8);
    let cfg = config(3);
    let (m1, st1) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();
    let (_, st2) = run_stage2(&data, m1, &cfg, Some(&st1.meta), None, &mut no_hook()).unwrap();
    let chk = st2.meta.init_check.unwrap();
    assert_eq!(chk.sample_ids, st1.meta.last_batch);
    assert!(chk.abs_diff < 1e-6, "{chk:?}");
    // stage-2 rows carry the router terms
    for r in &st2.meta.trace {
        let l_r = r.l_r.unwrap();
        assert!((r.l_total - (r.l_reg + cfg.stage2.alpha * l_r)).abs() < 1e-12);
        assert!(r.router_acc.is_some());
    }
    assert!(st1.meta.trace.iter().all(|r| r.l_r.is_none() && r.l_total == r.l_reg));
}

#[test]
fn stage_order_is_enforced() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 4);
    let cfg = config(1);
    let (m1, st1) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();
    let (m2, st2) = run_stage2(&data, m1.clone(), &cfg, None, None, &mut no_hook()).unwrap();
    // a stage-2 model has task MoE layers; stage 1 refuses it
    assert!(run_stage1(&data, m2, &cfg, None, &mut no_hook()).is_err());
    assert!(run_stage2(&data, m1.clone(), &cfg, None, Some(st1), &mut no_hook()).is_err());
    assert!(run_stage1(&data, m1, &cfg, Some(st2), &mut no_hook()).is_err());
}

#[test]
fn three_hundred_steps_reduce_the_loss() {
    let d = tempfile::tempdir().unwrap();
    let data = corpus(&d.path().join("data"), 200);
    let mut cfg = config(300);
    cfg.stage1.batch_size = 4;
    let (_, st) = run_stage1(&data, fresh(&cfg), &cfg, None, &mut no_hook()).unwrap();
    let first = head_mean(&st.meta.trace, |r| r.l_reg);
    let last = tail_mean(&st.meta.trace, |r| r.l_reg);
    assert!(last < first, "first {first:.4}, last {last:.4}");
    assert!(st.meta.trace.iter().all(|r| r.l_reg.is_finite()));
    assert_eq!(st.meta.trace.last().unwrap().lr, cosine_lr(cfg.stage1.lr, 299, 300));
}
