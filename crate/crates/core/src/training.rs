//! Two-stage schedule. Stage 1 trains encoder, connector and LoRA adapters
//! with the autoregressive loss over plain token-level MoE layers. Stage 2
//! replicates each token-level MoE into two task experts under a hard task
//! router, freezes the LM and adds the router loss.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::mllm::{
    assemble_context_ids, autoregressive_loss, embed_context, is_lora_param, lm_logits,
    LmConfig, Mllm, ModelSpec, SampleInput, Tokenizer,
};
use crate::params::{normal_tensor, ParamStore};
use crate::scalar::Scalar;
use crate::synth_data::{octant_words_bag, CorpusConfig, Dataset, Sample, SceneSpec};
use crate::tensor::Tensor;
use crate::tgh_moe::{self, MoeConfig, MoeKind};
use crate::vit_adapt::EncoderConfig;

pub const TRACE_HEADER: &str = "step,l_reg,l_r,l_total,router_acc,lr";
/// Window for "final" and "initial" loss means.
pub const LOSS_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Router-loss weight; unused in stage 1.
    pub alpha: f64,
    /// Seeds model init (stage 1) and batch sampling.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub save_every: usize,
    /// Text-only LM pretraining steps run before stage 1.
    pub lm_warmup_steps: usize,
    pub lm_warmup_lr: f64,
    /// Gaussian noise on warmup image slots, relative to their rms.
    pub lm_warmup_noise: f64,
    /// Encoder/connector alignment steps run after the LM warmup.
    pub encoder_warmup_steps: usize,
    pub encoder_warmup_lr: f64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            lr: 1e-3,
            total_steps: 500,
            batch_size: 8,
            alpha: 0.0,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            save_every: 0,
            lm_warmup_steps: 8000,
            lm_warmup_lr: 3e-3,
            lm_warmup_noise: 0.5,
            encoder_warmup_steps: 1000,
            encoder_warmup_lr: 3e-3,
        }
    }

    pub fn stage2() -> Self {
        Self {
            alpha: 0.1,
            seed: 2,
            lm_warmup_steps: 0,
            encoder_warmup_steps: 0,
            ..Self::stage1()
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{name}: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.alpha >= 0.0) {
            return bad("lr and alpha must be non-negative");
        }
        if !(self.lm_warmup_noise >= 0.0) {
            return bad("lm_warmup_noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            split: "test".into(),
        }
    }
}

/// Whole-run configuration; every field has a desk default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub moe: MoeConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub data: CorpusConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            lm: LmConfig::default(),
            moe: MoeConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            data: CorpusConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            moe: self.moe.clone(),
            lm: self.lm.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    /// Parameters updated in this stage; everything else is frozen.
    pub fn trainable(self, name: &str) -> bool {
        let enc = name.starts_with("encoder.") || name.starts_with("connector.");
        match self {
            Stage::One => enc || is_lora_param(name),
            Stage::Two => enc,
        }
    }
}

fn lm_warmup_trainable(name: &str) -> bool {
    name.starts_with("lm.") && !is_lora_param(name)
}

/// `lr_max · ½(1 + cos(π t / T))`; zero at and beyond `T`.
pub fn cosine_lr(lr_max: f64, t: usize, total: usize) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr_max * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// Decoupled-weight-decay Adam. Moments exist only for trainable tensors;
/// decay applies to matrices (rank ≥ 2) only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &StageConfig, params: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let mut m = BTreeMap::new();
        for (name, t) in params.iter().filter(|(n, _)| trainable(n)) {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        let one = T::one();
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).expect("paired moments");
            let p = params.get_mut(name).expect("trainable tensor in store");
            let g = grads.get(name);
            let decay = if p.shape().len() >= 2 {
                T::of(lr * self.weight_decay)
            } else {
                T::zero()
            };
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= decay * pd[i];
                pd[i] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_reg: f64,
    pub l_r: Option<f64>,
    pub l_total: f64,
    pub router_acc: Option<f64>,
    pub lr: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step,
            r.l_reg,
            opt(r.l_r),
            r.l_total,
            opt(r.router_acc),
            r.lr
        );
    }
    s
}

/// Mean of `f` over the last `LOSS_WINDOW` rows.
pub fn tail_mean(rows: &[TraceRow], f: impl Fn(&TraceRow) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(LOSS_WINDOW)..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

pub fn head_mean(rows: &[TraceRow], f: impl Fn(&TraceRow) -> f64) -> f64 {
    let head = &rows[..rows.len().min(LOSS_WINDOW)];
    head.iter().map(f).sum::<f64>() / head.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Stage-2 step-0 loss against the last stage-1 batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitCheck {
    pub sample_ids: Vec<String>,
    pub stage1_l_reg: f64,
    pub stage2_l_reg: f64,
    pub abs_diff: f64,
}

/// Serializable progress of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub stage: u8,
    pub step: usize,
    pub total_steps: usize,
    pub rng_seed: u64,
    /// ChaCha word position as a decimal string (it is a u128).
    pub rng_word_pos: String,
    pub trace: Vec<TraceRow>,
    pub warmup: Option<WarmupSummary>,
    pub encoder_warmup: Option<WarmupSummary>,
    pub last_batch: Vec<String>,
    /// `L_reg` of `last_batch` under the parameters after the final step.
    pub final_batch_l_reg: Option<f64>,
    pub init_check: Option<InitCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub meta: TrainMeta,
    pub optimizer: AdamW<T>,
}

impl<T: Scalar> TrainState<T> {
    fn fresh(stage: Stage, cfg: &StageConfig, params: &ParamStore<T>) -> Self {
        Self {
            meta: TrainMeta {
                stage: stage.number(),
                step: 0,
                total_steps: cfg.total_steps,
                rng_seed: cfg.seed,
                rng_word_pos: "0".into(),
                trace: Vec::new(),
                warmup: None,
                encoder_warmup: None,
                last_batch: Vec::new(),
                final_batch_l_reg: None,
                init_check: None,
            },
            optimizer: AdamW::new(cfg, params, |n| stage.trainable(n)),
        }
    }

    pub fn stage(&self) -> Result<Stage> {
        Stage::from_number(self.meta.stage)
    }

    pub fn is_finished(&self) -> bool {
        self.meta.step >= self.meta.total_steps
    }

    fn rng(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.meta.rng_seed);
        let pos: u128 = self
            .meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad rng position `{}`", self.meta.rng_word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Per-sample result of one forward/backward pass.
struct SampleOut<T> {
    grads: Gradients<T>,
    l_reg: f64,
    l_r: Option<f64>,
    correct: usize,
    decisions: usize,
}

fn sample_input<'s, T: Scalar>(
    tok: &Tokenizer,
    s: &'s Sample<T>,
    ids: &'s mut (Vec<usize>, Vec<usize>),
) -> Result<SampleInput<'s, T>> {
    ids.0 = tok.encode(&s.record.prompt)?;
    ids.1 = tok.encode(&s.record.answer)?;
    Ok(SampleInput {
        id: &s.record.id,
        volume: &s.volume,
        prompt_ids: &ids.0,
        answer_ids: &ids.1,
        task: s.record.task,
    })
}

fn forward_backward<T: Scalar>(
    model: &Mllm<T>,
    s: &Sample<T>,
    stage: Stage,
    alpha: f64,
    step: usize,
    with_grad: bool,
) -> Result<SampleOut<T>> {
    let mut ids = (Vec::new(), Vec::new());
    let input = sample_input(&model.tokenizer, s, &mut ids)?;
    let mut g = if with_grad {
        Graph::new(&model.params, move |n| stage.trainable(n))
    } else {
        Graph::inference(&model.params)
    };
    let out = model.forward_sample(&mut g, &input, alpha)?;
    let l_reg = g.value(out.l_reg).item().as_f64();
    let l_r = out.l_r.map(|v| g.value(v).item().as_f64());
    let total = g.value(out.total).item().as_f64();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            sample_id: s.record.id.clone(),
        });
    }
    let mut correct = 0;
    let mut decisions = 0;
    for r in &out.routing {
        if let Some(t) = r.record.selected_task() {
            decisions += 1;
            correct += (t == s.record.task.index()) as usize;
        }
    }
    let grads = if with_grad { g.backward(out.total) } else { Gradients::new() };
    Ok(SampleOut {
        grads,
        l_reg,
        l_r,
        correct,
        decisions,
    })
}

/// Averaged gradients and losses of a batch. Samples run in parallel; the
/// reduction is in batch order, so results do not depend on thread count.
pub struct BatchResult<T> {
    pub grads: Gradients<T>,
    pub l_reg: f64,
    pub l_r: Option<f64>,
    pub router_acc: Option<f64>,
}

pub fn run_batch<T: Scalar>(
    model: &Mllm<T>,
    data: &Dataset<T>,
    batch: &[usize],
    stage: Stage,
    alpha: f64,
    step: usize,
    with_grad: bool,
) -> Result<BatchResult<T>> {
    let outs: Vec<SampleOut<T>> = batch
        .par_iter()
        .map(|&i| forward_backward(model, &data.samples[i], stage, alpha, step, with_grad))
        .collect::<Result<_>>()?;
    let n = outs.len() as f64;
    let mut grads: Gradients<T> = Gradients::new();
    let (mut l_reg, mut l_r, mut any_lr) = (0.0, 0.0, false);
    let (mut correct, mut decisions) = (0, 0);
    for o in outs {
        l_reg += o.l_reg;
        if let Some(v) = o.l_r {
            l_r += v;
            any_lr = true;
        }
        correct += o.correct;
        decisions += o.decisions;
        for (k, g) in o.grads {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    grads.insert(k, g);
                }
            }
        }
    }
    let inv = T::of(1.0 / n);
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(BatchResult {
        grads,
        l_reg: l_reg / n,
        l_r: any_lr.then(|| l_r / n),
        router_acc: (decisions > 0).then(|| correct as f64 / decisions as f64),
    })
}

/// Each element picks MRG or MVQA with equal probability, then a sample of
/// that task uniformly.
pub fn sample_batch<T: Scalar>(data: &Dataset<T>, by_task: &[Vec<usize>; 2], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let t = rng.gen_range(0..2);
            let pool = if by_task[t].is_empty() { &by_task[1 - t] } else { &by_task[t] };
            if pool.is_empty() {
                rng.gen_range(0..data.len())
            } else {
                pool[rng.gen_range(0..pool.len())]
            }
        })
        .collect()
}

/// Called after every optimizer step; return `false` to stop early.
pub type StepHook<'h, T> = dyn FnMut(&Mllm<T>, &TrainState<T>) -> Result<bool> + 'h;

fn ids_to_indices<T: Scalar>(data: &Dataset<T>, ids: &[String]) -> Result<Vec<usize>> {
    let index: BTreeMap<&str, usize> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.record.id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("sample `{id}` not in dataset")))
        })
        .collect()
}

fn train_loop<T: Scalar>(
    data: &Dataset<T>,
    model: &mut Mllm<T>,
    cfg: &StageConfig,
    stage: Stage,
    state: &mut TrainState<T>,
    hook: &mut StepHook<'_, T>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let by_task = data.by_task();
    let mut rng = state.rng()?;
    while state.meta.step < state.meta.total_steps {
        let step = state.meta.step;
        let batch = sample_batch(data, &by_task, cfg.batch_size, &mut rng);
        let mut res = run_batch(model, data, &batch, stage, cfg.alpha, step, true)?;
        clip_grad_norm(&mut res.grads, cfg.grad_clip);
        let lr = cosine_lr(cfg.lr, step, state.meta.total_steps);
        state.optimizer.update(&mut model.params, &res.grads, lr);
        let l_total = match res.l_r {
            Some(lr_) => res.l_reg + cfg.alpha * lr_,
            None => res.l_reg,
        };
        state.meta.trace.push(TraceRow {
            step,
            l_reg: res.l_reg,
            l_r: res.l_r,
            l_total,
            router_acc: res.router_acc,
            lr,
        });
        state.meta.last_batch = batch.iter().map(|&i| data.samples[i].record.id.clone()).collect();
        state.meta.step += 1;
        state.meta.rng_word_pos = rng.get_word_pos().to_string();
        if state.is_finished() {
            let res = run_batch(model, data, &batch, stage, cfg.alpha, step, false)?;
            state.meta.final_batch_l_reg = Some(res.l_reg);
        }
        if !hook(model, state)? {
            break;
        }
    }
    Ok(())
}

/// Shared loop of the two warmups: `per_sample` returns gradients and loss of
/// one sample; batches are averaged, clipped and applied with AdamW under a
/// cosine schedule.
fn warmup_loop<T: Scalar>(
    data: &Dataset<T>,
    model: &mut Mllm<T>,
    cfg: &StageConfig,
    (steps, lr, seed): (usize, f64, u64),
    trainable: fn(&str) -> bool,
    per_sample: impl Fn(&Mllm<T>, usize, usize) -> Result<(Gradients<T>, f64)> + Sync,
) -> Result<WarmupSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_task = data.by_task();
    let mut opt = AdamW::new(cfg, &model.params, trainable);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample_batch(data, &by_task, cfg.batch_size, &mut rng);
        let outs: Vec<(Gradients<T>, f64)> = batch
            .par_iter()
            .map(|&i| {
                let (gr, l) = per_sample(model, step, i)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        sample_id: data.samples[i].record.id.clone(),
                    });
                }
                Ok((gr, l))
            })
            .collect::<Result<_>>()?;
        let n = outs.len() as f64;
        let mut grads = Gradients::new();
        let mut loss = 0.0;
        for (gr, l) in outs {
            loss += l;
            for (k, g) in gr {
                match grads.get_mut(&k) {
                    Some(acc) => Tensor::add_assign(acc, &g),
                    None => {
                        grads.insert(k, g);
                    }
                }
            }
        }
        let inv = T::of(1.0 / n);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.update(&mut model.params, &grads, cosine_lr(lr, step, steps));
        losses.push(loss / n);
    }
    let tail = &losses[losses.len().saturating_sub(LOSS_WINDOW)..];
    Ok(WarmupSummary {
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
    })
}

/// Text-only LM pretraining on the corpus layout. Image slots hold noisy
/// word-bag embeddings of each octant (zeros when the encoder does not emit
/// one token per octant); a stand-in for starting from a pretrained language
/// model. Leaves the slot table in place for [`encoder_align`].
pub fn lm_warmup<T: Scalar>(
    data: &Dataset<T>,
    model: &mut Mllm<T>,
    cfg: &StageConfig,
) -> Result<WarmupSummary> {
    let seed = cfg.seed ^ 0x5eed_1a57;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.tokenizer.vocab_size();
    let d = model.spec.lm.dim;
    model.params.insert(SLOT_TABLE, normal_tensor(&mut rng, &[vocab, d], 0.02));
    let n_img = model.spec.encoder.output_tokens(data.samples[0].volume.dims().0);
    let per_sample = |model: &Mllm<T>, step: usize, i: usize| {
        let s = &data.samples[i];
        let tok = &model.tokenizer;
        let prompt = tok.encode(&s.record.prompt)?;
        let answer = tok.encode(&s.record.answer)?;
        let mut g = Graph::new(&model.params, lm_warmup_trainable);
        let img = if n_img == OCTANTS {
            let clean = slot_embeddings(&mut g, tok, &s.record.scene)?;
            let seed = cfg.seed ^ ((step as u64) << 32) ^ i as u64;
            jitter(&mut g, clean, cfg.lm_warmup_noise, seed)
        } else {
            g.constant(Tensor::zeros(&[n_img, d]))
        };
        let ctx = assemble_context_ids(&prompt, n_img, Some(&answer));
        let emb = embed_context(&mut g, &ctx, img);
        let logits = lm_logits(&mut g, &model.spec.lm, emb)?;
        let loss = autoregressive_loss(&mut g, &ctx, logits)?;
        let l = g.value(loss).item().as_f64();
        Ok((g.backward(loss), l))
    };
    // the table is created with a different stream than batch sampling
    let seed = seed.rotate_left(17);
    warmup_loop(data, model, cfg, (cfg.lm_warmup_steps, cfg.lm_warmup_lr, seed), lm_warmup_trainable, per_sample)
}

fn align_trainable(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("connector.")
}

/// Regresses the image tokens onto the clean slot embeddings of each scene,
/// so stage 1 starts from tokens the warmed LM already reads. A stand-in for
/// a pretrained vision encoder and connector; needs [`lm_warmup`] first.
pub fn encoder_align<T: Scalar>(
    data: &Dataset<T>,
    model: &mut Mllm<T>,
    cfg: &StageConfig,
) -> Result<WarmupSummary> {
    if model.params.get(SLOT_TABLE).is_none() {
        return Err(Error::InvalidInput("encoder alignment needs the LM warmup slot table".into()));
    }
    let n_img = model.spec.encoder.output_tokens(data.samples[0].volume.dims().0);
    if n_img != OCTANTS {
        return Err(Error::Config(format!(
            "encoder alignment needs one image token per octant, encoder emits {n_img}"
        )));
    }
    let per_sample = |model: &Mllm<T>, _step: usize, i: usize| {
        let s = &data.samples[i];
        let tok = &model.tokenizer;
        let target = {
            let mut g = Graph::inference(&model.params);
            let v = slot_embeddings(&mut g, tok, &s.record.scene)?;
            g.value(v).clone()
        };
        let prompt = tok.encode(&s.record.prompt)?;
        let mut g = Graph::new(&model.params, align_trainable);
        let (img, _) = model.image_tokens(&mut g, &s.volume, &prompt)?;
        let loss = g.mse(img, target);
        let l = g.value(loss).item().as_f64();
        Ok((g.backward(loss), l))
    };
    let seed = cfg.seed ^ 0xa119_2e4d;
    warmup_loop(data, model, cfg, (cfg.encoder_warmup_steps, cfg.encoder_warmup_lr, seed), align_trainable, per_sample)
}

const OCTANTS: usize = 8;

/// Warmup-only word table for image slots. Kept apart from `lm.embed` so the
/// LM learns to decode slot content rather than match it against prompt
/// tokens; dropped before stage 1 starts.
const SLOT_TABLE: &str = "lm.warmup_slots.weight";

/// Slot noise keeps the LM from relying on exact codes that an encoder will
/// only approximate.
fn jitter<T: Scalar>(g: &mut Graph<'_, T>, x: Var, rel_std: f64, seed: u64) -> Var {
    let v = g.value(x);
    let rms = (v.data().iter().map(|a| a.as_f64().powi(2)).sum::<f64>() / v.data().len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = g.constant(normal_tensor(&mut rng, v.shape(), rel_std * rms.max(1e-12)));
    g.add(x, noise)
}

/// Mean slot-table embedding of each octant's description, one row per
/// octant.
fn slot_embeddings<T: Scalar>(g: &mut Graph<'_, T>, tok: &Tokenizer, scene: &SceneSpec) -> Result<Var> {
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    for bag in octant_words_bag(scene) {
        let start = ids.len();
        ids.extend(tok.encode(&bag.join(" "))?);
        groups.push((start..ids.len()).collect());
    }
    let table = g.param(SLOT_TABLE);
    let rows = g.embedding(table, &ids);
    Ok(g.mean_rows(rows, groups))
}

/// Stage 1. With `state = None` the LM warmup runs first, then training
/// starts from step 0; otherwise training resumes from `state`.
pub fn run_stage1<T: Scalar>(
    data: &Dataset<T>,
    mut model: Mllm<T>,
    cfg: &RunConfig,
    state: Option<TrainState<T>>,
    hook: &mut StepHook<'_, T>,
) -> Result<(Mllm<T>, TrainState<T>)> {
    for p in model.moe_prefixes() {
        if tgh_moe::moe_kind(&model.params, &p) != Some(MoeKind::Token) {
            return Err(Error::Config(format!("stage 1 needs token-level MoE at `{p}`")));
        }
    }
    let sc = &cfg.stage1;
    let mut state = match state {
        Some(s) => s,
        None => {
            let warmup = if sc.lm_warmup_steps > 0 {
                Some(lm_warmup(data, &mut model, sc)?)
            } else {
                None
            };
            let align = if sc.encoder_warmup_steps > 0 && warmup.is_some() {
                Some(encoder_align(data, &mut model, sc)?)
            } else {
                None
            };
            model.params.remove(SLOT_TABLE);
            let mut s = TrainState::fresh(Stage::One, sc, &model.params);
            s.meta.warmup = warmup;
            s.meta.encoder_warmup = align;
            s
        }
    };
    if state.stage()? != Stage::One {
        return Err(Error::InvalidInput("resume state is not from stage 1".into()));
    }
    train_loop(data, &mut model, sc, Stage::One, &mut state, hook)?;
    Ok((model, state))
}

/// Turns every token-level MoE into a text-guided task MoE.
pub fn to_stage2<T: Scalar>(model: &mut Mllm<T>) -> Result<()> {
    let d_t = model.spec.lm.dim;
    for p in model.moe_prefixes() {
        tgh_moe::replicate_for_stage2(&mut model.params, &p, d_t)?;
    }
    Ok(())
}

/// Stage 2 from a finished stage-1 model (`state = None`, `stage1` holding
/// the stage-1 progress for the initialization check) or resumed.
pub fn run_stage2<T: Scalar>(
    data: &Dataset<T>,
    mut model: Mllm<T>,
    cfg: &RunConfig,
    stage1: Option<&TrainMeta>,
    state: Option<TrainState<T>>,
    hook: &mut StepHook<'_, T>,
) -> Result<(Mllm<T>, TrainState<T>)> {
    let sc = &cfg.stage2;
    let mut state = match state {
        Some(s) => s,
        None => {
            to_stage2(&mut model)?;
            let mut s = TrainState::fresh(Stage::Two, sc, &model.params);
            if let Some(m1) = stage1 {
                if let (Some(l1), false) = (m1.final_batch_l_reg, m1.last_batch.is_empty()) {
                    let idx = ids_to_indices(data, &m1.last_batch)?;
                    let r = run_batch(&model, data, &idx, Stage::Two, sc.alpha, 0, false)?;
                    s.meta.init_check = Some(InitCheck {
                        sample_ids: m1.last_batch.clone(),
                        stage1_l_reg: l1,
                        stage2_l_reg: r.l_reg,
                        abs_diff: (r.l_reg - l1).abs(),
                    });
                }
            }
            s
        }
    };
    if state.stage()? != Stage::Two {
        return Err(Error::InvalidInput("resume state is not from stage 2".into()));
    }
    train_loop(data, &mut model, sc, Stage::Two, &mut state, hook)?;
    Ok((model, state))
}

/// A model checkpoint read back from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub model: Mllm<T>,
    pub state: Option<TrainState<T>>,
}

const OPT_M: &str = "optimizer.m.";
const OPT_V: &str = "optimizer.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerSection {
    kind: String,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    tensors: Vec<String>,
}

/// Writes model parameters, optimizer moments, progress and the resolved
/// config. Output is a pure function of its inputs.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &RunConfig,
    model: &Mllm<T>,
    state: Option<&TrainState<T>>,
) -> Result<Manifest> {
    let mut sections = BTreeMap::new();
    sections.insert("config".into(), serde_json::to_value(config)?);
    sections.insert("vocab".into(), serde_json::to_value(model.tokenizer.words())?);
    let mut tensors: BTreeMap<String, &Tensor<T>> = model
        .params
        .iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    if let Some(st) = state {
        sections.insert("train_state".into(), serde_json::to_value(&st.meta)?);
        let o = &st.optimizer;
        sections.insert(
            "optimizer".into(),
            serde_json::to_value(OptimizerSection {
                kind: "adamw".into(),
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
                tensors: o.m.keys().cloned().collect(),
            })?,
        );
        for (k, v) in &o.m {
            tensors.insert(format!("{OPT_M}{k}"), v);
        }
        for (k, v) in &o.v {
            tensors.insert(format!("{OPT_V}{k}"), v);
        }
    }
    checkpoint::write_archive(dir, "model", sections, &tensors)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let (manifest, tensors) = checkpoint::read_archive::<T>(dir)?;
    if manifest.kind != "model" {
        return Err(Error::InvalidInput(format!(
            "{}: archive kind `{}` is not a model checkpoint",
            dir.display(),
            manifest.kind
        )));
    }
    let section = |k: &str| {
        manifest
            .sections
            .get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("{}: manifest lacks `{k}`", dir.display())))
    };
    let config: RunConfig = serde_json::from_value(section("config")?)?;
    config.validate()?;
    let words: Vec<String> = serde_json::from_value(section("vocab")?)?;
    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (k, t) in tensors {
        if let Some(n) = k.strip_prefix(OPT_M) {
            m.insert(n.to_string(), t);
        } else if let Some(n) = k.strip_prefix(OPT_V) {
            v.insert(n.to_string(), t);
        } else {
            params.insert(k, t);
        }
    }
    let state = match manifest.sections.get("train_state") {
        Some(meta) => {
            let meta: TrainMeta = serde_json::from_value(meta.clone())?;
            let o: OptimizerSection = serde_json::from_value(section("optimizer")?)?;
            if o.tensors.iter().any(|n| !m.contains_key(n) || !v.contains_key(n)) {
                return Err(Error::InvalidInput("optimizer moments incomplete".into()));
            }
            Some(TrainState {
                meta,
                optimizer: AdamW {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    step: o.step,
                    m,
                    v,
                },
            })
        }
        None => None,
    };
    let model = Mllm {
        spec: config.spec(),
        tokenizer: Tokenizer::new(words),
        params,
    };
    Ok(Checkpoint {
        config,
        model,
        state,
    })
}
