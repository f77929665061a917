//! The multimodal model: adapted vision encoder → connector → decoder-only LM.
//!
//! Input sequence: `[BOS, prompt…, IMG, image tokens…, answer…, EOS]`, text
//! before image. Only answer and EOS positions are prediction targets.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{causal_ranges, ffn, layer_norm, linear};
use crate::params::{normal_tensor, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, Tensor};
use crate::tgh_moe::{self, IndicatorVector, MoeConfig, Task};
use crate::vit_adapt::{self, EncoderConfig, LayerRouting, VolumeTensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<img>"];

/// Closed word-level vocabulary: four special tokens, then sorted words.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut w: Vec<String> = words.into_iter().map(|s| s.into().to_lowercase()).collect();
        w.sort();
        w.dedup();
        w.retain(|x| !SPECIALS.contains(&x.as_str()));
        let index = w
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + SPECIALS.len()))
            .collect();
        Self { words: w, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len() + SPECIALS.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases and splits on whitespace.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index
                    .get(&w)
                    .copied()
                    .ok_or(Error::UnknownWord(w))
            })
            .collect()
    }

    /// Joins words with single spaces; special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.words.get(i - SPECIALS.len()))
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn token(&self, id: usize) -> &str {
        if id < SPECIALS.len() {
            SPECIALS[id]
        } else {
            &self.words[id - SPECIALS.len()]
        }
    }

    /// Vocabulary file: the sorted word list, one per line.
    pub fn to_file_contents(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_contents()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(s.lines().filter(|l| !l.trim().is_empty())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Leading layers reused as the prompt encoder for the task router.
    pub text_encoder_layers: usize,
    pub lora: LoraConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_len: 128,
            text_encoder_layers: 4,
            lora: LoraConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    /// Weight matrices to adapt, matched by suffix (`attn.q` hits every layer).
    pub targets: Vec<String>,
    pub rank: usize,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            targets: vec!["attn.q".into(), "attn.v".into()],
            rank: 4,
            scale: 1.0,
        }
    }
}

/// Everything needed to rebuild the network around a parameter store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
    pub lm: LmConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.n_moe > 0 {
            self.moe.validate()?;
        }
        let lm = &self.lm;
        if lm.heads == 0 || lm.dim % lm.heads != 0 {
            return Err(Error::Config(format!(
                "lm dim {} not divisible by heads {}",
                lm.dim, lm.heads
            )));
        }
        if lm.text_encoder_layers == 0 || lm.text_encoder_layers > lm.layers {
            return Err(Error::Config(format!(
                "text_encoder_layers must be in 1..={}",
                lm.layers
            )));
        }
        Ok(())
    }
}

fn lm_linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, lora_scale: f64) -> Var {
    let base = linear(g, x, prefix);
    let a_name = format!("{prefix}.lora_a");
    if !g.store().contains(&a_name) {
        return base;
    }
    let a = g.param(&a_name);
    let b = g.param(&format!("{prefix}.lora_b"));
    let down = g.linear(x, a, None);
    let up = g.linear(down, b, None);
    let up = g.scale(up, T::of(lora_scale));
    g.add(base, up)
}

fn lm_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    layer: usize,
    lm: &LmConfig,
    lora_scale: f64,
) -> Var {
    let pre = format!("lm.layers.{layer}");
    let n = g.value(x).rows();
    let h = layer_norm(g, x, &format!("{pre}.ln1"));
    let q = lm_linear(g, h, &format!("{pre}.attn.q"), lora_scale);
    let k = lm_linear(g, h, &format!("{pre}.attn.k"), lora_scale);
    let v = lm_linear(g, h, &format!("{pre}.attn.v"), lora_scale);
    let a = g.attention(q, k, v, lm.heads, causal_ranges(n));
    let o = lm_linear(g, a, &format!("{pre}.attn.o"), lora_scale);
    let x = g.add(x, o);
    let h = layer_norm(g, x, &format!("{pre}.ln2"));
    let f = ffn(g, h, &format!("{pre}.mlp"));
    g.add(x, f)
}

fn add_positions<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lm: &LmConfig) -> Result<Var> {
    let n = g.value(x).rows();
    if n > lm.max_len {
        return Err(Error::InvalidInput(format!(
            "sequence of {n} tokens exceeds max_len {}",
            lm.max_len
        )));
    }
    let table = g.param("lm.pos.weight");
    let pos: Vec<usize> = (0..n).collect();
    let pe = g.embedding(table, &pos);
    Ok(g.add(x, pe))
}

/// Hidden states of the first `text_encoder_layers` layers on `ids`.
pub fn text_hidden<T: Scalar>(
    g: &mut Graph<'_, T>,
    lm: &LmConfig,
    lora_scale: f64,
    ids: &[usize],
) -> Result<Var> {
    let table = g.param("lm.embed.weight");
    let x = g.embedding(table, ids);
    let mut x = add_positions(g, x, lm)?;
    for l in 0..lm.text_encoder_layers.min(lm.layers) {
        x = lm_block(g, x, l, lm, lora_scale);
    }
    Ok(x)
}

/// Next-token logits for every position of an embedded sequence.
pub fn lm_logits<T: Scalar>(
    g: &mut Graph<'_, T>,
    lm: &LmConfig,
    embeds: Var,
) -> Result<Var> {
    let mut x = add_positions(g, embeds, lm)?;
    for l in 0..lm.layers {
        x = lm_block(g, x, l, lm, lm.lora.scale);
    }
    let x = layer_norm(g, x, "lm.ln_f");
    let head = g.param("lm.embed.weight");
    Ok(g.linear(x, head, None))
}

/// Two-layer MLP with GELU from encoder width to LM width.
pub fn connect<T: Scalar>(g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
    let want = g.store().tensor("connector.fc1.weight").cols();
    let got = g.value(features).cols();
    if want != got {
        return Err(Error::Config(format!(
            "connector expects feature width {want}, got {got}"
        )));
    }
    Ok(ffn(g, features, "connector"))
}

/// Token layout of one multimodal sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultimodalContext {
    /// `[BOS, prompt…, IMG]`
    pub prefix_ids: Vec<usize>,
    pub n_img: usize,
    /// `[answer…, EOS]`, or empty in generation mode.
    pub suffix_ids: Vec<usize>,
    /// Per position, the next token to predict if that position is scored.
    pub targets: Vec<Option<usize>>,
}

impl MultimodalContext {
    pub fn len(&self) -> usize {
        self.prefix_ids.len() + self.n_img + self.suffix_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    /// Position of the first image token.
    pub fn image_start(&self) -> usize {
        self.prefix_ids.len()
    }
}

/// Builds the sequence layout from token ids. `answer = None` is generation
/// mode: no EOS, no targets.
pub fn assemble_context_ids(
    prompt: &[usize],
    n_img: usize,
    answer: Option<&[usize]>,
) -> MultimodalContext {
    let mut prefix_ids = Vec::with_capacity(prompt.len() + 2);
    prefix_ids.push(BOS);
    prefix_ids.extend_from_slice(prompt);
    prefix_ids.push(IMG);
    let suffix_ids: Vec<usize> = match answer {
        Some(a) => a.iter().copied().chain(std::iter::once(EOS)).collect(),
        None => Vec::new(),
    };
    let total = prefix_ids.len() + n_img + suffix_ids.len();
    let answer_start = prefix_ids.len() + n_img;
    let targets = (0..total)
        .map(|p| (p + 1 >= answer_start && p + 1 < total).then(|| suffix_ids[p + 1 - answer_start]))
        .collect();
    MultimodalContext {
        prefix_ids,
        n_img,
        suffix_ids,
        targets,
    }
}

pub fn assemble_context(
    tok: &Tokenizer,
    prompt: &str,
    n_img: usize,
    answer: Option<&str>,
) -> Result<MultimodalContext> {
    let p = tok.encode(prompt)?;
    let a = answer.map(|a| tok.encode(a)).transpose()?;
    Ok(assemble_context_ids(&p, n_img, a.as_deref()))
}

/// Embeds the text parts and splices the image embeddings in between.
pub fn embed_context<T: Scalar>(
    g: &mut Graph<'_, T>,
    ctx: &MultimodalContext,
    image: Var,
) -> Var {
    assert_eq!(g.value(image).rows(), ctx.n_img);
    let table = g.param("lm.embed.weight");
    let pre = g.embedding(table, &ctx.prefix_ids);
    if ctx.suffix_ids.is_empty() {
        return g.concat_rows(&[pre, image]);
    }
    let suf = g.embedding(table, &ctx.suffix_ids);
    g.concat_rows(&[pre, image, suf])
}

/// Mean next-token cross-entropy over the scored positions.
pub fn autoregressive_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    ctx: &MultimodalContext,
    logits: Var,
) -> Result<Var> {
    if ctx.targets.iter().all(Option::is_none) {
        return Err(Error::InvalidInput("loss mask selects no positions".into()));
    }
    Ok(g.cross_entropy(logits, &ctx.targets, None))
}

/// `L_reg + α·L_r`
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, l_reg: Var, l_r: Option<Var>, alpha: f64) -> Var {
    match l_r {
        Some(lr) => {
            let s = g.scale(lr, T::of(alpha));
            g.add(l_reg, s)
        }
        None => l_reg,
    }
}

/// One training/eval example in token form.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'s, T> {
    pub id: &'s str,
    pub volume: &'s VolumeTensor<T>,
    pub prompt_ids: &'s [usize],
    pub answer_ids: &'s [usize],
    pub task: Task,
}

pub struct SampleForward {
    pub l_reg: Var,
    pub l_r: Option<Var>,
    pub total: Var,
    pub routing: Vec<LayerRouting>,
    pub context: MultimodalContext,
}

#[derive(Clone, Debug)]
pub struct Mllm<T> {
    pub spec: ModelSpec,
    pub tokenizer: Tokenizer,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Mllm<T> {
    /// Fresh model: random 2D encoder adapted to 3D (FFNs upcycled into
    /// token-level experts), random connector and LM, LoRA-wrapped.
    pub fn new(spec: ModelSpec, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        spec.validate()?;
        let w2d = vit_adapt::init_2d_encoder::<T>(&spec.encoder, seed);
        let (mut params, _) =
            vit_adapt::adapt_checkpoint(&w2d, &spec.encoder, &spec.moe, seed.wrapping_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        params.extend_from(init_connector(&spec, &mut rng));
        params.extend_from(init_lm(&spec.lm, tokenizer.vocab_size(), &mut rng));
        lora_wrap(&mut params, &spec.lm, &spec.lm.lora, &mut rng)?;
        Ok(Self {
            spec,
            tokenizer,
            params,
        })
    }

    /// Replaces the encoder tensors (e.g. with an adapted checkpoint).
    pub fn set_encoder(&mut self, encoder: ParamStore<T>) -> Result<()> {
        let enc_prefix = format!("{}.", vit_adapt::ENCODER_PREFIX);
        let found = encoder.shapes();
        let mine: BTreeMap<String, Vec<usize>> = self
            .params
            .shapes()
            .into_iter()
            .filter(|(k, _)| k.starts_with(&enc_prefix))
            .collect();
        vit_adapt::check_manifest(&found, &mine)?;
        self.params.retain(|k| !k.starts_with(&enc_prefix));
        self.params.extend_from(encoder);
        Ok(())
    }

    /// Encoder MoE layer parameter prefixes.
    pub fn moe_prefixes(&self) -> Vec<String> {
        (0..self.spec.encoder.layers_total)
            .filter(|&l| self.spec.encoder.is_moe(l))
            .map(|l| format!("{}.layers.{l}.moe", vit_adapt::ENCODER_PREFIX))
            .collect()
    }

    pub fn indicator(
        &self,
        g: &mut Graph<'_, T>,
        prompt_ids: &[usize],
    ) -> Result<Option<IndicatorVector<T>>> {
        if self.spec.encoder.n_moe == 0 {
            return Ok(None);
        }
        tgh_moe::text_indicator(g, &self.spec.lm, self.spec.lm.lora.scale, prompt_ids).map(Some)
    }

    /// Image embeddings `T_I` in LM space plus routing.
    pub fn image_tokens(
        &self,
        g: &mut Graph<'_, T>,
        volume: &VolumeTensor<T>,
        prompt_ids: &[usize],
    ) -> Result<(Var, Vec<LayerRouting>)> {
        let h = self.indicator(g, prompt_ids)?;
        let enc = vit_adapt::encode_volume(g, volume, &self.spec.encoder, &self.spec.moe, h.as_ref())?;
        let t = connect(g, enc.tokens)?;
        Ok((t, enc.routing))
    }

    /// Full training forward of one sample.
    pub fn forward_sample(
        &self,
        g: &mut Graph<'_, T>,
        s: &SampleInput<'_, T>,
        alpha: f64,
    ) -> Result<SampleForward> {
        let (img, mut routing) = self.image_tokens(g, s.volume, s.prompt_ids)?;
        let n_img = g.value(img).rows();
        let ctx = assemble_context_ids(s.prompt_ids, n_img, Some(s.answer_ids));
        let emb = embed_context(g, &ctx, img);
        let logits = lm_logits(g, &self.spec.lm, emb)?;
        let l_reg = autoregressive_loss(g, &ctx, logits)?;
        let mut router_losses = Vec::new();
        for r in &mut routing {
            r.record.task_label = Some(s.task);
            if let Some(tl) = r.task_logits {
                router_losses.push(tgh_moe::router_loss(g, tl, s.task));
            }
        }
        let l_r = if router_losses.is_empty() {
            None
        } else {
            let mut acc = router_losses[0];
            for &l in &router_losses[1..] {
                acc = g.add(acc, l);
            }
            Some(g.scale(acc, T::of(1.0 / router_losses.len() as f64)))
        };
        let total = total_loss(g, l_reg, l_r, alpha);
        Ok(SampleForward {
            l_reg,
            l_r,
            total,
            routing,
            context: ctx,
        })
    }

    /// Greedy decoding until EOS or `max_new_tokens`.
    pub fn generate(
        &self,
        prompt: &str,
        volume: &VolumeTensor<T>,
        max_new_tokens: usize,
    ) -> Result<String> {
        let prompt_ids = self.tokenizer.encode(prompt)?;
        Ok(self.generate_ids(&prompt_ids, volume, max_new_tokens)?.0)
    }

    /// Greedy decoding from token ids; also returns the encoder routing.
    pub fn generate_ids(
        &self,
        prompt_ids: &[usize],
        volume: &VolumeTensor<T>,
        max_new_tokens: usize,
    ) -> Result<(String, Vec<LayerRouting>, Vec<crate::tgh_moe::RoutingRecord>)> {
        let (image, routing) = {
            let mut g = Graph::inference(&self.params);
            let (img, routing) = self.image_tokens(&mut g, volume, prompt_ids)?;
            (g.value(img).clone(), routing)
        };
        let records = routing.iter().map(|r| r.record.clone()).collect();
        let mut out: Vec<usize> = Vec::new();
        let n_img = image.rows();
        let budget = self
            .spec
            .lm
            .max_len
            .saturating_sub(prompt_ids.len() + 2 + n_img);
        for _ in 0..max_new_tokens.min(budget) {
            let mut g = Graph::inference(&self.params);
            let img = g.constant(image.clone());
            let mut ctx = assemble_context_ids(prompt_ids, n_img, None);
            ctx.suffix_ids = out.clone();
            let emb = embed_context(&mut g, &ctx, img);
            let logits = lm_logits(&mut g, &self.spec.lm, emb)?;
            let lv = g.value(logits);
            let last = lv.row(lv.rows() - 1);
            let mut best = EOS;
            let mut best_v = T::neg_infinity();
            for (i, v) in last.iter().enumerate() {
                if matches!(i, PAD | BOS | IMG) {
                    continue;
                }
                if *v > best_v {
                    best_v = *v;
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
        }
        Ok((self.tokenizer.decode(&out), routing, records))
    }
}

fn init_connector<T: Scalar>(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let (c, d) = (spec.encoder.embed_dim, spec.lm.dim);
    let mut s = ParamStore::new();
    s.insert("connector.fc1.weight", normal_tensor(rng, &[d, c], 0.02));
    s.insert("connector.fc1.bias", Tensor::zeros(&[d]));
    s.insert("connector.fc2.weight", normal_tensor(rng, &[d, d], 0.02));
    s.insert("connector.fc2.bias", Tensor::zeros(&[d]));
    s
}

/// Name → shape of the base LM (no adapters).
pub fn lm_shapes(lm: &LmConfig, vocab: usize) -> BTreeMap<String, Vec<usize>> {
    let d = lm.dim;
    let mut m = BTreeMap::new();
    m.insert("lm.embed.weight".to_string(), vec![vocab, d]);
    m.insert("lm.pos.weight".to_string(), vec![lm.max_len, d]);
    m.insert("lm.ln_f.weight".to_string(), vec![d]);
    m.insert("lm.ln_f.bias".to_string(), vec![d]);
    for l in 0..lm.layers {
        let pre = format!("lm.layers.{l}");
        for ln in ["ln1", "ln2"] {
            m.insert(format!("{pre}.{ln}.weight"), vec![d]);
            m.insert(format!("{pre}.{ln}.bias"), vec![d]);
        }
        for p in ["q", "k", "v", "o"] {
            m.insert(format!("{pre}.attn.{p}.weight"), vec![d, d]);
            m.insert(format!("{pre}.attn.{p}.bias"), vec![d]);
        }
        vit_adapt::insert_ffn_shapes(&mut m, &format!("{pre}.mlp"), d, lm.ffn_dim);
    }
    m
}

pub fn init_lm<T: Scalar>(lm: &LmConfig, vocab: usize, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut s = ParamStore::new();
    for (name, shape) in lm_shapes(lm, vocab) {
        let t = if name.contains(".ln") && name.ends_with(".weight") {
            Tensor::full(&shape, T::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            normal_tensor(rng, &shape, 0.02)
        };
        s.insert(name, t);
    }
    s
}

fn lora_stems<T: Scalar>(params: &ParamStore<T>, target: &str) -> Vec<String> {
    params
        .names()
        .filter(|n| n.starts_with("lm.") && n.ends_with(".weight"))
        .map(|n| n.trim_end_matches(".weight").to_string())
        .filter(|stem| stem == target || stem.ends_with(&format!(".{target}")))
        .filter(|stem| params.tensor(&format!("{stem}.weight")).shape().len() == 2)
        .filter(|stem| !stem.ends_with("embed") && !stem.ends_with("pos"))
        .collect()
}

/// Adds `A: [r, d_in]` (Gaussian) and `B: [d_out, r]` (zeros) next to every
/// targeted LM weight; returns the adapted weight names.
pub fn lora_wrap<T: Scalar>(
    params: &mut ParamStore<T>,
    _lm: &LmConfig,
    lora: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    if lora.rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let mut wrapped = Vec::new();
    for t in &lora.targets {
        let stems = lora_stems(params, t);
        if stems.is_empty() {
            return Err(Error::Config(format!("LoRA target `{t}` matches no LM weight")));
        }
        for stem in stems {
            let (d_out, d_in) = {
                let w = params.tensor(&format!("{stem}.weight"));
                (w.rows(), w.cols())
            };
            params.insert(
                format!("{stem}.lora_a"),
                normal_tensor(rng, &[lora.rank, d_in], 1.0 / (d_in as f64).sqrt()),
            );
            params.insert(format!("{stem}.lora_b"), Tensor::zeros(&[d_out, lora.rank]));
            wrapped.push(format!("{stem}.weight"));
        }
    }
    Ok(wrapped)
}

/// Folds `scale·B·A` into each adapted weight and removes the adapters.
pub fn lora_merge<T: Scalar>(params: &mut ParamStore<T>, lora: &LoraConfig) -> usize {
    let stems: Vec<String> = params
        .names()
        .filter_map(|n| n.strip_suffix(".lora_a"))
        .map(str::to_string)
        .collect();
    for stem in &stems {
        let a = params.remove(&format!("{stem}.lora_a")).expect("listed");
        let b = params.remove(&format!("{stem}.lora_b")).expect("paired");
        let (d_out, r, d_in) = (b.rows(), a.rows(), a.cols());
        let mut delta = vec![T::zero(); d_out * d_in];
        matmul_nn(b.data(), a.data(), d_out, r, d_in, &mut delta);
        let w = params.get_mut(&format!("{stem}.weight")).expect("base weight");
        let s = T::of(lora.scale);
        for (wi, di) in w.data_mut().iter_mut().zip(&delta) {
            *wi += s * *di;
        }
    }
    stems.len()
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}
