//! Running a 2D vision transformer on 3D volumes without new parameters.
//!
//! A volume `[D, H, W]` is regrouped into slabs of three consecutive slices,
//! each slab going through the 2D patch-embedding convolution as an RGB
//! image. The 2D positional table is repeated along depth. Lower layers keep
//! per-slab attention; upper layers attend over every token of the volume
//! with the same weights plus a parameter-free rotary embedding on the depth
//! index. Spatial patch merges are reused as-is; after the last merge the
//! depth axis is mean-pooled with kernel 2.
//!
//! Tokens are laid out depth-major then row-major throughout:
//! row `d * Hp * Wp + h * Wp + w`.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{block_ranges, ffn, full_ranges, layer_norm, linear};
use crate::params::{normal_tensor, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tgh_moe::{self, IndicatorVector, MoeConfig, MoeKind, RoutingRecord};

pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers_total: usize,
    /// Lower layers with per-slab attention.
    pub n_2d: usize,
    /// Upper layers attending over the whole volume.
    pub n_3d: usize,
    /// Trailing layers whose FFN is a mixture of experts.
    pub n_moe: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Zero-based layer indices after which a 2×2 spatial merge runs.
    pub merge_schedule: Vec<usize>,
    pub depth_pool_kernel: usize,
    pub rope_base: f64,
    /// `[H, W]` of input slices; fixes the positional table size.
    pub image_size: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            layers_total: 6,
            n_2d: 2,
            n_3d: 4,
            n_moe: 2,
            patch: 16,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 256,
            merge_schedule: vec![3],
            depth_pool_kernel: 2,
            rope_base: 10_000.0,
            image_size: [64, 64],
        }
    }

    /// Full-size layout: 6 + 17 layers, 336² slices with 14-pixel patches,
    /// MoE in the last 4 layers.
    pub fn large() -> Self {
        Self {
            layers_total: 23,
            n_2d: 6,
            n_3d: 17,
            n_moe: 4,
            patch: 14,
            embed_dim: 1024,
            heads: 16,
            ffn_dim: 4096,
            merge_schedule: vec![],
            depth_pool_kernel: 2,
            rope_base: 10_000.0,
            image_size: [336, 336],
        }
    }

    pub fn n_ffn(&self) -> usize {
        self.layers_total - self.n_moe
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Token grid `(Hp, Wp)` right after patch embedding.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size[0] / self.patch,
            self.image_size[1] / self.patch,
        )
    }

    pub fn is_3d(&self, layer: usize) -> bool {
        layer >= self.n_2d
    }

    pub fn is_moe(&self, layer: usize) -> bool {
        layer >= self.layers_total - self.n_moe
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers_total == 0 {
            return err("layers_total must be positive".into());
        }
        if self.n_2d + self.n_3d != self.layers_total {
            return err(format!(
                "n_2d ({}) + n_3d ({}) must equal layers_total ({})",
                self.n_2d, self.n_3d, self.layers_total
            ));
        }
        if self.n_moe > self.n_3d {
            return err(format!(
                "n_moe ({}) must not exceed n_3d ({})",
                self.n_moe, self.n_3d
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.n_3d > 0 && self.head_dim() % 2 != 0 {
            return err(format!("head dimension {} must be even for RoPE", self.head_dim()));
        }
        if self.patch == 0
            || self.image_size[0] % self.patch != 0
            || self.image_size[1] % self.patch != 0
        {
            return err(format!(
                "image size {:?} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        for w in self.merge_schedule.windows(2) {
            if w[0] >= w[1] {
                return err("merge_schedule must be strictly increasing".into());
            }
        }
        if let Some(&last) = self.merge_schedule.last() {
            if last >= self.layers_total {
                return err(format!(
                    "merge index {last} out of range for {} layers",
                    self.layers_total
                ));
            }
        }
        let (hp, wp) = self.grid();
        let f = 1 << self.merge_schedule.len();
        if hp % f != 0 || wp % f != 0 {
            return err(format!(
                "grid {hp}x{wp} cannot be halved {} times",
                self.merge_schedule.len()
            ));
        }
        if self.depth_pool_kernel == 0 {
            return err("depth_pool_kernel must be positive".into());
        }
        if !(self.rope_base > 0.0) {
            return err("rope_base must be positive".into());
        }
        Ok(())
    }

    /// Depth and per-slab token count entering each layer, for an input of
    /// `slabs` slabs.
    pub fn layer_token_schedule(&self, slabs: usize) -> Vec<(usize, usize)> {
        let (mut hp, mut wp) = self.grid();
        let mut depth = slabs;
        let mut out = Vec::with_capacity(self.layers_total);
        let last_merge = self.merge_schedule.last().copied();
        for l in 0..self.layers_total {
            out.push((depth, hp * wp));
            if self.merge_schedule.contains(&l) {
                hp /= 2;
                wp /= 2;
                if Some(l) == last_merge {
                    depth = pooled_depth(depth, self.depth_pool_kernel);
                }
            }
        }
        out
    }

    /// Image tokens produced for a volume of depth `depth`.
    pub fn output_tokens(&self, depth: usize) -> usize {
        let slabs = depth.div_ceil(3);
        let (hp, wp) = self.grid();
        let f = 1 << (2 * self.merge_schedule.len());
        pooled_depth(slabs, self.depth_pool_kernel) * hp * wp / f
    }
}

fn pooled_depth(depth: usize, kernel: usize) -> usize {
    if depth <= 1 {
        depth
    } else {
        depth / kernel + depth % kernel
    }
}

/// One scan, intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeTensor<T> {
    data: Tensor<T>,
    /// Physical voxel size per axis; metadata only.
    pub spacing: Option<[f64; 3]>,
}

impl<T: Scalar> VolumeTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 3 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "volume must be a non-empty [D, H, W] grid, got shape {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::InvalidInput("volume contains non-finite values".into()));
        }
        Ok(Self {
            data,
            spacing: None,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn cast<U: Scalar>(&self) -> VolumeTensor<U> {
        VolumeTensor {
            data: self.data.cast(),
            spacing: self.spacing,
        }
    }
}

/// `[D', 3, H, W]` with `D' = ceil(D / 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlabStack<T> {
    pub data: Tensor<T>,
    /// Depth of the volume before padding.
    pub source_depth: usize,
}

impl<T: Scalar> SlabStack<T> {
    pub fn slabs(&self) -> usize {
        self.data.shape()[0]
    }

    /// Undo the regrouping, dropping padded slices.
    pub fn to_volume(&self) -> VolumeTensor<T> {
        let s = self.data.shape();
        let plane = s[2] * s[3];
        let data = self.data.data()[..self.source_depth * plane].to_vec();
        VolumeTensor {
            data: Tensor::from_vec(&[self.source_depth, s[2], s[3]], data),
            spacing: None,
        }
    }
}

/// Token features of a volume, rows depth-major then row-major.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub x: Var,
    pub depth: usize,
    pub hp: usize,
    pub wp: usize,
}

impl TokenGrid {
    pub fn plane(&self) -> usize {
        self.hp * self.wp
    }

    pub fn len(&self) -> usize {
        self.depth * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slab position of every token row.
    pub fn depth_index(&self) -> Vec<usize> {
        (0..self.len()).map(|r| r / self.plane()).collect()
    }
}

/// Groups slices into 3-channel slabs; a depth not divisible by 3 is padded
/// by repeating the last slice.
pub fn slice_group<T: Scalar>(volume: &VolumeTensor<T>) -> Result<SlabStack<T>> {
    let (d, h, w) = volume.dims();
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    let slabs = d.div_ceil(3);
    let plane = h * w;
    let src = volume.data.data();
    let mut data = Vec::with_capacity(slabs * 3 * plane);
    for z in 0..slabs * 3 {
        let s = z.min(d - 1);
        data.extend_from_slice(&src[s * plane..(s + 1) * plane]);
    }
    Ok(SlabStack {
        data: Tensor::from_vec(&[slabs, 3, h, w], data),
        source_depth: d,
    })
}

/// Non-overlapping `patch × patch` windows of every slab, flattened in the
/// conv-kernel order `[channel, dy, dx]`.
pub fn im2col<T: Scalar>(slabs: &SlabStack<T>, patch: usize) -> Tensor<T> {
    let s = slabs.data.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let (hp, wp) = (h / patch, w / patch);
    let k = 3 * patch * patch;
    let src = slabs.data.data();
    let mut out = Vec::with_capacity(n * hp * wp * k);
    for d in 0..n {
        for ph in 0..hp {
            for pw in 0..wp {
                for ch in 0..3 {
                    let base = (d * 3 + ch) * h * w;
                    for dy in 0..patch {
                        let row = base + (ph * patch + dy) * w + pw * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n * hp * wp, k], out)
}

fn p(name: &str) -> String {
    format!("{ENCODER_PREFIX}.{name}")
}

fn layer_prefix(l: usize) -> String {
    p(&format!("layers.{l}"))
}

/// Shared 2D patch-embedding convolution applied to each slab independently.
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<'_, T>,
    slabs: &SlabStack<T>,
    cfg: &EncoderConfig,
) -> Result<TokenGrid> {
    let s = slabs.data.shape();
    let (h, w) = (s[2], s[3]);
    if cfg.patch == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Config(format!(
            "slice size {h}x{w} is not divisible by patch {}",
            cfg.patch
        )));
    }
    let cols = g.constant(im2col(slabs, cfg.patch));
    let x = linear(g, cols, &p("patch_embed"));
    Ok(TokenGrid {
        x,
        depth: slabs.slabs(),
        hp: h / cfg.patch,
        wp: w / cfg.patch,
    })
}

/// Adds the 2D positional table `[C, Hp, Wp]` to every slab.
pub fn add_positional<T: Scalar>(g: &mut Graph<'_, T>, grid: TokenGrid) -> Result<TokenGrid> {
    let name = p("pos_embed");
    let shape = g.store().tensor(&name).shape().to_vec();
    if shape.len() != 3 || shape[1] != grid.hp || shape[2] != grid.wp {
        return Err(Error::Config(format!(
            "positional table {:?} does not match token grid {}x{}",
            shape, grid.hp, grid.wp
        )));
    }
    let pe = g.param(&name);
    let x = g.add_pos_embed(grid.x, pe);
    Ok(TokenGrid { x, ..grid })
}

/// Rotates queries and keys by their depth index.
pub fn apply_rope_depth<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    depth_index: &[usize],
    heads: usize,
    base: f64,
) -> Result<(Var, Var)> {
    let c = g.value(q).cols();
    if heads == 0 || c % heads != 0 || (c / heads) % 2 != 0 {
        return Err(Error::Config(format!(
            "RoPE needs an even head dimension, got width {c} with {heads} heads"
        )));
    }
    let q = g.rope(q, heads, depth_index, base);
    let k = g.rope(k, heads, depth_index, base);
    Ok((q, k))
}

fn attention_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: TokenGrid,
    layer: usize,
    cfg: &EncoderConfig,
    three_d: bool,
) -> Result<TokenGrid> {
    let pre = layer_prefix(layer);
    let c = cfg.embed_dim;
    let h = layer_norm(g, grid.x, &format!("{pre}.ln1"));
    let qkv = linear(g, h, &format!("{pre}.attn.qkv"));
    let q = g.slice_cols(qkv, 0, c);
    let k = g.slice_cols(qkv, c, c);
    let v = g.slice_cols(qkv, 2 * c, c);
    let n = grid.len();
    let (q, k, ranges) = if three_d {
        let (q, k) = apply_rope_depth(g, q, k, &grid.depth_index(), cfg.heads, cfg.rope_base)?;
        (q, k, full_ranges(n))
    } else {
        (q, k, block_ranges(n, grid.plane()))
    };
    let a = g.attention(q, k, v, cfg.heads, ranges);
    let o = linear(g, a, &format!("{pre}.attn.out"));
    let x = g.add(grid.x, o);
    Ok(TokenGrid { x, ..grid })
}

/// Residual self-attention within each slab; no RoPE.
pub fn attention_2d<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: TokenGrid,
    layer: usize,
    cfg: &EncoderConfig,
) -> Result<TokenGrid> {
    attention_block(g, grid, layer, cfg, false)
}

/// Residual self-attention over all `D'·Hp·Wp` tokens with the layer's
/// unmodified weights and depth RoPE on queries and keys.
pub fn attention_3d<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: TokenGrid,
    layer: usize,
    cfg: &EncoderConfig,
) -> Result<TokenGrid> {
    attention_block(g, grid, layer, cfg, true)
}

/// Row indices of the four tokens of each 2×2 block, in the order
/// `(2i, 2j), (2i+1, 2j), (2i, 2j+1), (2i+1, 2j+1)`.
pub fn merge_index(depth: usize, hp: usize, wp: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(depth * hp * wp);
    for d in 0..depth {
        for i in 0..hp / 2 {
            for j in 0..wp / 2 {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push(d * hp * wp + (2 * i + di) * wp + 2 * j + dj);
                }
            }
        }
    }
    idx
}

/// Concatenates each 2×2 block channel-wise and maps it through
/// `encoder.merges.{index}`.
pub fn patch_merge_2d<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: TokenGrid,
    index: usize,
) -> Result<TokenGrid> {
    if grid.hp % 2 != 0 || grid.wp % 2 != 0 {
        return Err(Error::Config(format!(
            "patch merge needs an even grid, got {}x{}",
            grid.hp, grid.wp
        )));
    }
    let idx = merge_index(grid.depth, grid.hp, grid.wp);
    let cat = g.gather_concat(grid.x, idx, 4);
    let x = linear(g, cat, &p(&format!("merges.{index}")));
    Ok(TokenGrid {
        x,
        depth: grid.depth,
        hp: grid.hp / 2,
        wp: grid.wp / 2,
    })
}

/// Mean over non-overlapping groups of `kernel` slabs; a trailing partial
/// group passes through slab by slab. A single slab is returned untouched.
pub fn depth_pool<T: Scalar>(g: &mut Graph<'_, T>, grid: TokenGrid, kernel: usize) -> TokenGrid {
    if grid.depth <= 1 || kernel <= 1 {
        return grid;
    }
    let plane = grid.plane();
    let full = grid.depth / kernel;
    let mut groups = Vec::new();
    for e in 0..full {
        for s in 0..plane {
            groups.push((0..kernel).map(|k| (e * kernel + k) * plane + s).collect());
        }
    }
    for d in full * kernel..grid.depth {
        for s in 0..plane {
            groups.push(vec![d * plane + s]);
        }
    }
    let depth = pooled_depth(grid.depth, kernel);
    let x = g.mean_rows(grid.x, groups);
    TokenGrid { x, depth, ..grid }
}

/// Routing emitted by one mixture-of-experts layer.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub layer: usize,
    pub record: RoutingRecord,
    /// Pre-softmax task-router logits `[1, 2]` for the router loss.
    pub task_logits: Option<Var>,
}

/// Flat image features `[N_img, C]` plus routing of every MoE layer.
#[derive(Clone, Debug)]
pub struct EncodedVolume {
    pub tokens: Var,
    pub n_tokens: usize,
    pub routing: Vec<LayerRouting>,
}

/// Full encoder: slabs → patch embed → positional → 2D layers → 3D layers
/// (trailing ones with MoE feed-forward) with merges and one depth pool.
pub fn encode_volume<T: Scalar>(
    g: &mut Graph<'_, T>,
    volume: &VolumeTensor<T>,
    cfg: &EncoderConfig,
    moe: &MoeConfig,
    text_ctx: Option<&IndicatorVector<T>>,
) -> Result<EncodedVolume> {
    cfg.validate()?;
    if cfg.n_moe > 0 && text_ctx.is_none() {
        return Err(Error::InvalidInput(
            "mixture-of-experts layers need the prompt indicator vector".into(),
        ));
    }
    let (_, h, w) = volume.dims();
    if [h, w] != cfg.image_size {
        return Err(Error::Config(format!(
            "volume slices are {h}x{w}, encoder expects {:?}",
            cfg.image_size
        )));
    }
    let slabs = slice_group(volume)?;
    let grid = embed_patches(g, &slabs, cfg)?;
    let mut grid = add_positional(g, grid)?;
    let last_merge = cfg.merge_schedule.last().copied();
    let mut routing = Vec::new();
    let mut merges = 0;
    for l in 0..cfg.layers_total {
        grid = if cfg.is_3d(l) {
            attention_3d(g, grid, l, cfg)?
        } else {
            attention_2d(g, grid, l, cfg)?
        };
        let pre = layer_prefix(l);
        let hn = layer_norm(g, grid.x, &format!("{pre}.ln2"));
        let f = if cfg.is_moe(l) {
            let mp = format!("{pre}.moe");
            match tgh_moe::moe_kind(g.store(), &mp) {
                Some(MoeKind::Token) => {
                    let (y, rec) = tgh_moe::token_moe_forward(g, hn, &mp, moe.top_k)?;
                    routing.push(LayerRouting {
                        layer: l,
                        record: rec,
                        task_logits: None,
                    });
                    y
                }
                Some(MoeKind::Task) => {
                    let ctx = text_ctx.expect("checked above");
                    let out = tgh_moe::tgh_moe_forward(g, hn, ctx, &mp, moe.top_k)?;
                    routing.push(LayerRouting {
                        layer: l,
                        record: out.record,
                        task_logits: Some(out.task_logits),
                    });
                    out.tokens
                }
                None => {
                    return Err(Error::Config(format!(
                        "layer {l} is configured as MoE but `{mp}` has no expert weights"
                    )))
                }
            }
        } else {
            ffn(g, hn, &format!("{pre}.ffn"))
        };
        grid.x = g.add(grid.x, f);
        if cfg.merge_schedule.contains(&l) {
            grid = patch_merge_2d(g, grid, merges)?;
            merges += 1;
            if Some(l) == last_merge {
                grid = depth_pool(g, grid, cfg.depth_pool_kernel);
            }
        }
    }
    if cfg.merge_schedule.is_empty() {
        grid = depth_pool(g, grid, cfg.depth_pool_kernel);
    }
    Ok(EncodedVolume {
        tokens: grid.x,
        n_tokens: grid.len(),
        routing,
    })
}

/// Name → shape of a plain 2D encoder with a dense FFN in every layer.
pub fn expected_2d_shapes(cfg: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
    let c = cfg.embed_dim;
    let (hp, wp) = cfg.grid();
    let mut m = BTreeMap::new();
    m.insert(p("patch_embed.weight"), vec![c, 3, cfg.patch, cfg.patch]);
    m.insert(p("patch_embed.bias"), vec![c]);
    m.insert(p("pos_embed"), vec![c, hp, wp]);
    for l in 0..cfg.layers_total {
        let pre = layer_prefix(l);
        for ln in ["ln1", "ln2"] {
            m.insert(format!("{pre}.{ln}.weight"), vec![c]);
            m.insert(format!("{pre}.{ln}.bias"), vec![c]);
        }
        m.insert(format!("{pre}.attn.qkv.weight"), vec![3 * c, c]);
        m.insert(format!("{pre}.attn.qkv.bias"), vec![3 * c]);
        m.insert(format!("{pre}.attn.out.weight"), vec![c, c]);
        m.insert(format!("{pre}.attn.out.bias"), vec![c]);
        insert_ffn_shapes(&mut m, &format!("{pre}.ffn"), c, cfg.ffn_dim);
    }
    for j in 0..cfg.merge_schedule.len() {
        m.insert(p(&format!("merges.{j}.weight")), vec![c, 4 * c]);
        m.insert(p(&format!("merges.{j}.bias")), vec![c]);
    }
    m
}

pub(crate) fn insert_ffn_shapes(
    m: &mut BTreeMap<String, Vec<usize>>,
    prefix: &str,
    c: usize,
    f: usize,
) {
    m.insert(format!("{prefix}.fc1.weight"), vec![f, c]);
    m.insert(format!("{prefix}.fc1.bias"), vec![f]);
    m.insert(format!("{prefix}.fc2.weight"), vec![c, f]);
    m.insert(format!("{prefix}.fc2.bias"), vec![c]);
}

/// Name → shape of the adapted encoder with MoE layers of the given kind.
pub fn expected_shapes(
    cfg: &EncoderConfig,
    moe: &MoeConfig,
    kind: MoeKind,
) -> BTreeMap<String, Vec<usize>> {
    let mut m = expected_2d_shapes(cfg);
    for l in (0..cfg.layers_total).filter(|&l| cfg.is_moe(l)) {
        let pre = layer_prefix(l);
        m.retain(|k, _| !k.starts_with(&format!("{pre}.ffn.")));
        m.extend(tgh_moe::moe_shapes(
            &format!("{pre}.moe"),
            cfg.embed_dim,
            cfg.ffn_dim,
            moe,
            kind,
        ));
    }
    m
}

/// Randomly initialized plain 2D encoder, the stand-in for a pretrained one.
pub fn init_2d_encoder<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in expected_2d_shapes(cfg) {
        let t = if name.contains(".ln") && name.ends_with(".weight") {
            Tensor::full(&shape, T::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.ends_with("patch_embed.weight") {
            let fan_in = (3 * cfg.patch * cfg.patch) as f64;
            normal_tensor(&mut rng, &shape, 1.0 / fan_in.sqrt())
        } else {
            normal_tensor(&mut rng, &shape, 0.02)
        };
        store.insert(name, t);
    }
    store
}

/// What checkpoint surgery did to each tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub reused: Vec<String>,
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub reshaped: Vec<String>,
    /// FFN layers replicated into token-level experts (only when `n_moe > 0`).
    pub moe_upcycled: Vec<UpcycleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpcycleEntry {
    pub layer: usize,
    pub source: String,
    pub experts: usize,
    pub router: String,
}

impl fmt::Display for SurgeryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "2D -> 3D checkpoint surgery")?;
        writeln!(
            f,
            "reused={} added={} removed={} reshaped={}",
            self.reused.len(),
            self.added.len(),
            self.removed.len(),
            self.reshaped.len()
        )?;
        for (label, list) in [
            ("added", &self.added),
            ("removed", &self.removed),
            ("reshaped", &self.reshaped),
        ] {
            for name in list {
                writeln!(f, "  {label}: {name}")?;
            }
        }
        for name in &self.reused {
            writeln!(f, "  reused: {name}")?;
        }
        if !self.moe_upcycled.is_empty() {
            writeln!(f, "mixture-of-experts upcycling")?;
            for e in &self.moe_upcycled {
                writeln!(
                    f,
                    "  layer {}: {} replicated into {} experts, new router {}",
                    e.layer, e.source, e.experts, e.router
                )?;
            }
        }
        Ok(())
    }
}

/// Checks `w2d` against the 2D layout implied by `cfg` and returns weights
/// for the adapted encoder. The 3D adaptation reuses every tensor unchanged;
/// when `cfg.n_moe > 0` the trailing FFNs are additionally replicated into
/// `moe.experts` token-level experts with a freshly drawn router.
pub fn adapt_checkpoint<T: Scalar>(
    w2d: &ParamStore<T>,
    cfg: &EncoderConfig,
    moe: &MoeConfig,
    seed: u64,
) -> Result<(ParamStore<T>, SurgeryReport)> {
    cfg.validate()?;
    check_manifest(&w2d.shapes(), &expected_2d_shapes(cfg))?;
    let mut store = w2d.clone();
    let mut report = SurgeryReport {
        reused: w2d.names().map(str::to_string).collect(),
        ..Default::default()
    };
    if cfg.n_moe > 0 {
        moe.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in (0..cfg.layers_total).filter(|&l| cfg.is_moe(l)) {
            let pre = layer_prefix(l);
            let router = tgh_moe::upcycle_ffn(
                &mut store,
                &format!("{pre}.ffn"),
                &format!("{pre}.moe"),
                moe.experts,
                &mut rng,
            );
            report.moe_upcycled.push(UpcycleEntry {
                layer: l,
                source: format!("{pre}.ffn"),
                experts: moe.experts,
                router,
            });
        }
    }
    Ok((store, report))
}

/// Compares a name → shape listing with the expected one.
pub fn check_manifest(
    found: &BTreeMap<String, Vec<usize>>,
    expected: &BTreeMap<String, Vec<usize>>,
) -> Result<()> {
    let missing: Vec<String> = expected
        .keys()
        .filter(|k| !found.contains_key(*k))
        .cloned()
        .collect();
    let extra: Vec<String> = found
        .keys()
        .filter(|k| !expected.contains_key(*k))
        .cloned()
        .collect();
    let mismatched: Vec<String> = expected
        .iter()
        .filter_map(|(k, s)| match found.get(k) {
            Some(f) if f != s => Some(format!("{k}: expected {s:?}, found {f:?}")),
            _ => None,
        })
        .collect();
    if missing.is_empty() && extra.is_empty() && mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest {
            missing,
            extra,
            mismatched,
        })
    }
}
