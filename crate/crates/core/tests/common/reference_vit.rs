//! Plain-loop 2D ViT used as the oracle for single-slab volumes.

use rand::Rng;
use volmoe::graph::{gelu, Graph};
use volmoe::tensor::Tensor;
use volmoe::tgh_moe::{IndicatorVector, MoeConfig};
use volmoe::vit_adapt::*;
use volmoe::{ParamStore32, ParamStore64, Volume32, Volume64};

use super::{rng, uniform};

/// Random 2D weights with enough spread that attention is far from uniform.
pub fn weights(cfg: &EncoderConfig, seed: u64) -> ParamStore64 {
    let mut w = init_2d_encoder::<f64>(cfg, seed);
    let mut r = rng(seed ^ 0xabc);
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for n in names {
        let spread = if n.contains("attn.qkv") { 0.15 } else { 0.05 };
        for v in w.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-spread..spread);
        }
    }
    w
}

pub fn random_volume(d: usize, h: usize, w: usize, seed: u64) -> Volume64 {
    let mut r = rng(seed);
    VolumeTensor::new(uniform(&mut r, &[d, h, w], 0.0, 1.0)).unwrap()
}

pub struct Ref<'a> {
    pub w: &'a ParamStore64,
    pub cfg: &'a EncoderConfig,
}

impl Ref<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.w.tensor(&format!("encoder.{name}")).data()
    }

    fn lin(&self, x: &[f64], name: &str, d_out: usize) -> Vec<f64> {
        let w = self.t(&format!("{name}.weight"));
        let b = self.t(&format!("{name}.bias"));
        let d_in = x.len();
        (0..d_out)
            .map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
            .collect()
    }

    fn ln(&self, x: &[f64], name: &str) -> Vec<f64> {
        let g = self.t(&format!("{name}.weight"));
        let b = self.t(&format!("{name}.bias"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        x.iter().enumerate().map(|(j, v)| (v - mean) * r * g[j] + b[j]).collect()
    }

    /// Strided-window convolution of a `[3, H, W]` image.
    pub fn conv(&self, img: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
        let (p, c) = (self.cfg.patch, self.cfg.embed_dim);
        let k = self.t("patch_embed.weight");
        let b = self.t("patch_embed.bias");
        let mut out = Vec::new();
        for ph in 0..h / p {
            for pw in 0..w / p {
                let tok = (0..c)
                    .map(|o| {
                        let mut s = b[o];
                        for ch in 0..3 {
                            for dy in 0..p {
                                for dx in 0..p {
                                    s += k[((o * 3 + ch) * p + dy) * p + dx]
                                        * img[(ch * h + ph * p + dy) * w + pw * p + dx];
                                }
                            }
                        }
                        s
                    })
                    .collect();
                out.push(tok);
            }
        }
        out
    }

    fn attn(&self, x: &[Vec<f64>], pre: &str) -> Vec<Vec<f64>> {
        let c = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let hd = c / heads;
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|t| self.lin(&self.ln(t, &format!("{pre}.ln1")), &format!("{pre}.attn.qkv"), 3 * c))
            .collect();
        let n = x.len();
        let mut mixed = vec![vec![0.0; c]; n];
        for h in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..hd).map(|e| qkv[i][h * hd + e] * qkv[j][c + h * hd + e]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for j in 0..n {
                    let p = (s[j] - m).exp() / z;
                    for e in 0..hd {
                        mixed[i][h * hd + e] += p * qkv[j][2 * c + h * hd + e];
                    }
                }
            }
        }
        mixed.iter().map(|m| self.lin(m, &format!("{pre}.attn.out"), c)).collect()
    }

    fn mlp(&self, x: &[f64], pre: &str) -> Vec<f64> {
        let h = self.lin(x, &format!("{pre}.fc1"), self.cfg.ffn_dim);
        let h: Vec<f64> = h.into_iter().map(gelu).collect();
        self.lin(&h, &format!("{pre}.fc2"), self.cfg.embed_dim)
    }

    pub fn forward(&self, img: &[f64]) -> Vec<Vec<f64>> {
        let [h, w] = self.cfg.image_size;
        let (mut hp, mut wp) = self.cfg.grid();
        let c = self.cfg.embed_dim;
        let pe = self.t("pos_embed");
        let mut x = self.conv(img, h, w);
        for (s, tok) in x.iter_mut().enumerate() {
            for (j, v) in tok.iter_mut().enumerate() {
                *v += pe[j * hp * wp + s];
            }
        }
        let mut merges = 0;
        for l in 0..self.cfg.layers_total {
            let pre = format!("layers.{l}");
            let a = self.attn(&x, &pre);
            for (t, d) in x.iter_mut().zip(a) {
                t.iter_mut().zip(d).for_each(|(v, e)| *v += e);
            }
            for t in &mut x {
                let f = self.mlp(&self.ln(t, &format!("{pre}.ln2")), &format!("{pre}.ffn"));
                t.iter_mut().zip(f).for_each(|(v, e)| *v += e);
            }
            if self.cfg.merge_schedule.contains(&l) {
                let mut next = Vec::new();
                for i in 0..hp / 2 {
                    for j in 0..wp / 2 {
                        let mut cat = Vec::with_capacity(4 * c);
                        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            cat.extend_from_slice(&x[(2 * i + di) * wp + 2 * j + dj]);
                        }
                        next.push(self.lin(&cat, &format!("merges.{merges}"), c));
                    }
                }
                x = next;
                hp /= 2;
                wp /= 2;
                merges += 1;
            }
        }
        x
    }
}

pub fn encode32(w: &ParamStore32, cfg: &EncoderConfig, vol: &Volume32, ctx_dim: usize) -> Tensor<f32> {
    let mut g = Graph::inference(w);
    let ctx = (cfg.n_moe > 0).then(|| {
        let values = Tensor::full(&[1, ctx_dim], 0.1f32);
        IndicatorVector {
            var: g.constant(values.clone()),
            values,
            grad_blocked: true,
        }
    });
    let out = encode_volume(&mut g, vol, cfg, &MoeConfig::default(), ctx.as_ref()).unwrap();
    g.value(out.tokens).clone()
}

/// Max abs difference between the adapted f32 encoder and the f64
/// reference on a single-slab volume.
pub fn degeneracy_diff(cfg: &EncoderConfig, w2d: &ParamStore64, vol: &Volume64) -> f64 {
    let (adapted, _) = adapt_checkpoint(w2d, cfg, &MoeConfig::default(), 5).unwrap();
    let got = encode32(&adapted.cast(), cfg, &vol.cast(), 8);
    let want = Ref { w: w2d, cfg }.forward(vol.data().data());
    assert_eq!(got.rows(), want.len());
    let mut worst = 0.0f64;
    for (r, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((got.row(r)[j] as f64 - v).abs());
        }
    }
    worst
}
