//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records one forward pass. Parameters are pulled in by name from
//! a [`ParamStore`]; a node requires a gradient iff one of its inputs does, so
//! frozen parameters and gradient-blocked values never accumulate anything and
//! come back from [`Graph::backward`] as absent (i.e. exactly zero).
//!
//! Ops are coarse (fused attention, fused softmax cross-entropy, top-k
//! softmax); each has a hand-written backward that the crate's
//! finite-difference tests check in `f64`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(String),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        ranges: Arc<Vec<(usize, usize)>>,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GatherConcat {
        x: Var,
        index: Vec<usize>,
    },
    IndexAddRows {
        base: Var,
        x: Var,
        index: Vec<usize>,
    },
    MeanRows {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    AddPosEmbed {
        x: Var,
        pe: Var,
        plane: usize,
    },
    TopKSoftmax {
        logits: Var,
        mask: Vec<bool>,
    },
    MulRowsByCol {
        x: Var,
        w: Var,
        col: usize,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        clamp: Option<T>,
        count: usize,
    },
    MeanSquaredError {
        x: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: Box<dyn Fn(&str) -> bool + Send + Sync + 'a>,
    nodes: Vec<Node<T>>,
    param_ids: HashMap<String, Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph where every parameter selected by `trainable` receives gradients.
    pub fn new(
        store: &'a ParamStore<T>,
        trainable: impl Fn(&str) -> bool + Send + Sync + 'a,
    ) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            nodes: Vec::with_capacity(512),
            param_ids: HashMap::new(),
        }
    }

    /// A graph with no trainable parameters (forward-only evaluation).
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, false)
    }

    /// Named parameter from the store. Repeated lookups share one node, so
    /// tied weights accumulate into a single gradient.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.param_ids.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"))
            .clone();
        let rg = (self.trainable)(name);
        let v = self.push_arc(value, Op::Param(name.to_string()), rg);
        self.param_ids.insert(name.to_string(), v);
        v
    }

    /// Stop-gradient: same value, no path back to the producer.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push_arc(value, Op::Leaf, false)
    }

    /// `x · wᵀ + b` with `w: [out, in...]` flattened to `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d_in) = (xv.rows(), xv.cols());
        let d_out = wv.rows();
        assert_eq!(
            wv.cols(),
            d_in,
            "linear: input width {} vs weight {:?}",
            d_in,
            wv.shape()
        );
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                assert_eq!(bv.numel(), d_out);
                let mut o = Vec::with_capacity(n * d_out);
                for _ in 0..n {
                    o.extend_from_slice(bv.data());
                }
                o
            }
            None => vec![T::zero(); n * d_out],
        };
        matmul_nt(xv.data(), wv.data(), n, d_in, d_out, &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::from_vec(&[n, d_out], out),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| *x * s).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(a, s), &[a])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| gelu(*x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Gelu(a), &[a])
    }

    /// Row-wise layer norm with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), c);
        let cn = T::of(c as f64);
        let eps = T::of(LN_EPS);
        let mut out = vec![T::zero(); n * c];
        let mut means = Vec::with_capacity(n);
        let mut rstds = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// Columns `[start, start + len)` of a 2D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(
            Tensor::from_vec(&[n, len], out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention. Token `i` attends to keys in
    /// `ranges[i] = [lo, hi)`, which expresses per-slab (block-diagonal),
    /// full, and causal masks alike.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        ranges: Arc<Vec<(usize, usize)>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = (qv.rows(), qv.cols());
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert_eq!(ranges.len(), n);
        assert_eq!(c % heads, 0);
        let hd = c / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * c];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let (lo, hi) = ranges[i];
                debug_assert!(lo < hi && hi <= n);
                let qi = &qd[i * c + off..i * c + off + hd];
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut mx = T::neg_infinity();
                for j in lo..hi {
                    let s = dot(qi, &kd[j * c + off..j * c + off + hd]) * scale;
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = T::zero();
                for pj in &mut p[lo..hi] {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                let oi = &mut out[i * c + off..i * c + off + hd];
                for j in lo..hi {
                    p[j] /= z;
                    axpy(p[j], &vd[j * c + off..j * c + off + hd], oi);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                ranges,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Post-softmax attention probabilities of the most recent attention
    /// node `att`, laid out `[heads, n, n]`.
    pub fn attention_probs(&self, att: Var) -> Option<&[T]> {
        match &self.nodes[att.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Rotary embedding: within each head, channel pair `(2j, 2j+1)` of row
    /// `i` is rotated by `positions[i] · base^(-2j/head_dim)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        assert_eq!(positions.len(), n);
        let hd = c / heads;
        assert!(hd % 2 == 0, "rope needs an even head dimension");
        let half = hd / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for j in 0..half {
                let theta = base.powf(-2.0 * j as f64 / hd as f64);
                let a = p as f64 * theta;
                cos.push(T::of(a.cos()));
                sin.push(T::of(a.sin()));
            }
        }
        let mut out = xv.data().to_vec();
        rotate_pairs(&mut out, n, heads, hd, &cos, &sin, false);
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::Rope { x, heads, cos, sin },
            &[x],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < tv.rows(), "embedding id {} out of range", id);
            out.extend_from_slice(tv.row(id));
        }
        self.push(
            Tensor::from_vec(&[ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut n = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), c, "concat_rows: width mismatch");
            out.extend_from_slice(pv.data());
            n += pv.rows();
        }
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// `out[r] = concat_g x[index[r*groups + g]]`; with `groups = 1` this is
    /// a plain row gather.
    pub fn gather_concat(&mut self, x: Var, index: Vec<usize>, groups: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(index.len() % groups, 0);
        let rows = index.len() / groups;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(xv.row(i));
        }
        self.push(
            Tensor::from_vec(&[rows, groups * c], out),
            Op::GatherConcat { x, index },
            &[x],
        )
    }

    /// `out = base; out[index[r]] += x[r]`
    pub fn index_add_rows(&mut self, base: Var, x: Var, index: Vec<usize>) -> Var {
        let bv = self.value(base);
        let xv = self.value(x);
        let c = bv.cols();
        assert_eq!(xv.cols(), c);
        assert_eq!(xv.rows(), index.len());
        let mut out = bv.data().to_vec();
        for (r, &i) in index.iter().enumerate() {
            axpy(T::one(), xv.row(r), &mut out[i * c..(i + 1) * c]);
        }
        let shape = bv.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::IndexAddRows { base, x, index },
            &[base, x],
        )
    }

    /// Output row `g` is the mean of input rows `groups[g]`.
    pub fn mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty());
            let inv = T::one() / T::of(members.len() as f64);
            let o = &mut out[g * c..(g + 1) * c];
            for &i in members {
                axpy(T::one(), xv.row(i), o);
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(
            Tensor::from_vec(&[groups.len(), c], out),
            Op::MeanRows { x, groups },
            &[x],
        )
    }

    /// Adds a channel-major positional table `pe: [C, plane...]` to token
    /// rows, repeating it every `plane` rows.
    pub fn add_pos_embed(&mut self, x: Var, pe: Var) -> Var {
        let xv = self.value(x);
        let pv = self.value(pe);
        let (n, c) = (xv.rows(), xv.cols());
        assert_eq!(pv.rows(), c);
        let plane = pv.cols();
        assert_eq!(n % plane, 0);
        let mut out = xv.data().to_vec();
        let pd = pv.data();
        for r in 0..n {
            let s = r % plane;
            for j in 0..c {
                out[r * c + j] += pd[j * plane + s];
            }
        }
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::AddPosEmbed { x, pe, plane },
            &[x, pe],
        )
    }

    /// Row-wise softmax restricted to the `k` largest logits; the rest get
    /// exactly zero. Ties at the cut go to the lower index.
    pub fn topk_softmax(&mut self, logits: Var, k: usize) -> Var {
        let lv = self.value(logits);
        let (n, m) = (lv.rows(), lv.cols());
        assert!(k >= 1 && k <= m);
        let mut out = vec![T::zero(); n * m];
        let mut mask = vec![false; n * m];
        for r in 0..n {
            let row = lv.row(r);
            let sel = top_k_indices(row, k);
            let mx = sel.iter().map(|&i| row[i]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &i in &sel {
                let e = (row[i] - mx).exp();
                out[r * m + i] = e;
                z += e;
                mask[r * m + i] = true;
            }
            for &i in &sel {
                out[r * m + i] /= z;
            }
        }
        self.push(
            Tensor::from_vec(&[n, m], out),
            Op::TopKSoftmax { logits, mask },
            &[logits],
        )
    }

    /// `out[r] = x[r] * w[rows[r], col]`
    pub fn mul_rows_by_col(&mut self, x: Var, w: Var, col: usize, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c) = (xv.rows(), xv.cols());
        assert_eq!(rows.len(), n);
        let wc = wv.cols();
        let mut out = xv.data().to_vec();
        for (r, &wr) in rows.iter().enumerate() {
            let s = wv.data()[wr * wc + col];
            out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::MulRowsByCol { x, w, col, rows },
            &[x, w],
        )
    }

    /// Mean negative log-likelihood over rows with a target. With `clamp`,
    /// probabilities below it are raised to it (the row then has zero
    /// gradient, matching the clamped function).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        clamp: Option<T>,
    ) -> Var {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n);
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy needs at least one target");
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let p = &mut probs[r * v..(r + 1) * v];
            for j in 0..v {
                p[j] = (row[j] - mx).exp();
                z += p[j];
            }
            p.iter_mut().for_each(|x| *x /= z);
            let nll = match clamp {
                Some(eps) if p[t] < eps => -eps.ln(),
                _ => -(row[t] - mx - z.ln()),
            };
            total += nll;
        }
        let loss = total / T::of(count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                clamp,
                count,
            },
            &[logits],
        )
    }

    /// `mean((x − target)²)` over all entries; `target` is a constant.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = T::of(xv.numel() as f64);
        let sum = xv
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
        self.push(Tensor::scalar(sum / n), Op::MeanSquaredError { x, target }, &[x])
    }

    /// Reverse sweep from the scalar `loss`; returns gradients of every
    /// trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut out = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return out;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => axpy(T::one(), g.data(), acc.data_mut()),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.value(v).shape())
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => {
                out.insert(name.clone(), g);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.rows());
                if rg(x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    matmul_nn(g.data(), wv.data(), n, d_out, d_in, &mut dx);
                    self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if rg(w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    matmul_tn(g.data(), xv.data(), n, d_out, d_in, &mut dw);
                    self.accum(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if rg(b) {
                        let mut db = vec![T::zero(); d_out];
                        for r in 0..n {
                            axpy(T::one(), g.row(r), &mut db);
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.accum(grads, *b, Tensor::from_vec(&shape, db));
                    }
                }
            }
            Op::Add(a, b) => {
                if rg(a) && rg(b) {
                    self.accum(grads, *a, g.clone());
                    self.accum(grads, *b, g);
                } else if rg(a) {
                    self.accum(grads, *a, g);
                } else {
                    self.accum(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|v| *v * *s).collect();
                self.accum(grads, *a, Tensor::from_vec(g.shape(), d));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gy)| gelu_grad(*x) * *gy)
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(g.shape(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let (n, c) = (xv.rows(), xv.cols());
                let cn = T::of(c as f64);
                let mut dx = vec![T::zero(); n * c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for r in 0..n {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / cn;
                    let m2 = dot(&dxhat, &xhat) / cn;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if rg(x) {
                    self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if rg(gamma) {
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accum(grads, *gamma, Tensor::from_vec(&shape, dgamma));
                }
                if rg(beta) {
                    let shape = self.value(*beta).shape().to_vec();
                    self.accum(grads, *beta, Tensor::from_vec(&shape, dbeta));
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = self.zeros_like(*x);
                let c = dx.cols();
                let len = g.cols();
                for r in 0..g.rows() {
                    dx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accum(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                ranges,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, c) = (qv.rows(), qv.cols());
                let hd = c / heads;
                let scale = T::one() / T::of(hd as f64).sqrt();
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut dq = vec![T::zero(); n * c];
                let mut dk = vec![T::zero(); n * c];
                let mut dv = vec![T::zero(); n * c];
                let mut ds = vec![T::zero(); n];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..n {
                        let (lo, hi) = ranges[i];
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        let gi = &gd[i * c + off..i * c + off + hd];
                        let mut wsum = T::zero();
                        for j in lo..hi {
                            let dp = dot(gi, &vd[j * c + off..j * c + off + hd]);
                            ds[j] = dp;
                            wsum += p[j] * dp;
                            axpy(p[j], gi, &mut dv[j * c + off..j * c + off + hd]);
                        }
                        let qi = &qd[i * c + off..i * c + off + hd];
                        for j in lo..hi {
                            let s = p[j] * (ds[j] - wsum) * scale;
                            axpy(s, &kd[j * c + off..j * c + off + hd], &mut dq[i * c + off..i * c + off + hd]);
                            axpy(s, qi, &mut dk[j * c + off..j * c + off + hd]);
                        }
                    }
                }
                self.accum(grads, *q, Tensor::from_vec(&[n, c], dq));
                self.accum(grads, *k, Tensor::from_vec(&[n, c], dk));
                self.accum(grads, *v, Tensor::from_vec(&[n, c], dv));
            }
            Op::Rope { x, heads, cos, sin } => {
                let (n, c) = (g.rows(), g.cols());
                let mut dx = g.data().to_vec();
                rotate_pairs(&mut dx, n, *heads, c / heads, cos, sin, true);
                self.accum(grads, *x, Tensor::from_vec(&[n, c], dx));
            }
            Op::Embedding { table, ids } => {
                let mut dt = self.zeros_like(*table);
                let d = dt.cols();
                for (r, &id) in ids.iter().enumerate() {
                    axpy(T::one(), g.row(r), &mut dt.data_mut()[id * d..(id + 1) * d]);
                }
                self.accum(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let rows = pv.rows();
                    if rg(p) {
                        let c = pv.cols();
                        let d = g.data()[r0 * c..(r0 + rows) * c].to_vec();
                        self.accum(grads, *p, Tensor::from_vec(pv.shape(), d));
                    }
                    r0 += rows;
                }
            }
            Op::GatherConcat { x, index, .. } => {
                let mut dx = self.zeros_like(*x);
                let c = dx.cols();
                let gd = g.data();
                for (slot, &i) in index.iter().enumerate() {
                    axpy(
                        T::one(),
                        &gd[slot * c..(slot + 1) * c],
                        &mut dx.data_mut()[i * c..(i + 1) * c],
                    );
                }
                self.accum(grads, *x, dx);
            }
            Op::IndexAddRows { base, x, index } => {
                if rg(x) {
                    let c = g.cols();
                    let mut dx = Vec::with_capacity(index.len() * c);
                    for &i in index {
                        dx.extend_from_slice(g.row(i));
                    }
                    self.accum(grads, *x, Tensor::from_vec(&[index.len(), c], dx));
                }
                self.accum(grads, *base, g);
            }
            Op::MeanRows { x, groups } => {
                let mut dx = self.zeros_like(*x);
                let c = dx.cols();
                for (gi, members) in groups.iter().enumerate() {
                    let inv = T::one() / T::of(members.len() as f64);
                    for &i in members {
                        axpy(inv, g.row(gi), &mut dx.data_mut()[i * c..(i + 1) * c]);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::AddPosEmbed { x, pe, plane } => {
                if rg(pe) {
                    let mut dpe = self.zeros_like(*pe);
                    let (n, c) = (g.rows(), g.cols());
                    for r in 0..n {
                        let s = r % plane;
                        for j in 0..c {
                            dpe.data_mut()[j * plane + s] += g.data()[r * c + j];
                        }
                    }
                    self.accum(grads, *pe, dpe);
                }
                self.accum(grads, *x, g);
            }
            Op::TopKSoftmax { logits, mask } => {
                let p = &node.value;
                let (n, m) = (p.rows(), p.cols());
                let mut dl = vec![T::zero(); n * m];
                for r in 0..n {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let mut s = T::zero();
                    for j in 0..m {
                        if mask[r * m + j] {
                            s += pr[j] * gr[j];
                        }
                    }
                    for j in 0..m {
                        if mask[r * m + j] {
                            dl[r * m + j] = pr[j] * (gr[j] - s);
                        }
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(&[n, m], dl));
            }
            Op::MulRowsByCol { x, w, col, rows } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let wc = wv.cols();
                if rg(x) {
                    let mut dx = g.data().to_vec();
                    let c = g.cols();
                    for (r, &wr) in rows.iter().enumerate() {
                        let s = wv.data()[wr * wc + col];
                        dx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= s);
                    }
                    self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if rg(w) {
                    let mut dw = self.zeros_like(*w);
                    for (r, &wr) in rows.iter().enumerate() {
                        dw.data_mut()[wr * wc + col] += dot(g.row(r), xv.row(r));
                    }
                    self.accum(grads, *w, dw);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                clamp,
                count,
            } => {
                let lv = self.value(*logits);
                let (n, v) = (lv.rows(), lv.cols());
                let s = g.item() / T::of(*count as f64);
                let mut dl = vec![T::zero(); n * v];
                for r in 0..n {
                    let Some(t) = targets[r] else { continue };
                    let p = &probs[r * v..(r + 1) * v];
                    if let Some(eps) = clamp {
                        if p[t] < *eps {
                            continue;
                        }
                    }
                    for j in 0..v {
                        dl[r * v + j] = p[j] * s;
                    }
                    dl[r * v + t] -= s;
                }
                self.accum(grads, *logits, Tensor::from_vec(&[n, v], dl));
            }
            Op::MeanSquaredError { x, target } => {
                let xv = self.value(*x);
                let s = g.item() * T::of(2.0 / xv.numel() as f64);
                let d = xv.data().iter().zip(target.data()).map(|(a, b)| (*a - *b) * s).collect();
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
        }
    }
}

fn rotate_pairs<T: Scalar>(
    x: &mut [T],
    n: usize,
    heads: usize,
    hd: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = hd / 2;
    let c = heads * hd;
    for i in 0..n {
        for h in 0..heads {
            for j in 0..half {
                let (co, mut si) = (cos[i * half + j], sin[i * half + j]);
                if inverse {
                    si = -si;
                }
                let a = i * c + h * hd + 2 * j;
                let (x0, x1) = (x[a], x[a + 1]);
                x[a] = x0 * co - x1 * si;
                x[a + 1] = x0 * si + x1 * co;
            }
        }
    }
}

/// Indices of the `k` largest entries, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut sel = idx[..k].to_vec();
    sel.sort_unstable();
    sel
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
