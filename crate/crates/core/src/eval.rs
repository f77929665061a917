//! Text metrics, closed-choice accuracy, attention-cost accounting and
//! routing diagnostics.
//!
//! Texts are lowercased and split on whitespace before scoring.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mllm::Mllm;
use crate::scalar::Scalar;
use crate::synth_data::{oracle_answer, Dataset, Topic};
use crate::tgh_moe::{RoutingExport, Task};
use crate::training::EvalConfig;
use crate::vit_adapt::EncoderConfig;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(pred: &[String], reference: &[String]) -> usize {
    let r = counts(reference);
    counts(pred)
        .iter()
        .map(|(w, c)| (*c).min(r.get(w).copied().unwrap_or(0)))
        .sum()
}

/// Clipped unigram precision times `exp(min(0, 1 − |ref|/|pred|))`.
pub fn bleu1(pred: &str, reference: &str) -> f64 {
    let p = tokenize(pred);
    let r = tokenize(reference);
    if p.is_empty() {
        return 0.0;
    }
    let precision = overlap(&p, &r) as f64 / p.len() as f64;
    let bp = (1.0 - r.len() as f64 / p.len() as f64).min(0.0).exp();
    precision * bp
}

/// Unigram F1 over multiset overlap.
pub fn rouge1(pred: &str, reference: &str) -> f64 {
    let p = tokenize(pred);
    let r = tokenize(reference);
    let ov = overlap(&p, &r);
    if ov == 0 {
        return 0.0;
    }
    let prec = ov as f64 / p.len() as f64;
    let rec = ov as f64 / r.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

/// Index of the chosen option: exact choice text, else a leading letter
/// written `(b)`, `b.`, `b)` or `b:`, or a bare letter as the whole output.
/// `None` scores as wrong.
pub fn choice_extract(generated: &str, choices: &[String]) -> Option<usize> {
    let words = tokenize(generated);
    let text = words.join(" ");
    if let Some(i) = choices.iter().position(|c| tokenize(c).join(" ") == text) {
        return Some(i);
    }
    let first = words.first()?;
    let marked = first.starts_with('(') || first.ends_with(['.', ')', ':']);
    if !marked && words.len() > 1 {
        return None;
    }
    let core = first
        .trim_start_matches('(')
        .trim_end_matches(['.', ')', ':']);
    let mut chars = core.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return None;
    };
    let idx = (c as usize).checked_sub('a' as usize)?;
    (idx < choices.len()).then_some(idx)
}

/// Mean correctness; unparseable predictions (`None`) count as wrong.
pub fn closed_accuracy(preds: &[Option<usize>], golds: &[usize]) -> f64 {
    assert_eq!(preds.len(), golds.len());
    if golds.is_empty() {
        return 0.0;
    }
    let ok = preds.iter().zip(golds).filter(|(p, g)| **p == Some(**g)).count();
    ok as f64 / golds.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub layer: usize,
    pub kind: String,
    pub depth: usize,
    pub plane_tokens: usize,
    /// Pairwise attention scores of the configured layer.
    pub mixed: u128,
    /// Same layer with full 3D attention.
    pub full3d: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub volume_shape: [usize; 3],
    pub rows: Vec<FlopsRow>,
    pub mixed_total: u128,
    pub full3d_total: u128,
    pub ratio: f64,
}

/// Per-layer pairwise-score counts: `D'·P²` for a 2D layer and `(D'·P)²` for
/// a 3D one, where `P` is the per-slab token count entering that layer.
pub fn flops_report(cfg: &EncoderConfig, shape: [usize; 3]) -> Result<FlopsReport> {
    cfg.validate()?;
    let [d, h, w] = shape;
    if d == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Config(format!(
            "volume {d}x{h}x{w} does not tile into {}-pixel patches",
            cfg.patch
        )));
    }
    let scaled = EncoderConfig {
        image_size: [h, w],
        ..cfg.clone()
    };
    scaled.validate()?;
    let slabs = d.div_ceil(3);
    let mut rows = Vec::new();
    for (l, (depth, p)) in scaled.layer_token_schedule(slabs).into_iter().enumerate() {
        let (dd, pp) = (depth as u128, p as u128);
        let full = (dd * pp) * (dd * pp);
        let is3d = scaled.is_3d(l);
        rows.push(FlopsRow {
            layer: l,
            kind: if is3d { "3d" } else { "2d" }.into(),
            depth,
            plane_tokens: p,
            mixed: if is3d { full } else { dd * pp * pp },
            full3d: full,
        });
    }
    let mixed_total = rows.iter().map(|r| r.mixed).sum();
    let full3d_total = rows.iter().map(|r| r.full3d).sum();
    Ok(FlopsReport {
        volume_shape: shape,
        ratio: full3d_total as f64 / mixed_total as f64,
        rows,
        mixed_total,
        full3d_total,
    })
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [d, h, w] = self.volume_shape;
        writeln!(f, "attention scores per layer, volume {d}x{h}x{w}")?;
        writeln!(f, "{:>5}  {:>4}  {:>5}  {:>6}  {:>16}  {:>16}", "layer", "kind", "D'", "HpWp", "mixed", "full-3d")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>5}  {:>4}  {:>5}  {:>6}  {:>16}  {:>16}",
                r.layer,
                r.kind,
                r.depth,
                r.plane_tokens,
                group(r.mixed),
                group(r.full3d)
            )?;
        }
        writeln!(
            f,
            "{:>5}  {:>4}  {:>5}  {:>6}  {:>16}  {:>16}",
            "total",
            "",
            "",
            "",
            group(self.mixed_total),
            group(self.full3d_total)
        )?;
        writeln!(f, "full-3d / mixed = {:.4}", self.ratio)
    }
}

/// `2654208` → `2,654,208`
pub fn group(n: u128) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    /// `layer L` or `layer L task T`.
    pub group: String,
    pub tokens: usize,
    pub histogram: Vec<usize>,
    /// Fraction of tokens routed to each expert (sums to `k`).
    pub shares: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub records: usize,
    /// `confusion[yt][chosen]`, counted over (sample, layer) decisions.
    pub confusion: Option<[[usize; 2]; 2]>,
    pub router_accuracy: Option<f64>,
    pub usage: Vec<ExpertUsage>,
    /// Experts whose share is below 5 %.
    pub collapse: Vec<String>,
}

pub const COLLAPSE_SHARE: f64 = 0.05;

pub fn inspect_routing(records: &[RoutingExport]) -> RoutingReport {
    let mut confusion = [[0usize; 2]; 2];
    let mut any_task = false;
    let mut groups: BTreeMap<(usize, Option<usize>), (usize, Vec<usize>)> = BTreeMap::new();
    for r in records {
        let chosen = r.wt_prime.map(|o| if o[0] == 1 { 0 } else { 1 });
        if let (Some(c), Some(y)) = (chosen, r.yt) {
            confusion[y.index()][c] += 1;
            any_task = true;
        }
        let k = r.top_k.max(1);
        let entry = groups
            .entry((r.layer, chosen))
            .or_insert_with(|| (0, vec![0; r.expert_histogram.len()]));
        entry.0 += r.expert_histogram.iter().sum::<usize>() / k;
        if entry.1.len() < r.expert_histogram.len() {
            entry.1.resize(r.expert_histogram.len(), 0);
        }
        for (e, c) in r.expert_histogram.iter().enumerate() {
            entry.1[e] += c;
        }
    }
    let mut usage = Vec::new();
    let mut collapse = Vec::new();
    for ((layer, task), (tokens, hist)) in groups {
        let group = match task {
            Some(t) => format!("layer {layer} task {}", Task::from_index(t)),
            None => format!("layer {layer}"),
        };
        let shares: Vec<f64> = hist
            .iter()
            .map(|&c| if tokens == 0 { 0.0 } else { c as f64 / tokens as f64 })
            .collect();
        for (e, s) in shares.iter().enumerate() {
            if *s < COLLAPSE_SHARE {
                collapse.push(format!("{group} expert {e}: share {s:.4}"));
            }
        }
        usage.push(ExpertUsage {
            group,
            tokens,
            histogram: hist,
            shares,
        });
    }
    let total: usize = confusion.iter().flatten().sum();
    RoutingReport {
        records: records.len(),
        confusion: any_task.then_some(confusion),
        router_accuracy: any_task.then(|| (confusion[0][0] + confusion[1][1]) as f64 / total as f64),
        usage,
        collapse,
    }
}

impl fmt::Display for RoutingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "routing records: {}", self.records)?;
        match &self.confusion {
            Some(c) => {
                writeln!(f, "task router confusion (rows: label, cols: chosen)")?;
                writeln!(f, "{:>6}  {:>6}  {:>6}", "", "MRG", "MVQA")?;
                writeln!(f, "{:>6}  {:>6}  {:>6}", "MRG", c[0][0], c[0][1])?;
                writeln!(f, "{:>6}  {:>6}  {:>6}", "MVQA", c[1][0], c[1][1])?;
                writeln!(f, "router accuracy: {:.4}", self.router_accuracy.unwrap_or(0.0))?;
            }
            None => writeln!(f, "no task router in these records")?,
        }
        for u in &self.usage {
            let shares: Vec<String> = u.shares.iter().map(|s| format!("{s:.3}")).collect();
            writeln!(f, "{}: tokens {} shares [{}]", u.group, u.tokens, shares.join(", "))?;
        }
        if self.collapse.is_empty() {
            writeln!(f, "no collapsed experts")
        } else {
            for c in &self.collapse {
                writeln!(f, "collapse warning: {c}")?;
            }
            Ok(())
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub n: usize,
    pub bleu1: f64,
    pub rouge1: f64,
    /// Share of outputs equal to the reference after whitespace
    /// normalization.
    pub exact: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedScores {
    pub n: usize,
    pub accuracy: f64,
    pub per_topic: BTreeMap<String, f64>,
    pub per_topic_n: BTreeMap<String, usize>,
    /// Accuracy of the rule-based answer oracle on the same items.
    pub oracle_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: Task,
    pub topic: Option<Topic>,
    pub prompt: String,
    pub output: String,
    pub reference: String,
    pub choice: Option<usize>,
    pub gold_choice: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub mrg: TextScores,
    pub open_vqa: TextScores,
    pub open_vqa_per_topic: BTreeMap<String, TextScores>,
    pub closed_vqa: ClosedScores,
    pub routing: RoutingReport,
    pub flops: FlopsReport,
}

impl EvalReport {
    /// Plain-text table with B-1, R-1, exact-match and accuracy columns.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        let mut line = |name: &str, t: Option<&TextScores>, a: Option<f64>, n: usize| {
            s.push_str(&format!(
                "{:<24} {:>8} {:>8} {:>8} {:>9} {:>6}\n",
                name,
                cell(t.map(|t| t.bleu1)),
                cell(t.map(|t| t.rouge1)),
                cell(t.map(|t| t.exact)),
                cell(a),
                n
            ));
        };
        line("report generation", Some(&self.mrg), None, self.mrg.n);
        line("vqa open", Some(&self.open_vqa), None, self.open_vqa.n);
        for (t, sc) in &self.open_vqa_per_topic {
            line(&format!("  open {t}"), Some(sc), None, sc.n);
        }
        let c = &self.closed_vqa;
        line("vqa closed", None, Some(c.accuracy), c.n);
        for (t, a) in &c.per_topic {
            let n = c.per_topic_n.get(t).copied().unwrap_or(0);
            line(&format!("  closed {t}"), None, Some(*a), n);
        }
        line("vqa closed (oracle)", None, Some(c.oracle_accuracy), c.n);
        if let Some(a) = self.routing.router_accuracy {
            line("task router", None, Some(a), self.routing.records);
        }
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>9} {:>6}\n{s}",
            format!("split: {}", self.split),
            "B-1",
            "R-1",
            "Exact",
            "Accuracy",
            "n"
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn text_scores(pairs: &[(&str, &str)]) -> TextScores {
    TextScores {
        n: pairs.len(),
        bleu1: mean(&pairs.iter().map(|(p, r)| bleu1(p, r)).collect::<Vec<_>>()),
        rouge1: mean(&pairs.iter().map(|(p, r)| rouge1(p, r)).collect::<Vec<_>>()),
        exact: mean(
            &pairs
                .iter()
                .map(|(p, r)| (tokenize(p) == tokenize(r)) as u8 as f64)
                .collect::<Vec<_>>(),
        ),
    }
}

/// Greedy generation over a split, scored per task and topic.
pub fn evaluate<T: Scalar>(
    model: &Mllm<T>,
    data: &Dataset<T>,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Prediction>, Vec<RoutingExport>)> {
    let k = model.spec.moe.top_k;
    let outs: Vec<(Prediction, Vec<RoutingExport>)> = data
        .samples
        .par_iter()
        .map(|s| {
            let r = &s.record;
            let prompt = model.tokenizer.encode(&r.prompt)?;
            let (output, routing, _) = model.generate_ids(&prompt, &s.volume, cfg.max_new_tokens)?;
            let exports = routing
                .iter()
                .map(|lr| {
                    let mut rec = lr.record.clone();
                    rec.task_label = Some(r.task);
                    RoutingExport::new(&r.id, lr.layer, &rec, k)
                })
                .collect();
            let choice = r.choices.as_ref().and_then(|c| choice_extract(&output, c));
            Ok((
                Prediction {
                    id: r.id.clone(),
                    task: r.task,
                    topic: r.topic,
                    prompt: r.prompt.clone(),
                    output,
                    reference: r.answer.clone(),
                    choice,
                    gold_choice: r.gold_choice(),
                },
                exports,
            ))
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(outs.len());
    let mut exports = Vec::new();
    for (p, e) in outs {
        preds.push(p);
        exports.extend(e);
    }

    let mrg: Vec<(&str, &str)> = preds
        .iter()
        .filter(|p| p.task == Task::Mrg)
        .map(|p| (p.output.as_str(), p.reference.as_str()))
        .collect();
    let open: Vec<&Prediction> = preds
        .iter()
        .filter(|p| p.task == Task::Mvqa && p.gold_choice.is_none())
        .collect();
    let mut open_topics: BTreeMap<String, Vec<(&str, &str)>> = BTreeMap::new();
    for p in &open {
        let t = p.topic.map(|t| t.to_string()).unwrap_or_default();
        open_topics.entry(t).or_default().push((&p.output, &p.reference));
    }
    let closed: Vec<(usize, &Prediction)> = preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.gold_choice.is_some())
        .collect();
    let mut per_topic: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut oracle_ok = 0;
    for (i, p) in &closed {
        let t = p.topic.map(|t| t.to_string()).unwrap_or_default();
        let e = per_topic.entry(t).or_default();
        e.1 += 1;
        e.0 += (p.choice == p.gold_choice) as usize;
        let r = &data.samples[*i].record;
        let oracle = r.topic.and_then(|t| oracle_answer(&r.scene, t, &r.prompt));
        oracle_ok += (oracle.as_deref() == Some(r.answer.as_str())) as usize;
    }
    let closed_preds: Vec<Option<usize>> = closed.iter().map(|(_, p)| p.choice).collect();
    let closed_golds: Vec<usize> = closed.iter().map(|(_, p)| p.gold_choice.unwrap()).collect();
    let depth = data.samples.first().map_or(3, |s| s.volume.dims().0);
    let [h, w] = model.spec.encoder.image_size;
    let report = EvalReport {
        split: cfg.split.clone(),
        samples: preds.len(),
        mrg: text_scores(&mrg),
        open_vqa: text_scores(
            &open
                .iter()
                .map(|p| (p.output.as_str(), p.reference.as_str()))
                .collect::<Vec<_>>(),
        ),
        open_vqa_per_topic: open_topics
            .into_iter()
            .map(|(t, v)| (t, text_scores(&v)))
            .collect(),
        closed_vqa: ClosedScores {
            n: closed.len(),
            accuracy: closed_accuracy(&closed_preds, &closed_golds),
            per_topic: per_topic
                .iter()
                .map(|(t, &(ok, n))| (t.clone(), ok as f64 / n as f64))
                .collect(),
            per_topic_n: per_topic.into_iter().map(|(t, (_, n))| (t, n)).collect(),
            oracle_accuracy: if closed.is_empty() {
                0.0
            } else {
                oracle_ok as f64 / closed.len() as f64
            },
        },
        routing: inspect_routing(&exports),
        flops: flops_report(&model.spec.encoder, [depth, h, w])?,
    };
    Ok((report, preds, exports))
}
