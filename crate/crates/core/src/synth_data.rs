//! Procedural 3D scenes with known object inventories, paired report texts
//! and question/answer items in five topic families.
//!
//! Octant `o` has bit 2 = depth half, bit 1 = row half, bit 0 = column half.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mllm::Tokenizer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tgh_moe::Task;
use crate::vit_adapt::VolumeTensor;

pub const VOLUME_SHAPE: [usize; 3] = [12, 64, 64];
pub const NOISE_STD: f64 = 0.02;
pub const BLUR_SIGMA: f64 = 2.0;
const BLUR_RADIUS: isize = 6;
/// Depth radius as a fraction of the in-plane radius; slices are thick.
pub const DEPTH_SCALE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Low,
    Mid,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topic {
    Plane,
    Phase,
    Organ,
    Abnormality,
    Location,
}

pub const TOPICS: [Topic; 5] = [
    Topic::Plane,
    Topic::Phase,
    Topic::Organ,
    Topic::Abnormality,
    Topic::Location,
];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Box => "box",
        }
    }
}

impl Intensity {
    pub fn value(self) -> f64 {
        match self {
            Intensity::Low => 0.3,
            Intensity::Mid => 0.55,
            Intensity::High => 0.8,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Intensity::Low => "low",
            Intensity::Mid => "medium",
            Intensity::High => "high",
        }
    }
}

impl Size {
    /// In-plane sphere radius / box half-width in voxels.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 5.0,
            Size::Large => 8.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

impl Plane {
    /// Volume axis blurred to encode the plane tag.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Topic::Plane => "plane",
            Topic::Phase => "phase",
            Topic::Organ => "organ",
            Topic::Abnormality => "abnormality",
            Topic::Location => "location",
        };
        f.write_str(s)
    }
}

const NUMBER_WORDS: [&str; 8] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven",
];

pub fn octant_words(o: u8) -> String {
    format!("octant {}", NUMBER_WORDS[o as usize])
}

const HYPER_WORD: &str = "hyperintense";
const PLANE_CHOICES: [&str; 4] = ["axial", "coronal", "sagittal", "oblique"];
const INTENSITY_CHOICES: [&str; 4] = ["low", "medium", "high", HYPER_WORD];
const SHAPE_CHOICES: [&str; 4] = ["sphere", "box", "cylinder", "cone"];
const CHOICE_LABELS: [&str; 4] = ["(a)", "(b)", "(c)", "(d)"];

const REPORT_PROMPTS: [&str; 3] = [
    "describe the findings of this scan .",
    "write a report for this volume .",
    "generate a radiology report for this scan .",
];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub octant: u8,
    pub intensity: Intensity,
    pub size: Size,
}

impl ObjectSpec {
    pub fn center(&self) -> [f64; 3] {
        let d = ((self.octant >> 2) & 1) as f64;
        let h = ((self.octant >> 1) & 1) as f64;
        let w = (self.octant & 1) as f64;
        let [sd, sh, sw] = VOLUME_SHAPE.map(|s| s as f64 / 2.0);
        [sd * d + sd / 2.0, sh * h + sh / 2.0, sw * w + sw / 2.0]
    }

    /// Per-axis semi-axes `[depth, row, column]`.
    pub fn radii(&self) -> [f64; 3] {
        let r = self.size.radius();
        [r * DEPTH_SCALE, r, r]
    }
}

/// One scene. When `abnormal`, `objects[0]` is the hyperintense one.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub plane: Plane,
    pub abnormal: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(Error::InvalidInput(format!(
                "scene has {} objects, expected 1..=3",
                self.objects.len()
            )));
        }
        let octs: BTreeSet<u8> = self.objects.iter().map(|o| o.octant).collect();
        if octs.len() != self.objects.len() || octs.iter().any(|&o| o > 7) {
            return Err(Error::InvalidInput("octants must be unique and < 8".into()));
        }
        Ok(())
    }

    pub fn is_hyper(&self, idx: usize) -> bool {
        self.abnormal && idx == 0
    }

    pub fn object_at(&self, octant: u8) -> Option<(usize, &ObjectSpec)> {
        self.objects.iter().enumerate().find(|(_, o)| o.octant == octant)
    }

    pub fn intensity_word(&self, idx: usize) -> &'static str {
        if self.is_hyper(idx) {
            HYPER_WORD
        } else {
            self.objects[idx].intensity.word()
        }
    }

    /// Objects sorted by octant, with their original index.
    pub fn in_octant_order(&self) -> Vec<(usize, &ObjectSpec)> {
        let mut v: Vec<_> = self.objects.iter().enumerate().collect();
        v.sort_by_key(|(_, o)| o.octant);
        v
    }

    /// Order-free identity used for train/test deduplication.
    pub fn canonical_key(&self) -> String {
        let mut objs: Vec<(ObjectSpec, bool)> = self
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (o.clone(), self.is_hyper(i)))
            .collect();
        objs.sort();
        serde_json::to_string(&(self.plane, objs)).expect("serializable")
    }

    fn unique_by_size_shape(&self, idx: usize) -> bool {
        let o = &self.objects[idx];
        self.objects
            .iter()
            .filter(|p| p.size == o.size && p.shape == o.shape)
            .count()
            == 1
    }
}

/// Knobs of the scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub max_objects: usize,
    pub abnormal_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            max_objects: 3,
            abnormal_prob: 0.4,
        }
    }
}

pub fn gen_scene(seed: u64) -> SceneSpec {
    gen_scene_with(seed, &SceneConfig::default())
}

pub fn gen_scene_with(seed: u64, cfg: &SceneConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=cfg.max_objects.clamp(1, 3));
    let mut octants: Vec<u8> = (0..8).collect();
    octants.shuffle(&mut rng);
    let abnormal = rng.gen_bool(cfg.abnormal_prob);
    let objects = octants[..n]
        .iter()
        .enumerate()
        .map(|(i, &octant)| {
            let shape = *[Shape::Sphere, Shape::Box].choose(&mut rng).unwrap();
            let size = *[Size::Small, Size::Large].choose(&mut rng).unwrap();
            let intensity = *[Intensity::Low, Intensity::Mid, Intensity::High]
                .choose(&mut rng)
                .unwrap();
            // the hyperintense object's base level is never visible
            let intensity = if abnormal && i == 0 { Intensity::High } else { intensity };
            ObjectSpec {
                shape,
                octant,
                intensity,
                size,
            }
        })
        .collect();
    let plane = *[Plane::Axial, Plane::Coronal, Plane::Sagittal]
        .choose(&mut rng)
        .unwrap();
    SceneSpec {
        objects,
        plane,
        abnormal,
    }
}

/// Noise-free object field before blurring: `[D, H, W]` row-major.
pub fn rasterize(scene: &SceneSpec) -> Vec<f64> {
    let [dd, hh, ww] = VOLUME_SHAPE;
    let mut field = vec![0.0f64; dd * hh * ww];
    for (idx, o) in scene.objects.iter().enumerate() {
        let level = if scene.is_hyper(idx) { 1.0 } else { o.intensity.value() };
        let r = o.radii();
        let c = o.center();
        let lo = |a: usize| ((c[a] - r[a] - 1.0).floor().max(0.0)) as usize;
        let hi = |a: usize| ((c[a] + r[a] + 1.0).ceil() as usize).min(VOLUME_SHAPE[a]);
        for i in lo(0)..hi(0) {
            for j in lo(1)..hi(1) {
                for k in lo(2)..hi(2) {
                    let d = [
                        (i as f64 + 0.5 - c[0]) / r[0],
                        (j as f64 + 0.5 - c[1]) / r[1],
                        (k as f64 + 0.5 - c[2]) / r[2],
                    ];
                    let inside = match o.shape {
                        Shape::Sphere => d.iter().map(|x| x * x).sum::<f64>() <= 1.0,
                        Shape::Box => d.iter().all(|x| x.abs() <= 1.0),
                    };
                    if inside {
                        let v = &mut field[(i * hh + j) * ww + k];
                        *v = v.max(level);
                    }
                }
            }
        }
    }
    field
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (-BLUR_RADIUS..=BLUR_RADIUS)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// 1D Gaussian blur along `axis` with edge clamping.
pub fn blur_axis(field: &[f64], shape: [usize; 3], axis: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let len = shape[axis] as isize;
    let mut out = vec![0.0; field.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = ((idx / stride) % shape[axis]) as isize;
        let base = idx - pos as usize * stride;
        *o = kernel
            .iter()
            .enumerate()
            .map(|(t, w)| {
                let p = (pos + t as isize - BLUR_RADIUS).clamp(0, len - 1) as usize;
                w * field[base + p * stride]
            })
            .sum();
    }
    out
}

/// Rasterize, blur along the plane axis, add Gaussian noise, clip to [0, 1].
pub fn render<T: Scalar>(scene: &SceneSpec, noise_seed: u64) -> VolumeTensor<T> {
    let field = blur_axis(&rasterize(scene), VOLUME_SHAPE, scene.plane.axis(), BLUR_SIGMA);
    VolumeTensor::new(noisy(field, noise_seed)).expect("finite by construction")
}

/// Pure noise volume with no objects.
pub fn render_empty<T: Scalar>(noise_seed: u64) -> VolumeTensor<T> {
    let n: usize = VOLUME_SHAPE.iter().product();
    VolumeTensor::new(noisy(vec![0.0; n], noise_seed)).expect("finite by construction")
}

fn noisy<T: Scalar>(field: Vec<f64>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, NOISE_STD).expect("valid std");
    let data = field
        .into_iter()
        .map(|v| T::of((v + normal.sample(&mut rng)).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(&VOLUME_SHAPE, data)
}

/// Report listing plane, every object in octant order, then the abnormality
/// finding.
pub fn gen_report(scene: &SceneSpec) -> String {
    let mut s = format!("{} scan .", scene.plane.word());
    for (idx, o) in scene.in_octant_order() {
        s.push_str(&format!(
            " a {} {} {} in {} .",
            o.size.word(),
            scene.intensity_word(idx),
            o.shape.word(),
            octant_words(o.octant)
        ));
    }
    if scene.abnormal {
        s.push_str(&format!(
            " abnormal object in {} .",
            octant_words(scene.objects[0].octant)
        ));
    } else {
        s.push_str(" no abnormality .");
    }
    s
}

/// Per-octant word bags: octant number and plane, plus size, intensity and
/// shape of the object there or `no` for an empty octant. Used as a textual stand-in for
/// image tokens when warming up the language model.
pub fn octant_words_bag(scene: &SceneSpec) -> Vec<Vec<&'static str>> {
    let mut slots: Vec<Vec<&'static str>> = (0..8)
        .map(|i| vec![NUMBER_WORDS[i], scene.plane.word(), "no"])
        .collect();
    for (idx, o) in scene.objects.iter().enumerate() {
        slots[o.octant as usize] = vec![
            NUMBER_WORDS[o.octant as usize],
            scene.plane.word(),
            o.size.word(),
            scene.intensity_word(idx),
            o.shape.word(),
        ];
    }
    slots
}

/// One question/answer item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub topic: Topic,
    pub prompt: String,
    pub answer: String,
    pub choices: Option<Vec<String>>,
}

pub fn topic_applicable(scene: &SceneSpec, topic: Topic) -> bool {
    match topic {
        Topic::Abnormality => scene.abnormal,
        Topic::Location => (0..scene.objects.len()).any(|i| scene.unique_by_size_shape(i)),
        _ => true,
    }
}

fn question(scene: &SceneSpec, topic: Topic, rng: &mut ChaCha8Rng) -> (String, String, Vec<&'static str>) {
    match topic {
        Topic::Plane => (
            "which plane is this scan ?".into(),
            scene.plane.word().into(),
            PLANE_CHOICES.to_vec(),
        ),
        Topic::Phase => {
            let idx = rng.gen_range(0..scene.objects.len());
            (
                format!(
                    "what is the intensity of the object in {} ?",
                    octant_words(scene.objects[idx].octant)
                ),
                scene.intensity_word(idx).into(),
                INTENSITY_CHOICES.to_vec(),
            )
        }
        Topic::Organ => {
            let idx = rng.gen_range(0..scene.objects.len());
            let o = &scene.objects[idx];
            (
                format!("what shape is the object in {} ?", octant_words(o.octant)),
                o.shape.word().into(),
                SHAPE_CHOICES.to_vec(),
            )
        }
        Topic::Abnormality => (
            "which octant contains the abnormal object ?".into(),
            octant_words(scene.objects[0].octant),
            Vec::new(),
        ),
        Topic::Location => {
            let cands: Vec<usize> = (0..scene.objects.len())
                .filter(|&i| scene.unique_by_size_shape(i))
                .collect();
            let o = &scene.objects[*cands.choose(rng).expect("applicable")];
            (
                format!("in which octant is the {} {} ?", o.size.word(), o.shape.word()),
                octant_words(o.octant),
                Vec::new(),
            )
        }
    }
}

fn open_answer(topic: Topic, value: &str) -> String {
    match topic {
        Topic::Plane => format!("the scan plane is {value} ."),
        Topic::Phase => format!("the object is {value} ."),
        Topic::Organ => format!("the object is a {value} ."),
        Topic::Abnormality => format!("the abnormal object is in {value} ."),
        Topic::Location => format!("it is in {value} ."),
    }
}

/// Question about one attribute. Closed items get four labelled choices with
/// the answer placed by a seeded shuffle; the answer is the choice text.
pub fn gen_vqa(scene: &SceneSpec, topic: Topic, closed: bool, seed: u64) -> Result<VqaItem> {
    if !topic_applicable(scene, topic) {
        return Err(Error::InvalidInput(format!("topic {topic} does not apply to this scene")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, value, domain) = question(scene, topic, &mut rng);
    if !closed {
        return Ok(VqaItem {
            topic,
            prompt: q,
            answer: open_answer(topic, &value),
            choices: None,
        });
    }
    let mut distractors: Vec<String> = if domain.is_empty() {
        (0..8u8).map(octant_words).collect()
    } else {
        domain.iter().map(|s| s.to_string()).collect()
    };
    distractors.retain(|d| *d != value);
    distractors.shuffle(&mut rng);
    let mut choices: Vec<String> = distractors.into_iter().take(3).collect();
    let pos = rng.gen_range(0..4);
    choices.insert(pos, value.clone());
    let listed: Vec<String> = CHOICE_LABELS
        .iter()
        .zip(&choices)
        .map(|(l, c)| format!("{l} {c}"))
        .collect();
    Ok(VqaItem {
        topic,
        prompt: format!("{q} choices : {}", listed.join(" ")),
        answer: value,
        choices: Some(choices),
    })
}

/// Recomputes the expected answer of a generated item from the scene and the
/// prompt text alone.
pub fn oracle_answer(scene: &SceneSpec, topic: Topic, prompt: &str) -> Option<String> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let closed = words.contains(&"choices");
    let octant_in_prompt = || {
        let p = words.iter().position(|w| *w == "octant")?;
        NUMBER_WORDS.iter().position(|n| *n == words[p + 1]).map(|o| o as u8)
    };
    let value = match topic {
        Topic::Plane => scene.plane.word().to_string(),
        Topic::Phase => {
            let (idx, _) = scene.object_at(octant_in_prompt()?)?;
            scene.intensity_word(idx).to_string()
        }
        Topic::Organ => scene.object_at(octant_in_prompt()?)?.1.shape.word().to_string(),
        Topic::Abnormality => octant_words(scene.objects.get(0).filter(|_| scene.abnormal)?.octant),
        Topic::Location => {
            let p = words.iter().position(|w| *w == "the")?;
            let (size, shape) = (words.get(p + 1)?, words.get(p + 2)?);
            let o = scene
                .objects
                .iter()
                .find(|o| o.size.word() == *size && o.shape.word() == *shape)?;
            octant_words(o.octant)
        }
    };
    Some(if closed { value } else { open_answer(topic, &value) })
}

/// Manifest line for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub task: Task,
    /// `None` for report generation.
    pub topic: Option<Topic>,
    pub prompt: String,
    pub answer: String,
    pub choices: Option<Vec<String>>,
    pub volume_path: String,
    pub volume_shape: [usize; 3],
    pub scene: SceneSpec,
    pub noise_seed: u64,
}

impl SampleRecord {
    pub fn is_closed(&self) -> bool {
        self.choices.is_some()
    }

    /// Index of the answer among the choices.
    pub fn gold_choice(&self) -> Option<usize> {
        self.choices.as_ref()?.iter().position(|c| *c == self.answer)
    }
}

/// A manifest record with its volume loaded.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub record: SampleRecord,
    pub volume: VolumeTensor<T>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed for `(split, index, attempt)`. Splits use disjoint seed spaces.
pub fn scene_seed(seed: u64, split: u8, index: usize, attempt: u32) -> u64 {
    let tagged = ((split as u64) << 62) | ((attempt as u64) << 40) | index as u64;
    mix64(seed ^ mix64(tagged))
}

/// Every word the generator can emit.
pub fn vocabulary() -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    let mut add = |s: &str| {
        for w in s.split_whitespace() {
            words.insert(w.to_string());
        }
    };
    for p in REPORT_PROMPTS {
        add(p);
    }
    add("scan . a in abnormal object no abnormality");
    add("which plane is this scan ? what is the intensity of the object in octant shape");
    add("contains the abnormal object in which octant is choices :");
    add("the scan plane is the object is a abnormal it");
    for l in CHOICE_LABELS.iter().chain(&PLANE_CHOICES).chain(&INTENSITY_CHOICES).chain(&SHAPE_CHOICES) {
        add(l);
    }
    for n in NUMBER_WORDS {
        add(n);
    }
    for s in [Size::Small, Size::Large] {
        add(s.word());
    }
    words.into_iter().collect()
}

pub fn tokenizer() -> Tokenizer {
    Tokenizer::new(vocabulary())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

/// Counts written next to the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub config: CorpusConfig,
    pub volume_shape: [usize; 3],
    pub vocab_size: usize,
    pub splits: BTreeMap<String, SplitSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub samples: usize,
    pub tasks: BTreeMap<String, usize>,
    pub topics: BTreeMap<String, usize>,
    pub closed: usize,
}

pub const SPLITS: [&str; 2] = ["train", "test"];

/// Scene-level plan of a corpus (no volumes rendered).
pub fn plan_corpus(cfg: &CorpusConfig) -> Result<Vec<Vec<SampleRecord>>> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    for (split_idx, (&name, n)) in SPLITS.iter().zip([cfg.n_train, cfg.n_test]).enumerate() {
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let max_attempts = 64;
            let mut found = None;
            for attempt in 0..max_attempts {
                let s = scene_seed(cfg.seed, split_idx as u8, i, attempt);
                let scene = gen_scene_with(s, &cfg.scene);
                if seen.insert(scene.canonical_key()) {
                    found = Some((scene, s));
                    break;
                }
            }
            let Some((scene, s)) = found else {
                return Err(Error::InvalidInput(format!(
                    "could not draw a unique scene for {name} sample {i} after {max_attempts} \
                     attempts; the requested corpus is too large for the scene space"
                )));
            };
            records.push(sample_for(name, i, scene, s)?);
        }
        out.push(records);
    }
    Ok(out)
}

fn sample_for(split: &str, i: usize, scene: SceneSpec, seed: u64) -> Result<SampleRecord> {
    let id = format!("{split}-{i:05}");
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x51));
    let noise_seed = rng.gen();
    let (task, topic, prompt, answer, choices) = if i % 2 == 0 {
        let p = REPORT_PROMPTS[rng.gen_range(0..REPORT_PROMPTS.len())];
        (Task::Mrg, None, p.to_string(), gen_report(&scene), None)
    } else {
        let closed = (i / 2) % 2 == 0;
        let topic = loop {
            let t = TOPICS[rng.gen_range(0..TOPICS.len())];
            if topic_applicable(&scene, t) {
                break t;
            }
        };
        let item = gen_vqa(&scene, topic, closed, rng.gen())?;
        (Task::Mvqa, Some(topic), item.prompt, item.answer, item.choices)
    };
    Ok(SampleRecord {
        volume_path: format!("volumes/{id}.f32"),
        id,
        task,
        topic,
        prompt,
        answer,
        choices,
        volume_shape: VOLUME_SHAPE,
        scene,
        noise_seed,
    })
}

fn summarize(records: &[SampleRecord]) -> SplitSummary {
    let mut s = SplitSummary {
        samples: records.len(),
        ..Default::default()
    };
    for r in records {
        *s.tasks.entry(r.task.to_string()).or_default() += 1;
        if let Some(t) = r.topic {
            *s.topics.entry(t.to_string()).or_default() += 1;
        }
        s.closed += r.is_closed() as usize;
    }
    s
}

pub fn write_volume(path: &Path, v: &VolumeTensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = v.data().data().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume<T: Scalar>(path: &Path, shape: [usize; 3]) -> Result<VolumeTensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: {} bytes, expected {} for shape {shape:?}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    VolumeTensor::new(Tensor::from_vec(&shape, data))
}

/// Writes `train.jsonl`, `test.jsonl`, `vocab.txt`, `corpus.json` and one raw
/// little-endian f32 volume per sample under `volumes/`.
pub fn build_corpus(cfg: &CorpusConfig, out: &Path) -> Result<CorpusSummary> {
    let plan = plan_corpus(cfg)?;
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let tok = tokenizer();
    let mut splits = BTreeMap::new();
    for (name, records) in SPLITS.iter().zip(&plan) {
        for r in records {
            tok.encode(&r.prompt)?;
            tok.encode(&r.answer)?;
        }
        for chunk in records.chunks(64) {
            let vols: Vec<VolumeTensor<f32>> = chunk
                .par_iter()
                .map(|r| render::<f32>(&r.scene, r.noise_seed))
                .collect();
            for (r, v) in chunk.iter().zip(&vols) {
                write_volume(&out.join(&r.volume_path), v)?;
            }
        }
        let path = out.join(format!("{name}.jsonl"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        splits.insert(name.to_string(), summarize(records));
    }
    tok.save(&out.join("vocab.txt"))?;
    let summary = CorpusSummary {
        config: cfg.clone(),
        volume_shape: VOLUME_SHAPE,
        vocab_size: tok.vocab_size(),
        splits,
    };
    let path = out.join("corpus.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// One split of a corpus directory with all volumes in memory.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub root: PathBuf,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let records = read_manifest(&root.join(format!("{split}.jsonl")))?;
        let samples = records
            .into_par_iter()
            .map(|record| {
                let volume = read_volume(&root.join(&record.volume_path), record.volume_shape)?;
                Ok(Sample { record, volume })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by task.
    pub fn by_task(&self) -> [Vec<usize>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.record.task.index()].push(i);
        }
        out
    }
}
