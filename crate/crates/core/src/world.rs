//! Synthetic benchmark world: named concepts with latent vectors, region
//! features composed as category + attributes + noise, and deterministic
//! generation of caption records with difficulty-graded negatives.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::objectives::BoundingBox;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::text::{AttrCategory, Lexicon, Vocabulary};

pub const CATEGORY_NAMES: [&str; 8] = [
    "chair", "car", "mug", "dog", "ball", "box", "lamp", "book",
];
pub const COLOR_NAMES: [&str; 6] = ["red", "blue", "green", "black", "white", "yellow"];
pub const MATERIAL_NAMES: [&str; 4] = ["leather", "wooden", "metal", "plastic"];
pub const PATTERN_NAMES: [&str; 3] = ["striped", "spotted", "plain"];
pub const TRANSPARENCY_NAMES: [&str; 2] = ["transparent", "opaque"];

/// The training split always carries this many negatives per record.
pub const TRAIN_NEGATIVES: usize = 3;
pub const MAX_EVAL_NEGATIVES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum GenError {
    /// The attribute vocabulary cannot supply the requested negatives.
    InsufficientNegatives {
        requested: usize,
        available: usize,
        positive: String,
    },
    BadParams { detail: String },
    LatentsDegenerate { attempts: usize },
}

impl core::fmt::Display for GenError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GenError::InsufficientNegatives {
                requested,
                available,
                positive,
            } => write!(
                f,
                "vocabulary supports only {available} of {requested} requested negatives for '{positive}'"
            ),
            GenError::BadParams { detail } => write!(f, "invalid generation parameters: {detail}"),
            GenError::LatentsDegenerate { attempts } => write!(
                f,
                "could not draw latents with pairwise angle above threshold in {attempts} attempts"
            ),
        }
    }
}

impl core::error::Error for GenError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Difficulty {
    Trivial,
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Trivial,
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Trivial => "Trivial",
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttrSubset {
    Color,
    Material,
    Pattern,
    Transparency,
    Mixed,
}

impl AttrSubset {
    pub const TYPED: [AttrSubset; 4] = [
        AttrSubset::Color,
        AttrSubset::Material,
        AttrSubset::Pattern,
        AttrSubset::Transparency,
    ];

    pub fn of(kind: AttrCategory) -> Self {
        match kind {
            AttrCategory::Color => AttrSubset::Color,
            AttrCategory::Material => AttrSubset::Material,
            AttrCategory::Pattern => AttrSubset::Pattern,
            AttrCategory::Transparency => AttrSubset::Transparency,
        }
    }

    pub fn kind(self) -> Option<AttrCategory> {
        match self {
            AttrSubset::Color => Some(AttrCategory::Color),
            AttrSubset::Material => Some(AttrCategory::Material),
            AttrSubset::Pattern => Some(AttrCategory::Pattern),
            AttrSubset::Transparency => Some(AttrCategory::Transparency),
            AttrSubset::Mixed => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttrSubset::Color => "Color",
            AttrSubset::Material => "Material",
            AttrSubset::Pattern => "Pattern",
            AttrSubset::Transparency => "Transparency",
            AttrSubset::Mixed => "Mixed",
        }
    }
}

/// The eight evaluation columns: four difficulties on mixed attributes,
/// then Hard-style records restricted to each attribute type.
pub const EVAL_SUBSETS: [(Difficulty, AttrSubset); 8] = [
    (Difficulty::Hard, AttrSubset::Mixed),
    (Difficulty::Medium, AttrSubset::Mixed),
    (Difficulty::Easy, AttrSubset::Mixed),
    (Difficulty::Trivial, AttrSubset::Mixed),
    (Difficulty::Hard, AttrSubset::Color),
    (Difficulty::Hard, AttrSubset::Material),
    (Difficulty::Hard, AttrSubset::Pattern),
    (Difficulty::Hard, AttrSubset::Transparency),
];

#[derive(Debug, Clone)]
pub struct Concept {
    pub name: String,
    pub latent: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttributeDef {
    pub name: String,
    pub kind: AttrCategory,
    pub latent: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldConfig {
    pub feature_dim: usize,
    /// Text embedding dimensionality the frozen projection maps into.
    pub text_dim: usize,
    pub noise_std: f64,
    pub min_angle_deg: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            feature_dim: 32,
            text_dim: 64,
            noise_std: 0.05,
            min_angle_deg: 10.0,
        }
    }
}

/// Frozen synthetic visual side: concept latents plus the projection into
/// text space. Regenerating with the same seed reproduces it exactly.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub cfg: WorldConfig,
    pub categories: Vec<Concept>,
    pub attributes: Vec<AttributeDef>,
    pub w_proj: Tensor,
}

fn unit_randn<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor {
    loop {
        let t = Tensor::randn(vec![dim], 1.0, rng);
        let n = t.l2();
        if n > 1e-6 {
            let data = t.data().iter().map(|v| v / n).collect();
            return Tensor::new(vec![dim], data).expect("shape matches data");
        }
    }
}

fn min_pairwise_line_angle_deg(latents: &[&Tensor]) -> f64 {
    let mut min_angle = 90.0f64;
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            let dot: f64 = latents[i]
                .data()
                .iter()
                .zip(latents[j].data())
                .map(|(a, b)| a * b)
                .sum();
            let cos = libm::fabs(dot).min(1.0);
            let angle = libm::acos(cos).to_degrees();
            min_angle = min_angle.min(angle);
        }
    }
    min_angle
}

impl SyntheticWorld {
    pub fn standard(cfg: WorldConfig, seed: u64) -> Result<Self, GenError> {
        let attrs: Vec<(AttrCategory, Vec<&str>)> = vec![
            (AttrCategory::Color, COLOR_NAMES.to_vec()),
            (AttrCategory::Material, MATERIAL_NAMES.to_vec()),
            (AttrCategory::Pattern, PATTERN_NAMES.to_vec()),
            (AttrCategory::Transparency, TRANSPARENCY_NAMES.to_vec()),
        ];
        Self::with_names(&CATEGORY_NAMES, &attrs, cfg, seed)
    }

    pub fn with_names(
        categories: &[&str],
        attributes: &[(AttrCategory, Vec<&str>)],
        cfg: WorldConfig,
        seed: u64,
    ) -> Result<Self, GenError> {
        if cfg.feature_dim == 0 || cfg.text_dim == 0 {
            return Err(GenError::BadParams {
                detail: "dimensions must be positive".into(),
            });
        }
        let mut rng = stream(seed, "world.latents");
        let total = categories.len() + attributes.iter().map(|(_, v)| v.len()).sum::<usize>();
        let max_attempts = 200;
        for attempt in 0..max_attempts {
            let latents: Vec<Tensor> = (0..total)
                .map(|_| unit_randn(cfg.feature_dim, &mut rng))
                .collect();
            let refs: Vec<&Tensor> = latents.iter().collect();
            if min_pairwise_line_angle_deg(&refs) <= cfg.min_angle_deg {
                if attempt + 1 == max_attempts {
                    return Err(GenError::LatentsDegenerate {
                        attempts: max_attempts,
                    });
                }
                continue;
            }
            let mut it = latents.into_iter();
            let cats = categories
                .iter()
                .map(|&name| Concept {
                    name: name.to_string(),
                    latent: it.next().expect("latent count matches"),
                })
                .collect();
            let mut attrs = Vec::new();
            for (kind, names) in attributes {
                for &name in names {
                    attrs.push(AttributeDef {
                        name: name.to_string(),
                        kind: *kind,
                        latent: it.next().expect("latent count matches"),
                    });
                }
            }
            let mut proj_rng = stream(seed, "world.projection");
            let w_proj = Tensor::randn(
                vec![cfg.text_dim, cfg.feature_dim],
                1.0 / libm::sqrt(cfg.feature_dim as f64),
                &mut proj_rng,
            );
            return Ok(SyntheticWorld {
                cfg,
                categories: cats,
                attributes: attrs,
                w_proj,
            });
        }
        Err(GenError::LatentsDegenerate {
            attempts: max_attempts,
        })
    }

    pub fn attrs_of_kind(&self, kind: AttrCategory) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Region feature: category latent + attribute latents + Gaussian noise.
    pub fn compose_feature<R: Rng + ?Sized>(
        &self,
        category: usize,
        attrs: &[usize],
        rng: &mut R,
    ) -> Tensor {
        let d = self.cfg.feature_dim;
        let mut data = self.categories[category].latent.data().to_vec();
        for &a in attrs {
            for (acc, v) in data.iter_mut().zip(self.attributes[a].latent.data()) {
                *acc += v;
            }
        }
        let noise = Tensor::randn(vec![d], self.cfg.noise_std, rng);
        for (acc, v) in data.iter_mut().zip(noise.data()) {
            *acc += v;
        }
        Tensor::new(vec![d], data).expect("shape matches data")
    }

    /// Frozen projection into text space.
    pub fn project(&self, feature: &Tensor) -> Tensor {
        let (rows, cols) = (self.w_proj.rows(), self.w_proj.cols());
        let mut out = vec![0.0; rows];
        for (i, slot) in out.iter_mut().enumerate() {
            let row = self.w_proj.row(i);
            *slot = row
                .iter()
                .zip(feature.data())
                .take(cols)
                .map(|(a, b)| a * b)
                .sum();
        }
        Tensor::new(vec![rows], out).expect("shape matches data")
    }

    /// Extraction lexicon over this world's attribute names.
    pub fn lexicon(&self) -> Lexicon {
        let mut entries: Vec<(AttrCategory, Vec<String>)> = AttrCategory::ALL
            .iter()
            .map(|&k| (k, Vec::new()))
            .collect();
        for a in &self.attributes {
            let slot = entries
                .iter_mut()
                .find(|(k, _)| *k == a.kind)
                .expect("all kinds present");
            slot.1.push(a.name.clone());
        }
        Lexicon { entries }
    }

    /// Tokenizer vocabulary covering every caption this world can emit.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<&str> = vec!["a"];
        words.extend(self.attributes.iter().map(|a| a.name.as_str()));
        words.extend(self.categories.iter().map(|c| c.name.as_str()));
        Vocabulary::new(words).expect("world words are distinct")
    }

    fn caption(&self, category: usize, attrs: &[usize]) -> String {
        let mut words = vec!["a".to_string()];
        for &a in attrs {
            words.push(self.attributes[a].name.clone());
        }
        words.push(self.categories[category].name.clone());
        words.join(" ")
    }

    /// Caption with attribute index `slot` replaced by another attribute's
    /// word.
    fn caption_with_swap(&self, category: usize, attrs: &[usize], slot: usize, repl: usize) -> String {
        let mut swapped = attrs.to_vec();
        swapped[slot] = repl;
        self.caption(category, &swapped)
    }

    fn sort_canonical(&self, attrs: &mut [usize]) {
        attrs.sort_by_key(|&a| {
            let kind_rank = AttrCategory::ALL
                .iter()
                .position(|&k| k == self.attributes[a].kind)
                .expect("kind listed");
            (kind_rank, a)
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneInstance {
    pub bbox: BoundingBox,
    pub category: usize,
    pub attributes: Vec<usize>,
    pub feature: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub feature: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CaptionRecord {
    pub positive: String,
    pub negatives: Vec<String>,
    pub difficulty: Difficulty,
    pub attr_subset: AttrSubset,
}

/// One benchmark entry: a scene, the annotated target instance, the
/// proposal pool, and the caption set.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneRecord {
    pub instances: Vec<SceneInstance>,
    pub target: usize,
    pub proposals: Vec<Proposal>,
    pub caption: CaptionRecord,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenParams {
    pub train_records: usize,
    pub eval_records_per_subset: usize,
    /// Target negative count for evaluation records; capped by what the
    /// attribute vocabulary supports.
    pub eval_negatives: usize,
    pub max_distractors: usize,
    pub jittered_per_instance: usize,
    pub decoys: usize,
    pub jitter_scale: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            train_records: 192,
            eval_records_per_subset: 24,
            eval_negatives: 5,
            max_distractors: 2,
            jittered_per_instance: 2,
            decoys: 2,
            jitter_scale: 0.04,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.eval_negatives == 0 || self.eval_negatives > MAX_EVAL_NEGATIVES {
            return Err(GenError::BadParams {
                detail: format!(
                    "eval_negatives must be within 1..={MAX_EVAL_NEGATIVES}, got {}",
                    self.eval_negatives
                ),
            });
        }
        if !(self.jitter_scale >= 0.0) {
            return Err(GenError::BadParams {
                detail: "jitter_scale must be non-negative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<SceneRecord>,
    pub eval: Vec<SceneRecord>,
}

fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BoundingBox {
    let cx: f64 = rng.gen_range(0.2..0.8);
    let cy: f64 = rng.gen_range(0.2..0.8);
    let hw: f64 = rng.gen_range(0.06..0.18);
    let hh: f64 = rng.gen_range(0.06..0.18);
    BoundingBox::new(
        (cx - hw).max(0.0),
        (cy - hh).max(0.0),
        (cx + hw).min(1.0),
        (cy + hh).min(1.0),
    )
    .expect("construction keeps extent positive")
}

fn jitter_box<R: Rng + ?Sized>(b: &BoundingBox, scale: f64, rng: &mut R) -> BoundingBox {
    loop {
        let j = |v: f64, rng: &mut R| (v + rng.gen_range(-scale..=scale)).clamp(0.0, 1.0);
        let cand = BoundingBox {
            x_min: j(b.x_min, rng),
            y_min: j(b.y_min, rng),
            x_max: j(b.x_max, rng),
            y_max: j(b.y_max, rng),
        };
        if cand.validate().is_ok() {
            return cand;
        }
    }
}

struct ObjectSpec {
    category: usize,
    attrs: Vec<usize>,
}

fn sample_object<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    subset: AttrSubset,
    rng: &mut R,
) -> ObjectSpec {
    let category = rng.gen_range(0..world.categories.len());
    let mut kinds: Vec<AttrCategory> = AttrCategory::ALL
        .iter()
        .copied()
        .filter(|k| !world.attrs_of_kind(*k).is_empty())
        .collect();
    kinds.shuffle(rng);
    let mut chosen_kinds = Vec::new();
    if let Some(required) = subset.kind() {
        chosen_kinds.push(required);
        kinds.retain(|&k| k != required);
        if rng.gen_bool(0.5) {
            if let Some(&extra) = kinds.first() {
                chosen_kinds.push(extra);
            }
        }
    } else {
        let n = 1 + usize::from(rng.gen_bool(0.5));
        chosen_kinds.extend(kinds.into_iter().take(n));
    }
    let mut attrs: Vec<usize> = chosen_kinds
        .iter()
        .map(|&k| {
            let pool = world.attrs_of_kind(k);
            pool[rng.gen_range(0..pool.len())]
        })
        .collect();
    world.sort_canonical(&mut attrs);
    ObjectSpec { category, attrs }
}

/// All candidate negative captions for an object under one difficulty.
fn negative_pool(
    world: &SyntheticWorld,
    spec: &ObjectSpec,
    difficulty: Difficulty,
    subset: AttrSubset,
) -> Vec<String> {
    let attr_names: Vec<&str> = spec
        .attrs
        .iter()
        .map(|&a| world.attributes[a].name.as_str())
        .collect();
    let conflicts = |cand: usize| attr_names.contains(&world.attributes[cand].name.as_str());
    let mut pool = Vec::new();
    match difficulty {
        Difficulty::Hard => {
            for (slot, &a) in spec.attrs.iter().enumerate() {
                let kind = world.attributes[a].kind;
                if let Some(required) = subset.kind() {
                    if kind != required {
                        continue;
                    }
                }
                for cand in world.attrs_of_kind(kind) {
                    if cand != a && !conflicts(cand) {
                        pool.push(world.caption_with_swap(spec.category, &spec.attrs, slot, cand));
                    }
                }
            }
        }
        Difficulty::Medium => {
            for (slot, &a) in spec.attrs.iter().enumerate() {
                for (cand, _) in world.attributes.iter().enumerate() {
                    if cand != a && !conflicts(cand) {
                        pool.push(world.caption_with_swap(spec.category, &spec.attrs, slot, cand));
                    }
                }
            }
        }
        Difficulty::Easy => {
            // Every combination that replaces all attribute slots with
            // same-type siblings.
            let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
            for &a in &spec.attrs {
                let kind = world.attributes[a].kind;
                let siblings: Vec<usize> = world
                    .attrs_of_kind(kind)
                    .into_iter()
                    .filter(|&c| c != a && !conflicts(c))
                    .collect();
                let mut next = Vec::new();
                for combo in &combos {
                    for &s in &siblings {
                        let mut c = combo.clone();
                        c.push(s);
                        next.push(c);
                    }
                }
                combos = next;
            }
            for combo in combos {
                let mut attrs = spec.attrs.clone();
                for (slot, &repl) in combo.iter().enumerate() {
                    attrs[slot] = repl;
                }
                pool.push(world.caption(spec.category, &attrs));
            }
        }
        Difficulty::Trivial => {
            for (cand, _) in world.categories.iter().enumerate() {
                if cand != spec.category {
                    let mut attrs = spec.attrs.clone();
                    world.sort_canonical(&mut attrs);
                    pool.push(world.caption(cand, &attrs));
                }
            }
        }
    }
    pool.sort();
    pool.dedup();
    pool
}

#[allow(clippy::too_many_arguments)]
fn gen_record<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    params: &GenParams,
    difficulty: Difficulty,
    subset: AttrSubset,
    requested_negatives: usize,
    exact: bool,
    rng: &mut R,
) -> Result<SceneRecord, GenError> {
    let mut spec = sample_object(world, subset, rng);
    if exact {
        // Training records need the full negative count; redraw attributes
        // until the vocabulary supports it, within a bounded budget.
        let mut tries = 0;
        while negative_pool(world, &spec, difficulty, subset).len() < requested_negatives {
            tries += 1;
            if tries > 64 {
                let available = negative_pool(world, &spec, difficulty, subset).len();
                return Err(GenError::InsufficientNegatives {
                    requested: requested_negatives,
                    available,
                    positive: world.caption(spec.category, &spec.attrs),
                });
            }
            spec = sample_object(world, subset, rng);
        }
    }
    let mut pool = negative_pool(world, &spec, difficulty, subset);
    if pool.is_empty() || (exact && pool.len() < requested_negatives) {
        return Err(GenError::InsufficientNegatives {
            requested: requested_negatives,
            available: pool.len(),
            positive: world.caption(spec.category, &spec.attrs),
        });
    }
    pool.shuffle(rng);
    let take = requested_negatives.min(pool.len());
    let negatives: Vec<String> = pool.into_iter().take(take).collect();

    let mut instances = Vec::new();
    let target_feature = world.compose_feature(spec.category, &spec.attrs, rng);
    instances.push(SceneInstance {
        bbox: random_box(rng),
        category: spec.category,
        attributes: spec.attrs.clone(),
        feature: target_feature,
    });
    let distractors = rng.gen_range(0..=params.max_distractors);
    for _ in 0..distractors {
        let mut d = sample_object(world, AttrSubset::Mixed, rng);
        if world.categories.len() > 1 {
            while d.category == spec.category {
                d = sample_object(world, AttrSubset::Mixed, rng);
            }
        }
        let feature = world.compose_feature(d.category, &d.attrs, rng);
        instances.push(SceneInstance {
            bbox: random_box(rng),
            category: d.category,
            attributes: d.attrs,
            feature,
        });
    }

    let mut proposals = Vec::new();
    for inst in &instances {
        proposals.push(Proposal {
            bbox: inst.bbox,
            feature: inst.feature.clone(),
        });
        for _ in 0..params.jittered_per_instance {
            let feature = world.compose_feature(inst.category, &inst.attributes, rng);
            proposals.push(Proposal {
                bbox: jitter_box(&inst.bbox, params.jitter_scale, rng),
                feature,
            });
        }
    }
    for _ in 0..params.decoys {
        let d = sample_object(world, AttrSubset::Mixed, rng);
        let feature = world.compose_feature(d.category, &d.attrs, rng);
        proposals.push(Proposal {
            bbox: random_box(rng),
            feature,
        });
    }

    Ok(SceneRecord {
        instances,
        target: 0,
        proposals,
        caption: CaptionRecord {
            positive: world.caption(spec.category, &spec.attrs),
            negatives,
            difficulty,
            attr_subset: subset,
        },
    })
}

/// Deterministic benchmark: the training split carries exactly
/// [`TRAIN_NEGATIVES`] hard negatives per record; the evaluation split
/// covers [`EVAL_SUBSETS`].
pub fn gen_benchmark(
    world: &SyntheticWorld,
    params: &GenParams,
    seed: u64,
) -> Result<Benchmark, GenError> {
    params.validate()?;
    let mut train = Vec::with_capacity(params.train_records);
    let mut rng = stream(seed, "gen.train");
    for _ in 0..params.train_records {
        train.push(gen_record(
            world,
            params,
            Difficulty::Hard,
            AttrSubset::Mixed,
            TRAIN_NEGATIVES,
            true,
            &mut rng,
        )?);
    }
    let mut eval = Vec::new();
    for &(difficulty, subset) in &EVAL_SUBSETS {
        let label = format!("gen.eval.{}.{}", difficulty.name(), subset.name());
        let mut rng = stream(seed, &label);
        for _ in 0..params.eval_records_per_subset {
            eval.push(gen_record(
                world,
                params,
                difficulty,
                subset,
                params.eval_negatives,
                false,
                &mut rng,
            )?);
        }
    }
    Ok(Benchmark { train, eval })
}

/// Word positions where two same-length captions differ; `None` when the
/// templates do not align.
pub fn caption_word_diff(a: &str, b: &str) -> Option<Vec<usize>> {
    let aw: Vec<&str> = a.split_whitespace().collect();
    let bw: Vec<&str> = b.split_whitespace().collect();
    if aw.len() != bw.len() {
        return None;
    }
    Some(
        aw.iter()
            .zip(&bw)
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect(),
    )
}
