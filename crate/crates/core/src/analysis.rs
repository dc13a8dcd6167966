//! Representation analyses: attribute suppression probing with contrastive
//! prompt pairs, and the positive/negative distance separation summary.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::world::SceneRecord;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    BadSpec { detail: String },
    Embed { detail: String },
    ZeroNorm,
    EmptyDataset,
}

impl core::fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AnalysisError::BadSpec { detail } => write!(f, "bad prompt spec: {detail}"),
            AnalysisError::Embed { detail } => write!(f, "embedding failed: {detail}"),
            AnalysisError::ZeroNorm => write!(f, "zero-norm embedding"),
            AnalysisError::EmptyDataset => write!(f, "no records to analyze"),
        }
    }
}

impl core::error::Error for AnalysisError {}

pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Embed {
            detail: "dim mismatch".to_string(),
        });
    }
    let (na, nb) = (a.l2(), b.l2());
    if na == 0.0 || nb == 0.0 {
        return Err(AnalysisError::ZeroNorm);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Contrasting prompts probing whether attribute words stay separable in
/// generic versus category-explicit contexts.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptGroupSpec {
    pub neutral_nouns: Vec<String>,
    pub explicit_nouns: Vec<String>,
    pub attribute_pairs: Vec<(String, String)>,
}

impl PromptGroupSpec {
    /// Stock neutral nouns and attribute contrasts; explicit nouns come from
    /// the caller's category inventory.
    pub fn with_explicit_nouns<S: AsRef<str>>(explicit: &[S]) -> Self {
        PromptGroupSpec {
            neutral_nouns: vec![
                "object".to_string(),
                "item".to_string(),
                "thing".to_string(),
            ],
            explicit_nouns: explicit.iter().map(|s| s.as_ref().to_string()).collect(),
            attribute_pairs: vec![
                ("green".to_string(), "black".to_string()),
                ("red".to_string(), "blue".to_string()),
                ("leather".to_string(), "wooden".to_string()),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.neutral_nouns.is_empty() || self.explicit_nouns.is_empty() {
            return Err(AnalysisError::BadSpec {
                detail: "both noun lists must be non-empty".to_string(),
            });
        }
        if self.attribute_pairs.is_empty() {
            return Err(AnalysisError::BadSpec {
                detail: "at least one attribute pair required".to_string(),
            });
        }
        for (a, b) in &self.attribute_pairs {
            if a == b {
                return Err(AnalysisError::BadSpec {
                    detail: alloc::format!("pair ({a}, {b}) is not a contrast"),
                });
            }
        }
        Ok(())
    }
}

/// Maps a text prompt to a pooled embedding.
pub trait PromptEmbedder {
    fn embed_prompt(&self, prompt: &str) -> Result<Tensor, AnalysisError>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptDistance {
    pub attr_a: String,
    pub attr_b: String,
    pub noun: String,
    pub neutral: bool,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SuppressionReport {
    pub rows: Vec<PromptDistance>,
    pub neutral_mean: Option<f64>,
    pub explicit_mean: Option<f64>,
    pub skipped: usize,
    /// Which representation the distances were measured on.
    pub representation: String,
}

/// For every attribute pair and every noun, embeds "{attr} {noun}" for both
/// attributes and records the cosine distance between the two embeddings.
/// Pairs whose prompts fail to embed are skipped and counted.
pub fn suppression_metric<E: PromptEmbedder + ?Sized>(
    embedder: &E,
    spec: &PromptGroupSpec,
) -> Result<SuppressionReport, AnalysisError> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    let groups = [(&spec.neutral_nouns, true), (&spec.explicit_nouns, false)];
    for (nouns, neutral) in groups {
        for noun in nouns.iter() {
            for (a, b) in &spec.attribute_pairs {
                let pa = alloc::format!("{a} {noun}");
                let pb = alloc::format!("{b} {noun}");
                let d = embedder
                    .embed_prompt(&pa)
                    .and_then(|ea| embedder.embed_prompt(&pb).map(|eb| (ea, eb)))
                    .and_then(|(ea, eb)| cosine_distance(&ea, &eb));
                match d {
                    Ok(distance) => rows.push(PromptDistance {
                        attr_a: a.clone(),
                        attr_b: b.clone(),
                        noun: noun.clone(),
                        neutral,
                        distance,
                    }),
                    Err(_) => skipped += 1,
                }
            }
        }
    }
    let mean_of = |neutral: bool| {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.neutral == neutral)
            .map(|r| r.distance)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(SuppressionReport {
        neutral_mean: mean_of(true),
        explicit_mean: mean_of(false),
        rows,
        skipped,
        representation: "pooled final hidden state".to_string(),
    })
}

pub const HIST_BINS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

/// Uniform bins over [lo, hi]; values equal to hi land in the last bin. A
/// degenerate range puts everything in bin 0.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let mut counts = vec![0usize; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for &v in values {
        let idx = if width > 0.0 {
            (((v - lo) / width) as usize).min(counts.len() - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    Histogram { lo, hi, counts }
}

/// Target region's embedded feature plus the embeddings of the positive
/// caption and its negatives.
#[derive(Debug, Clone)]
pub struct RecordEmbedding {
    pub target: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
}

pub trait RecordEmbedder {
    fn embed_record(&self, record: &SceneRecord) -> Result<RecordEmbedding, AnalysisError>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeparationStats {
    pub pos_distances: Vec<f64>,
    pub neg_distances: Vec<f64>,
    pub pos_mean: f64,
    pub neg_mean: f64,
    /// (neg_mean - pos_mean) / pos_mean; infinite when positives sit at
    /// distance zero and negatives do not.
    pub gap: f64,
    pub pos_hist: Histogram,
    pub neg_hist: Histogram,
}

/// Cosine distances from each record's target feature to its positive and
/// negative caption embeddings, histogrammed over a shared range.
pub fn separation_stats<E: RecordEmbedder + ?Sized>(
    embedder: &E,
    records: &[SceneRecord],
) -> Result<SeparationStats, AnalysisError> {
    let mut pos = Vec::with_capacity(records.len());
    let mut neg = Vec::new();
    for record in records {
        let emb = embedder.embed_record(record)?;
        pos.push(cosine_distance(&emb.target, &emb.positive)?);
        for n in &emb.negatives {
            neg.push(cosine_distance(&emb.target, n)?);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let pos_mean = pos.iter().sum::<f64>() / pos.len() as f64;
    let neg_mean = neg.iter().sum::<f64>() / neg.len() as f64;
    let gap = if pos_mean == 0.0 {
        if neg_mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (neg_mean - pos_mean) / pos_mean
    };
    let lo = pos
        .iter()
        .chain(neg.iter())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = pos
        .iter()
        .chain(neg.iter())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SeparationStats {
        pos_hist: histogram(&pos, HIST_BINS, lo, hi),
        neg_hist: histogram(&neg, HIST_BINS, lo, hi),
        pos_distances: pos,
        neg_distances: neg,
        pos_mean,
        neg_mean,
        gap,
    })
}
