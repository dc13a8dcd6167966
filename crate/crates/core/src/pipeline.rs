//! End-to-end caption pipeline: attribute extraction, span grounding,
//! prefix injection, condition-driven K/V scaling, and encoding. With no
//! grounded spans the forward pass reduces to the plain encoder.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::analysis::{AnalysisError, PromptEmbedder, RecordEmbedder, RecordEmbedding};
use crate::dsaa::{
    build_prefixes_on_tape, condition_vector_on_tape, modulation_scales_on_tape, DsaaError,
    DsaaTapeWeights, DsaaWeights,
};
use crate::encoder::{
    embed, encode, encode_on_tape, EncodeResult, EncodedNodes, EncoderConfig, EncoderError,
    EncoderTapeWeights, EncoderWeights,
};
use crate::eval::{score_regions, EvalError, RecordScorer};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::{NumericsError, Tensor};
use crate::text::{
    extract_attributes_lexicon, match_spans, tokenize, AttributeSpanSet, Lexicon, TextError,
    TokenSeq, Vocabulary,
};
use crate::world::{SceneRecord, SyntheticWorld};

#[derive(Debug)]
pub enum PipelineError {
    Text(TextError),
    Encoder(EncoderError),
    Dsaa(DsaaError),
    Numerics(NumericsError),
}

impl core::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PipelineError::Text(e) => write!(f, "{e}"),
            PipelineError::Encoder(e) => write!(f, "{e}"),
            PipelineError::Dsaa(e) => write!(f, "{e}"),
            PipelineError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for PipelineError {}

impl From<TextError> for PipelineError {
    fn from(e: TextError) -> Self {
        PipelineError::Text(e)
    }
}

impl From<EncoderError> for PipelineError {
    fn from(e: EncoderError) -> Self {
        PipelineError::Encoder(e)
    }
}

impl From<DsaaError> for PipelineError {
    fn from(e: DsaaError) -> Self {
        PipelineError::Dsaa(e)
    }
}

impl From<NumericsError> for PipelineError {
    fn from(e: NumericsError) -> Self {
        PipelineError::Numerics(e)
    }
}

/// Frozen encoder plus trainable adapters, with the lexicon and the frozen
/// region projection needed to score benchmark records.
#[derive(Debug, Clone)]
pub struct DsaaPipeline {
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub encoder_cfg: EncoderConfig,
    pub encoder: EncoderWeights,
    pub dsaa: DsaaWeights,
    /// `[text_dim, feature_dim]` region feature projection.
    pub projection: Tensor,
    pub enable_apa: bool,
    pub enable_modulator: bool,
}

/// One caption's forward pass at the value level.
#[derive(Debug, Clone)]
pub struct CaptionForward {
    pub tokens: TokenSeq,
    pub spans: AttributeSpanSet,
    pub prefix_rows: usize,
    /// 0-based rows of attribute tokens in the assembled sequence.
    pub attr_rows: Vec<usize>,
    pub result: EncodeResult,
}

/// One caption's forward pass left on a tape for gradient flow.
pub struct TapeForward {
    pub nodes: EncodedNodes,
    pub prefix_rows: usize,
    pub attr_rows: Vec<usize>,
    pub caption_rows: Vec<usize>,
}

impl DsaaPipeline {
    /// Fresh pipeline over a world's vocabulary: frozen random encoder,
    /// identity-initialized adapters, both stages enabled.
    pub fn from_world(
        world: &SyntheticWorld,
        cfg: EncoderConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let vocab = world.vocabulary();
        let mut cfg = cfg;
        cfg.vocab_size = vocab.len();
        cfg.validate()?;
        let encoder = EncoderWeights::init(&cfg, &mut stream(seed, "pipeline.encoder"));
        let dsaa = DsaaWeights::init(cfg.dim, &mut stream(seed, "pipeline.dsaa"));
        Ok(DsaaPipeline {
            vocab,
            lexicon: world.lexicon(),
            encoder_cfg: cfg,
            encoder,
            dsaa,
            projection: world.w_proj.clone(),
            enable_apa: true,
            enable_modulator: true,
        })
    }

    pub fn variant(mut self, enable_apa: bool, enable_modulator: bool) -> Self {
        self.enable_apa = enable_apa;
        self.enable_modulator = enable_modulator;
        self
    }

    /// Tokenizes and grounds lexicon-extracted attribute phrases.
    pub fn annotate(&self, caption: &str) -> Result<(TokenSeq, AttributeSpanSet), PipelineError> {
        let phrases = extract_attributes_lexicon(&self.lexicon, caption);
        self.annotate_with_phrases(caption, &phrases)
    }

    /// Same grounding with phrases from an external extractor.
    pub fn annotate_with_phrases(
        &self,
        caption: &str,
        phrases: &[String],
    ) -> Result<(TokenSeq, AttributeSpanSet), PipelineError> {
        let tokens = tokenize(&self.vocab, caption, self.encoder_cfg.max_len)?;
        let spans = match_spans(&self.vocab, &tokens, phrases);
        if !spans.unmatched.is_empty() {
            log::warn!(
                "{} attribute phrases failed to ground in {caption:?}",
                spans.unmatched.len()
            );
        }
        Ok((tokens, spans))
    }

    pub fn encode_caption(
        &self,
        caption: &str,
        capture_kv: bool,
    ) -> Result<CaptionForward, PipelineError> {
        let (tokens, spans) = self.annotate(caption)?;
        self.encode_annotated(&tokens, &spans, capture_kv)
    }

    pub fn encode_annotated(
        &self,
        tokens: &TokenSeq,
        spans: &AttributeSpanSet,
        capture_kv: bool,
    ) -> Result<CaptionForward, PipelineError> {
        let mut tape = Tape::new();
        let ew = EncoderTapeWeights::register(&mut tape, &self.encoder);
        let dw = DsaaTapeWeights::register(&mut tape, &self.dsaa, false);
        let f = self.forward_on_tape(&mut tape, &ew, &dw, tokens, spans, capture_kv)?;
        Ok(CaptionForward {
            tokens: tokens.clone(),
            spans: spans.clone(),
            prefix_rows: f.prefix_rows,
            attr_rows: f.attr_rows,
            result: EncodeResult {
                hidden: tape.value_tensor(f.nodes.hidden),
                pooled: tape.value_tensor(f.nodes.pooled),
                per_layer_kv: f.nodes.per_layer_kv,
            },
        })
    }

    /// Assembles the input and runs the encoder with both adapter stages
    /// wired in, leaving every node on the caller's tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        ew: &EncoderTapeWeights,
        dw: &DsaaTapeWeights,
        tokens: &TokenSeq,
        spans: &AttributeSpanSet,
        capture_kv: bool,
    ) -> Result<TapeForward, PipelineError> {
        let embeds = embed(&self.encoder, tokens)?;
        let l = tokens.len();
        let grounded = !spans.is_empty();

        let prefix = if self.enable_apa && grounded {
            build_prefixes_on_tape(tape, &dw.apa, &embeds, spans)?
        } else {
            None
        };
        let k = prefix.map(|p| tape.shape(p)[0]).unwrap_or(0);

        let embeds_node = tape.constant(&embeds);
        let input = match prefix {
            Some(p) => tape.concat_rows(&[p, embeds_node])?,
            None => embeds_node,
        };

        let caption_rows: Vec<usize> = (k..k + l).collect();
        let attr_rows: Vec<usize> = spans
            .attr_indices()
            .iter()
            .map(|&idx| k + idx - 1)
            .collect();

        let (scales, modulation_rows) = if self.enable_modulator && grounded {
            let c = condition_vector_on_tape(tape, embeds_node, spans)?;
            let pair = modulation_scales_on_tape(tape, &dw.modulator, c)?;
            let mut rows = attr_rows.clone();
            if self.encoder_cfg.modulate_prefixes {
                let mut with_prefixes: Vec<usize> = (0..k).collect();
                with_prefixes.extend(rows);
                rows = with_prefixes;
            }
            (Some(pair), rows)
        } else {
            (None, Vec::new())
        };

        let nodes = encode_on_tape(
            tape,
            ew,
            &self.encoder_cfg,
            input,
            &caption_rows,
            &modulation_rows,
            scales,
            capture_kv,
        )?;
        Ok(TapeForward {
            nodes,
            prefix_rows: k,
            attr_rows,
            caption_rows,
        })
    }

    /// Plain encoder run with no adapter machinery on the path; the
    /// reference for fallback comparisons.
    pub fn encode_baseline(&self, caption: &str) -> Result<EncodeResult, PipelineError> {
        let tokens = tokenize(&self.vocab, caption, self.encoder_cfg.max_len)?;
        let embeds = embed(&self.encoder, &tokens)?;
        let caption_rows: Vec<usize> = (0..tokens.len()).collect();
        Ok(encode(
            &self.encoder,
            &self.encoder_cfg,
            &embeds,
            &caption_rows,
            &[],
            None,
            false,
        )?)
    }

    pub fn caption_embedding(&self, caption: &str) -> Result<Tensor, PipelineError> {
        Ok(self.encode_caption(caption, false)?.result.pooled)
    }

    /// Region feature into text space through the frozen projection.
    pub fn project_region(&self, feature: &Tensor) -> Tensor {
        let (rows, cols) = (self.projection.rows(), self.projection.cols());
        let mut out = alloc::vec![0.0; rows];
        for (i, slot) in out.iter_mut().enumerate() {
            let row = self.projection.row(i);
            *slot = row
                .iter()
                .zip(feature.data())
                .take(cols)
                .map(|(a, b)| a * b)
                .sum();
        }
        Tensor::new(alloc::vec![rows], out).expect("shape matches data")
    }

}

impl RecordScorer for DsaaPipeline {
    fn score_record(&self, record: &SceneRecord) -> Result<Tensor, EvalError> {
        let mut caption_embeds = Vec::with_capacity(1 + record.caption.negatives.len());
        let all = core::iter::once(&record.caption.positive).chain(record.caption.negatives.iter());
        for caption in all {
            let pooled = self
                .caption_embedding(caption)
                .map_err(|e| EvalError::Scorer {
                    detail: format!("{e}"),
                })?;
            caption_embeds.push(pooled);
        }
        let region_feats: Vec<Tensor> = record
            .proposals
            .iter()
            .map(|p| self.project_region(&p.feature))
            .collect();
        score_regions(&region_feats, &caption_embeds)
    }
}

impl PromptEmbedder for DsaaPipeline {
    fn embed_prompt(&self, prompt: &str) -> Result<Tensor, AnalysisError> {
        self.caption_embedding(prompt)
            .map_err(|e| AnalysisError::Embed {
                detail: e.to_string(),
            })
    }
}

impl RecordEmbedder for DsaaPipeline {
    fn embed_record(&self, record: &SceneRecord) -> Result<RecordEmbedding, AnalysisError> {
        let to_err = |e: PipelineError| AnalysisError::Embed {
            detail: e.to_string(),
        };
        let target = self.project_region(&record.instances[record.target].feature);
        let positive = self
            .caption_embedding(&record.caption.positive)
            .map_err(to_err)?;
        let negatives = record
            .caption
            .negatives
            .iter()
            .map(|c| self.caption_embedding(c).map_err(to_err))
            .collect::<Result<Vec<Tensor>, AnalysisError>>()?;
        Ok(RecordEmbedding {
            target,
            positive,
            negatives,
        })
    }
}
