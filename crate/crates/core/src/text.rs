//! Caption tokenization and attribute span grounding.
//!
//! Captions are lowercased, split on whitespace and punctuation, then
//! segmented greedy-longest-match against the vocabulary with the `##`
//! continuation convention. Extracted attribute phrases are located as
//! contiguous token subsequences; overlaps resolve earliest-start-first,
//! then longest, then input order.
//!
//! Span positions are 1-based over the caption's tokens throughout this
//! module; the encoder input offsets them by the prefix count.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tokenization and extraction configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum TextError {
    /// Token count would exceed the configured maximum sequence length.
    TooLong { tokens: usize, limit: usize },
    /// Remote extraction selected without an endpoint.
    MissingEndpoint,
    /// Vocabulary construction saw a duplicate token.
    DuplicateToken { token: String },
}

impl core::fmt::Display for TextError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TextError::TooLong { tokens, limit } => {
                write!(f, "caption tokenizes to {tokens} tokens, limit is {limit}")
            }
            TextError::MissingEndpoint => {
                write!(f, "remote extraction requires a non-empty endpoint")
            }
            TextError::DuplicateToken { token } => {
                write!(f, "duplicate vocabulary token {token:?}")
            }
        }
    }
}

impl core::error::Error for TextError {}

/// Token/id mapping with reserved special ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const START: &str = "[CLS]";
pub const END: &str = "[SEP]";

impl Vocabulary {
    /// Builds a vocabulary with the four specials at ids 0..4 followed by the
    /// given tokens in order. Duplicates are rejected.
    pub fn new<I>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator,
        I::Item: Into<String>,
    {
        let mut id_to_token: Vec<String> = [PAD, UNK, START, END]
            .iter()
            .map(|s| (*s).to_owned())
            .collect();
        for t in tokens {
            id_to_token.push(t.into());
        }
        let mut token_to_id = BTreeMap::new();
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(TextError::DuplicateToken { token: t.clone() });
            }
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn start_id(&self) -> usize {
        2
    }

    pub fn end_id(&self) -> usize {
        3
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }
}

/// Tokenized caption: parallel ids and surface strings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub surfaces: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases and splits on whitespace; punctuation characters split off as
/// their own words. Shared by the tokenizer and the lexicon matcher so both
/// agree on word boundaries.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(core::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                words.push(core::mem::take(&mut cur));
            }
            let mut p = String::new();
            p.push(ch);
            words.push(p);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Greedy longest-match segmentation of one word into vocabulary pieces.
/// When no piece matches the remaining suffix, the remainder becomes a
/// single unknown token.
fn segment_word(vocab: &Vocabulary, word: &str, ids: &mut Vec<usize>, surfaces: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let mut pos = 0;
    let mut first = true;
    while pos < chars.len() {
        let mut matched = None;
        for end in (pos + 1..=chars.len()).rev() {
            let piece: String = chars[pos..end].iter().collect();
            let key = if first {
                piece
            } else {
                let mut k = String::from("##");
                k.push_str(&piece);
                k
            };
            if let Some(id) = vocab.id(&key) {
                matched = Some((id, key, end));
                break;
            }
        }
        match matched {
            Some((id, key, end)) => {
                ids.push(id);
                surfaces.push(key);
                pos = end;
                first = false;
            }
            None => {
                ids.push(vocab.unk_id());
                surfaces.push(UNK.to_owned());
                return;
            }
        }
    }
}

/// Tokenizes a caption. Deterministic; empty input yields zero tokens.
/// Exceeding `max_len` is an error rather than silent truncation.
pub fn tokenize(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<TokenSeq, TextError> {
    let mut ids = Vec::new();
    let mut surfaces = Vec::new();
    for word in split_words(text) {
        segment_word(vocab, &word, &mut ids, &mut surfaces);
    }
    if ids.len() > max_len {
        return Err(TextError::TooLong {
            tokens: ids.len(),
            limit: max_len,
        });
    }
    Ok(TokenSeq { ids, surfaces })
}

/// Attribute type taxonomy for the lexicon and the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttrCategory {
    Color,
    Material,
    Pattern,
    Transparency,
}

impl AttrCategory {
    pub const ALL: [AttrCategory; 4] = [
        AttrCategory::Color,
        AttrCategory::Material,
        AttrCategory::Pattern,
        AttrCategory::Transparency,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttrCategory::Color => "color",
            AttrCategory::Material => "material",
            AttrCategory::Pattern => "pattern",
            AttrCategory::Transparency => "transparency",
        }
    }
}

impl core::fmt::Display for AttrCategory {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered category -> phrase lists. Iteration order is the declaration
/// order, which also resolves cross-category ties during extraction.
#[derive(Debug, Clone, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lexicon {
    pub entries: Vec<(AttrCategory, Vec<String>)>,
}

impl Lexicon {
    pub fn phrases(&self) -> impl Iterator<Item = (&AttrCategory, &String)> {
        self.entries
            .iter()
            .flat_map(|(c, ps)| ps.iter().map(move |p| (c, p)))
    }

    pub fn category_of(&self, phrase: &str) -> Option<AttrCategory> {
        self.phrases()
            .find(|(_, p)| p.as_str() == phrase)
            .map(|(c, _)| *c)
    }
}

/// How attribute phrases are obtained from captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ExtractionMode {
    Lexicon,
    Remote,
}

/// Extraction settings; the remote client itself lives in the companion
/// crate, the fallback path is [`extract_attributes_lexicon`].
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExtractionConfig {
    pub mode: ExtractionMode,
    pub lexicon: Lexicon,
    pub endpoint: String,
    /// Template with a `{caption}` placeholder.
    pub prompt_template: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl ExtractionConfig {
    pub fn lexicon_only(lexicon: Lexicon) -> Self {
        ExtractionConfig {
            mode: ExtractionMode::Lexicon,
            lexicon,
            endpoint: String::new(),
            prompt_template: String::from(
                "List the attribute phrases in this caption: {caption}",
            ),
            timeout_ms: 2000,
            retries: 2,
        }
    }

    pub fn validate(&self) -> Result<(), TextError> {
        if self.mode == ExtractionMode::Remote && self.endpoint.is_empty() {
            return Err(TextError::MissingEndpoint);
        }
        Ok(())
    }
}

/// Returns every lexicon phrase occurring as a whole-word subsequence of the
/// caption: longest match first at each position, no overlaps, output in
/// caption order with duplicates collapsed to the first occurrence.
pub fn extract_attributes_lexicon(lexicon: &Lexicon, caption: &str) -> Vec<String> {
    let words = split_words(caption);
    // (phrase words, original phrase, lexicon order) sorted longest first,
    // stable in lexicon order within a length.
    let mut patterns: Vec<(Vec<String>, &String)> = Vec::new();
    for (_, phrase) in lexicon.phrases() {
        let pw = split_words(phrase);
        if !pw.is_empty() {
            patterns.push((pw, phrase));
        }
    }
    patterns.sort_by_key(|p| core::cmp::Reverse(p.0.len()));

    let mut found: Vec<String> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut advanced = false;
        for (pw, phrase) in &patterns {
            if i + pw.len() <= words.len() && words[i..i + pw.len()] == pw[..] {
                if !found.iter().any(|f| f == *phrase) {
                    found.push((*phrase).clone());
                }
                i += pw.len();
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    found
}

/// One grounded attribute phrase: contiguous 1-based token positions.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttrSpan {
    pub phrase: String,
    /// 1-based, sorted, contiguous.
    pub token_indices: Vec<usize>,
}

/// Span set for one caption plus the phrases that failed to ground.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSpanSet {
    pub spans: Vec<AttrSpan>,
    pub unmatched: Vec<String>,
}

impl AttributeSpanSet {
    /// Union of all span positions, 1-based, sorted, deduplicated.
    pub fn attr_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .spans
            .iter()
            .flat_map(|s| s.token_indices.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Grounds phrases as contiguous token-id subsequences of the caption.
///
/// Every occurrence of every phrase becomes a candidate span; overlaps are
/// resolved earliest start first, then longest, then first phrase in input
/// order. Phrases with no surviving occurrence are reported in `unmatched`.
pub fn match_spans(vocab: &Vocabulary, tokens: &TokenSeq, phrases: &[String]) -> AttributeSpanSet {
    struct Candidate {
        start: usize, // 0-based
        len: usize,
        phrase_idx: usize,
    }
    let mut candidates: Vec<Candidate> = Vec::new();
    for (pi, phrase) in phrases.iter().enumerate() {
        let ptoks = match tokenize(vocab, phrase, usize::MAX) {
            Ok(t) => t,
            Err(_) => continue,
        };
        if ptoks.is_empty() || ptoks.len() > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - ptoks.len() {
            if tokens.ids[start..start + ptoks.len()] == ptoks.ids[..] {
                candidates.push(Candidate {
                    start,
                    len: ptoks.len(),
                    phrase_idx: pi,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(b.len.cmp(&a.len))
            .then(a.phrase_idx.cmp(&b.phrase_idx))
    });

    let mut taken = alloc::vec![false; tokens.len()];
    let mut spans: Vec<AttrSpan> = Vec::new();
    let mut matched = alloc::vec![false; phrases.len()];
    for c in &candidates {
        if (c.start..c.start + c.len).any(|i| taken[i]) {
            continue;
        }
        taken[c.start..c.start + c.len].iter_mut().for_each(|t| *t = true);
        matched[c.phrase_idx] = true;
        spans.push(AttrSpan {
            phrase: phrases[c.phrase_idx].clone(),
            token_indices: (c.start + 1..=c.start + c.len).collect(),
        });
    }
    spans.sort_by_key(|s| s.token_indices[0]);
    let unmatched = phrases
        .iter()
        .enumerate()
        .filter(|(i, _)| !matched[*i])
        .map(|(_, p)| p.clone())
        .collect();
    AttributeSpanSet { spans, unmatched }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn vocab() -> Vocabulary {
        Vocabulary::new([
            "a", "red", "dark", "leather", "chair", "car", "mug", "crim", "##son", "blue",
        ])
        .unwrap()
    }

    fn lexicon() -> Lexicon {
        Lexicon {
            entries: vec![
                (
                    AttrCategory::Color,
                    vec!["dark red".to_string(), "red".to_string(), "blue".to_string()],
                ),
                (AttrCategory::Material, vec!["leather".to_string()]),
            ],
        }
    }

    #[test]
    fn specials_are_distinct() {
        let v = vocab();
        let ids = [v.pad_id(), v.unk_id(), v.start_id(), v.end_id()];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(ids[i], ids[j]);
            }
        }
    }

    #[test]
    fn tokenize_simple_caption() {
        let t = tokenize(&vocab(), "red car", 32).unwrap();
        assert_eq!(t.surfaces, vec!["red", "car"]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn tokenize_empty_is_empty() {
        let t = tokenize(&vocab(), "", 32).unwrap();
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn tokenize_subword_continuation() {
        let t = tokenize(&vocab(), "Crimson", 32).unwrap();
        assert_eq!(t.surfaces, vec!["crim", "##son"]);
    }

    #[test]
    fn tokenize_unknown_word_maps_to_unk() {
        let v = vocab();
        let t = tokenize(&v, "zzz red", 32).unwrap();
        assert_eq!(t.ids[0], v.unk_id());
        assert_eq!(t.surfaces[1], "red");
    }

    #[test]
    fn tokenize_rejects_overlong_input() {
        let err = tokenize(&vocab(), "red red red red", 3).unwrap_err();
        assert_eq!(
            err,
            TextError::TooLong {
                tokens: 4,
                limit: 3
            }
        );
    }

    #[test]
    fn tokenize_is_deterministic() {
        let a = tokenize(&vocab(), "a Dark red, chair", 32).unwrap();
        let b = tokenize(&vocab(), "a Dark red, chair", 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extraction_prefers_longest_match() {
        let got = extract_attributes_lexicon(&lexicon(), "a dark red mug");
        assert_eq!(got, vec!["dark red"]);
    }

    #[test]
    fn extraction_in_caption_order_no_overlap() {
        let got = extract_attributes_lexicon(&lexicon(), "a red leather chair");
        assert_eq!(got, vec!["red", "leather"]);
    }

    #[test]
    fn extraction_requires_whole_words() {
        let got = extract_attributes_lexicon(&lexicon(), "a redcar");
        assert!(got.is_empty());
    }

    #[test]
    fn spans_basic_grounding() {
        let v = vocab();
        let toks = tokenize(&v, "a red leather chair", 32).unwrap();
        let set = match_spans(&v, &toks, &["red".to_string(), "leather".to_string()]);
        assert_eq!(set.spans.len(), 2);
        assert_eq!(set.spans[0].phrase, "red");
        assert_eq!(set.spans[0].token_indices, vec![2]);
        assert_eq!(set.spans[1].token_indices, vec![3]);
        assert_eq!(set.attr_indices(), vec![2, 3]);
        assert!(set.unmatched.is_empty());
    }

    #[test]
    fn spans_multi_token_phrase() {
        let v = vocab();
        let toks = tokenize(&v, "a dark red car", 32).unwrap();
        let set = match_spans(&v, &toks, &["dark red".to_string()]);
        assert_eq!(set.spans[0].token_indices, vec![2, 3]);
    }

    #[test]
    fn spans_overlap_resolution_earliest_then_longest() {
        let v = vocab();
        let toks = tokenize(&v, "a dark red car", 32).unwrap();
        let set = match_spans(&v, &toks, &["red".to_string(), "dark red".to_string()]);
        assert_eq!(set.spans.len(), 1);
        assert_eq!(set.spans[0].phrase, "dark red");
        assert_eq!(set.spans[0].token_indices, vec![2, 3]);
        assert_eq!(set.unmatched, vec!["red".to_string()]);
    }

    #[test]
    fn spans_every_occurrence_recorded() {
        let v = vocab();
        let toks = tokenize(&v, "red chair red mug", 32).unwrap();
        let set = match_spans(&v, &toks, &["red".to_string()]);
        assert_eq!(set.spans.len(), 2);
        assert_eq!(set.spans[0].token_indices, vec![1]);
        assert_eq!(set.spans[1].token_indices, vec![3]);
    }

    #[test]
    fn spans_unmatched_phrase_reported() {
        let v = vocab();
        let toks = tokenize(&v, "a red chair", 32).unwrap();
        let set = match_spans(&v, &toks, &["blue".to_string()]);
        assert!(set.spans.is_empty());
        assert_eq!(set.unmatched, vec!["blue".to_string()]);
    }

    #[test]
    fn span_roundtrip_surfaces() {
        let v = vocab();
        let toks = tokenize(&v, "a crimson chair", 32).unwrap();
        let set = match_spans(&v, &toks, &["crimson".to_string()]);
        assert_eq!(set.spans.len(), 1);
        let surfaces: Vec<&str> = set.spans[0]
            .token_indices
            .iter()
            .map(|&i| toks.surfaces[i - 1].as_str())
            .collect();
        assert_eq!(surfaces, vec!["crim", "##son"]);
        let phrase_toks = tokenize(&v, "crimson", 32).unwrap();
        assert_eq!(phrase_toks.surfaces, surfaces);
    }

    #[test]
    fn remote_mode_requires_endpoint() {
        let mut cfg = ExtractionConfig::lexicon_only(lexicon());
        cfg.mode = ExtractionMode::Remote;
        assert_eq!(cfg.validate(), Err(TextError::MissingEndpoint));
        cfg.endpoint = "http://127.0.0.1:9/extract".to_string();
        assert!(cfg.validate().is_ok());
    }
}
