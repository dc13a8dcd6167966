//! Remote attribute extraction client.
//!
//! Wire protocol: POST {"prompt", "caption"} to the endpoint, expect
//! {"attributes": [...]} back. Any transport failure is retried; a served
//! but unusable answer (non-200 or unparsable) is not. Every failure path
//! falls back to the lexicon, flagged.

use std::time::Duration;

use dsaa_core::text::{
    extract_attributes_lexicon, split_words, ExtractionConfig, ExtractionMode,
};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub phrases: Vec<String>,
    pub fallback: bool,
}

#[derive(Deserialize)]
struct RemoteAnswer {
    attributes: Vec<String>,
}

/// A phrase survives validation only when it occurs verbatim in the
/// caption as a contiguous whole-word run.
fn occurs_verbatim(caption_words: &[String], phrase: &str) -> bool {
    let pw = split_words(phrase);
    if pw.is_empty() || pw.len() > caption_words.len() {
        return false;
    }
    caption_words.windows(pw.len()).any(|w| w == pw.as_slice())
}

fn validated(caption: &str, raw: Vec<String>) -> Vec<String> {
    let words = split_words(caption);
    let mut out: Vec<String> = Vec::new();
    let mut dropped = 0usize;
    for phrase in raw {
        if occurs_verbatim(&words, &phrase) {
            if !out.contains(&phrase) {
                out.push(phrase);
            }
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} extracted phrases absent from the caption");
    }
    out
}

fn request(cfg: &ExtractionConfig, caption: &str) -> Result<Vec<String>, String> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .build();
    let prompt = cfg.prompt_template.replace("{caption}", caption);
    let body = serde_json::json!({ "prompt": prompt, "caption": caption });
    let mut attempt = 0u32;
    loop {
        match agent.post(&cfg.endpoint).send_json(body.clone()) {
            Ok(resp) => {
                return resp
                    .into_json::<RemoteAnswer>()
                    .map(|a| a.attributes)
                    .map_err(|e| format!("unparsable response: {e}"));
            }
            Err(ureq::Error::Status(code, _)) => {
                return Err(format!("endpoint answered status {code}"));
            }
            Err(ureq::Error::Transport(t)) => {
                if attempt >= cfg.retries {
                    return Err(format!("transport failure after {} attempts: {t}", attempt + 1));
                }
                attempt += 1;
            }
        }
    }
}

/// Extracts attribute phrases for one caption under the configured mode.
pub fn extract(cfg: &ExtractionConfig, caption: &str) -> Extraction {
    if cfg.mode == ExtractionMode::Lexicon {
        return Extraction {
            phrases: extract_attributes_lexicon(&cfg.lexicon, caption),
            fallback: false,
        };
    }
    match request(cfg, caption) {
        Ok(raw) => Extraction {
            phrases: validated(caption, raw),
            fallback: false,
        },
        Err(why) => {
            log::warn!("remote extraction failed ({why}); using the lexicon");
            Extraction {
                phrases: extract_attributes_lexicon(&cfg.lexicon, caption),
                fallback: true,
            }
        }
    }
}
