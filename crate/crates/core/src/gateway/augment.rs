use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::transport::parse_string_array;
use super::{ChatRequest, GatewayConfig, GatewayError, Transport, AUGMENT_PROMPT};

/// Pairs per augmentation request.
pub const AUGMENT_BATCH: usize = 10;
const MIN_WORDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentItem {
    pub id: String,
    pub text: String,
    pub ocr_text: String,
}

/// A merge that failed validation twice and was replaced by plain concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedAugmentation {
    pub id: String,
    pub reason: String,
    pub fallback: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentResult {
    /// `(id, merged text)` in input order.
    pub texts: Vec<(String, String)>,
    pub rejected: Vec<RejectedAugmentation>,
}

pub fn concat_fallback(text: &str, ocr_text: &str) -> String {
    format!("{} {}", text.trim(), ocr_text.trim()).trim().to_owned()
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[^\[\]]*\]").expect("valid regex"))
}

/// Why a merged text is unacceptable, if it is.
pub fn check_augmented(text: &str) -> Option<String> {
    let words = text.split_whitespace().count();
    if words < MIN_WORDS {
        return Some(format!("only {words} words"));
    }
    if let Some(m) = bracket_re().find(text) {
        return Some(format!("bracketed token {}", m.as_str()));
    }
    if let Some(tag) = text.split_whitespace().find(|w| w.starts_with('#')) {
        return Some(format!("hashtag {tag}"));
    }
    None
}

fn request(batch: &[AugmentItem], cfg: &GatewayConfig) -> Result<ChatRequest, GatewayError> {
    let pairs: Vec<_> = (0..AUGMENT_BATCH)
        .map(|i| match batch.get(i) {
            Some(it) => json!({"index": i + 1, "text": it.text, "ocr_text": it.ocr_text}),
            None => json!({"index": i + 1, "text": "", "ocr_text": ""}),
        })
        .collect();
    let payload = json!({ "pairs": pairs }).to_string();
    ChatRequest::new(
        AUGMENT_PROMPT,
        payload,
        &cfg.model_name,
        cfg.temperature,
        cfg.max_output_tokens,
    )
}

/// Returns per-slot merged text, or the reason the slot is unusable.
fn attempt(
    batch: &[AugmentItem],
    transport: &dyn Transport,
    cfg: &GatewayConfig,
) -> Result<Vec<Result<String, String>>, GatewayError> {
    let reply = transport.send(&request(batch, cfg)?)?;
    let merged = parse_string_array(&reply);
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, _)| match merged.as_ref().and_then(|m| m.get(i)) {
            None => Err("response did not contain a text for this pair".to_owned()),
            Some(t) => match check_augmented(t) {
                Some(reason) => Err(reason),
                None => Ok(t.trim().to_owned()),
            },
        })
        .collect())
}

/// Merges up to ten `(text, ocr_text)` pairs in one request. Short batches are
/// padded with empty pairs whose outputs are discarded. Any invalid merge
/// triggers one retry of the batch; still-invalid merges fall back to
/// concatenation and are reported.
pub fn augment_batch(
    batch: &[AugmentItem],
    transport: &dyn Transport,
    cfg: &GatewayConfig,
) -> Result<AugmentResult, GatewayError> {
    if batch.is_empty() || batch.len() > AUGMENT_BATCH {
        return Err(GatewayError::InvalidRequest(format!(
            "augmentation batch must hold 1..={AUGMENT_BATCH} pairs, got {}",
            batch.len()
        )));
    }
    let mut slots = attempt(batch, transport, cfg)?;
    if slots.iter().any(Result::is_err) {
        let retry = attempt(batch, transport, cfg)?;
        for (slot, again) in slots.iter_mut().zip(retry) {
            if slot.is_err() {
                *slot = again;
            }
        }
    }
    let mut out = AugmentResult::default();
    for (item, slot) in batch.iter().zip(slots) {
        match slot {
            Ok(t) => out.texts.push((item.id.clone(), t)),
            Err(reason) => {
                let fallback = concat_fallback(&item.text, &item.ocr_text);
                out.rejected.push(RejectedAugmentation {
                    id: item.id.clone(),
                    reason,
                    fallback: fallback.clone(),
                });
                out.texts.push((item.id.clone(), fallback));
            }
        }
    }
    Ok(out)
}

/// Augments every item, ten at a time.
pub fn augment_posts(
    items: &[AugmentItem],
    transport: &dyn Transport,
    cfg: &GatewayConfig,
) -> Result<AugmentResult, GatewayError> {
    let mut out = AugmentResult::default();
    for chunk in items.chunks(AUGMENT_BATCH) {
        let r = augment_batch(chunk, transport, cfg)?;
        out.texts.extend(r.texts);
        out.rejected.extend(r.rejected);
    }
    Ok(out)
}
