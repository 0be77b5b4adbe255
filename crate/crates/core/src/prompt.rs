//! Contextual-prompt extraction and the diffusion-side text encoder.
//!
//! A context extractor looks at an in-distribution image and names the
//! elements around the main object ("bamboo", "railing", ...); those
//! elements condition the inpainting model. The stub backend replays a
//! fixture table; the external backend asks a multimodal service with a
//! single request/response exchange (plain-text comma-separated answer,
//! 60 s timeout, no retries) and can be replayed from recorded transcripts.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use crate::diffusion::PromptFeatures;
use crate::error::{Error, Result};
use crate::seeding::module_rng;

pub const DEFAULT_INSTRUCTION: &str =
    "List the background objects in this image, excluding the main subject, as a comma-separated list.";

pub const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    Stub,
    External,
}

/// Context elements extracted for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPrompt {
    pub image_id: String,
    pub elements: Vec<String>,
    pub source: PromptSource,
}

/// Identity of the image being described.
#[derive(Debug, Clone, Copy)]
pub struct ImageMeta<'a> {
    pub id: &'a str,
    pub ind_label: &'a str,
}

/// Backend that produces raw element lists.
pub trait ContextExtractor: Send + Sync {
    fn elements(&self, image_id: &str, instruction: &str) -> Result<Vec<String>>;
    fn source(&self) -> PromptSource;
}

/// Extract context elements, filtering the main-object label out
/// case-insensitively. Errors if nothing but the main object came back.
pub fn extract_context(
    meta: ImageMeta<'_>,
    instruction: &str,
    backend: &dyn ContextExtractor,
) -> Result<ContextPrompt> {
    let raw = backend.elements(meta.id, instruction)?;
    let label = meta.ind_label.to_lowercase();
    let elements: Vec<String> = raw
        .into_iter()
        .filter(|e| e.to_lowercase() != label)
        .collect();
    if elements.is_empty() {
        return Err(Error::EmptyContext(meta.id.to_string()));
    }
    Ok(ContextPrompt {
        image_id: meta.id.to_string(),
        elements,
        source: backend.source(),
    })
}

/// Fixture-table extractor: a pure function of `(image_id, table)`.
#[derive(Debug, Clone, Default)]
pub struct StubExtractor {
    table: BTreeMap<String, Vec<String>>,
}

impl StubExtractor {
    pub fn new(table: BTreeMap<String, Vec<String>>) -> Self {
        StubExtractor { table }
    }

    pub fn from_fixture_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(StubExtractor {
            table: serde_json::from_str(&text)?,
        })
    }
}

impl ContextExtractor for StubExtractor {
    fn elements(&self, image_id: &str, _instruction: &str) -> Result<Vec<String>> {
        self.table
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::BackendUnavailable(format!("no fixture entry for `{image_id}`")))
    }

    fn source(&self) -> PromptSource {
        PromptSource::Stub
    }
}

/// One-shot request transport behind the external extractor.
pub trait Transport: Send + Sync {
    /// Sends a JSON request body, returns the service's plain-text answer.
    fn request(&self, body: &str) -> Result<String>;
}

/// HTTP POST transport for live services.
pub struct HttpTransport {
    pub endpoint: String,
}

impl Transport for HttpTransport {
    fn request(&self, body: &str) -> Result<String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(EXTERNAL_TIMEOUT)
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        let response = client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::BackendUnavailable(format!(
                "service returned {}",
                response.status()
            )));
        }
        response
            .text()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))
    }
}

/// Replays answers recorded from a real service, keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    transcript: BTreeMap<String, String>,
}

impl ReplayTransport {
    pub fn new(transcript: BTreeMap<String, String>) -> Self {
        ReplayTransport { transcript }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(ReplayTransport {
            transcript: serde_json::from_str(&text)?,
        })
    }
}

impl Transport for ReplayTransport {
    fn request(&self, body: &str) -> Result<String> {
        let parsed: serde_json::Value = serde_json::from_str(body)?;
        let id = parsed["image_id"]
            .as_str()
            .ok_or_else(|| Error::BackendUnavailable("request body missing image_id".into()))?;
        self.transcript
            .get(id)
            .cloned()
            .ok_or_else(|| Error::BackendUnavailable(format!("no transcript entry for `{id}`")))
    }
}

/// External service client: one request per image, comma-separated answer.
pub struct ExternalExtractor<T: Transport> {
    transport: T,
}

impl<T: Transport> ExternalExtractor<T> {
    pub fn new(transport: T) -> Self {
        ExternalExtractor { transport }
    }
}

impl<T: Transport> ContextExtractor for ExternalExtractor<T> {
    fn elements(&self, image_id: &str, instruction: &str) -> Result<Vec<String>> {
        let body = serde_json::json!({
            "image_id": image_id,
            "instruction": instruction,
        })
        .to_string();
        let answer = self.transport.request(&body)?;
        Ok(parse_element_list(&answer))
    }

    fn source(&self) -> PromptSource {
        PromptSource::External
    }
}

/// Split a comma-separated answer into trimmed, non-empty elements.
pub fn parse_element_list(answer: &str) -> Vec<String> {
    answer
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Diffusion-side text encoder: a fixed random embedding per vocabulary
/// token, mean-pooled over the prompt's elements, so features are invariant
/// to element order.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    table: BTreeMap<String, Array1<f64>>,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, vocabulary: impl IntoIterator<Item = String>, seed: u64) -> Self {
        let vocab: BTreeSet<String> = vocabulary.into_iter().collect();
        let table = vocab
            .into_iter()
            .map(|token| {
                let mut rng = module_rng(seed, &format!("psi-token-{token}"));
                let v = crate::nn::randn1(dim, 1.0, &mut rng);
                let norm = v.dot(&v).sqrt();
                (token, v / norm)
            })
            .collect();
        ToyTextEncoder { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Encode a context prompt into diffusion conditioning features.
pub fn encode_prompt(prompt: &ContextPrompt, encoder: &ToyTextEncoder) -> Result<PromptFeatures> {
    if prompt.elements.is_empty() {
        return Err(Error::EmptyContext(prompt.image_id.clone()));
    }
    let mut acc = Array1::zeros(encoder.dim);
    for element in &prompt.elements {
        let token = encoder
            .table
            .get(element.to_lowercase().as_str())
            .ok_or_else(|| Error::UnknownToken(element.clone()))?;
        acc = acc + token;
    }
    acc /= prompt.elements.len() as f64;
    // Quantize so archived prompt features round-trip bit-exactly.
    Ok(PromptFeatures::new(acc.mapv(|v| v as f32 as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> StubExtractor {
        let mut table = BTreeMap::new();
        table.insert(
            "img_7".to_string(),
            vec!["bamboo".to_string(), "railing".to_string()],
        );
        table.insert("panda_1".to_string(), vec!["panda".to_string()]);
        StubExtractor::new(table)
    }

    #[test]
    fn stub_fixture_returns_elements() {
        let prompt = extract_context(
            ImageMeta {
                id: "img_7",
                ind_label: "panda",
            },
            DEFAULT_INSTRUCTION,
            &stub(),
        )
        .unwrap();
        assert_eq!(prompt.elements, vec!["bamboo", "railing"]);
        assert_eq!(prompt.source, PromptSource::Stub);
    }

    #[test]
    fn main_object_only_is_empty_context() {
        let err = extract_context(
            ImageMeta {
                id: "panda_1",
                ind_label: "Panda",
            },
            DEFAULT_INSTRUCTION,
            &stub(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyContext(_)));
    }

    #[test]
    fn golden_transcript_round_trip() {
        let mut transcript = BTreeMap::new();
        transcript.insert(
            "img_9".to_string(),
            "bamboo, tourist, leaf, railing".to_string(),
        );
        let backend = ExternalExtractor::new(ReplayTransport::new(transcript));
        let prompt = extract_context(
            ImageMeta {
                id: "img_9",
                ind_label: "panda",
            },
            DEFAULT_INSTRUCTION,
            &backend,
        )
        .unwrap();
        assert_eq!(prompt.elements, vec!["bamboo", "tourist", "leaf", "railing"]);
        assert_eq!(prompt.source, PromptSource::External);
    }

    #[test]
    fn element_parsing_trims_and_drops_empties() {
        assert_eq!(
            parse_element_list(" a , b,, c ,"),
            vec!["a".to_string(), "b".to_string(), "c".to_string()]
        );
    }

    fn encoder() -> ToyTextEncoder {
        ToyTextEncoder::new(
            8,
            ["bamboo", "leaf", "railing"].iter().map(|s| s.to_string()),
            5,
        )
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = ContextPrompt {
            image_id: "x".into(),
            elements: vec!["bamboo".into()],
            source: PromptSource::Stub,
        };
        let a = encode_prompt(&p, &encoder()).unwrap();
        let b = encode_prompt(&p, &encoder()).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn encoding_is_order_invariant() {
        let mk = |elements: Vec<String>| ContextPrompt {
            image_id: "x".into(),
            elements,
            source: PromptSource::Stub,
        };
        let a = encode_prompt(&mk(vec!["bamboo".into(), "leaf".into()]), &encoder()).unwrap();
        let b = encode_prompt(&mk(vec!["leaf".into(), "bamboo".into()]), &encoder()).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn unknown_token_rejected() {
        let p = ContextPrompt {
            image_id: "x".into(),
            elements: vec!["zeppelin".into()],
            source: PromptSource::Stub,
        };
        let err = encode_prompt(&p, &encoder()).unwrap_err();
        assert!(matches!(err, Error::UnknownToken(t) if t == "zeppelin"));
    }
}
