//! Similarity providers: local token-level measures and a remote scoring
//! service. Every provider returns scores in `[0, 1]` with `sim(a, a) = 1`.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{TokenId, Vocab};

pub use crate::trace::MaskRendering;

/// Route appended to a remote endpoint that does not already name it.
pub const SIMILARITY_ROUTE: &str = "/v1/similarity";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("remote similarity failed for {failed_pairs} pairs: {message}")]
    Remote { failed_pairs: usize, message: String },
    #[error("precomputed similarities are read from traces, not scored on demand")]
    PrecomputedOnly,
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    ExactMatch,
    TokenLevenshtein,
    TokenLcs,
    Precomputed,
    Remote,
}

/// Provider settings as they appear in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Base URL of the remote service.
    pub endpoint: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubled on each further attempt.
    pub backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::TokenLcs,
            endpoint: None,
            batch_size: 32,
            timeout_secs: 30.0,
            retries: 3,
            max_in_flight: 4,
            backoff_ms: 250,
        }
    }
}

/// One side of a similarity comparison: token ids plus rendered text.
/// Token-level providers read `tokens`; the remote provider reads `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

impl Utterance {
    pub fn render(vocab: &Vocab, tokens: &[TokenId], masks: MaskRendering) -> Self {
        let tokens: Vec<TokenId> = match masks {
            MaskRendering::Sentinel => tokens.to_vec(),
            MaskRendering::Strip => tokens.iter().copied().filter(|&t| t != vocab.mask_id).collect(),
        };
        let text = vocab.render(&tokens, masks);
        Self { tokens, text }
    }
}

#[derive(Debug)]
pub enum SimilarityProvider {
    ExactMatch,
    TokenLevenshtein,
    TokenLcs,
    Precomputed,
    Remote(RemoteClient),
}

impl SimilarityProvider {
    pub fn from_config(config: &ProviderConfig) -> Result<Self, SimilarityError> {
        Ok(match config.kind {
            ProviderKind::ExactMatch => SimilarityProvider::ExactMatch,
            ProviderKind::TokenLevenshtein => SimilarityProvider::TokenLevenshtein,
            ProviderKind::TokenLcs => SimilarityProvider::TokenLcs,
            ProviderKind::Precomputed => SimilarityProvider::Precomputed,
            ProviderKind::Remote => SimilarityProvider::Remote(RemoteClient::new(config)?),
        })
    }

    pub fn kind(&self) -> ProviderKind {
        match self {
            SimilarityProvider::ExactMatch => ProviderKind::ExactMatch,
            SimilarityProvider::TokenLevenshtein => ProviderKind::TokenLevenshtein,
            SimilarityProvider::TokenLcs => ProviderKind::TokenLcs,
            SimilarityProvider::Precomputed => ProviderKind::Precomputed,
            SimilarityProvider::Remote(_) => ProviderKind::Remote,
        }
    }

    /// Scores pairs in order.
    pub fn similarity_batch(&self, pairs: &[(Utterance, Utterance)]) -> Result<Vec<f64>, SimilarityError> {
        let local = |f: fn(&[TokenId], &[TokenId]) -> f64| {
            Ok(pairs.iter().map(|(a, b)| f(&a.tokens, &b.tokens)).collect())
        };
        match self {
            SimilarityProvider::ExactMatch => local(exact_match),
            SimilarityProvider::TokenLevenshtein => local(token_levenshtein),
            SimilarityProvider::TokenLcs => local(token_lcs),
            SimilarityProvider::Precomputed => Err(SimilarityError::PrecomputedOnly),
            SimilarityProvider::Remote(client) => {
                let texts: Vec<(&str, &str)> =
                    pairs.iter().map(|(a, b)| (a.text.as_str(), b.text.as_str())).collect();
                client.score(&texts)
            }
        }
    }
}

pub fn exact_match(a: &[TokenId], b: &[TokenId]) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - editdist / max(len)`; two empty sequences are identical.
pub fn token_levenshtein(a: &[TokenId], b: &[TokenId]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

pub(crate) fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1) with `a` as reference and `b` as candidate.
pub fn token_lcs(a: &[TokenId], b: &[TokenId]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(a, b);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / b.len() as f64;
    let recall = lcs as f64 / a.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Serialize)]
struct SimilarityRequest<'a> {
    pairs: &'a [(&'a str, &'a str)],
}

#[derive(Deserialize)]
struct SimilarityResponse {
    scores: Vec<f64>,
}

/// Client for the `POST /v1/similarity` wire protocol.
#[derive(Debug)]
pub struct RemoteClient {
    url: String,
    agent: ureq::Agent,
    batch_size: usize,
    retries: u32,
    max_in_flight: usize,
    backoff: Duration,
}

impl RemoteClient {
    pub fn new(config: &ProviderConfig) -> Result<Self, SimilarityError> {
        let endpoint = config
            .endpoint
            .as_deref()
            .ok_or_else(|| SimilarityError::Config("remote provider needs an endpoint".into()))?;
        if config.batch_size == 0 || config.max_in_flight == 0 {
            return Err(SimilarityError::Config(
                "batch_size and max_in_flight must be positive".into(),
            ));
        }
        if !(config.timeout_secs.is_finite() && config.timeout_secs > 0.0) {
            return Err(SimilarityError::Config("timeout_secs must be positive".into()));
        }
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with(SIMILARITY_ROUTE) {
            base.to_string()
        } else {
            format!("{base}{SIMILARITY_ROUTE}")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            url,
            agent,
            batch_size: config.batch_size,
            retries: config.retries,
            max_in_flight: config.max_in_flight,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn post_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, String> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(SimilarityRequest { pairs })
            .map_err(|e| e.to_string())?;
        let body: SimilarityResponse = response.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.scores.len() != pairs.len() {
            return Err(format!(
                "protocol error: {} scores for {} pairs",
                body.scores.len(),
                pairs.len()
            ));
        }
        body.scores
            .into_iter()
            .map(|s| {
                if s.is_finite() {
                    Ok(s.clamp(0.0, 1.0))
                } else {
                    Err(format!("protocol error: non-finite score {s}"))
                }
            })
            .collect()
    }

    fn post_with_retry(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.post_batch(pairs) {
                Ok(scores) => return Ok(scores),
                Err(message) if attempt >= self.retries => {
                    return Err(SimilarityError::Remote {
                        failed_pairs: pairs.len(),
                        message,
                    })
                }
                Err(message) => {
                    log::warn!("similarity batch failed (attempt {}): {message}", attempt + 1);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    /// Scores all pairs with at most `max_in_flight` concurrent batches;
    /// results come back in request order.
    pub fn score(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let batches: Vec<&[(&str, &str)]> = pairs.chunks(self.batch_size).collect();
        let mut scores = Vec::with_capacity(pairs.len());
        let mut failed = 0usize;
        let mut first_error = None;
        for wave in batches.chunks(self.max_in_flight) {
            let results: Vec<Result<Vec<f64>, SimilarityError>> = thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| s.spawn(move || self.post_with_retry(batch)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("similarity worker panicked"))
                    .collect()
            });
            for r in results {
                match r {
                    Ok(batch_scores) => scores.extend(batch_scores),
                    Err(SimilarityError::Remote { failed_pairs, message }) => {
                        failed += failed_pairs;
                        first_error.get_or_insert(message);
                    }
                    Err(other) => return Err(other),
                }
            }
        }
        match first_error {
            None => Ok(scores),
            Some(message) => Err(SimilarityError::Remote {
                failed_pairs: failed,
                message,
            }),
        }
    }
}
