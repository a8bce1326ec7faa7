//! Translation clients: a deterministic offline stub used by all tests and an
//! HTTP adapter for a real service, with an on-disk response cache.

use super::TextError;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

/// Endpoint URL variable for the live client.
pub const ENDPOINT_VAR: &str = "TRANSLATE_ENDPOINT";
/// API key variable for the live client.
pub const API_KEY_VAR: &str = "TRANSLATE_API_KEY";

pub trait TranslationClient: Send + Sync {
    fn translate(&self, text: &str, source_lang: &str, target_lang: &str)
        -> Result<String, TextError>;
}

/// Deterministic offline stub: seeded synonym-table substitution on the
/// en->pivot leg and clause reordering on the pivot->en leg.
///
/// The pivot "language" is the substituted English text itself, so a full
/// round trip yields a paraphrase rather than an identity. The default table
/// avoids the synthetic attribute vocabulary (colors, vehicle types, motion
/// words) so augmented sentences keep their ground-truth tokens.
pub struct StubTranslationClient {
    table: BTreeMap<String, String>,
    seed: u64,
}

impl StubTranslationClient {
    pub fn new(seed: u64) -> Self {
        let mut table = BTreeMap::new();
        for (k, v) in [
            ("road", "street"),
            ("camera", "lens"),
            ("intersection", "junction"),
            ("crossing", "junction"),
            ("down", "along"),
            ("past", "by"),
            ("near", "close to"),
            ("waits", "lingers"),
            ("light", "signal"),
            ("lane", "lane of travel"),
        ] {
            table.insert(k.to_string(), v.to_string());
        }
        Self { table, seed }
    }

    /// Stub with a caller-supplied synonym table.
    pub fn with_table(seed: u64, table: BTreeMap<String, String>) -> Self {
        Self { table, seed }
    }

    /// Stub that translates every text to itself.
    pub fn identity() -> Self {
        Self {
            table: BTreeMap::new(),
            seed: 0,
        }
    }

    fn substitute(&self, text: &str) -> String {
        let mut words: Vec<String> = Vec::new();
        for token in text.split(' ') {
            let (core, trail) = split_trailing_punct(token);
            let replaced = self
                .table
                .get(&core.to_lowercase())
                .map(|r| match_case(core, r))
                .unwrap_or_else(|| core.to_string());
            words.push(format!("{replaced}{trail}"));
        }
        words.join(" ")
    }

    fn reorder(&self, text: &str) -> String {
        // Swap a two-clause sentence when the seed bit for this text says so.
        let parts: Vec<&str> = text.splitn(2, ", ").collect();
        if parts.len() == 2 && self.text_bit(text) {
            let first = parts[0];
            let second = parts[1].trim_end_matches('.');
            format!("{second}, {}.", lowercase_first(first))
        } else {
            text.to_string()
        }
    }

    fn text_bit(&self, text: &str) -> bool {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        hasher.finalize()[0] & 1 == 1
    }
}

fn split_trailing_punct(token: &str) -> (&str, &str) {
    let idx = token
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_ascii_punctuation())
        .map(|(i, _)| i)
        .last()
        .unwrap_or(token.len());
    token.split_at(idx)
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(|c| c.is_uppercase()) {
        uppercase_first(replacement)
    } else {
        replacement.to_string()
    }
}

fn uppercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

impl TranslationClient for StubTranslationClient {
    fn translate(
        &self,
        text: &str,
        source_lang: &str,
        _target_lang: &str,
    ) -> Result<String, TextError> {
        if text.trim().is_empty() {
            return Err(TextError::EmptySentence);
        }
        // en -> pivot applies the synonym table; pivot -> en reorders clauses.
        let out = if source_lang == "en" {
            self.substitute(text)
        } else {
            self.reorder(text)
        };
        Ok(out.trim().to_string())
    }
}

/// HTTP adapter for an external translation service.
///
/// Request: `POST {endpoint}` with JSON
/// `{"text": ..., "source_lang": ..., "target_lang": ...}` and an
/// `Authorization: Bearer {key}` header; response JSON `{"translation": ...}`.
/// Retries with exponential backoff on transport errors.
pub struct HttpTranslationClient {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
}

impl HttpTranslationClient {
    /// Configure from `TRANSLATE_ENDPOINT` / `TRANSLATE_API_KEY`.
    pub fn from_env() -> Result<Self, TextError> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| TextError::MissingEndpoint { var: ENDPOINT_VAR })?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(API_KEY_VAR).ok(),
            timeout: Duration::from_secs(20),
            max_retries: 3,
        })
    }

    pub fn new(endpoint: String, api_key: Option<String>) -> Self {
        Self {
            endpoint,
            api_key,
            timeout: Duration::from_secs(20),
            max_retries: 3,
        }
    }
}

#[derive(serde::Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    source_lang: &'a str,
    target_lang: &'a str,
}

#[derive(serde::Deserialize)]
struct TranslateResponse {
    translation: String,
}

impl TranslationClient for HttpTranslationClient {
    fn translate(
        &self,
        text: &str,
        source_lang: &str,
        target_lang: &str,
    ) -> Result<String, TextError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| TextError::TranslationFailed {
                sentence_id: None,
                msg: e.to_string(),
            })?;
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 * (1 << (attempt - 1))));
            }
            let mut req = client.post(&self.endpoint).json(&TranslateRequest {
                text,
                source_lang,
                target_lang,
            });
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let parsed: TranslateResponse =
                        resp.json().map_err(|e| TextError::TranslationFailed {
                            sentence_id: None,
                            msg: format!("bad response body: {e}"),
                        })?;
                    if parsed.translation.trim().is_empty() {
                        return Err(TextError::EmptyTranslation { sentence_id: None });
                    }
                    return Ok(parsed.translation.trim().to_string());
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(TextError::TranslationFailed {
            sentence_id: None,
            msg: format!("{} retries exhausted: {last_err}", self.max_retries),
        })
    }
}

/// Wrap any client with an on-disk cache keyed by (text hash, language pair)
/// so repeated runs stay offline.
pub struct CachedTranslationClient<C: TranslationClient> {
    inner: C,
    cache_dir: PathBuf,
}

impl<C: TranslationClient> CachedTranslationClient<C> {
    pub fn new(inner: C, cache_dir: PathBuf) -> Self {
        Self { inner, cache_dir }
    }

    fn cache_path(&self, text: &str, source_lang: &str, target_lang: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.update([0]);
        hasher.update(source_lang.as_bytes());
        hasher.update([0]);
        hasher.update(target_lang.as_bytes());
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.cache_dir.join(format!("{hex}.txt"))
    }
}

impl<C: TranslationClient> TranslationClient for CachedTranslationClient<C> {
    fn translate(
        &self,
        text: &str,
        source_lang: &str,
        target_lang: &str,
    ) -> Result<String, TextError> {
        let path = self.cache_path(text, source_lang, target_lang);
        if let Ok(cached) = std::fs::read_to_string(&path) {
            return Ok(cached);
        }
        let out = self.inner.translate(text, source_lang, target_lang)?;
        std::fs::create_dir_all(&self.cache_dir)?;
        std::fs::write(&path, &out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_stub_round_trips_unchanged() {
        let stub = StubTranslationClient::identity();
        let zh = stub.translate("A maroon sedan turns left", "en", "zh").unwrap();
        let back = stub.translate(&zh, "zh", "en").unwrap();
        assert_eq!(back, "A maroon sedan turns left");
    }

    #[test]
    fn synonym_table_substitutes_on_forward_leg() {
        let mut table = BTreeMap::new();
        table.insert("maroon".to_string(), "dark red".to_string());
        let stub = StubTranslationClient::with_table(0, table);
        let out = stub
            .translate("A maroon sedan turns left", "en", "zh")
            .unwrap();
        assert_eq!(out, "A dark red sedan turns left");
    }

    #[test]
    fn substitution_preserves_punctuation_and_case() {
        let stub = StubTranslationClient::new(0);
        let out = stub
            .translate("The car goes down the road.", "en", "zh")
            .unwrap();
        assert_eq!(out, "The car goes along the street.");
    }

    #[test]
    fn stub_is_deterministic_for_a_seed() {
        let a = StubTranslationClient::new(42);
        let b = StubTranslationClient::new(42);
        let s = "A red sedan, then it stops.";
        assert_eq!(
            a.translate(s, "zh", "en").unwrap(),
            b.translate(s, "zh", "en").unwrap()
        );
    }

    #[test]
    fn cache_serves_second_call_without_inner_client() {
        struct CountingClient(std::sync::atomic::AtomicUsize);
        impl TranslationClient for CountingClient {
            fn translate(&self, text: &str, _: &str, _: &str) -> Result<String, TextError> {
                self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(format!("{text}!"))
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let client = CachedTranslationClient::new(
            CountingClient(std::sync::atomic::AtomicUsize::new(0)),
            dir.path().to_path_buf(),
        );
        assert_eq!(client.translate("hi", "en", "zh").unwrap(), "hi!");
        assert_eq!(client.translate("hi", "en", "zh").unwrap(), "hi!");
        assert_eq!(client.inner.0.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_endpoint_is_reported() {
        std::env::remove_var(ENDPOINT_VAR);
        assert!(matches!(
            HttpTranslationClient::from_env(),
            Err(TextError::MissingEndpoint { .. })
        ));
    }
}
