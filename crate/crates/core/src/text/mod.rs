//! Description augmentation: back-translation through a pivot language and
//! subject strengthening, plus tokenization for the text encoder.

mod augment;
mod subject;
mod translate;
mod vocab;

pub use augment::{augment_group, backtranslate, strengthen_subjects, AugmentOptions};
pub use subject::{HeuristicSubjectExtractor, SubjectExtractor};
pub use translate::{
    CachedTranslationClient, HttpTranslationClient, StubTranslationClient, TranslationClient,
};
pub use vocab::{tokenize, Vocab, UNK_TOKEN_ID};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("translation failed for sentence {sentence_id:?}: {msg}")]
    TranslationFailed {
        sentence_id: Option<String>,
        msg: String,
    },
    #[error("translation client returned empty output for sentence {sentence_id:?}")]
    EmptyTranslation { sentence_id: Option<String> },
    #[error("empty sentence")]
    EmptySentence,
    #[error("translation endpoint not configured (set {var})")]
    MissingEndpoint { var: &'static str },
    #[error("cache io error: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// A non-empty, whitespace-trimmed sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence(String);

impl Sentence {
    pub fn new(text: &str) -> Result<Self, TextError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(TextError::EmptySentence);
        }
        Ok(Self(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl std::fmt::Display for Sentence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}
