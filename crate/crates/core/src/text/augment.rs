//! Back-translation and subject strengthening, composed per description group.

use super::{Sentence, SubjectExtractor, TextError, TranslationClient};
use crate::dataset::{AugmentedSentence, DescriptionGroup, SentenceProvenance};

#[derive(Debug, Clone)]
pub struct AugmentOptions {
    pub enable_backtranslation: bool,
    pub enable_subject_strengthening: bool,
    pub pivot_lang: String,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            enable_backtranslation: true,
            enable_subject_strengthening: true,
            pivot_lang: "zh".to_string(),
        }
    }
}

/// Round-trip a sentence through the pivot language:
/// `client(client(text, en, pivot), pivot, en)`, trimmed.
pub fn backtranslate(
    sentence: &Sentence,
    client: &dyn TranslationClient,
    pivot_lang: &str,
    sentence_id: Option<&str>,
) -> Result<Sentence, TextError> {
    let attach = |e: TextError| match e {
        TextError::TranslationFailed { msg, .. } => TextError::TranslationFailed {
            sentence_id: sentence_id.map(String::from),
            msg,
        },
        TextError::EmptyTranslation { .. } => TextError::EmptyTranslation {
            sentence_id: sentence_id.map(String::from),
        },
        other => other,
    };
    let pivot = client
        .translate(sentence.as_str(), "en", pivot_lang)
        .map_err(attach)?;
    if pivot.trim().is_empty() {
        return Err(TextError::EmptyTranslation {
            sentence_id: sentence_id.map(String::from),
        });
    }
    let back = client
        .translate(&pivot, pivot_lang, "en")
        .map_err(attach)?;
    Sentence::new(&back).map_err(|_| TextError::EmptyTranslation {
        sentence_id: sentence_id.map(String::from),
    })
}

pub struct StrengthenResult {
    /// The three originals rewritten as "<subject>. <original>" (pass-through
    /// where extraction failed), plus the subject-summary fourth sentence
    /// when at least one subject extracted.
    pub sentences: Vec<Sentence>,
    pub warnings: Vec<String>,
}

/// Prepend each sentence's subject and form the fourth subject-only
/// description from the deduplicated subjects.
pub fn strengthen_subjects(
    group: &DescriptionGroup,
    extractor: &dyn SubjectExtractor,
) -> StrengthenResult {
    let mut rewritten = Vec::with_capacity(4);
    let mut subjects: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    for original in &group.sentences {
        let original = original.trim();
        match extractor.extract(original) {
            Some(subject) => {
                rewritten.push(
                    Sentence::new(&format!("{subject}. {original}")).expect("non-empty"),
                );
                // Case-insensitive dedup keeping first-occurrence order.
                if !subjects
                    .iter()
                    .any(|s| s.to_lowercase() == subject.to_lowercase())
                {
                    subjects.push(subject);
                }
            }
            None => {
                rewritten.push(Sentence::new(original).expect("non-empty"));
            }
        }
    }
    if subjects.is_empty() {
        warnings.push(format!(
            "group {}: no subject extracted from any sentence; fourth description skipped",
            group.group_id
        ));
    } else {
        let fourth = format!("{}.", subjects.join(". "));
        rewritten.push(Sentence::new(&fourth).expect("non-empty"));
    }
    StrengthenResult {
        sentences: rewritten,
        warnings,
    }
}

pub struct AugmentResult {
    pub sentences: Vec<AugmentedSentence>,
    pub warnings: Vec<String>,
}

/// Compose both augmentations over one group. Output order is stable:
/// the 3 originals, then their back-translations (when enabled), then the
/// 3 subject-prefixed rewrites, then the subject summary (when enabled).
pub fn augment_group(
    group: &DescriptionGroup,
    options: &AugmentOptions,
    client: &dyn TranslationClient,
    extractor: &dyn SubjectExtractor,
) -> Result<AugmentResult, TextError> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for s in &group.sentences {
        out.push(AugmentedSentence {
            text: s.trim().to_string(),
            provenance: SentenceProvenance::Original,
        });
    }
    if options.enable_backtranslation {
        for (i, s) in group.sentences.iter().enumerate() {
            let sentence = Sentence::new(s).map_err(|_| TextError::EmptySentence)?;
            let id = format!("{}#{}", group.group_id, i);
            let bt = backtranslate(&sentence, client, &options.pivot_lang, Some(&id))?;
            out.push(AugmentedSentence {
                text: bt.into_string(),
                provenance: SentenceProvenance::Backtranslated,
            });
        }
    }
    if options.enable_subject_strengthening {
        let result = strengthen_subjects(group, extractor);
        warnings.extend(result.warnings);
        let n = result.sentences.len();
        for (i, s) in result.sentences.into_iter().enumerate() {
            let provenance = if i == 3 && n == 4 {
                SentenceProvenance::SubjectSummary
            } else {
                SentenceProvenance::SubjectPrefixed
            };
            out.push(AugmentedSentence {
                text: s.into_string(),
                provenance,
            });
        }
    }
    Ok(AugmentResult {
        sentences: out,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{HeuristicSubjectExtractor, StubTranslationClient};
    use std::collections::BTreeMap;

    fn group(a: &str, b: &str, c: &str) -> DescriptionGroup {
        DescriptionGroup {
            group_id: "g".into(),
            sentences: [a.to_string(), b.to_string(), c.to_string()],
        }
    }

    #[test]
    fn identity_stub_backtranslation_returns_input() {
        let client = StubTranslationClient::identity();
        let s = Sentence::new("A red sedan turns left").unwrap();
        let out = backtranslate(&s, &client, "zh", None).unwrap();
        assert_eq!(out.as_str(), "A red sedan turns left");
    }

    #[test]
    fn synonym_stub_backtranslation_applies_table() {
        let mut table = BTreeMap::new();
        table.insert("maroon".to_string(), "dark red".to_string());
        let client = StubTranslationClient::with_table(0, table);
        let s = Sentence::new("A maroon sedan turns left").unwrap();
        let out = backtranslate(&s, &client, "zh", None).unwrap();
        assert_eq!(out.as_str(), "A dark red sedan turns left");
    }

    #[test]
    fn identical_subjects_dedup_to_one_fourth_sentence() {
        let g = group(
            "A red truck goes straight.",
            "A red truck turns left later.",
            "A red truck passes the mall.",
        );
        let result = strengthen_subjects(&g, &HeuristicSubjectExtractor);
        assert_eq!(result.sentences.len(), 4);
        assert_eq!(result.sentences[3].as_str(), "A red truck.");
        assert!(result.warnings.is_empty());
    }

    #[test]
    fn fourth_sentence_dedups_case_insensitively_preserving_order() {
        // Subjects: "A red truck", "A cargo truck", "a red truck"
        let g = group(
            "A red truck goes straight.",
            "A cargo truck turns left.",
            "a red truck stops.",
        );
        let result = strengthen_subjects(&g, &HeuristicSubjectExtractor);
        assert_eq!(result.sentences[3].as_str(), "A red truck. A cargo truck.");
    }

    #[test]
    fn rewritten_sentence_prepends_subject() {
        let g = group(
            "A blue SUV runs down the street",
            "A blue SUV turns right",
            "A blue SUV keeps going",
        );
        let result = strengthen_subjects(&g, &HeuristicSubjectExtractor);
        assert_eq!(
            result.sentences[0].as_str(),
            "A blue SUV. A blue SUV runs down the street"
        );
    }

    #[test]
    fn failed_extraction_passes_through_and_skips_fourth() {
        let g = group(
            "Gibberish without any verb",
            "More gibberish here too",
            "Still nothing verbal",
        );
        let result = strengthen_subjects(&g, &HeuristicSubjectExtractor);
        assert_eq!(result.sentences.len(), 3);
        assert_eq!(result.sentences[0].as_str(), "Gibberish without any verb");
        assert_eq!(result.warnings.len(), 1);
    }

    #[test]
    fn both_options_off_yields_exactly_the_originals() {
        let g = group("a b goes c.", "d e turns f.", "g h stops i.");
        let options = AugmentOptions {
            enable_backtranslation: false,
            enable_subject_strengthening: false,
            pivot_lang: "zh".into(),
        };
        let out = augment_group(
            &g,
            &options,
            &StubTranslationClient::identity(),
            &HeuristicSubjectExtractor,
        )
        .unwrap();
        assert_eq!(out.sentences.len(), 3);
        assert!(out
            .sentences
            .iter()
            .all(|s| s.provenance == SentenceProvenance::Original));
    }

    #[test]
    fn subject_strengthening_only_yields_seven_sentences() {
        let g = group(
            "A red sedan goes straight.",
            "The red sedan turns left.",
            "A red car stops.",
        );
        let options = AugmentOptions {
            enable_backtranslation: false,
            enable_subject_strengthening: true,
            pivot_lang: "zh".into(),
        };
        let out = augment_group(
            &g,
            &options,
            &StubTranslationClient::identity(),
            &HeuristicSubjectExtractor,
        )
        .unwrap();
        assert_eq!(out.sentences.len(), 7);
        assert_eq!(
            out.sentences[6].provenance,
            SentenceProvenance::SubjectSummary
        );
    }

    #[test]
    fn augment_is_deterministic_with_the_stub() {
        let g = group(
            "A red sedan goes straight down the road.",
            "The red sedan, it turns left.",
            "A red car stops near the billboard.",
        );
        let options = AugmentOptions::default();
        let run = || {
            let client = StubTranslationClient::new(7);
            augment_group(&g, &options, &client, &HeuristicSubjectExtractor)
                .unwrap()
                .sentences
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identity_stub_output_contains_originals_and_equal_variants() {
        let g = group(
            "A red sedan goes straight.",
            "The red sedan turns left.",
            "A red car stops.",
        );
        let out = augment_group(
            &g,
            &AugmentOptions::default(),
            &StubTranslationClient::identity(),
            &HeuristicSubjectExtractor,
        )
        .unwrap();
        for (i, s) in g.sentences.iter().enumerate() {
            assert_eq!(&out.sentences[i].text, s);
            assert_eq!(&out.sentences[3 + i].text, s, "identity stub variant");
        }
    }
}
