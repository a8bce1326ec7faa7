//! Subject extraction for subject strengthening.

pub trait SubjectExtractor: Send + Sync {
    /// The grammatical subject phrase, or `None` when extraction fails.
    /// A returned phrase is a contiguous substring of the (trimmed) input.
    fn extract(&self, sentence: &str) -> Option<String>;
}

/// Closed-class word list of finite verbs seen in traffic commands.
const FINITE_VERBS: &[&str] = &[
    "is", "are", "was", "were", "goes", "go", "turns", "turn", "drives", "drive", "runs", "run",
    "moves", "move", "stops", "stop", "travels", "heads", "proceeds", "passes", "keeps", "keep",
    "makes", "make", "takes", "crosses", "pulls", "waits", "comes", "slows", "speeds", "follows",
    "merges", "switches", "changes", "accelerates", "decelerates", "reverses", "parks", "exits",
    "enters", "approaches", "leaves", "sits", "stays", "rolls", "cruises", "continues",
];

/// Longest initial noun phrase before the first finite verb, by scanning
/// tokens until a word from the closed verb list appears.
pub struct HeuristicSubjectExtractor;

impl SubjectExtractor for HeuristicSubjectExtractor {
    fn extract(&self, sentence: &str) -> Option<String> {
        let text = sentence.trim();
        if text.is_empty() {
            return None;
        }
        let mut end = None;
        let mut offset = 0;
        for token in text.split(' ') {
            let core = token.trim_matches(|c: char| c.is_ascii_punctuation());
            if !core.is_empty() && FINITE_VERBS.contains(&core.to_lowercase().as_str()) {
                end = Some(offset);
                break;
            }
            offset += token.len() + 1;
        }
        let end = end?;
        if end == 0 {
            return None; // sentence starts with a verb, no subject phrase
        }
        let phrase = text[..end].trim_end();
        let phrase = phrase.trim_end_matches(|c: char| c == ',' || c == ';');
        if phrase.is_empty() {
            None
        } else {
            Some(phrase.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_initial_noun_phrase_before_verb() {
        let e = HeuristicSubjectExtractor;
        assert_eq!(
            e.extract("A blue SUV runs down the street"),
            Some("A blue SUV".to_string())
        );
        assert_eq!(
            e.extract("The dark red pickup truck turns left."),
            Some("The dark red pickup truck".to_string())
        );
    }

    #[test]
    fn subject_is_a_contiguous_substring() {
        let e = HeuristicSubjectExtractor;
        let s = "A white van stops at the light";
        let subject = e.extract(s).unwrap();
        assert!(s.contains(&subject));
    }

    #[test]
    fn verb_initial_sentence_has_no_subject() {
        let e = HeuristicSubjectExtractor;
        assert_eq!(e.extract("Turns left at the junction"), None);
    }

    #[test]
    fn sentence_without_known_verb_fails_extraction() {
        let e = HeuristicSubjectExtractor;
        assert_eq!(e.extract("A red sedan near the billboard"), None);
    }

    #[test]
    fn empty_input_fails() {
        let e = HeuristicSubjectExtractor;
        assert_eq!(e.extract("   "), None);
    }
}
