//! Annotation-noise detection: groups that share the same three sentences.

use super::DescriptionGroup;
use std::collections::BTreeMap;

/// Partition group ids into equivalence classes of identical sentence
/// multisets (after lowercasing and whitespace collapsing). Classes are
/// sorted by their first member; ids within a class are sorted.
pub fn detect_duplicate_description_groups(groups: &[DescriptionGroup]) -> Vec<Vec<String>> {
    let mut classes: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
    for g in groups {
        let mut key: Vec<String> = g.sentences.iter().map(|s| normalize(s)).collect();
        key.sort();
        classes.entry(key).or_default().push(g.group_id.clone());
    }
    let mut out: Vec<Vec<String>> = classes
        .into_values()
        .map(|mut ids| {
            ids.sort();
            ids
        })
        .collect();
    out.sort_by(|a, b| a[0].cmp(&b[0]));
    out
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}
