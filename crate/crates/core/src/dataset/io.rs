//! Challenge-format annotation files.
//!
//! Track annotations are a JSON mapping
//! `track_id -> { "frames": [paths], "boxes": [[x,y,w,h],...], "nl": [3 strings] }`
//! with `frames[i]` and `boxes[i]` parallel. Queries map `query_id -> [3 strings]`.

use super::{
    AugmentedSentence, BoundingBox, DatasetError, DescriptionGroup, FrameRef, TrackRecord,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
struct RawTrack {
    frames: Vec<String>,
    boxes: Vec<[i64; 4]>,
    nl: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nl_aug: Option<Vec<AugmentedSentence>>,
}

/// Load track records plus their description groups, sorted by track id.
pub fn load_tracks(
    path: &Path,
) -> Result<(Vec<TrackRecord>, Vec<DescriptionGroup>), DatasetError> {
    let raw = read_raw(path)?;
    let mut tracks = Vec::with_capacity(raw.len());
    let mut groups = Vec::with_capacity(raw.len());
    for (track_id, entry) in raw {
        let (track, group) = build_track(&track_id, &entry)?;
        tracks.push(track);
        groups.push(group);
    }
    Ok((tracks, groups))
}

/// Load the augmented sentence pool written by the augment pipeline.
/// Tracks without an `nl_aug` field fall back to their three originals.
pub fn load_augmented(
    path: &Path,
) -> Result<BTreeMap<String, Vec<AugmentedSentence>>, DatasetError> {
    let raw = read_raw(path)?;
    let mut pools = BTreeMap::new();
    for (track_id, entry) in raw {
        let pool = match entry.nl_aug {
            Some(aug) if !aug.is_empty() => aug,
            _ => entry
                .nl
                .iter()
                .map(|s| AugmentedSentence {
                    text: s.trim().to_string(),
                    provenance: super::SentenceProvenance::Original,
                })
                .collect(),
        };
        pools.insert(track_id, pool);
    }
    Ok(pools)
}

fn read_raw(path: &Path) -> Result<BTreeMap<String, RawTrack>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn build_track(
    track_id: &str,
    entry: &RawTrack,
) -> Result<(TrackRecord, DescriptionGroup), DatasetError> {
    let invalid = |msg: String| DatasetError::InvalidTrack {
        track_id: track_id.to_string(),
        msg,
    };
    if entry.frames.is_empty() {
        return Err(invalid("track has no frames".into()));
    }
    if entry.frames.len() != entry.boxes.len() {
        return Err(invalid(format!(
            "frames ({}) and boxes ({}) must be parallel arrays",
            entry.frames.len(),
            entry.boxes.len()
        )));
    }
    if entry.nl.len() != 3 {
        return Err(invalid(format!(
            "expected exactly 3 descriptions, got {}",
            entry.nl.len()
        )));
    }
    for s in &entry.nl {
        if s.trim().is_empty() {
            return Err(invalid("empty description sentence".into()));
        }
    }

    let mut items: Vec<(usize, FrameRef, BoundingBox)> = Vec::with_capacity(entry.frames.len());
    for (pos, (frame_path, bx)) in entry.frames.iter().zip(entry.boxes.iter()).enumerate() {
        let [x, y, w, h] = *bx;
        if x < 0 || y < 0 {
            return Err(invalid(format!(
                "box at frame entry {pos} has negative origin ({x},{y})"
            )));
        }
        if w <= 0 || h <= 0 {
            return Err(invalid(format!(
                "box at frame entry {pos} has non-positive extent ({w}x{h})"
            )));
        }
        let frame_index = frame_index_of(frame_path, pos);
        let rel = PathBuf::from(frame_path);
        let video_id = video_id_of(&rel);
        items.push((
            frame_index,
            FrameRef {
                video_id,
                frame_index,
                image_path: rel,
            },
            BoundingBox {
                frame_index,
                x: x as usize,
                y: y as usize,
                w: w as usize,
                h: h as usize,
            },
        ));
    }
    items.sort_by_key(|(idx, _, _)| *idx);
    for pair in items.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(invalid(format!("duplicate frame index {}", pair[0].0)));
        }
    }
    let video_id = items[0].1.video_id.clone();
    for (_, frame, _) in &items {
        if frame.video_id != video_id {
            return Err(invalid(format!(
                "frames span multiple videos ({video_id} vs {})",
                frame.video_id
            )));
        }
    }
    let frames: Vec<FrameRef> = items.iter().map(|(_, f, _)| f.clone()).collect();
    let boxes: Vec<BoundingBox> = items.iter().map(|(_, _, b)| *b).collect();
    let sentences: [String; 3] = [
        entry.nl[0].trim().to_string(),
        entry.nl[1].trim().to_string(),
        entry.nl[2].trim().to_string(),
    ];
    Ok((
        TrackRecord {
            track_id: track_id.to_string(),
            video_id,
            boxes,
            frames,
        },
        DescriptionGroup {
            group_id: track_id.to_string(),
            sentences,
        },
    ))
}

/// Frame index from the numeric tail of the file stem ("000123.png" -> 123),
/// falling back to the array position when the name carries no digits.
fn frame_index_of(frame_path: &str, position: usize) -> usize {
    let stem = Path::new(frame_path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("");
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(position)
}

fn video_id_of(path: &Path) -> String {
    path.parent()
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| "video".to_string())
}

/// Write tracks + descriptions in the same JSON schema `load_tracks` reads.
pub fn save_tracks(
    path: &Path,
    tracks: &[TrackRecord],
    groups: &[DescriptionGroup],
) -> Result<(), DatasetError> {
    save_impl(path, tracks, groups, None)
}

/// Like [`save_tracks`] but with the augmented sentence pool per track.
pub fn save_augmented(
    path: &Path,
    tracks: &[TrackRecord],
    groups: &[DescriptionGroup],
    pools: &BTreeMap<String, Vec<AugmentedSentence>>,
) -> Result<(), DatasetError> {
    save_impl(path, tracks, groups, Some(pools))
}

fn save_impl(
    path: &Path,
    tracks: &[TrackRecord],
    groups: &[DescriptionGroup],
    pools: Option<&BTreeMap<String, Vec<AugmentedSentence>>>,
) -> Result<(), DatasetError> {
    let by_id: BTreeMap<&str, &DescriptionGroup> =
        groups.iter().map(|g| (g.group_id.as_str(), g)).collect();
    let mut out: BTreeMap<String, RawTrack> = BTreeMap::new();
    for track in tracks {
        let group = by_id
            .get(track.track_id.as_str())
            .ok_or_else(|| DatasetError::InvalidTrack {
                track_id: track.track_id.clone(),
                msg: "no description group to save".into(),
            })?;
        out.insert(
            track.track_id.clone(),
            RawTrack {
                frames: track
                    .frames
                    .iter()
                    .map(|f| f.image_path.to_string_lossy().into_owned())
                    .collect(),
                boxes: track
                    .boxes
                    .iter()
                    .map(|b| [b.x as i64, b.y as i64, b.w as i64, b.h as i64])
                    .collect(),
                nl: group.sentences.to_vec(),
                nl_aug: pools.and_then(|p| p.get(&track.track_id).cloned()),
            },
        );
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    std::fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load query description groups, sorted by query id.
pub fn load_queries(path: &Path) -> Result<Vec<DescriptionGroup>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    let mut out = Vec::with_capacity(raw.len());
    for (query_id, sentences) in raw {
        if sentences.len() != 3 {
            return Err(DatasetError::BadQueryArity {
                query_id,
                got: sentences.len(),
            });
        }
        let trimmed: Vec<String> = sentences.iter().map(|s| s.trim().to_string()).collect();
        if trimmed.iter().any(|s| s.is_empty()) {
            return Err(DatasetError::InvalidQuery {
                query_id,
                msg: "empty sentence".into(),
            });
        }
        out.push(DescriptionGroup {
            group_id: query_id,
            sentences: [
                trimmed[0].clone(),
                trimmed[1].clone(),
                trimmed[2].clone(),
            ],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn minimal_track_loads_sorted_by_frame_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "tracks.json",
            r#"{"t1": {"frames": ["v/000005.png", "v/000002.png"],
                      "boxes": [[1,1,4,4],[0,0,3,3]],
                      "nl": ["A red sedan goes straight.", "The red car keeps straight.", "A sedan runs straight."]}}"#,
        );
        let (tracks, groups) = load_tracks(&p).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].boxes[0].frame_index, 2);
        assert_eq!(tracks[0].boxes[1].frame_index, 5);
        assert_eq!(tracks[0].video_id, "v");
        assert_eq!(groups[0].sentences.len(), 3);
    }

    #[test]
    fn zero_width_box_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "tracks.json",
            r#"{"t1": {"frames": ["v/000001.png"], "boxes": [[1,1,0,4]],
                      "nl": ["a", "b", "c"]}}"#,
        );
        match load_tracks(&p) {
            Err(DatasetError::InvalidTrack { track_id, .. }) => assert_eq!(track_id, "t1"),
            other => panic!("expected InvalidTrack, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "tracks.json", "{not json");
        assert!(matches!(load_tracks(&p), Err(DatasetError::Parse { .. })));
    }

    #[test]
    fn queries_require_exactly_three_sentences() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "q_ok.json",
            r#"{"q1": ["a", "b", "c"], "q2": ["d", "e", "f"]}"#,
        );
        assert_eq!(load_queries(&ok).unwrap().len(), 2);

        let bad = write(dir.path(), "q_bad.json", r#"{"q1": ["a", "b"]}"#);
        match load_queries(&bad) {
            Err(DatasetError::BadQueryArity { query_id, got }) => {
                assert_eq!(query_id, "q1");
                assert_eq!(got, 2);
            }
            other => panic!("expected BadQueryArity, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_query_text_loads_without_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "q.json",
            r#"{"q1": ["a", "b", "c"], "q2": ["a", "b", "c"]}"#,
        );
        let qs = load_queries(&p).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].sentences, qs[1].sentences);
    }
}
