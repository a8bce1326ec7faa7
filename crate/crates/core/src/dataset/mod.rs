//! Track/query annotation loading, noise detection, deterministic splits,
//! and synthetic scene generation.

mod duplicates;
mod io;
mod split;
mod synth;

pub use duplicates::detect_duplicate_description_groups;
pub use io::{load_augmented, load_queries, load_tracks, save_augmented, save_tracks};
pub use split::split;
pub use synth::{generate_synthetic_scene, SynthConfig, TrackAttributes, COLORS, MOTIONS, VEHICLE_TYPES};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("track {track_id}: {msg}")]
    InvalidTrack { track_id: String, msg: String },
    #[error("query {query_id}: expected exactly 3 sentences, got {got}")]
    BadQueryArity { query_id: String, got: usize },
    #[error("query {query_id}: {msg}")]
    InvalidQuery { query_id: String, msg: String },
    #[error("split fractions sum to {sum}, expected 1 (tolerance 1e-9)")]
    BadSplitFractions { sum: f64 },
    #[error("synthetic scene: {0}")]
    Synth(String),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

/// One frame of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
    pub image_path: PathBuf,
}

/// Axis-aligned detection box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub frame_index: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// A single-camera vehicle tracklet: ordered boxes bound to frames of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: String,
    pub video_id: String,
    /// Strictly increasing by `frame_index`.
    pub boxes: Vec<BoundingBox>,
    pub frames: Vec<FrameRef>,
}

impl TrackRecord {
    pub fn frame_for(&self, frame_index: usize) -> Option<&FrameRef> {
        self.frames.iter().find(|f| f.frame_index == frame_index)
    }
}

/// Exactly three natural-language sentences describing one track or query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionGroup {
    pub group_id: String,
    pub sentences: [String; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    TestGallery,
    TestQuery,
}

/// Tracks plus their descriptions for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tracks: BTreeMap<String, TrackRecord>,
    pub descriptions: BTreeMap<String, DescriptionGroup>,
    pub split_tag: SplitTag,
}

impl DatasetManifest {
    pub fn new(split_tag: SplitTag) -> Self {
        Self {
            tracks: BTreeMap::new(),
            descriptions: BTreeMap::new(),
            split_tag,
        }
    }

    /// Track ids in deterministic (sorted) order.
    pub fn track_ids(&self) -> Vec<String> {
        self.tracks.keys().cloned().collect()
    }

    /// In the train split every track must carry a description group.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.split_tag == SplitTag::Train {
            for id in self.tracks.keys() {
                if !self.descriptions.contains_key(id) {
                    return Err(DatasetError::InvalidTrack {
                        track_id: id.clone(),
                        msg: "train split track has no description group".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Provenance of one augmented sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceProvenance {
    Original,
    Backtranslated,
    SubjectPrefixed,
    SubjectSummary,
}

/// One sentence of the augmented training pool, tagged with how it was made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSentence {
    pub text: String,
    pub provenance: SentenceProvenance,
}
