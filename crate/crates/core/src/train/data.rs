//! Per-track training data: resized crops, the cached motion image, the
//! augmented sentence pool, and the class-label mapping.

use super::TrainError;
use crate::dataset::{
    detect_duplicate_description_groups, AugmentedSentence, DatasetManifest, TrackRecord,
};
use crate::image::Image;
use crate::model::Model;
use crate::motion::{compute_background, render_motion_image, DiskFrames, FrameProvider};
use ndarray::Array4;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Fixed input standardization: x -> (x - MEAN) / STD per channel.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Track id -> instance-loss class index. With duplicate merging enabled,
/// tracks sharing identical description triples collapse onto one class.
#[derive(Debug, Clone)]
pub struct LabelMap {
    classes: BTreeMap<String, usize>,
    pub num_classes: usize,
}

impl LabelMap {
    pub fn build(manifest: &DatasetManifest, merge_duplicates: bool) -> Self {
        let mut classes = BTreeMap::new();
        if merge_duplicates {
            let groups: Vec<_> = manifest.descriptions.values().cloned().collect();
            let partition = detect_duplicate_description_groups(&groups);
            let mut class_of_group: BTreeMap<String, usize> = BTreeMap::new();
            for (class, members) in partition.iter().enumerate() {
                for id in members {
                    class_of_group.insert(id.clone(), class);
                }
            }
            let mut next = partition.len();
            for id in manifest.tracks.keys() {
                let class = class_of_group.get(id).copied().unwrap_or_else(|| {
                    let c = next;
                    next += 1;
                    c
                });
                classes.insert(id.clone(), class);
            }
            let num_classes = classes.values().max().map_or(0, |m| m + 1);
            Self {
                classes,
                num_classes,
            }
        } else {
            for (i, id) in manifest.tracks.keys().enumerate() {
                classes.insert(id.clone(), i);
            }
            let num_classes = classes.len();
            Self {
                classes,
                num_classes,
            }
        }
    }

    pub fn class_of(&self, track_id: &str) -> Option<usize> {
        self.classes.get(track_id).copied()
    }
}

/// Where motion images come from.
pub enum MotionSource {
    /// Load `<track_id>_motion.png` from a directory of precomputed images.
    Cache(PathBuf),
    /// Compute from frames with the given strides.
    Compute {
        stride: usize,
        bg_sample_stride: usize,
    },
}

/// One track ready for sampling: everything resized to the model input size.
pub struct PreparedTrack {
    pub track_id: String,
    pub class_index: usize,
    pub crops: Vec<Image>,
    pub motion: Image,
    pub sentences: Vec<String>,
}

pub struct TrainData {
    pub tracks: Vec<PreparedTrack>,
    pub num_classes: usize,
}

impl TrainData {
    /// Load, crop, and render everything for a manifest. `augmented` replaces
    /// each track's sentence pool when provided.
    pub fn prepare(
        manifest: &DatasetManifest,
        data_root: &Path,
        image_size: usize,
        motion_source: &MotionSource,
        augmented: Option<&BTreeMap<String, Vec<AugmentedSentence>>>,
        merge_duplicates: bool,
    ) -> Result<Self, TrainError> {
        manifest.validate()?;
        let labels = LabelMap::build(manifest, merge_duplicates);
        let records: Vec<&TrackRecord> = manifest.tracks.values().collect();
        let tracks: Vec<PreparedTrack> = records
            .par_iter()
            .map(|track| {
                prepare_track(
                    track,
                    manifest,
                    data_root,
                    image_size,
                    motion_source,
                    augmented,
                    &labels,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            tracks,
            num_classes: labels.num_classes,
        })
    }
}

fn prepare_track(
    track: &TrackRecord,
    manifest: &DatasetManifest,
    data_root: &Path,
    image_size: usize,
    motion_source: &MotionSource,
    augmented: Option<&BTreeMap<String, Vec<AugmentedSentence>>>,
    labels: &LabelMap,
) -> Result<PreparedTrack, TrainError> {
    let provider = DiskFrames::for_track(data_root, track);
    let crops = track_crops(track, &provider, image_size)?;
    let motion = motion_for_track(track, &provider, data_root, motion_source)?
        .resize_bilinear(image_size, image_size)
        .map_err(crate::motion::MotionError::from)?;
    let sentences = match augmented.and_then(|a| a.get(&track.track_id)) {
        Some(pool) => pool.iter().map(|s| s.text.clone()).collect(),
        None => manifest
            .descriptions
            .get(&track.track_id)
            .map(|g| g.sentences.to_vec())
            .unwrap_or_default(),
    };
    if sentences.is_empty() {
        return Err(TrainError::NoSentences {
            track_id: track.track_id.clone(),
        });
    }
    Ok(PreparedTrack {
        track_id: track.track_id.clone(),
        class_index: labels.class_of(&track.track_id).expect("label exists"),
        crops,
        motion,
        sentences,
    })
}

/// All per-box crops of a track, resized to the model input size.
pub fn track_crops(
    track: &TrackRecord,
    provider: &dyn FrameProvider,
    image_size: usize,
) -> Result<Vec<Image>, TrainError> {
    track
        .boxes
        .iter()
        .map(|b| {
            let frame = provider.frame(b.frame_index)?;
            Ok(crate::motion::crop_vehicle(&frame, b, image_size)?)
        })
        .collect()
}

/// The track's motion image per the configured source (not yet resized).
pub fn motion_for_track(
    track: &TrackRecord,
    provider: &dyn FrameProvider,
    _data_root: &Path,
    source: &MotionSource,
) -> Result<Image, TrainError> {
    match source {
        MotionSource::Cache(dir) => {
            let path = dir.join(format!("{}_motion.png", track.track_id));
            Ok(Image::load_png(&path).map_err(crate::motion::MotionError::from)?)
        }
        MotionSource::Compute {
            stride,
            bg_sample_stride,
        } => {
            let frames: Result<Vec<Image>, _> = track
                .frames
                .iter()
                .map(|f| provider.frame(f.frame_index))
                .collect();
            let background = compute_background(frames?, *bg_sample_stride)?;
            Ok(render_motion_image(&background, provider, track, *stride)?.image)
        }
    }
}

/// Stack images into a standardized `[N,3,S,S]` model input batch.
pub fn batch_from_images(images: &[&Image]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let px = img.get(y, x);
                for c in 0..3 {
                    out[[n, c, y, x]] = (px[c] - INPUT_MEAN) / INPUT_STD;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DescriptionGroup, SplitTag};

    fn manifest_with_dup() -> DatasetManifest {
        let mut m = DatasetManifest::new(SplitTag::Train);
        for (id, text) in [("a", "x"), ("b", "y"), ("c", "x")] {
            m.tracks.insert(
                id.into(),
                TrackRecord {
                    track_id: id.into(),
                    video_id: "v".into(),
                    boxes: vec![crate::dataset::BoundingBox {
                        frame_index: 0,
                        x: 0,
                        y: 0,
                        w: 2,
                        h: 2,
                    }],
                    frames: vec![crate::dataset::FrameRef {
                        video_id: "v".into(),
                        frame_index: 0,
                        image_path: "v/0.png".into(),
                    }],
                },
            );
            m.descriptions.insert(
                id.into(),
                DescriptionGroup {
                    group_id: id.into(),
                    sentences: [text.into(), "s2".into(), "s3".into()],
                },
            );
        }
        m
    }

    #[test]
    fn labels_without_merge_are_one_per_track() {
        let m = manifest_with_dup();
        let labels = LabelMap::build(&m, false);
        assert_eq!(labels.num_classes, 3);
        assert_ne!(labels.class_of("a"), labels.class_of("c"));
    }

    #[test]
    fn duplicate_merge_collapses_identical_description_groups() {
        let m = manifest_with_dup();
        let labels = LabelMap::build(&m, true);
        assert_eq!(labels.num_classes, 2);
        assert_eq!(labels.class_of("a"), labels.class_of("c"));
        assert_ne!(labels.class_of("a"), labels.class_of("b"));
    }

    #[test]
    fn batch_standardization_maps_half_to_zero() {
        let img = Image::filled(4, 4, [0.5, 0.75, 0.25]);
        let batch = batch_from_images(&[&img]);
        assert_eq!(batch[[0, 0, 0, 0]], 0.0);
        assert_eq!(batch[[0, 1, 0, 0]], 1.0);
        assert_eq!(batch[[0, 2, 0, 0]], -1.0);
    }
}
