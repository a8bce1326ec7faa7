//! Motion-image synthesis: per-video background by streaming frame averaging,
//! chronological trajectory overlays, and vehicle crops.

use crate::dataset::TrackRecord;
use crate::image::{Image, ImageError};
use ndarray::Array3;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("no frames supplied")]
    NoFrames,
    #[error("frame {index} has size {got_h}x{got_w}, expected {want_h}x{want_w}")]
    DimensionMismatch {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("track {track_id}: box references missing frame {frame_index}")]
    MissingFrame {
        track_id: String,
        frame_index: usize,
    },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("degenerate crop box ({w}x{h} after clipping; need >= 2x2)")]
    DegenerateBox { w: usize, h: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Access to a video's frames by frame index.
pub trait FrameProvider {
    fn frame(&self, frame_index: usize) -> Result<Image, MotionError>;
}

/// Frames held in memory.
pub struct InMemoryFrames {
    frames: HashMap<usize, Image>,
}

impl InMemoryFrames {
    pub fn new(frames: HashMap<usize, Image>) -> Self {
        Self { frames }
    }

    pub fn from_track_images(indices: &[usize], images: Vec<Image>) -> Self {
        Self {
            frames: indices.iter().copied().zip(images).collect(),
        }
    }
}

impl FrameProvider for InMemoryFrames {
    fn frame(&self, frame_index: usize) -> Result<Image, MotionError> {
        self.frames
            .get(&frame_index)
            .cloned()
            .ok_or(MotionError::MissingFrame {
                track_id: String::new(),
                frame_index,
            })
    }
}

/// Frames decoded from PNG files under a root directory.
pub struct DiskFrames {
    root: PathBuf,
    paths: HashMap<usize, PathBuf>,
}

impl DiskFrames {
    pub fn for_track(root: &Path, track: &TrackRecord) -> Self {
        Self {
            root: root.to_path_buf(),
            paths: track
                .frames
                .iter()
                .map(|f| (f.frame_index, f.image_path.clone()))
                .collect(),
        }
    }
}

impl FrameProvider for DiskFrames {
    fn frame(&self, frame_index: usize) -> Result<Image, MotionError> {
        let rel = self
            .paths
            .get(&frame_index)
            .ok_or(MotionError::MissingFrame {
                track_id: String::new(),
                frame_index,
            })?;
        Ok(Image::load_png(&self.root.join(rel))?)
    }
}

/// Background image with vehicle crops pasted at spaced timestamps.
#[derive(Debug, Clone)]
pub struct MotionImage {
    pub image: Image,
    pub source_track_id: String,
    pub stride: usize,
}

/// Pixelwise mean of every `sample_stride`-th frame, accumulated streaming in
/// f64 so memory stays independent of the frame count.
pub fn compute_background<I>(frames: I, sample_stride: usize) -> Result<Image, MotionError>
where
    I: IntoIterator<Item = Image>,
{
    if sample_stride == 0 {
        return Err(MotionError::ZeroStride);
    }
    let mut acc: Option<Array3<f64>> = None;
    let mut count = 0usize;
    for (index, frame) in frames.into_iter().enumerate() {
        if index % sample_stride != 0 {
            continue;
        }
        match &mut acc {
            None => acc = Some(frame.data().clone()),
            Some(sum) => {
                if sum.shape() != frame.data().shape() {
                    return Err(MotionError::DimensionMismatch {
                        index,
                        got_h: frame.height(),
                        got_w: frame.width(),
                        want_h: sum.shape()[0],
                        want_w: sum.shape()[1],
                    });
                }
                *sum += frame.data();
            }
        }
        count += 1;
    }
    let sum = acc.ok_or(MotionError::NoFrames)?;
    Ok(Image::new(sum / count as f64))
}

/// Box indices painted by the stride rule: every `stride`-th box in
/// chronological order, with the final box always included.
pub fn strided_box_indices(n_boxes: usize, stride: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_boxes).step_by(stride.max(1)).collect();
    if let Some(&last) = idx.last() {
        if last != n_boxes - 1 {
            idx.push(n_boxes - 1);
        }
    }
    idx
}

/// Trajectory overlay per the chronological-overwrite rule: start from an
/// all-zero canvas, then paste each selected box's source-frame crop in
/// order (overlaps resolve last-write-wins).
pub fn compose_trajectory(
    frames: &dyn FrameProvider,
    track: &TrackRecord,
    stride: usize,
) -> Result<Image, MotionError> {
    if stride == 0 {
        return Err(MotionError::ZeroStride);
    }
    let first = frame_for_track(frames, track, track.boxes[0].frame_index)?;
    let mut canvas = Image::zeros(first.height(), first.width());
    paste_boxes(&mut canvas, frames, track, stride)?;
    Ok(canvas)
}

/// Motion image: the background with the same strided crops pasted on top.
pub fn render_motion_image(
    background: &Image,
    frames: &dyn FrameProvider,
    track: &TrackRecord,
    stride: usize,
) -> Result<MotionImage, MotionError> {
    if stride == 0 {
        return Err(MotionError::ZeroStride);
    }
    let mut canvas = background.clone();
    paste_boxes(&mut canvas, frames, track, stride)?;
    Ok(MotionImage {
        image: canvas,
        source_track_id: track.track_id.clone(),
        stride,
    })
}

fn paste_boxes(
    canvas: &mut Image,
    frames: &dyn FrameProvider,
    track: &TrackRecord,
    stride: usize,
) -> Result<(), MotionError> {
    for &i in &strided_box_indices(track.boxes.len(), stride) {
        let b = track.boxes[i];
        let frame = frame_for_track(frames, track, b.frame_index)?;
        if frame.height() != canvas.height() || frame.width() != canvas.width() {
            return Err(MotionError::DimensionMismatch {
                index: b.frame_index,
                got_h: frame.height(),
                got_w: frame.width(),
                want_h: canvas.height(),
                want_w: canvas.width(),
            });
        }
        let crop = frame.region(b.x, b.y, b.w, b.h)?;
        canvas.paste(&crop, b.x, b.y)?;
    }
    Ok(())
}

fn frame_for_track(
    frames: &dyn FrameProvider,
    track: &TrackRecord,
    frame_index: usize,
) -> Result<Image, MotionError> {
    frames.frame(frame_index).map_err(|e| match e {
        MotionError::MissingFrame { .. } => MotionError::MissingFrame {
            track_id: track.track_id.clone(),
            frame_index,
        },
        other => other,
    })
}

/// Crop a box out of a frame and resize it to `out_size` square with
/// bilinear interpolation. The box is clipped to the frame first; a clipped
/// extent below 2 pixels is rejected.
pub fn crop_vehicle(
    frame: &Image,
    bbox: &crate::dataset::BoundingBox,
    out_size: usize,
) -> Result<Image, MotionError> {
    let x = bbox.x.min(frame.width().saturating_sub(1));
    let y = bbox.y.min(frame.height().saturating_sub(1));
    let w = bbox.w.min(frame.width() - x);
    let h = bbox.h.min(frame.height() - y);
    if w < 2 || h < 2 {
        return Err(MotionError::DegenerateBox { w, h });
    }
    let crop = frame.region(x, y, w, h)?;
    Ok(crop.resize_bilinear(out_size, out_size)?)
}
