//! Natural-language vehicle retrieval at desk scale: motion-image synthesis
//! from tracked video, description augmentation, joint dual-stream visual +
//! text encoder training with contrastive and instance objectives, and
//! MRR-ranked retrieval.

pub mod dataset;
pub mod eval;
pub mod image;
pub mod losses;
pub mod model;
pub mod motion;
pub mod tensor;
pub mod text;
pub mod train;

pub use dataset::{
    BoundingBox, DatasetManifest, DescriptionGroup, FrameRef, SplitTag, TrackRecord,
};
pub use image::Image;
pub use losses::{LossComponents, LossOptions, LossWeights};
pub use model::{EncoderConfig, Model, ModelMode, TextEncoderMode};
pub use motion::MotionImage;
pub use train::TrainConfig;
