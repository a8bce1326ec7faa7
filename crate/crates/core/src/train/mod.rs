//! The optimization loop: per-step seeded batch sampling, gradient steps on
//! every trainable parameter including the temperature, metrics logging, and
//! checkpointed resumption.

pub mod data;
mod optim;
mod sampler;

pub use data::{batch_from_images, LabelMap, MotionSource, PreparedTrack, TrainData};
pub use optim::{learning_rate, Optimizer, OptimizerKind, ScheduleKind};
pub use sampler::{sample_batch, TrainSample};

use crate::losses::{self, ContrastiveLevels, LossComponents, LossError, LossOptions, LossWeights};
use crate::model::{
    load_checkpoint, save_checkpoint, ForwardPass, Model, ModelError, TextEncoderMode,
};
use crate::motion::MotionError;
use crate::tensor::TensorError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch size {batch_size} invalid for {available} classes")]
    BadBatchSize {
        batch_size: usize,
        available: usize,
    },
    #[error("batch size must be >= 2 when barlow twins is active")]
    BarlowNeedsPairs,
    #[error(
        "non-finite loss at step {step}; step rejected \
         (local {l_local:.4e}, global {l_global:.4e}, fusion {l_fusion:.4e}, \
         instance {l_instance:.4e}, barlow {l_barlow:.4e}, tau {tau:.4e})"
    )]
    NonFiniteLoss {
        step: usize,
        l_local: f64,
        l_global: f64,
        l_fusion: f64,
        l_instance: f64,
        l_barlow: f64,
        tau: f64,
    },
    #[error("track {track_id} has no sentences to sample")]
    NoSentences { track_id: String },
    #[error("metrics io at {path}: {source}")]
    MetricsIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub weights: LossWeights,
    pub options: LossOptions,
    pub seed: u64,
    /// Collapse duplicate description groups onto one instance-loss class.
    pub merge_duplicate_classes: bool,
    /// Save a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 30,
            base_lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            schedule: ScheduleKind::Cosine,
            warmup_steps: 20,
            weights: LossWeights::default(),
            options: LossOptions::default(),
            seed: 7,
            merge_duplicate_classes: false,
            checkpoint_every: 0,
        }
    }
}

/// Decorrelated per-step RNG so a resumed run replays the exact batch stream.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn lr_multipliers(model: &Model) -> Vec<f64> {
    let text_mult = match model.config.text_encoder_mode {
        TextEncoderMode::Frozen => 0.0,
        TextEncoderMode::LowLr(m) => m,
    };
    model
        .params
        .refs()
        .map(|r| {
            if model.params.name(r).starts_with("text_backbone.") {
                text_mult
            } else {
                1.0
            }
        })
        .collect()
}

/// One gradient step on a sampled batch. Rejects the step (parameters
/// untouched) when the loss goes non-finite.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &[TrainSample],
    config: &TrainConfig,
    lr: f64,
) -> Result<LossComponents, TrainError> {
    if config.options.barlow && batch.len() < 2 {
        return Err(TrainError::BarlowNeedsPairs);
    }
    let crops: Vec<&crate::image::Image> = batch.iter().map(|s| &s.crop).collect();
    let motions: Vec<&crate::image::Image> = batch.iter().map(|s| &s.motion).collect();
    let crop_batch = batch_from_images(&crops);
    let motion_batch = batch_from_images(&motions);
    let token_ids: Vec<Vec<usize>> = batch
        .iter()
        .map(|s| crate::text::tokenize(&s.sentence, &model.vocab, model.config.max_text_len).0)
        .collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.class_index).collect();

    let mut pass = ForwardPass::new(model, true);
    let streams = model.dual_stream_forward(&mut pass, &crop_batch, &motion_batch)?;
    let (_h_t, z_t) = model.text_forward(&mut pass, &token_ids)?;
    let (tau, inv_tau) = model.tau_nodes(&mut pass);
    let w_shared = pass.param(&model.params, model.w_shared);
    let levels = ContrastiveLevels {
        local: streams.z_local,
        global: streams.z_global,
        fusion: streams.z_fusion,
    };
    let loss = losses::total_loss(
        &mut pass.tape,
        &levels,
        z_t,
        w_shared,
        &labels,
        tau,
        inv_tau,
        &config.weights,
        &config.options,
    )?;
    let comps = loss.components;
    if !comps.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: optimizer.step,
            l_local: comps.l_local,
            l_global: comps.l_global,
            l_fusion: comps.l_fusion,
            l_instance: comps.l_instance,
            l_barlow: comps.l_barlow,
            tau: comps.tau,
        });
    }

    let grads = pass.tape.backward(loss.node)?;
    let grad_arrays: Vec<ndarray::ArrayD<f64>> = model
        .params
        .refs()
        .map(|r| pass.grad_of(&grads, &model.params, r))
        .collect();
    let multipliers = lr_multipliers(model);
    optimizer.apply(&mut model.params, &grad_arrays, lr, &multipliers);

    // Clamp the temperature after every update.
    let tau_clamped = model.tau().clamp(TAU_MIN, TAU_MAX);
    model.set_tau(tau_clamped);
    model.commit_bn_updates(&pass, BN_MOMENTUM);
    Ok(comps)
}

pub struct FitReport {
    pub steps_run: usize,
    pub final_components: Option<LossComponents>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: &Path, append: bool) -> Result<Self, TrainError> {
        let io_err = |source| TrainError::MetricsIo {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(io_err)?;
        let mut writer = csv::WriterBuilder::new().from_writer(file);
        if !append || !exists {
            writer
                .write_record([
                    "step",
                    "l_local",
                    "l_global",
                    "l_fusion",
                    "l_instance",
                    "l_barlow",
                    "tau",
                ])
                .map_err(|e| TrainError::MetricsIo {
                    path: path.to_path_buf(),
                    source: std::io::Error::other(e),
                })?;
        }
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, step: usize, c: &LossComponents) -> Result<(), TrainError> {
        self.writer
            .write_record([
                step.to_string(),
                c.l_local.to_string(),
                c.l_global.to_string(),
                c.l_fusion.to_string(),
                c.l_instance.to_string(),
                c.l_barlow.to_string(),
                c.tau.to_string(),
            ])
            .and_then(|()| self.writer.flush().map_err(csv::Error::from))
            .map_err(|e| TrainError::MetricsIo {
                path: self.path.clone(),
                source: std::io::Error::other(e),
            })
    }
}

/// Run the optimization loop over prepared data. With `resume`, continues
/// from the checkpoint's recorded step using the same per-step batch stream.
pub fn fit(
    model: &mut Model,
    train_data: &TrainData,
    config: &TrainConfig,
    checkpoint_path: &Path,
    metrics_path: &Path,
    resume: bool,
) -> Result<FitReport, TrainError> {
    if config.options.barlow && config.batch_size < 2 {
        return Err(TrainError::BarlowNeedsPairs);
    }
    if config.batch_size == 0 || config.batch_size > train_data.num_classes {
        return Err(TrainError::BadBatchSize {
            batch_size: config.batch_size,
            available: train_data.num_classes,
        });
    }

    let steps_per_epoch = (train_data.num_classes / config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;

    let mut start_step = 0usize;
    let mut optimizer = Optimizer::new(config.optimizer, &model.params);
    if resume && checkpoint_path.exists() {
        let (restored, snapshot) = load_checkpoint(checkpoint_path)?;
        *model = restored;
        if let Some(snap) = snapshot {
            start_step = snap.step;
            optimizer = Optimizer::restore(config.optimizer, &model.params, &snap)?;
        }
    }

    let mut metrics = MetricsLog::create(metrics_path, resume && start_step > 0)?;
    let mut last = None;
    for step in start_step..total_steps {
        let mut rng = step_rng(config.seed, step);
        let batch = sample_batch(train_data, config.batch_size, &mut rng)?;
        let lr = learning_rate(
            config.base_lr,
            config.schedule,
            config.warmup_steps,
            step,
            total_steps,
        );
        let comps = train_step(model, &mut optimizer, &batch, config, lr)?;
        metrics.append(step, &comps)?;
        last = Some(comps);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            save_checkpoint(model, Some(optimizer.snapshot()), checkpoint_path)?;
        }
    }
    save_checkpoint(model, Some(optimizer.snapshot()), checkpoint_path)?;
    Ok(FitReport {
        steps_run: total_steps.saturating_sub(start_step),
        final_components: last,
        metrics_path: metrics_path.to_path_buf(),
        checkpoint_path: checkpoint_path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::model::EncoderConfig;
    use crate::text::Vocab;
    use crate::train::data::PreparedTrack;

    fn tiny_model(num_tracks: usize) -> Model {
        let config = EncoderConfig {
            image_size: 16,
            hidden_dim: 8,
            conv_widths: vec![4, 6],
            text_embed_dim: 6,
            text_ffn_dim: 8,
            max_text_len: 8,
            num_tracks,
            ..EncoderConfig::default()
        };
        let vocab = Vocab::build([
            "a red sedan goes straight",
            "the blue van stops here",
            "a green truck turns left",
            "a white suv turns right",
        ]);
        Model::new(config, vocab, 5).unwrap()
    }

    fn tiny_data(n: usize) -> TrainData {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sentences = [
            "a red sedan goes straight",
            "the blue van stops here",
            "a green truck turns left",
            "a white suv turns right",
        ];
        let tracks = (0..n)
            .map(|i| {
                let mut crop = Image::zeros(16, 16);
                let mut motion = Image::zeros(16, 16);
                for y in 0..16 {
                    for x in 0..16 {
                        crop.put(y, x, [rng.random(), rng.random(), rng.random()]);
                        motion.put(y, x, [rng.random(), rng.random(), rng.random()]);
                    }
                }
                PreparedTrack {
                    track_id: format!("t{i:03}"),
                    class_index: i,
                    crops: vec![crop],
                    motion,
                    sentences: vec![sentences[i % sentences.len()].to_string()],
                }
            })
            .collect();
        TrainData {
            tracks,
            num_classes: n,
        }
    }

    #[test]
    fn all_zero_weights_leave_parameters_unchanged() {
        let mut model = tiny_model(4);
        let data = tiny_data(4);
        let config = TrainConfig {
            batch_size: 4,
            weights: LossWeights {
                lambda_t2i: 0.0,
                lambda_i2t: 0.0,
                level_local: 0.0,
                level_global: 0.0,
                level_fusion: 0.0,
                w_instance: 0.0,
                w_barlow: 0.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        let before: Vec<_> = model
            .params
            .iter()
            .map(|(_, v)| v.clone())
            .collect();
        let mut rng = step_rng(1, 0);
        let batch = sample_batch(&data, 4, &mut rng).unwrap();
        let mut opt = Optimizer::new(config.optimizer, &model.params);
        train_step(&mut model, &mut opt, &batch, &config, 1e-3).unwrap();
        for ((_, after), before) in model.params.iter().zip(before.iter()) {
            assert_eq!(after, before);
        }
    }

    #[test]
    fn identical_seeds_give_identical_parameters_after_steps() {
        let data = tiny_data(4);
        let config = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(4);
            let mut opt = Optimizer::new(config.optimizer, &model.params);
            for step in 0..2 {
                let mut rng = step_rng(config.seed, step);
                let batch = sample_batch(&data, 3, &mut rng).unwrap();
                train_step(&mut model, &mut opt, &batch, &config, 1e-3).unwrap();
            }
            model
                .params
                .iter()
                .map(|(_, v)| v.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_text_mode_keeps_backbone_bits_while_head_trains() {
        let mut model = tiny_model(4);
        model.config.text_encoder_mode = TextEncoderMode::Frozen;
        let data = tiny_data(4);
        let config = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let text_refs = model.params_with_prefix("text_backbone.");
        let head_refs = model.params_with_prefix("heads.text.");
        let text_before: Vec<_> = text_refs
            .iter()
            .map(|r| model.params.value(*r).clone())
            .collect();
        let head_before: Vec<_> = head_refs
            .iter()
            .map(|r| model.params.value(*r).clone())
            .collect();
        let mut opt = Optimizer::new(config.optimizer, &model.params);
        for step in 0..10 {
            let mut rng = step_rng(2, step);
            let batch = sample_batch(&data, 4, &mut rng).unwrap();
            train_step(&mut model, &mut opt, &batch, &config, 1e-3).unwrap();
        }
        for (r, before) in text_refs.iter().zip(text_before.iter()) {
            assert_eq!(model.params.value(*r), before, "frozen backbone changed");
        }
        let head_changed = head_refs
            .iter()
            .zip(head_before.iter())
            .any(|(r, before)| model.params.value(*r) != before);
        assert!(head_changed, "projection head must keep training");
    }

    #[test]
    fn tau_stays_clamped_above_minimum() {
        let mut model = tiny_model(4);
        model.set_tau(0.010_5);
        let data = tiny_data(4);
        let config = TrainConfig {
            batch_size: 4,
            base_lr: 0.5, // aggressive on purpose
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(config.optimizer, &model.params);
        for step in 0..5 {
            let mut rng = step_rng(3, step);
            let batch = sample_batch(&data, 4, &mut rng).unwrap();
            let _ = train_step(&mut model, &mut opt, &batch, &config, config.base_lr);
        }
        assert!(model.tau() >= TAU_MIN);
        assert!(model.tau() <= TAU_MAX);
    }

    #[test]
    fn epochs_zero_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(4);
        let data = tiny_data(4);
        let init: Vec<_> = model.params.iter().map(|(_, v)| v.clone()).collect();
        let config = TrainConfig {
            epochs: 0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let ckpt = dir.path().join("model.ckpt.json");
        let metrics = dir.path().join("metrics.csv");
        fit(&mut model, &data, &config, &ckpt, &metrics, false).unwrap();
        let (loaded, _) = load_checkpoint(&ckpt).unwrap();
        for ((_, v), init_v) in loaded.params.iter().zip(init.iter()) {
            assert_eq!(v, init_v);
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = tiny_data(4);
        let base = TrainConfig {
            batch_size: 4,
            epochs: 6, // 6 steps at one step per epoch
            warmup_steps: 2,
            ..TrainConfig::default()
        };

        // Uninterrupted run.
        let dir1 = tempfile::tempdir().unwrap();
        let mut m1 = tiny_model(4);
        fit(
            &mut m1,
            &data,
            &base,
            &dir1.path().join("c.json"),
            &dir1.path().join("m.csv"),
            false,
        )
        .unwrap();

        // Interrupted at step 3, then resumed.
        let dir2 = tempfile::tempdir().unwrap();
        let ckpt = dir2.path().join("c.json");
        let metrics = dir2.path().join("m.csv");
        let mut m2 = tiny_model(4);
        let half = TrainConfig {
            epochs: 3,
            ..base.clone()
        };
        fit(&mut m2, &data, &half, &ckpt, &metrics, false).unwrap();
        let mut m3 = tiny_model(4);
        fit(&mut m3, &data, &base, &ckpt, &metrics, true).unwrap();

        for ((_, a), (_, b)) in m1.params.iter().zip(m3.params.iter()) {
            assert_eq!(a, b, "resumed parameters must match uninterrupted run");
        }
    }

    #[test]
    fn descent_on_fixed_micro_dataset() {
        // 200 steps on 4 tracks: total loss must drop below its initial value.
        let mut model = tiny_model(4);
        let data = tiny_data(4);
        let config = TrainConfig {
            batch_size: 4,
            base_lr: 3e-3,
            warmup_steps: 5,
            schedule: ScheduleKind::Constant,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(config.optimizer, &model.params);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..200 {
            let mut rng = step_rng(11, step);
            let batch = sample_batch(&data, 4, &mut rng).unwrap();
            let comps = train_step(&mut model, &mut opt, &batch, &config, 3e-3).unwrap();
            if first.is_none() {
                first = Some(comps.total);
            }
            last = comps.total;
        }
        assert!(
            last < first.unwrap(),
            "loss should descend: first {first:?}, last {last}"
        );
    }
}
