//! Dual-stream visual encoder, toy text encoder, projection and
//! classification heads, and the learnable temperature.

mod backbone;
mod checkpoint;
mod heads;
mod text_encoder;

pub use backbone::ConvBackbone;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot, TensorData,
};
pub use heads::{BnStats, NormKind, ProjectionHead};
pub use text_encoder::TextEncoder;

use crate::tensor::{Gradients, NodeId, Tape, TensorError};
use crate::text::Vocab;
use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input image batch is {got:?}, expected [N,3,{want},{want}]")]
    ImageSizeMismatch { want: usize, got: Vec<usize> },
    #[error("sentence tokenized to zero tokens")]
    EmptySentence,
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which retrieval architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Local crop stream + global motion stream + fusion (the full model).
    Dual,
    /// Crop stream only (the appearance-only ablation baseline).
    LocalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "multiplier")]
pub enum TextEncoderMode {
    Frozen,
    LowLr(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Side length the crop and motion inputs are resized to.
    pub image_size: usize,
    /// Joint embedding width; the architecture fixes this at 512.
    pub embed_dim: usize,
    /// Hidden width of every projection/classification head.
    pub hidden_dim: usize,
    /// Output channels of the stride-2 conv blocks; the last entry is the
    /// backbone feature width.
    pub conv_widths: Vec<usize>,
    pub text_embed_dim: usize,
    pub text_ffn_dim: usize,
    pub max_text_len: usize,
    pub text_encoder_mode: TextEncoderMode,
    pub num_tracks: usize,
    pub mode: ModelMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            embed_dim: EMBED_DIM,
            hidden_dim: 128,
            conv_widths: vec![16, 32, 64],
            text_embed_dim: 48,
            text_ffn_dim: 96,
            max_text_len: 32,
            text_encoder_mode: TextEncoderMode::LowLr(0.1),
            num_tracks: 1,
            mode: ModelMode::Dual,
        }
    }
}

pub const EMBED_DIM: usize = 512;

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim != EMBED_DIM {
            return Err(ModelError::BadConfig(format!(
                "embed_dim must be {EMBED_DIM}, got {}",
                self.embed_dim
            )));
        }
        if self.conv_widths.is_empty() {
            return Err(ModelError::BadConfig("conv_widths may not be empty".into()));
        }
        let down = 1usize << self.conv_widths.len();
        if self.image_size % down != 0 || self.image_size < down {
            return Err(ModelError::BadConfig(format!(
                "image_size {} not divisible by 2^{} for the conv stack",
                self.image_size,
                self.conv_widths.len()
            )));
        }
        if let TextEncoderMode::LowLr(m) = self.text_encoder_mode {
            if !(m > 0.0 && m <= 1.0) {
                return Err(ModelError::BadConfig(format!(
                    "text lr multiplier must lie in (0,1], got {m}"
                )));
            }
        }
        if self.num_tracks == 0 {
            return Err(ModelError::BadConfig("num_tracks must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone_feat_dim(&self) -> usize {
        *self.conv_widths.last().expect("validated non-empty")
    }
}

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub(crate) usize);

/// Registry of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamRef {
        self.names.push(name.into());
        self.values.push(value);
        ParamRef(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn value(&self, r: ParamRef) -> &ArrayD<f64> {
        &self.values[r.0]
    }

    pub fn value_mut(&mut self, r: ParamRef) -> &mut ArrayD<f64> {
        &mut self.values[r.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> {
        (0..self.values.len()).map(ParamRef)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// One forward construction over a fresh tape. Parameter leaves are created
/// lazily and deduplicated so each parameter owns exactly one node.
pub struct ForwardPass {
    pub tape: Tape,
    param_nodes: Vec<Option<NodeId>>,
    pub training: bool,
    /// Batch statistics produced by batch-norm heads this pass, to be
    /// committed into running statistics by the training step.
    pub bn_updates: Vec<(usize, Array1<f64>, Array1<f64>)>,
}

impl ForwardPass {
    pub fn new(model: &Model, training: bool) -> Self {
        Self::for_params(&model.params, training)
    }

    pub fn for_params(params: &ParamSet, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            param_nodes: vec![None; params.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, params: &ParamSet, r: ParamRef) -> NodeId {
        if let Some(id) = self.param_nodes[r.0] {
            return id;
        }
        let id = self.tape.leaf(params.value(r).clone());
        self.param_nodes[r.0] = Some(id);
        id
    }

    /// Gradient of the last backward pass w.r.t. a parameter (zeros when the
    /// parameter was never touched or received no gradient).
    pub fn grad_of(
        &self,
        grads: &Gradients,
        params: &ParamSet,
        r: ParamRef,
    ) -> ArrayD<f64> {
        match self.param_nodes[r.0] {
            Some(id) => grads.get_or_zeros(id, params.value(r).shape()),
            None => ArrayD::zeros(IxDyn(params.value(r).shape())),
        }
    }

    pub fn node_of(&self, r: ParamRef) -> Option<NodeId> {
        self.param_nodes[r.0]
    }
}

/// Outputs of one dual-stream forward over a batch.
pub struct StreamOutputs {
    pub h_local: NodeId,
    pub h_global: Option<NodeId>,
    pub z_local: NodeId,
    pub z_global: Option<NodeId>,
    pub z_fusion: Option<NodeId>,
    pub logits_local: NodeId,
    pub logits_global: Option<NodeId>,
    pub logits_fusion: Option<NodeId>,
}

impl StreamOutputs {
    /// The retrieval embedding: fusion for the dual model, local otherwise.
    pub fn retrieval_z(&self) -> NodeId {
        self.z_fusion.unwrap_or(self.z_local)
    }
}

/// All learnable state: backbones, heads, shared classifier, temperature.
pub struct Model {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub bn_running: Vec<BnStats>,
    pub local_backbone: ConvBackbone,
    pub global_backbone: Option<ConvBackbone>,
    pub text_encoder: TextEncoder,
    pub local_head: ProjectionHead,
    pub global_head: Option<ProjectionHead>,
    pub fusion_head: Option<ProjectionHead>,
    pub text_head: ProjectionHead,
    pub cls_local: ProjectionHead,
    pub cls_global: Option<ProjectionHead>,
    pub cls_fusion: Option<ProjectionHead>,
    pub w_shared: ParamRef,
    pub rho: ParamRef,
}

impl Model {
    /// Fresh model with seeded random initialization. The two visual streams
    /// get independent parameters (distinct init seeds).
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut bn_running = Vec::new();
        let feat = config.backbone_feat_dim();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let local_backbone =
            ConvBackbone::init(&mut params, "local_backbone", &config.conv_widths, &mut rng);
        let (global_backbone, fusion_in) = match config.mode {
            ModelMode::Dual => (
                Some(ConvBackbone::init(
                    &mut params,
                    "global_backbone",
                    &config.conv_widths,
                    &mut rng,
                )),
                Some(2 * feat),
            ),
            ModelMode::LocalOnly => (None, None),
        };
        let text_encoder = TextEncoder::init(
            &mut params,
            "text_backbone",
            vocab.len(),
            config.text_embed_dim,
            config.text_ffn_dim,
            config.max_text_len,
            &mut rng,
        );

        let mut bn_head = |params: &mut ParamSet,
                           bn_running: &mut Vec<BnStats>,
                           name: &str,
                           in_dim: usize,
                           out_dim: usize,
                           rng: &mut ChaCha8Rng| {
            let slot = bn_running.len();
            bn_running.push(BnStats::identity(config.hidden_dim));
            ProjectionHead::init(
                params,
                name,
                in_dim,
                config.hidden_dim,
                out_dim,
                NormKind::Batch { slot },
                rng,
            )
        };

        let local_head = bn_head(
            &mut params,
            &mut bn_running,
            "heads.local",
            feat,
            EMBED_DIM,
            &mut rng,
        );
        let (global_head, fusion_head) = if let Some(fin) = fusion_in {
            (
                Some(bn_head(
                    &mut params,
                    &mut bn_running,
                    "heads.global",
                    feat,
                    EMBED_DIM,
                    &mut rng,
                )),
                Some(bn_head(
                    &mut params,
                    &mut bn_running,
                    "heads.fusion",
                    fin,
                    EMBED_DIM,
                    &mut rng,
                )),
            )
        } else {
            (None, None)
        };
        let text_head = ProjectionHead::init(
            &mut params,
            "heads.text",
            config.text_embed_dim,
            config.hidden_dim,
            EMBED_DIM,
            NormKind::Layer,
            &mut rng,
        );
        let cls_local = bn_head(
            &mut params,
            &mut bn_running,
            "cls.local",
            EMBED_DIM,
            config.num_tracks,
            &mut rng,
        );
        let (cls_global, cls_fusion) = match config.mode {
            ModelMode::Dual => (
                Some(bn_head(
                    &mut params,
                    &mut bn_running,
                    "cls.global",
                    EMBED_DIM,
                    config.num_tracks,
                    &mut rng,
                )),
                Some(bn_head(
                    &mut params,
                    &mut bn_running,
                    "cls.fusion",
                    EMBED_DIM,
                    config.num_tracks,
                    &mut rng,
                )),
            ),
            ModelMode::LocalOnly => (None, None),
        };

        let normal = Normal::new(0.0, (2.0 / (EMBED_DIM + config.num_tracks) as f64).sqrt())
            .expect("normal");
        let w_shared = params.register(
            "w_shared",
            ArrayD::from_shape_fn(IxDyn(&[config.num_tracks, EMBED_DIM]), |_| {
                normal.sample(&mut rng)
            }),
        );
        // Temperature parameterized as tau = exp(rho); rho = 0 gives tau = 1.
        let rho = params.register("rho", ArrayD::zeros(IxDyn(&[1])));

        Ok(Self {
            config,
            vocab,
            params,
            bn_running,
            local_backbone,
            global_backbone,
            text_encoder,
            local_head,
            global_head,
            fusion_head,
            text_head,
            cls_local,
            cls_global,
            cls_fusion,
            w_shared,
            rho,
        })
    }

    pub fn tau(&self) -> f64 {
        self.params.value(self.rho)[[0]].exp()
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.params.value_mut(self.rho)[[0]] = tau.ln();
    }

    /// Nodes for tau and 1/tau on the given pass.
    pub fn tau_nodes(&self, pass: &mut ForwardPass) -> (NodeId, NodeId) {
        let rho = pass.param(&self.params, self.rho);
        let tau = pass.tape.exp(rho);
        let neg = pass.tape.neg(rho);
        let inv = pass.tape.exp(neg);
        (tau, inv)
    }

    fn check_images(&self, images: &Array4<f64>) -> Result<(), ModelError> {
        let s = images.shape();
        if s[1] != 3 || s[2] != self.config.image_size || s[3] != self.config.image_size {
            return Err(ModelError::ImageSizeMismatch {
                want: self.config.image_size,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// One visual stream on an image batch `[N,3,S,S]` -> features `[N,feat]`.
    pub fn visual_backbone_forward(
        &self,
        pass: &mut ForwardPass,
        images: &Array4<f64>,
        stream: VisualStream,
    ) -> Result<NodeId, ModelError> {
        self.check_images(images)?;
        let backbone = match stream {
            VisualStream::Local => &self.local_backbone,
            VisualStream::Global => self
                .global_backbone
                .as_ref()
                .ok_or_else(|| ModelError::BadConfig("model has no global stream".into()))?,
        };
        let x = pass.tape.leaf(images.clone().into_dyn());
        Ok(backbone.forward(pass, &self.params, x)?)
    }

    /// Apply one projection/classification head to features `[N,in]`.
    pub fn project(
        &self,
        pass: &mut ForwardPass,
        head: &ProjectionHead,
        h: NodeId,
    ) -> Result<NodeId, ModelError> {
        Ok(head.forward(pass, &self.params, &self.bn_running, h)?)
    }

    /// Full dual-stream forward on aligned crop and motion batches.
    pub fn dual_stream_forward(
        &self,
        pass: &mut ForwardPass,
        crops: &Array4<f64>,
        motions: &Array4<f64>,
    ) -> Result<StreamOutputs, ModelError> {
        let h_local = self.visual_backbone_forward(pass, crops, VisualStream::Local)?;
        let z_local = self.project(pass, &self.local_head, h_local)?;
        let logits_local = self.project(pass, &self.cls_local, z_local)?;

        if self.config.mode == ModelMode::LocalOnly {
            return Ok(StreamOutputs {
                h_local,
                h_global: None,
                z_local,
                z_global: None,
                z_fusion: None,
                logits_local,
                logits_global: None,
                logits_fusion: None,
            });
        }

        let h_global = self.visual_backbone_forward(pass, motions, VisualStream::Global)?;
        let global_head = self.global_head.as_ref().expect("dual mode");
        let fusion_head = self.fusion_head.as_ref().expect("dual mode");
        let z_global = self.project(pass, global_head, h_global)?;
        // Fusion input: concatenated backbone features of the two streams.
        let h_cat = pass.tape.concat_cols(h_local, h_global)?;
        let z_fusion = self.project(pass, fusion_head, h_cat)?;
        let logits_global =
            self.project(pass, self.cls_global.as_ref().expect("dual mode"), z_global)?;
        let logits_fusion =
            self.project(pass, self.cls_fusion.as_ref().expect("dual mode"), z_fusion)?;

        Ok(StreamOutputs {
            h_local,
            h_global: Some(h_global),
            z_local,
            z_global: Some(z_global),
            z_fusion: Some(z_fusion),
            logits_local,
            logits_global: Some(logits_global),
            logits_fusion: Some(logits_fusion),
        })
    }

    /// Encode a batch of tokenized sentences -> (h_t `[M,D_t]`, z_t `[M,512]`).
    pub fn text_forward(
        &self,
        pass: &mut ForwardPass,
        token_ids: &[Vec<usize>],
    ) -> Result<(NodeId, NodeId), ModelError> {
        let mut pooled = Vec::with_capacity(token_ids.len());
        for ids in token_ids {
            if ids.is_empty() {
                return Err(ModelError::EmptySentence);
            }
            pooled.push(self.text_encoder.forward_sentence(pass, &self.params, ids)?);
        }
        let h_t = pass.tape.stack_rows(&pooled)?;
        let z_t = self.project(pass, &self.text_head, h_t)?;
        Ok((h_t, z_t))
    }

    /// Commit the batch statistics gathered during a training forward into
    /// the running statistics (exponential moving average).
    pub fn commit_bn_updates(&mut self, pass: &ForwardPass, momentum: f64) {
        for (slot, mean, var) in &pass.bn_updates {
            let stats = &mut self.bn_running[*slot];
            stats.mean = &stats.mean * (1.0 - momentum) + &(mean * momentum);
            stats.var = &stats.var * (1.0 - momentum) + &(var * momentum);
        }
    }

    /// Parameter refs whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamRef> {
        self.params
            .refs()
            .filter(|r| self.params.name(*r).starts_with(prefix))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualStream {
    Local,
    Global,
}
