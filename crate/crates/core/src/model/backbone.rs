//! Toy convolutional backbone: stride-2 conv blocks with ReLU, then global
//! average pooling. Pluggable behind the feature-vector contract for larger
//! backbones.

use super::{ForwardPass, ParamRef, ParamSet};
use crate::tensor::{NodeId, TensorError};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct ConvBackbone {
    blocks: Vec<ConvBlock>,
    pub feat_dim: usize,
}

struct ConvBlock {
    w: ParamRef,
    b: ParamRef,
}

impl ConvBackbone {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut in_ch = 3usize;
        for (i, &out_ch) in widths.iter().enumerate() {
            // He initialization for 3x3 kernels.
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("normal");
            let w = params.register(
                format!("{prefix}.conv{i}.w"),
                ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, 3, 3]), |_| normal.sample(rng)),
            );
            let b = params.register(
                format!("{prefix}.conv{i}.b"),
                ArrayD::zeros(IxDyn(&[out_ch])),
            );
            blocks.push(ConvBlock { w, b });
            in_ch = out_ch;
        }
        Self {
            blocks,
            feat_dim: in_ch,
        }
    }

    /// `[N,3,S,S]` image node -> `[N,feat_dim]` feature node.
    pub fn forward(
        &self,
        pass: &mut ForwardPass,
        params: &ParamSet,
        mut x: NodeId,
    ) -> Result<NodeId, TensorError> {
        for block in &self.blocks {
            let w = pass.param(params, block.w);
            let b = pass.param(params, block.b);
            let conv = pass.tape.conv2d(x, w, 2, 1)?;
            let biased = pass.tape.add_bias_channels(conv, b)?;
            x = pass.tape.relu(biased);
        }
        pass.tape.global_avg_pool(x)
    }

    pub fn first_weight(&self) -> ParamRef {
        self.blocks[0].w
    }
}
