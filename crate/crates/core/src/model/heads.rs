//! Projection and classification heads: W2 · relu(norm(W1 · h)) + b2, with
//! batch normalization on visual heads and layer normalization on the text
//! head.

use super::{ForwardPass, ParamRef, ParamSet};
use crate::tensor::{NodeId, TensorError};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BnStats {
    /// Identity statistics: mean 0, variance 1.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Batch normalization; `slot` indexes the model's running-stat store.
    Batch { slot: usize },
    Layer,
}

pub struct ProjectionHead {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub norm: NormKind,
    w1: ParamRef,
    gamma: ParamRef,
    beta: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
}

impl ProjectionHead {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        norm: NormKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n1 = Normal::new(0.0, (2.0 / (in_dim + hidden_dim) as f64).sqrt()).expect("normal");
        let n2 = Normal::new(0.0, (2.0 / (hidden_dim + out_dim) as f64).sqrt()).expect("normal");
        let w1 = params.register(
            format!("{prefix}.w1"),
            ArrayD::from_shape_fn(IxDyn(&[in_dim, hidden_dim]), |_| n1.sample(rng)),
        );
        let gamma = params.register(
            format!("{prefix}.norm.gamma"),
            ArrayD::from_elem(IxDyn(&[hidden_dim]), 1.0),
        );
        let beta = params.register(
            format!("{prefix}.norm.beta"),
            ArrayD::zeros(IxDyn(&[hidden_dim])),
        );
        let w2 = params.register(
            format!("{prefix}.w2"),
            ArrayD::from_shape_fn(IxDyn(&[hidden_dim, out_dim]), |_| n2.sample(rng)),
        );
        let b2 = params.register(format!("{prefix}.b2"), ArrayD::zeros(IxDyn(&[out_dim])));
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            norm,
            w1,
            gamma,
            beta,
            w2,
            b2,
        }
    }

    /// `x [M,in] -> [M,out]`. Batch-norm heads use batch statistics in
    /// training mode (recording them on the pass for the running-stat
    /// update) and running statistics in eval mode.
    pub fn forward(
        &self,
        pass: &mut ForwardPass,
        params: &ParamSet,
        bn_running: &[BnStats],
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w1 = pass.param(params, self.w1);
        let gamma = pass.param(params, self.gamma);
        let beta = pass.param(params, self.beta);
        let w2 = pass.param(params, self.w2);
        let b2 = pass.param(params, self.b2);

        let a = pass.tape.matmul(x, w1)?;
        let normed = match self.norm {
            NormKind::Layer => pass.tape.layer_norm(a, gamma, beta)?,
            NormKind::Batch { slot } => {
                if pass.training {
                    let av = pass
                        .tape
                        .value(a)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("2-D activations");
                    let (mean, var) = batch_stats(&av.to_owned());
                    pass.bn_updates.push((slot, mean.clone(), var.clone()));
                    pass.tape.batch_norm(a, gamma, beta, &mean, &var, true)?
                } else {
                    let stats = &bn_running[slot];
                    pass.tape
                        .batch_norm(a, gamma, beta, &stats.mean, &stats.var, false)?
                }
            }
        };
        let activated = pass.tape.relu(normed);
        let out = pass.tape.matmul(activated, w2)?;
        pass.tape.add_bias_rows(out, b2)
    }

    pub fn param_refs(&self) -> [ParamRef; 5] {
        [self.w1, self.gamma, self.beta, self.w2, self.b2]
    }
}

fn batch_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
    let var = x.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty") - mean.mapv(|v| v * v);
    (mean, var.mapv(|v| v.max(0.0)))
}
