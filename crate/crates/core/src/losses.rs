//! Optimization objectives: temperature-scaled cosine similarity, symmetric
//! InfoNCE at three levels, the shared-classifier instance loss, and the
//! Barlow-twins redundancy regularizer.

use crate::tensor::{NodeId, Tape, TensorError};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("zero-norm row {row} in {which} embeddings")]
    ZeroNormRow { which: &'static str, row: usize },
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("batch of {got} too small for barlow twins (needs >= 2)")]
    BatchTooSmall { got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights of the composed objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Text-to-image InfoNCE weight (the evaluation direction).
    pub lambda_t2i: f64,
    /// Image-to-text InfoNCE weight.
    pub lambda_i2t: f64,
    pub level_local: f64,
    pub level_global: f64,
    pub level_fusion: f64,
    pub w_instance: f64,
    pub w_barlow: f64,
    /// Off-diagonal coefficient inside the Barlow-twins loss.
    pub barlow_offdiag: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t2i: 2.0,
            lambda_i2t: 1.0,
            level_local: 1.0,
            level_global: 1.0,
            level_fusion: 1.0,
            w_instance: 1.0,
            w_barlow: 0.0,
            barlow_offdiag: 5e-3,
        }
    }
}

fn zero_norm_ctx(which: &'static str) -> impl Fn(TensorError) -> LossError {
    move |e| match e {
        TensorError::ZeroNormRow { row, .. } => LossError::ZeroNormRow { which, row },
        other => LossError::Tensor(other),
    }
}

/// `S[i][j] = cos(Z_img[i], Z_text[j]) / tau`, with `inv_tau` a scalar node
/// carrying 1/tau so gradients flow into the temperature.
pub fn similarity_matrix(
    tape: &mut Tape,
    z_img: NodeId,
    z_text: NodeId,
    inv_tau: NodeId,
) -> Result<NodeId, LossError> {
    let ni = tape.row_l2_normalize(z_img).map_err(zero_norm_ctx("image"))?;
    let nt = tape.row_l2_normalize(z_text).map_err(zero_norm_ctx("text"))?;
    let ntt = tape.transpose(nt)?;
    let s0 = tape.matmul(ni, ntt)?;
    Ok(tape.mul_scalar_node(s0, inv_tau)?)
}

fn require_square(tape: &Tape, s: NodeId) -> Result<usize, LossError> {
    let shape = tape.value(s).shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(LossError::NotSquare {
            rows: shape.first().copied().unwrap_or(0),
            cols: shape.get(1).copied().unwrap_or(0),
        });
    }
    Ok(shape[0])
}

/// Text-to-image InfoNCE: for each text i the positive competes against the
/// other images (softmax down column i of S).
pub fn info_nce_t2i(tape: &mut Tape, s: NodeId) -> Result<NodeId, LossError> {
    let m = require_square(tape, s)?;
    let st = tape.transpose(s)?;
    nll_of_diagonal(tape, st, m)
}

/// Image-to-text InfoNCE: for each image i the positive competes against the
/// other texts (softmax along row i of S).
pub fn info_nce_i2t(tape: &mut Tape, s: NodeId) -> Result<NodeId, LossError> {
    let m = require_square(tape, s)?;
    nll_of_diagonal(tape, s, m)
}

fn nll_of_diagonal(tape: &mut Tape, s: NodeId, m: usize) -> Result<NodeId, LossError> {
    let lp = tape.log_softmax_rows(s)?;
    let diag_idx: Vec<usize> = (0..m).collect();
    let diag = tape.gather_cols(lp, &diag_idx)?;
    let mean = tape.mean_all(diag);
    Ok(tape.neg(mean))
}

/// `lambda_t2i * L_t2i + lambda_i2t * L_i2t` on one embedding level.
pub fn symmetric_info_nce(
    tape: &mut Tape,
    z_img: NodeId,
    z_text: NodeId,
    inv_tau: NodeId,
    lambda_t2i: f64,
    lambda_i2t: f64,
) -> Result<NodeId, LossError> {
    let s = similarity_matrix(tape, z_img, z_text, inv_tau)?;
    let t2i = info_nce_t2i(tape, s)?;
    let i2t = info_nce_i2t(tape, s)?;
    let a = tape.scale(t2i, lambda_t2i);
    let b = tape.scale(i2t, lambda_i2t);
    Ok(tape.add(a, b)?)
}

/// Visual embedding levels entering the contrastive objective.
pub struct ContrastiveLevels {
    pub local: NodeId,
    pub global: Option<NodeId>,
    pub fusion: Option<NodeId>,
}

pub struct ThreeLevelLoss {
    pub total: NodeId,
    pub local: NodeId,
    pub global: Option<NodeId>,
    pub fusion: Option<NodeId>,
}

/// Symmetric InfoNCE summed over the available levels with one shared
/// temperature; each level's own scalar is reported for logging.
pub fn three_level_contrastive(
    tape: &mut Tape,
    levels: &ContrastiveLevels,
    z_text: NodeId,
    inv_tau: NodeId,
    weights: &LossWeights,
) -> Result<ThreeLevelLoss, LossError> {
    let local = symmetric_info_nce(
        tape,
        levels.local,
        z_text,
        inv_tau,
        weights.lambda_t2i,
        weights.lambda_i2t,
    )?;
    let mut total = tape.scale(local, weights.level_local);
    let global = match levels.global {
        Some(z) => {
            let l = symmetric_info_nce(
                tape,
                z,
                z_text,
                inv_tau,
                weights.lambda_t2i,
                weights.lambda_i2t,
            )?;
            let w = tape.scale(l, weights.level_global);
            total = tape.add(total, w)?;
            Some(l)
        }
        None => None,
    };
    let fusion = match levels.fusion {
        Some(z) => {
            let l = symmetric_info_nce(
                tape,
                z,
                z_text,
                inv_tau,
                weights.lambda_t2i,
                weights.lambda_i2t,
            )?;
            let w = tape.scale(l, weights.level_fusion);
            total = tape.add(total, w)?;
            Some(l)
        }
        None => None,
    };
    Ok(ThreeLevelLoss {
        total,
        local,
        global,
        fusion,
    })
}

/// Shared-classifier instance loss: cross-entropy of `softmax(W_shared z)` at
/// the track label for the visual embedding plus the same for the textual
/// embedding, averaged over the batch.
pub fn instance_loss(
    tape: &mut Tape,
    z_visual: NodeId,
    z_text: NodeId,
    w_shared: NodeId,
    labels: &[usize],
) -> Result<NodeId, LossError> {
    let num_classes = tape.value(w_shared).shape()[0];
    for &label in labels {
        if label >= num_classes {
            return Err(LossError::LabelOutOfRange { label, num_classes });
        }
    }
    let wt = tape.transpose(w_shared)?;
    let mut halves = Vec::with_capacity(2);
    for z in [z_visual, z_text] {
        let logits = tape.matmul(z, wt)?;
        let lp = tape.log_softmax_rows(logits)?;
        let picked = tape.gather_cols(lp, labels)?;
        let mean = tape.mean_all(picked);
        halves.push(tape.neg(mean));
    }
    Ok(tape.add(halves[0], halves[1])?)
}

/// Barlow-twins redundancy reduction between two embedding batches: columns
/// are standardized over the batch, `C = (1/M) A^T B`, and the loss drives C
/// toward identity with `lambda_offdiag` weighting the off-diagonal term.
pub fn barlow_twins(
    tape: &mut Tape,
    z_a: NodeId,
    z_b: NodeId,
    lambda_offdiag: f64,
) -> Result<NodeId, LossError> {
    let m = tape.value(z_a).shape()[0];
    if m < 2 {
        return Err(LossError::BatchTooSmall { got: m });
    }
    let a = tape.standardize_cols(z_a)?;
    let b = tape.standardize_cols(z_b)?;
    let at = tape.transpose(a)?;
    let c0 = tape.matmul(at, b)?;
    let c = tape.scale(c0, 1.0 / m as f64);

    let d = tape.value(c).shape()[0];
    let eye: ArrayD<f64> = Array2::from_shape_fn((d, d), |(i, j)| f64::from(i == j)).into_dyn();
    let off_mask: ArrayD<f64> =
        Array2::from_shape_fn((d, d), |(i, j)| f64::from(i != j)).into_dyn();
    // (C - I) squares to (C_dd - 1)^2 on the diagonal and C_de^2 off it.
    let cm = tape.sub_const(c, eye.clone())?;
    let sq = tape.mul(cm, cm)?;
    let diag_sq = tape.mul_mask(sq, eye)?;
    let off_sq = tape.mul_mask(sq, off_mask)?;
    let diag_sum = tape.sum_all(diag_sq);
    let off_sum = tape.sum_all(off_sq);
    let off_weighted = tape.scale(off_sum, lambda_offdiag);
    Ok(tape.add(diag_sum, off_weighted)?)
}

/// Scalar values of every component of one total-loss evaluation, for the
/// metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_local: f64,
    pub l_global: f64,
    pub l_fusion: f64,
    pub l_instance: f64,
    pub l_barlow: f64,
    pub tau: f64,
    pub total: f64,
}

/// Which optional objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    pub contrastive: bool,
    pub instance: bool,
    pub barlow: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            contrastive: true,
            instance: true,
            barlow: false,
        }
    }
}

pub struct TotalLoss {
    pub node: NodeId,
    pub components: LossComponents,
}

/// Compose the full objective:
/// three-level contrastive + w_instance * instance + w_barlow * barlow.
/// The instance and Barlow terms operate on the retrieval-level visual
/// embedding (fusion when present, local otherwise).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    levels: &ContrastiveLevels,
    z_text: NodeId,
    w_shared: NodeId,
    labels: &[usize],
    tau_node: NodeId,
    inv_tau: NodeId,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<TotalLoss, LossError> {
    let retrieval_z = levels.fusion.unwrap_or(levels.local);
    let mut total = tape.scalar_leaf(0.0);
    let mut comps = LossComponents {
        l_local: 0.0,
        l_global: 0.0,
        l_fusion: 0.0,
        l_instance: 0.0,
        l_barlow: 0.0,
        tau: tape.scalar(tau_node),
        total: 0.0,
    };
    if options.contrastive {
        let c = three_level_contrastive(tape, levels, z_text, inv_tau, weights)?;
        comps.l_local = tape.scalar(c.local);
        comps.l_global = c.global.map(|n| tape.scalar(n)).unwrap_or(0.0);
        comps.l_fusion = c.fusion.map(|n| tape.scalar(n)).unwrap_or(0.0);
        total = tape.add(total, c.total)?;
    }
    if options.instance {
        let li = instance_loss(tape, retrieval_z, z_text, w_shared, labels)?;
        comps.l_instance = tape.scalar(li);
        let w = tape.scale(li, weights.w_instance);
        total = tape.add(total, w)?;
    }
    if options.barlow {
        let lb = barlow_twins(tape, retrieval_z, z_text, weights.barlow_offdiag)?;
        comps.l_barlow = tape.scalar(lb);
        let w = tape.scale(lb, weights.w_barlow);
        total = tape.add(total, w)?;
    }
    comps.total = tape.scalar(total);
    Ok(TotalLoss {
        node: total,
        components: comps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use ndarray::{array, Array2, ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct per-pair cosine oracle, no shared normalization path.
    fn cosine_oracle(zi: &Array2<f64>, zt: &Array2<f64>, tau: f64) -> Array2<f64> {
        let (m, n) = (zi.nrows(), zt.nrows());
        let mut s = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let u = zi.row(i);
                let v = zt.row(j);
                let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                s[[i, j]] = dot / (nu * nv) / tau;
            }
        }
        s
    }

    /// Direct evaluation of the two InfoNCE formulas without stabilization.
    fn info_nce_oracle(s: &Array2<f64>) -> (f64, f64) {
        let m = s.nrows();
        let mut t2i = 0.0;
        let mut i2t = 0.0;
        for i in 0..m {
            let denom_t2i: f64 = (0..m).map(|j| s[[j, i]].exp()).sum();
            t2i -= (s[[i, i]].exp() / denom_t2i).ln();
            let denom_i2t: f64 = (0..m).map(|j| s[[i, j]].exp()).sum();
            i2t -= (s[[i, i]].exp() / denom_i2t).ln();
        }
        (t2i / m as f64, i2t / m as f64)
    }

    fn eval_similarity(zi: &Array2<f64>, zt: &Array2<f64>, tau: f64) -> Array2<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(zi.clone().into_dyn());
        let b = tape.leaf(zt.clone().into_dyn());
        let inv = tape.scalar_leaf(1.0 / tau);
        let s = similarity_matrix(&mut tape, a, b, inv).unwrap();
        tape.value(s)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    #[test]
    fn identical_unit_rows_give_all_ones() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let s = eval_similarity(&z, &z, 1.0);
        for v in s.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_rows_give_zero_off_diagonals() {
        let zi = array![[1.0, 0.0], [0.0, 1.0]];
        let s = eval_similarity(&zi, &zi, 1.0);
        assert!((s[[0, 1]]).abs() < 1e-12);
        assert!((s[[1, 0]]).abs() < 1e-12);
        assert!((s[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zi = rand_matrix(&mut rng, 4, 8);
        let zt = rand_matrix(&mut rng, 4, 8);
        let tau = 0.37;
        let s = eval_similarity(&zi, &zt, tau);
        let oracle = cosine_oracle(&zi, &zt, tau);
        let max_diff = s
            .iter()
            .zip(oracle.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn zero_norm_row_is_identified() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[0.0, 0.0], [1.0, 0.0]].into_dyn());
        let b = tape.leaf(array![[1.0, 0.0], [0.0, 1.0]].into_dyn());
        let inv = tape.scalar_leaf(1.0);
        match similarity_matrix(&mut tape, a, b, inv) {
            Err(LossError::ZeroNormRow { which: "image", row: 0 }) => {}
            other => panic!("expected image row 0, got {other:?}"),
        }
    }

    fn eval_nce(s: &Array2<f64>) -> (f64, f64) {
        let mut tape = Tape::new();
        let sn = tape.leaf(s.clone().into_dyn());
        let t2i = info_nce_t2i(&mut tape, sn).unwrap();
        let i2t = info_nce_i2t(&mut tape, sn).unwrap();
        (tape.scalar(t2i), tape.scalar(i2t))
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let s = array![[2.7]];
        let (t2i, i2t) = eval_nce(&s);
        assert_eq!(t2i, 0.0);
        assert_eq!(i2t, 0.0);
    }

    #[test]
    fn uniform_similarities_give_log_m() {
        for m in [2usize, 3, 5] {
            let s = Array2::from_elem((m, m), 0.83);
            let (t2i, i2t) = eval_nce(&s);
            let want = (m as f64).ln();
            assert!((t2i - want).abs() <= 1e-9);
            assert!((i2t - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn random_similarities_match_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = rand_matrix(&mut rng, 4, 4);
            let (t2i, i2t) = eval_nce(&s);
            let (ot2i, oi2t) = info_nce_oracle(&s);
            assert!((t2i - ot2i).abs() <= 1e-8);
            assert!((i2t - oi2t).abs() <= 1e-8);
        }
    }

    #[test]
    fn reducing_positive_similarity_increases_t2i() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = rand_matrix(&mut rng, 4, 4);
        let (base, _) = eval_nce(&s);
        s[[2, 2]] -= 0.5;
        let (worse, _) = eval_nce(&s);
        assert!(worse > base, "worsening the positive must increase the loss");
    }

    #[test]
    fn symmetric_nce_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zi = rand_matrix(&mut rng, 3, 5);
        let zt = rand_matrix(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let a = tape.leaf(zi.into_dyn());
        let b = tape.leaf(zt.into_dyn());
        let inv = tape.scalar_leaf(1.0);
        let l = symmetric_info_nce(&mut tape, a, b, inv, 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn uniform_case_composes_to_three_log_m() {
        // Identical rows make every cosine 1, so S is uniform: with the
        // default lambda1=2, lambda2=1 the loss is 3 log M.
        let m = 4;
        let z = Array2::from_shape_fn((m, 6), |(_, j)| (j as f64) + 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(z.clone().into_dyn());
        let b = tape.leaf(z.into_dyn());
        let inv = tape.scalar_leaf(1.0);
        let l = symmetric_info_nce(&mut tape, a, b, inv, 2.0, 1.0).unwrap();
        assert!((tape.scalar(l) - 3.0 * (m as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn symmetric_nce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zi = rand_matrix(&mut rng, 3, 5).into_dyn();
        let zt = rand_matrix(&mut rng, 3, 5).into_dyn();
        let rho = ArrayD::from_elem(IxDyn(&[1]), 0.2);

        let mut build = |vals: &[ArrayD<f64>]| {
            let mut tape = Tape::new();
            let a = tape.leaf(vals[0].clone());
            let b = tape.leaf(vals[1].clone());
            let r = tape.leaf(vals[2].clone());
            let nr = tape.neg(r);
            let inv = tape.exp(nr);
            let l = symmetric_info_nce(&mut tape, a, b, inv, 2.0, 1.0).unwrap();
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let a = tape.leaf(zi.clone());
        let b = tape.leaf(zt.clone());
        let r = tape.leaf(rho.clone());
        let nr = tape.neg(r);
        let inv = tape.exp(nr);
        let l = symmetric_info_nce(&mut tape, a, b, inv, 2.0, 1.0).unwrap();
        let grads = tape.backward(l).unwrap();
        let analytic = vec![
            grads.get_or_zeros(a, zi.shape()),
            grads.get_or_zeros(b, zt.shape()),
            grads.get_or_zeros(r, &[1]),
        ];
        let err = gradcheck::max_relative_error(
            &[zi, zt, rho],
            &analytic,
            &mut build,
            1e-6,
            1e-8,
        );
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn three_levels_with_equal_embeddings_triple_the_single_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_matrix(&mut rng, 4, 6).into_dyn();
        let zt = rand_matrix(&mut rng, 4, 6).into_dyn();
        let weights = LossWeights::default();

        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone());
        let tn = tape.leaf(zt.clone());
        let inv = tape.scalar_leaf(1.0);
        let single = symmetric_info_nce(
            &mut tape,
            zn,
            tn,
            inv,
            weights.lambda_t2i,
            weights.lambda_i2t,
        )
        .unwrap();
        let single_v = tape.scalar(single);

        let mut tape = Tape::new();
        let zn = tape.leaf(z);
        let tn = tape.leaf(zt);
        let inv = tape.scalar_leaf(1.0);
        let levels = ContrastiveLevels {
            local: zn,
            global: Some(zn),
            fusion: Some(zn),
        };
        let out = three_level_contrastive(&mut tape, &levels, tn, inv, &weights).unwrap();
        assert!((tape.scalar(out.total) - 3.0 * single_v).abs() <= 1e-9);

        // Per-level breakdown sums to the total under the level weights.
        let sum = tape.scalar(out.local) * weights.level_local
            + tape.scalar(out.global.unwrap()) * weights.level_global
            + tape.scalar(out.fusion.unwrap()) * weights.level_fusion;
        assert!((tape.scalar(out.total) - sum).abs() <= 1e-9);
    }

    #[test]
    fn all_level_weights_zero_give_zero_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_matrix(&mut rng, 3, 4).into_dyn();
        let zt = rand_matrix(&mut rng, 3, 4).into_dyn();
        let mut tape = Tape::new();
        let zn = tape.leaf(z);
        let tn = tape.leaf(zt);
        let inv = tape.scalar_leaf(1.0);
        let weights = LossWeights {
            level_local: 0.0,
            level_global: 0.0,
            level_fusion: 0.0,
            ..LossWeights::default()
        };
        let levels = ContrastiveLevels {
            local: zn,
            global: Some(zn),
            fusion: Some(zn),
        };
        let out = three_level_contrastive(&mut tape, &levels, tn, inv, &weights).unwrap();
        assert_eq!(tape.scalar(out.total), 0.0);
    }

    /// Direct softmax cross-entropy oracle for the instance loss.
    fn instance_oracle(
        z_i: &Array2<f64>,
        z_t: &Array2<f64>,
        w: &Array2<f64>,
        labels: &[usize],
    ) -> f64 {
        let ce = |z: &Array2<f64>| -> f64 {
            let mut total = 0.0;
            for (row, &label) in z.rows().into_iter().zip(labels) {
                let logits: Vec<f64> = w.rows().into_iter().map(|wr| wr.dot(&row)).collect();
                let denom: f64 = logits.iter().map(|v| v.exp()).sum();
                total -= (logits[label].exp() / denom).ln();
            }
            total / z.nrows() as f64
        };
        ce(z_i) + ce(z_t)
    }

    #[test]
    fn zero_classifier_gives_two_log_num_tracks() {
        let z = array![[0.3, -0.2], [0.7, 0.1]];
        let w = Array2::<f64>::zeros((2, 2));
        let mut tape = Tape::new();
        let zi = tape.leaf(z.clone().into_dyn());
        let zt = tape.leaf(z.into_dyn());
        let wn = tape.leaf(w.into_dyn());
        let l = instance_loss(&mut tape, zi, zt, wn, &[0, 1]).unwrap();
        assert!((tape.scalar(l) - 2.0 * 2f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn identical_inputs_split_loss_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 5, 4);
        let labels = [0usize, 2, 4];
        let mut tape = Tape::new();
        let zi = tape.leaf(z.clone().into_dyn());
        let zt = tape.leaf(z.clone().into_dyn());
        let wn = tape.leaf(w.clone().into_dyn());
        let l = instance_loss(&mut tape, zi, zt, wn, &labels).unwrap();
        let oracle = instance_oracle(&z, &z, &w, &labels);
        assert!((tape.scalar(l) - oracle).abs() <= 1e-8);
    }

    #[test]
    fn instance_loss_matches_oracle_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zi = rand_matrix(&mut rng, 3, 4);
        let zt = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 4, 4);
        let labels = [1usize, 0, 3];

        let mut tape = Tape::new();
        let a = tape.leaf(zi.clone().into_dyn());
        let b = tape.leaf(zt.clone().into_dyn());
        let wn = tape.leaf(w.clone().into_dyn());
        let l = instance_loss(&mut tape, a, b, wn, &labels).unwrap();
        assert!((tape.scalar(l) - instance_oracle(&zi, &zt, &w, &labels)).abs() <= 1e-8);

        let grads = tape.backward(l).unwrap();
        let analytic = vec![
            grads.get_or_zeros(a, zi.shape()),
            grads.get_or_zeros(b, zt.shape()),
            grads.get_or_zeros(wn, w.shape()),
        ];
        let mut build = |vals: &[ArrayD<f64>]| {
            let mut tape = Tape::new();
            let a = tape.leaf(vals[0].clone());
            let b = tape.leaf(vals[1].clone());
            let wn = tape.leaf(vals[2].clone());
            let l = instance_loss(&mut tape, a, b, wn, &labels).unwrap();
            tape.scalar(l)
        };
        let err = gradcheck::max_relative_error(
            &[zi.into_dyn(), zt.into_dyn(), w.into_dyn()],
            &analytic,
            &mut build,
            1e-6,
            1e-8,
        );
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.leaf(Array2::<f64>::ones((2, 3)).into_dyn());
        let w = tape.leaf(Array2::<f64>::ones((2, 3)).into_dyn());
        assert!(matches!(
            instance_loss(&mut tape, z, z, w, &[0, 2]),
            Err(LossError::LabelOutOfRange { label: 2, .. })
        ));
    }

    /// Whitened 4x2 batch with exactly uncorrelated, unit-variance columns.
    fn whitened_batch() -> Array2<f64> {
        array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]
    }

    #[test]
    fn whitened_identical_batches_have_near_zero_barlow_loss() {
        let z = whitened_batch();
        let mut tape = Tape::new();
        let a = tape.leaf(z.clone().into_dyn());
        let b = tape.leaf(z.into_dyn());
        let l = barlow_twins(&mut tape, a, b, 5e-3).unwrap();
        assert!(tape.scalar(l) <= 1e-6, "loss {}", tape.scalar(l));
    }

    #[test]
    fn column_permutation_swaps_diagonal_mass() {
        // Swapping the two columns of a whitened batch moves the correlation
        // onto the off-diagonal: each C_dd ~ 0 contributes ~1, and each
        // off-diagonal entry is ~1.
        let z = whitened_batch();
        let permuted =
            Array2::from_shape_fn((z.nrows(), z.ncols()), |(i, j)| z[[i, z.ncols() - 1 - j]]);
        let mut tape = Tape::new();
        let a = tape.leaf(z.clone().into_dyn());
        let b = tape.leaf(permuted.clone().into_dyn());
        let l = barlow_twins(&mut tape, a, b, 5e-3).unwrap();

        // Brute-force C for the closed form.
        let m = z.nrows() as f64;
        let std = |x: &Array2<f64>| {
            let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
            let var = x.mapv(|v| v * v).mean_axis(ndarray::Axis(0)).unwrap()
                - mean.mapv(|v| v * v);
            (x - &mean.insert_axis(ndarray::Axis(0)))
                / var.mapv(|v| (v + 1e-5).sqrt()).insert_axis(ndarray::Axis(0))
        };
        let c = std(&z).t().dot(&std(&permuted)) / m;
        let mut want = 0.0;
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                if i == j {
                    want += (c[[i, j]] - 1.0).powi(2);
                } else {
                    want += 5e-3 * c[[i, j]].powi(2);
                }
            }
        }
        assert!((tape.scalar(l) - want).abs() <= 1e-9);
        // Each swapped channel contributes ~1 through the diagonal term.
        assert!(tape.scalar(l) > 1.9);
    }

    #[test]
    fn barlow_batch_of_one_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.leaf(Array2::<f64>::ones((1, 3)).into_dyn());
        assert!(matches!(
            barlow_twins(&mut tape, z, z, 5e-3),
            Err(LossError::BatchTooSmall { got: 1 })
        ));
    }

    #[test]
    fn barlow_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let za = rand_matrix(&mut rng, 4, 6).into_dyn();
        let zb = rand_matrix(&mut rng, 4, 6).into_dyn();
        let mut tape = Tape::new();
        let a = tape.leaf(za.clone());
        let b = tape.leaf(zb.clone());
        let l = barlow_twins(&mut tape, a, b, 5e-3).unwrap();
        let grads = tape.backward(l).unwrap();
        let analytic = vec![
            grads.get_or_zeros(a, za.shape()),
            grads.get_or_zeros(b, zb.shape()),
        ];
        let mut build = |vals: &[ArrayD<f64>]| {
            let mut tape = Tape::new();
            let a = tape.leaf(vals[0].clone());
            let b = tape.leaf(vals[1].clone());
            let l = barlow_twins(&mut tape, a, b, 5e-3).unwrap();
            tape.scalar(l)
        };
        let err =
            gradcheck::max_relative_error(&[za, zb], &analytic, &mut build, 1e-6, 1e-8);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn total_loss_components_sum_to_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = rand_matrix(&mut rng, 4, 6).into_dyn();
        let zt = rand_matrix(&mut rng, 4, 6).into_dyn();
        let w = rand_matrix(&mut rng, 4, 6).into_dyn();
        let labels = [0usize, 1, 2, 3];
        let weights = LossWeights {
            w_barlow: 0.7,
            ..LossWeights::default()
        };
        let options = LossOptions {
            barlow: true,
            ..LossOptions::default()
        };
        let mut tape = Tape::new();
        let zn = tape.leaf(z);
        let tn = tape.leaf(zt);
        let wn = tape.leaf(w);
        let tau = tape.scalar_leaf(1.0);
        let inv = tape.scalar_leaf(1.0);
        let levels = ContrastiveLevels {
            local: zn,
            global: Some(zn),
            fusion: Some(zn),
        };
        let out = total_loss(
            &mut tape, &levels, tn, wn, &labels, tau, inv, &weights, &options,
        )
        .unwrap();
        let c = out.components;
        let sum = c.l_local * weights.level_local
            + c.l_global * weights.level_global
            + c.l_fusion * weights.level_fusion
            + c.l_instance * weights.w_instance
            + c.l_barlow * weights.w_barlow;
        assert!((c.total - sum).abs() <= 1e-9);
    }

    #[test]
    fn total_loss_with_everything_off_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = rand_matrix(&mut rng, 3, 4).into_dyn();
        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone());
        let tn = tape.leaf(z.clone());
        let wn = tape.leaf(z);
        let tau = tape.scalar_leaf(1.0);
        let inv = tape.scalar_leaf(1.0);
        let levels = ContrastiveLevels {
            local: zn,
            global: None,
            fusion: None,
        };
        let options = LossOptions {
            contrastive: false,
            instance: false,
            barlow: false,
        };
        let out = total_loss(
            &mut tape,
            &levels,
            tn,
            wn,
            &[0, 1, 2],
            tau,
            inv,
            &LossWeights::default(),
            &options,
        )
        .unwrap();
        assert_eq!(out.components.total, 0.0);
    }

    #[test]
    fn contrastive_only_total_equals_three_level_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = rand_matrix(&mut rng, 3, 5).into_dyn();
        let zt = rand_matrix(&mut rng, 3, 5).into_dyn();
        let w = rand_matrix(&mut rng, 3, 5).into_dyn();
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let zn = tape.leaf(z);
        let tn = tape.leaf(zt);
        let wn = tape.leaf(w);
        let tau = tape.scalar_leaf(1.0);
        let inv = tape.scalar_leaf(1.0);
        let levels = ContrastiveLevels {
            local: zn,
            global: Some(zn),
            fusion: Some(zn),
        };
        let options = LossOptions {
            instance: false,
            ..LossOptions::default()
        };
        let out = total_loss(
            &mut tape, &levels, tn, wn, &[0, 1, 2], tau, inv, &weights, &options,
        )
        .unwrap();
        let direct = three_level_contrastive(&mut tape, &levels, tn, inv, &weights).unwrap();
        assert!((out.components.total - tape.scalar(direct.total)).abs() <= 1e-12);
    }
}
