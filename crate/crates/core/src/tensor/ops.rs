//! Forward constructors and backward rules for every tape operation.

use super::{Gradients, NodeId, Op, Tape, TensorError};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

type Result<T> = std::result::Result<T, TensorError>;

pub fn conv_output_size(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn as2(v: &ArrayD<f64>, op: &'static str) -> Result<Array2<f64>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map(|a| a.to_owned())
        .map_err(|_| TensorError::BadRank {
            op,
            expected: "a 2-D array",
            got: v.shape().to_vec(),
        })
}

fn as1(v: &ArrayD<f64>, op: &'static str) -> Result<Array1<f64>> {
    v.view()
        .into_dimensionality::<Ix1>()
        .map(|a| a.to_owned())
        .map_err(|_| TensorError::BadRank {
            op,
            expected: "a 1-D array",
            got: v.shape().to_vec(),
        })
}

fn same_shape(op: &'static str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b), vec![]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b), vec![]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b), vec![]))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a), vec![])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), vec![])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::ScaleConst(a, c), vec![])
    }

    /// `x [M,D] + bias [D]`, broadcast over rows.
    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "add_bias_rows")?;
        let bv = as1(self.value(bias), "add_bias_rows")?;
        if xv.ncols() != bv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_rows",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let v = (&xv + &bv).into_dyn();
        Ok(self.push(v, Op::AddBiasRows(x, bias), vec![]))
    }

    /// `x [N,C,H,W] + bias [C]`, broadcast over batch and spatial dims.
    pub fn add_bias_channels(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::BadRank {
                op: "add_bias_channels",
                expected: "a 4-D array",
                got: self.value(x).shape().to_vec(),
            })?
            .to_owned();
        let bv = as1(self.value(bias), "add_bias_channels")?;
        if xv.shape()[1] != bv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_channels",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut v = xv;
        for (c, &b) in bv.iter().enumerate() {
            v.index_axis_mut(Axis(1), c).mapv_inplace(|x| x + b);
        }
        Ok(self.push(v.into_dyn(), Op::AddBiasChannels(x, bias), vec![]))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_mask(&mut self, a: NodeId, mask: ArrayD<f64>) -> Result<NodeId> {
        same_shape("mul_mask", self.value(a), &mask)?;
        let v = self.value(a) * &mask;
        Ok(self.push(v, Op::MulMask(a, mask), vec![]))
    }

    /// `a - k` for a constant array `k`.
    pub fn sub_const(&mut self, a: NodeId, k: ArrayD<f64>) -> Result<NodeId> {
        same_shape("sub_const", self.value(a), &k)?;
        let v = self.value(a) - &k;
        Ok(self.push(v, Op::SubConst(a), vec![]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = as2(self.value(a), "matmul")?;
        let bv = as2(self.value(b), "matmul")?;
        if av.ncols() != bv.nrows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let v = av.dot(&bv).into_dyn();
        Ok(self.push(v, Op::MatMul(a, b), vec![]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = as2(self.value(a), "transpose")?;
        Ok(self.push(av.t().to_owned().into_dyn(), Op::Transpose(a), vec![]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), vec![])
    }

    /// 2-D convolution via im2col. `x [N,C,H,W]`, `w [F,C,K,K]`, zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::BadRank {
                op: "conv2d",
                expected: "input as a 4-D array",
                got: self.value(x).shape().to_vec(),
            })?
            .to_owned();
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::BadRank {
                op: "conv2d",
                expected: "kernel as a 4-D array",
                got: self.value(w).shape().to_vec(),
            })?
            .to_owned();
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (f, ck, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if ck != c || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let k = kh;
        let (oh, ow) = match (
            conv_output_size(h, k, stride, pad),
            conv_output_size(wd, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::BadConvGeometry {
                    h,
                    w: wd,
                    k,
                    stride,
                    pad,
                })
            }
        };

        let w2d = wv
            .view()
            .into_shape_with_order((f, c * k * k))
            .expect("kernel reshape")
            .to_owned();
        let mut out = Array4::<f64>::zeros((n, f, oh, ow));
        // One im2col buffer per batch element, saved for the backward pass.
        let mut cols_all = Array2::<f64>::zeros((n * c * k * k, oh * ow));
        for ni in 0..n {
            let mut cols = cols_all.slice_mut(ndarray::s![ni * c * k * k..(ni + 1) * c * k * k, ..]);
            im2col(&xv.index_axis(Axis(0), ni).to_owned(), k, stride, pad, oh, ow, &mut cols);
            let y = w2d.dot(&cols.view());
            out.index_axis_mut(Axis(0), ni).assign(
                &y.into_shape_with_order((f, oh, ow)).expect("conv output reshape"),
            );
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Conv2d { x, w, stride, pad },
            vec![cols_all.into_dyn()],
        ))
    }

    /// `[N,C,H,W] -> [N,C]`, mean over the spatial dims.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::BadRank {
                op: "global_avg_pool",
                expected: "a 4-D array",
                got: self.value(x).shape().to_vec(),
            })?
            .to_owned();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array2::<f64>::zeros((n, c));
        let denom = (h * w) as f64;
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci]] = xv
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .sum()
                    / denom;
            }
        }
        Ok(self.push(out.into_dyn(), Op::GlobalAvgPool(x), vec![]))
    }

    /// Batch normalization over rows of `x [M,D]` using the given per-column
    /// mean and variance as the normalization statistics.
    ///
    /// In training mode pass the batch statistics (gradients then flow through
    /// them); in eval mode pass running statistics and set `stats_are_batch`
    /// to false so backward treats them as constants.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        stats_are_batch: bool,
    ) -> Result<NodeId> {
        let xv = as2(self.value(x), "batch_norm")?;
        let g = as1(self.value(gamma), "batch_norm")?;
        let b = as1(self.value(beta), "batch_norm")?;
        let d = xv.ncols();
        if g.len() != d || b.len() != d || mean.len() != d || var.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![xv.nrows(), d],
                rhs: vec![g.len(), b.len(), mean.len(), var.len()],
            });
        }
        let invstd = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let xhat = (&xv - &mean.view().insert_axis(Axis(0))) * &invstd.view().insert_axis(Axis(0));
        let y = &xhat * &g.view().insert_axis(Axis(0)) + &b.view().insert_axis(Axis(0));
        let mode = ArrayD::from_elem(IxDyn(&[1]), if stats_are_batch { 1.0 } else { 0.0 });
        Ok(self.push(
            y.into_dyn(),
            Op::BatchNorm { x, gamma, beta },
            vec![xhat.into_dyn(), invstd.into_dyn(), mode],
        ))
    }

    /// Layer normalization over the columns of each row of `x [M,D]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "layer_norm")?;
        let g = as1(self.value(gamma), "layer_norm")?;
        let b = as1(self.value(beta), "layer_norm")?;
        let d = xv.ncols();
        if g.len() != d || b.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![xv.nrows(), d],
                rhs: vec![g.len(), b.len()],
            });
        }
        let mut xhat = Array2::<f64>::zeros(xv.raw_dim());
        let mut invstd = Array1::<f64>::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap_or(0.0);
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap_or(0.0);
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            invstd[i] = inv;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mu) * inv;
            }
        }
        let y = &xhat * &g.view().insert_axis(Axis(0)) + &b.view().insert_axis(Axis(0));
        Ok(self.push(
            y.into_dyn(),
            Op::LayerNorm { x, gamma, beta },
            vec![xhat.into_dyn(), invstd.into_dyn()],
        ))
    }

    /// Standardize each column of `x [M,D]` over the batch (mean 0, std 1).
    pub fn standardize_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "standardize_cols")?;
        let m = xv.nrows();
        if m < 2 {
            return Err(TensorError::BatchTooSmall {
                op: "standardize_cols",
                need: 2,
                got: m,
            });
        }
        let mean = xv.mean_axis(Axis(0)).expect("nonempty");
        let var = xv.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty")
            - mean.mapv(|v| v * v);
        let invstd = var.mapv(|v| 1.0 / (v.max(0.0) + NORM_EPS).sqrt());
        let xhat =
            (&xv - &mean.view().insert_axis(Axis(0))) * &invstd.view().insert_axis(Axis(0));
        Ok(self.push(
            xhat.clone().into_dyn(),
            Op::StandardizeCols(x),
            vec![xhat.into_dyn(), invstd.into_dyn()],
        ))
    }

    /// Row lookup: `table [V,D]` gathered at `ids` -> `[len(ids), D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = as2(self.value(table), "embedding")?;
        let v = tv.nrows();
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
        }
        let mut out = Array2::<f64>::zeros((ids.len(), tv.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![],
        ))
    }

    /// `[M,D] -> [D]`, mean over rows.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "mean_rows")?;
        let v = xv.mean_axis(Axis(0)).expect("nonempty").into_dyn();
        Ok(self.push(v, Op::MeanRows(x), vec![]))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(x), vec![])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        let s = self.value(x).sum() / n as f64;
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::MeanAll(x), vec![])
    }

    /// Stack k vectors of dim D into a `[k,D]` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        assert!(!rows.is_empty(), "stack_rows on empty list");
        let d = self.value(rows[0]).len();
        let mut out = Array2::<f64>::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            let rv = as1(self.value(r), "stack_rows")?;
            if rv.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: vec![rv.len()],
                });
            }
            out.row_mut(i).assign(&rv);
        }
        Ok(self.push(out.into_dyn(), Op::StackRows(rows.to_vec()), vec![]))
    }

    /// `[M,D1] ++ [M,D2] -> [M,D1+D2]` along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = as2(self.value(a), "concat_cols")?;
        let bv = as2(self.value(b), "concat_cols")?;
        if av.nrows() != bv.nrows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat")
            .into_dyn();
        Ok(self.push(v, Op::ConcatCols(a, b), vec![]))
    }

    /// L2-normalize each row of `x [M,D]`. Errors on a row with norm <= 1e-12.
    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "row_l2_normalize")?;
        let mut norms = Array1::<f64>::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n <= 1e-12 {
                return Err(TensorError::ZeroNormRow { row: i, norm: n });
            }
            norms[i] = n;
        }
        let u = &xv / &norms.view().insert_axis(Axis(1));
        Ok(self.push(
            u.clone().into_dyn(),
            Op::RowL2Normalize(x),
            vec![u.into_dyn(), norms.into_dyn()],
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "softmax_rows")?;
        let p = softmax2(&xv);
        Ok(self.push(
            p.clone().into_dyn(),
            Op::SoftmaxRows(x),
            vec![p.into_dyn()],
        ))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "log_softmax_rows")?;
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.mapv(|v| (v - mx).exp()).sum().ln() + mx;
            for (j, &v) in row.iter().enumerate() {
                out[[i, j]] = v - lse;
            }
        }
        let p = out.mapv(f64::exp);
        Ok(self.push(
            out.into_dyn(),
            Op::LogSoftmaxRows(x),
            vec![p.into_dyn()],
        ))
    }

    /// `x [M,N]` gathered at `(i, idx[i])` -> `[M]`.
    pub fn gather_cols(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = as2(self.value(x), "gather_cols")?;
        if idx.len() != xv.nrows() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_cols",
                lhs: vec![xv.nrows()],
                rhs: vec![idx.len()],
            });
        }
        let mut out = Array1::<f64>::zeros(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= xv.ncols() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_cols",
                    index: j,
                    extent: xv.ncols(),
                });
            }
            out[i] = xv[[i, j]];
        }
        Ok(self.push(
            out.into_dyn(),
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            vec![],
        ))
    }

    /// Elementwise `a * s` where `s` is a single-element node.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(TensorError::BadRank {
                op: "mul_scalar_node",
                expected: "a single-element scalar node",
                got: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.scalar(s);
        let v = self.value(a).mapv(|x| x * sv);
        Ok(self.push(v, Op::MulScalarNode(a, s), vec![]))
    }

    pub(crate) fn accumulate_parents(
        &self,
        id: NodeId,
        grad: &ArrayD<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) {
        let node = &self.nodes[id];
        let mut acc = |pid: NodeId, g: ArrayD<f64>| match &mut grads[pid] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, grad.clone());
                acc(*b, grad.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, grad.clone());
                acc(*b, grad.mapv(|g| -g));
            }
            Op::Mul(a, b) => {
                acc(*a, grad * self.value(*b));
                acc(*b, grad * self.value(*a));
            }
            Op::Neg(a) => acc(*a, grad.mapv(|g| -g)),
            Op::Exp(a) => acc(*a, grad * &node.value),
            Op::ScaleConst(a, c) => acc(*a, grad.mapv(|g| g * c)),
            Op::AddBiasRows(x, bias) => {
                acc(*x, grad.clone());
                let g2 = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                acc(*bias, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddBiasChannels(x, bias) => {
                acc(*x, grad.clone());
                let g4 = grad.view().into_dimensionality::<Ix4>().expect("grad rank");
                let c = g4.shape()[1];
                let mut gb = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    gb[ci] = g4.index_axis(Axis(1), ci).sum();
                }
                acc(*bias, gb.into_dyn());
            }
            Op::MulMask(a, mask) => acc(*a, grad * mask),
            Op::SubConst(a) => acc(*a, grad.clone()),
            Op::MatMul(a, b) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let av = self.value(*a).view().into_dimensionality::<Ix2>().expect("rank");
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().expect("rank");
                acc(*a, g.dot(&bv.t()).into_dyn());
                acc(*b, av.t().dot(&g).into_dyn());
            }
            Op::Transpose(a) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                acc(*a, g.t().to_owned().into_dyn());
            }
            Op::Relu(a) => {
                let mut g = grad.clone();
                ndarray::Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                acc(*a, g);
            }
            Op::Conv2d { x, w, stride, pad } => {
                self.conv2d_backward(id, *x, *w, *stride, *pad, grad, &mut acc);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let g2 = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let denom = (h * w) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g2[[ni, ci]] / denom;
                        gx.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .fill(gv);
                    }
                }
                acc(*x, gx.into_dyn());
            }
            Op::BatchNorm { x, gamma, beta } => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let xhat = node.saved[0].view().into_dimensionality::<Ix2>().expect("saved");
                let invstd = node.saved[1].view().into_dimensionality::<Ix1>().expect("saved");
                let batch_stats = node.saved[2][[0]] > 0.5;
                let gv = self.value(*gamma).view().into_dimensionality::<Ix1>().expect("rank");
                let m = g.nrows() as f64;

                acc(*gamma, (&g * &xhat).sum_axis(Axis(0)).into_dyn());
                acc(*beta, g.sum_axis(Axis(0)).into_dyn());

                let dxhat = &g * &gv.insert_axis(Axis(0));
                let gx = if batch_stats {
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &xhat).sum_axis(Axis(0));
                    let mut gx = dxhat.mapv(|v| v * m);
                    gx -= &sum_dxhat.view().insert_axis(Axis(0));
                    gx -= &(&xhat * &sum_dxhat_xhat.view().insert_axis(Axis(0)));
                    gx * &invstd.insert_axis(Axis(0)).mapv(|v| v / m)
                } else {
                    &dxhat * &invstd.insert_axis(Axis(0))
                };
                acc(*x, gx.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta } => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let xhat = node.saved[0].view().into_dimensionality::<Ix2>().expect("saved");
                let invstd = node.saved[1].view().into_dimensionality::<Ix1>().expect("saved");
                let gv = self.value(*gamma).view().into_dimensionality::<Ix1>().expect("rank");
                let d = g.ncols() as f64;

                acc(*gamma, (&g * &xhat).sum_axis(Axis(0)).into_dyn());
                acc(*beta, g.sum_axis(Axis(0)).into_dyn());

                let dxhat = &g * &gv.insert_axis(Axis(0));
                let mut gx = Array2::<f64>::zeros(g.raw_dim());
                for i in 0..g.nrows() {
                    let dx_row = dxhat.row(i);
                    let xh_row = xhat.row(i);
                    let s1 = dx_row.sum();
                    let s2 = dx_row.dot(&xh_row);
                    let inv = invstd[i];
                    for j in 0..g.ncols() {
                        gx[[i, j]] = inv / d * (d * dx_row[j] - s1 - xh_row[j] * s2);
                    }
                }
                acc(*x, gx.into_dyn());
            }
            Op::StandardizeCols(x) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let xhat = node.saved[0].view().into_dimensionality::<Ix2>().expect("saved");
                let invstd = node.saved[1].view().into_dimensionality::<Ix1>().expect("saved");
                let m = g.nrows() as f64;
                let sum_g = g.sum_axis(Axis(0));
                let sum_g_xhat = (&g * &xhat).sum_axis(Axis(0));
                let mut gx = g.mapv(|v| v * m);
                gx -= &sum_g.view().insert_axis(Axis(0));
                gx -= &(&xhat * &sum_g_xhat.view().insert_axis(Axis(0)));
                let gx = gx * &invstd.insert_axis(Axis(0)).mapv(|v| v / m);
                acc(*x, gx.into_dyn());
            }
            Op::Embedding { table, ids } => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let ts = self.value(*table).shape();
                let mut gt = Array2::<f64>::zeros((ts[0], ts[1]));
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &g.row(i);
                }
                acc(*table, gt.into_dyn());
            }
            Op::MeanRows(x) => {
                let xs = self.value(*x).shape();
                let m = xs[0] as f64;
                let g = grad.view().into_dimensionality::<Ix1>().expect("grad rank");
                let gx = g
                    .insert_axis(Axis(0))
                    .broadcast((xs[0], xs[1]))
                    .expect("broadcast")
                    .mapv(|v| v / m);
                acc(*x, gx.into_dyn());
            }
            Op::SumAll(x) => {
                let gv = grad[[0]];
                acc(*x, ArrayD::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let gv = grad[[0]] / n;
                acc(*x, ArrayD::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::StackRows(rows) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, g.row(i).to_owned().into_dyn());
                }
            }
            Op::ConcatCols(a, b) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let d1 = self.value(*a).shape()[1];
                acc(*a, g.slice(ndarray::s![.., ..d1]).to_owned().into_dyn());
                acc(*b, g.slice(ndarray::s![.., d1..]).to_owned().into_dyn());
            }
            Op::RowL2Normalize(x) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let u = node.saved[0].view().into_dimensionality::<Ix2>().expect("saved");
                let norms = node.saved[1].view().into_dimensionality::<Ix1>().expect("saved");
                let mut gx = Array2::<f64>::zeros(g.raw_dim());
                for i in 0..g.nrows() {
                    let gu = g.row(i).dot(&u.row(i));
                    for j in 0..g.ncols() {
                        gx[[i, j]] = (g[[i, j]] - gu * u[[i, j]]) / norms[i];
                    }
                }
                acc(*x, gx.into_dyn());
            }
            Op::SoftmaxRows(x) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let p = node.saved[0].view().into_dimensionality::<Ix2>().expect("saved");
                let dot = (&g * &p).sum_axis(Axis(1));
                let gx = &p * &(&g - &dot.view().insert_axis(Axis(1)));
                acc(*x, gx.into_dyn());
            }
            Op::LogSoftmaxRows(x) => {
                let g = grad.view().into_dimensionality::<Ix2>().expect("grad rank");
                let p = node.saved[0].view().into_dimensionality::<Ix2>().expect("saved");
                let row_sum = g.sum_axis(Axis(1));
                let gx = &g - &(&p * &row_sum.view().insert_axis(Axis(1)));
                acc(*x, gx.into_dyn());
            }
            Op::GatherCols { x, idx } => {
                let g = grad.view().into_dimensionality::<Ix1>().expect("grad rank");
                let xs = self.value(*x).shape();
                let mut gx = Array2::<f64>::zeros((xs[0], xs[1]));
                for (i, &j) in idx.iter().enumerate() {
                    gx[[i, j]] += g[i];
                }
                acc(*x, gx.into_dyn());
            }
            Op::MulScalarNode(a, s) => {
                let sv = self.scalar(*s);
                acc(*a, grad.mapv(|g| g * sv));
                let gs = (grad * self.value(*a)).sum();
                acc(*s, ArrayD::from_elem(IxDyn(&[1]), gs));
            }
        }
    }

    fn conv2d_backward(
        &self,
        id: NodeId,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        grad: &ArrayD<f64>,
        acc: &mut dyn FnMut(NodeId, ArrayD<f64>),
    ) {
        let node = &self.nodes[id];
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, k) = (ws[0], ws[2]);
        let os = node.value.shape();
        let (oh, ow) = (os[2], os[3]);
        let g4 = grad.view().into_dimensionality::<Ix4>().expect("grad rank");
        let cols_all = node.saved[0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("saved cols");
        let w2d = self
            .value(w)
            .view()
            .into_shape_with_order((f, c * k * k))
            .expect("kernel reshape")
            .to_owned();

        let mut gw2d = Array2::<f64>::zeros((f, c * k * k));
        let mut gx = Array4::<f64>::zeros((n, c, h, wd));
        for ni in 0..n {
            let gy = g4
                .index_axis(Axis(0), ni)
                .to_owned()
                .into_shape_with_order((f, oh * ow))
                .expect("grad reshape");
            let cols = cols_all.slice(ndarray::s![ni * c * k * k..(ni + 1) * c * k * k, ..]);
            gw2d += &gy.dot(&cols.t());
            let gcols = w2d.t().dot(&gy);
            col2im_accumulate(
                &gcols,
                k,
                stride,
                pad,
                oh,
                ow,
                &mut gx.index_axis_mut(Axis(0), ni),
            );
        }
        acc(
            w,
            gw2d.into_shape_with_order((f, c, k, k))
                .expect("kernel grad reshape")
                .into_dyn(),
        );
        acc(x, gx.into_dyn());
    }
}

fn softmax2(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = row.mapv(|v| (v - mx).exp());
        let sum = exps.sum();
        for (j, e) in exps.iter().enumerate() {
            out[[i, j]] = e / sum;
        }
    }
    out
}

fn im2col(
    x: &ndarray::Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut ndarray::ArrayViewMut2<f64>,
) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        let v = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            x[[ci, ii as usize, jj as usize]]
                        } else {
                            0.0
                        };
                        cols[[row, oi * ow + oj]] = v;
                    }
                }
            }
        }
    }
}

fn col2im_accumulate(
    gcols: &Array2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] += gcols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}
