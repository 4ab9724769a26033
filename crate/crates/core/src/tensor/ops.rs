//! Forward operations. Each op validates shapes, computes its result, and
//! records itself when any input participates in gradient tracking.

use super::{Im2ColSpec, OpKind, Tensor};
use crate::error::{Error, Result};

/// Row-major matrix product of `a` (m×k) and `b` (k×n).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn record(
    data: Vec<f64>,
    shape: Vec<usize>,
    kind: OpKind,
    parents: Vec<Tensor>,
) -> Tensor {
    let rg = parents.iter().any(|p| p.inner.borrow().requires_grad);
    let op = if rg { Some((kind, parents)) } else { None };
    Tensor::from_node(data, shape, rg, op)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        if a.shape != b.shape {
            return Err(Error::DimensionMismatch {
                context: "add".into(),
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let shape = a.shape.clone();
        drop((a, b));
        Ok(record(data, shape, OpKind::Add, vec![self.clone(), other.clone()]))
    }

    /// Add a `[n]` bias row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rank2("add_row")?;
        if bias.numel() != n {
            return Err(Error::DimensionMismatch {
                context: "add_row".into(),
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let a = self.inner.borrow();
        let b = bias.inner.borrow();
        let mut data = a.data.clone();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += b.data[j];
            }
        }
        let shape = a.shape.clone();
        drop((a, b));
        Ok(record(data, shape, OpKind::AddRow, vec![self.clone(), bias.clone()]))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        if a.shape != b.shape {
            return Err(Error::DimensionMismatch {
                context: "mul".into(),
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let shape = a.shape.clone();
        drop((a, b));
        Ok(record(data, shape, OpKind::Mul, vec![self.clone(), other.clone()]))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let a = self.inner.borrow();
        let data: Vec<f64> = a.data.iter().map(|x| x * factor).collect();
        let shape = a.shape.clone();
        drop(a);
        record(data, shape, OpKind::Scale(factor), vec![self.clone()])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rank2("matmul lhs")?;
        let (k2, n) = other.rank2("matmul rhs")?;
        if k != k2 {
            return Err(Error::DimensionMismatch {
                context: "matmul: inner extents differ".into(),
                left: self.shape(),
                right: other.shape(),
            });
        }
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        drop((a, b));
        Ok(record(data, vec![m, n], OpKind::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("transpose")?;
        let a = self.inner.borrow();
        let data = transpose_raw(&a.data, m, n);
        drop(a);
        Ok(record(data, vec![n, m], OpKind::Transpose, vec![self.clone()]))
    }

    pub fn relu(&self) -> Tensor {
        let a = self.inner.borrow();
        let data: Vec<f64> = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = a.shape.clone();
        drop(a);
        record(data, shape, OpKind::Relu, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor {
        let a = self.inner.borrow();
        let data: Vec<f64> = a
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = a.shape.clone();
        drop(a);
        record(data, shape, OpKind::Sigmoid, vec![self.clone()])
    }

    /// Softmax along the last axis, with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("softmax")?;
        let a = self.inner.borrow();
        if a.data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let data = softmax_rows_raw(&a.data, m, n);
        let shape = a.shape.clone();
        drop(a);
        Ok(record(data, shape, OpKind::SoftmaxRows, vec![self.clone()]))
    }

    /// Mean over positions of -log softmax(logits)[t, target_t].
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (t, v) = self.rank2("cross_entropy")?;
        if targets.len() != t {
            return Err(Error::DimensionMismatch {
                context: "cross_entropy: target count".into(),
                left: vec![t],
                right: vec![targets.len()],
            });
        }
        let a = self.inner.borrow();
        let mut total = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= v {
                return Err(Error::IndexOutOfRange {
                    what: format!("cross_entropy target at position {r}"),
                    index: tgt,
                    limit: v,
                });
            }
            let row = &a.data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
        }
        drop(a);
        Ok(record(
            vec![total / t as f64],
            vec![1],
            OpKind::CrossEntropy {
                targets: targets.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and targets in [0,1].
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::DimensionMismatch {
                context: "bce_with_logits: target count".into(),
                left: vec![self.numel()],
                right: vec![targets.len()],
            });
        }
        let a = self.inner.borrow();
        let mut total = 0.0;
        for (&z, &y) in a.data.iter().zip(targets) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let n = a.data.len() as f64;
        drop(a);
        Ok(record(
            vec![total / n],
            vec![1],
            OpKind::BceWithLogits {
                targets: targets.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let a = self.inner.borrow();
        let total: f64 = a.data.iter().sum();
        drop(a);
        record(vec![total], vec![1], OpKind::Sum, vec![self.clone()])
    }

    /// Column-wise mean: `[m, n]` -> `[1, n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("mean_rows")?;
        let a = self.inner.borrow();
        let mut data = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                data[j] += a.data[r * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        drop(a);
        Ok(record(data, vec![1, n], OpKind::MeanRows, vec![self.clone()]))
    }

    /// Stack `self` on top of `other` along the row axis.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (m1, n1) = self.rank2("concat_rows lhs")?;
        let (m2, n2) = other.rank2("concat_rows rhs")?;
        if n1 != n2 {
            return Err(Error::DimensionMismatch {
                context: "concat_rows: column extents differ".into(),
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.to_vec();
        data.extend(other.to_vec());
        Ok(record(
            data,
            vec![m1 + m2, n1],
            OpKind::ConcatRows { first_rows: m1 },
            vec![self.clone(), other.clone()],
        ))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let (m, _) = parts[0].rank2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mp, np) = p.rank2("concat_cols")?;
            if mp != m {
                return Err(Error::DimensionMismatch {
                    context: "concat_cols: row extents differ".into(),
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.inner.borrow();
            for r in 0..m {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(record(
            data,
            vec![m, total],
            OpKind::ConcatCols { widths },
            parts.to_vec(),
        ))
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (m, n) = self.rank2("slice_cols")?;
        if start + width > n {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols end".into(),
                index: start + width,
                limit: n,
            });
        }
        let a = self.inner.borrow();
        let mut data = vec![0.0; m * width];
        for r in 0..m {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&a.data[r * n + start..r * n + start + width]);
        }
        drop(a);
        Ok(record(
            data,
            vec![m, width],
            OpKind::SliceCols { start },
            vec![self.clone()],
        ))
    }

    /// Select rows of a `[v, d]` table by index; rows may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (v, d) = self.rank2("gather_rows")?;
        let a = self.inner.borrow();
        let mut data = Vec::with_capacity(indices.len() * d);
        for (pos, &i) in indices.iter().enumerate() {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    what: format!("gather_rows index at position {pos}"),
                    index: i,
                    limit: v,
                });
            }
            data.extend_from_slice(&a.data[i * d..(i + 1) * d]);
        }
        drop(a);
        Ok(record(
            data,
            vec![indices.len(), d],
            OpKind::GatherRows {
                indices: indices.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.rank2("layer_norm")?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::DimensionMismatch {
                context: "layer_norm: gain/bias width".into(),
                left: vec![n],
                right: vec![gamma.numel(), beta.numel()],
            });
        }
        let a = self.inner.borrow();
        let g = gamma.inner.borrow();
        let b = beta.inner.borrow();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &a.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[r * n + j] = (row[j] - mean) * inv * g.data[j] + b.data[j];
            }
        }
        let shape = a.shape.clone();
        drop((a, g, b));
        Ok(record(
            data,
            shape,
            OpKind::LayerNormRows { eps },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::DimensionMismatch {
                context: "reshape".into(),
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        Ok(record(data, shape.to_vec(), OpKind::Reshape, vec![self.clone()]))
    }

    /// Unfold a `[c, h, w]` image into convolution patches: output row p is
    /// the flattened `c*k*k` receptive field of output position p.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let shape = self.shape();
        let [c, h, w] = match shape.as_slice() {
            [c, h, w] => [*c, *h, *w],
            _ => {
                return Err(Error::DimensionMismatch {
                    context: "im2col: expected [channels, height, width]".into(),
                    left: shape,
                    right: vec![],
                })
            }
        };
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        let spec = Im2ColSpec {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let a = self.inner.borrow();
        let cols = c * kernel * kernel;
        let mut data = vec![0.0; out_h * out_w * cols];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = (oy * out_w + ox) * cols;
                let mut col = 0;
                for ch in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                data[row + col] =
                                    a.data[ch * h * w + iy as usize * w + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
        drop(a);
        Ok(record(
            data,
            vec![out_h * out_w, cols],
            OpKind::Im2Col(spec),
            vec![self.clone()],
        ))
    }
}
