//! Reverse-mode gradient accumulation.

use std::collections::HashSet;

use super::ops::{matmul_raw, softmax_rows_raw, transpose_raw};
use super::{OpKind, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Reverse-mode accumulation from a scalar loss. Repeated calls without
    /// `zero_grad` accumulate into existing gradients.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.inner.borrow();
            if n.data.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward() requires a scalar loss, got shape {:?}",
                    n.shape
                )));
            }
            if !n.requires_grad {
                return Err(Error::Contract(
                    "backward() on a tensor with no recorded history".into(),
                ));
            }
        }

        // Collect every reachable recorded node, then visit in reverse
        // creation order; ids are monotone so this is a valid reverse
        // topological order and touches each record exactly once.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            let id = t.inner.borrow().id;
            if !seen.insert(id) {
                continue;
            }
            if let Some((_, parents)) = t.inner.borrow().op.as_ref() {
                for p in parents {
                    if p.inner.borrow().requires_grad {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.borrow().id.cmp(&a.inner.borrow().id));

        seed_grad(self);

        for t in &nodes {
            propagate(t)?;
        }

        // Leaf gradients accumulate across calls; intermediate records do
        // not survive a pass, so a second backward re-seeds from 1.
        for t in &nodes {
            let mut n = t.inner.borrow_mut();
            if n.op.is_some() {
                n.grad = None;
            }
        }
        Ok(())
    }
}

fn seed_grad(loss: &Tensor) {
    let mut n = loss.inner.borrow_mut();
    match n.grad.as_mut() {
        Some(g) => g[0] += 1.0,
        None => n.grad = Some(vec![1.0]),
    }
}

fn accum(parent: &Tensor, contrib: impl FnOnce(&mut [f64])) {
    let mut p = parent.inner.borrow_mut();
    if !p.requires_grad {
        return;
    }
    let len = p.data.len();
    let g = p.grad.get_or_insert_with(|| vec![0.0; len]);
    contrib(g);
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [m, n] => (*m, *n),
        [n] => (1, *n),
        _ => (1, shape.iter().product()),
    }
}

fn propagate(t: &Tensor) -> Result<()> {
    let node = t.inner.borrow();
    let up = match node.grad.as_ref() {
        Some(g) => g.clone(),
        None => return Ok(()),
    };
    let (kind, parents) = match node.op.as_ref() {
        Some(op) => (op.0.clone(), op.1.clone()),
        None => return Ok(()),
    };
    let out_data = node.data.clone();
    let out_shape = node.shape.clone();
    drop(node);

    match kind {
        OpKind::Add => {
            accum(&parents[0], |g| add_into(g, &up));
            accum(&parents[1], |g| add_into(g, &up));
        }
        OpKind::AddRow => {
            let (m, n) = rows_cols(&out_shape);
            accum(&parents[0], |g| add_into(g, &up));
            accum(&parents[1], |g| {
                for r in 0..m {
                    for j in 0..n {
                        g[j] += up[r * n + j];
                    }
                }
            });
        }
        OpKind::Mul => {
            let a = parents[0].to_vec();
            let b = parents[1].to_vec();
            accum(&parents[0], |g| {
                for i in 0..g.len() {
                    g[i] += up[i] * b[i];
                }
            });
            accum(&parents[1], |g| {
                for i in 0..g.len() {
                    g[i] += up[i] * a[i];
                }
            });
        }
        OpKind::Scale(c) => {
            accum(&parents[0], |g| {
                for i in 0..g.len() {
                    g[i] += up[i] * c;
                }
            });
        }
        OpKind::MatMul => {
            let (m, k) = rows_cols(&parents[0].shape());
            let (_, n) = rows_cols(&parents[1].shape());
            let a = parents[0].to_vec();
            let b = parents[1].to_vec();
            // dA = dC B^T, dB = A^T dC
            let bt = transpose_raw(&b, k, n);
            let da = matmul_raw(&up, &bt, m, n, k);
            let at = transpose_raw(&a, m, k);
            let db = matmul_raw(&at, &up, k, m, n);
            accum(&parents[0], |g| add_into(g, &da));
            accum(&parents[1], |g| add_into(g, &db));
        }
        OpKind::Transpose => {
            let (n, m) = rows_cols(&out_shape);
            let dt = transpose_raw(&up, n, m);
            accum(&parents[0], |g| add_into(g, &dt));
        }
        OpKind::Relu => {
            let a = parents[0].to_vec();
            accum(&parents[0], |g| {
                for i in 0..g.len() {
                    if a[i] > 0.0 {
                        g[i] += up[i];
                    }
                }
            });
        }
        OpKind::Sigmoid => {
            accum(&parents[0], |g| {
                for i in 0..g.len() {
                    g[i] += up[i] * out_data[i] * (1.0 - out_data[i]);
                }
            });
        }
        OpKind::SoftmaxRows => {
            let (m, n) = rows_cols(&out_shape);
            accum(&parents[0], |g| {
                for r in 0..m {
                    let y = &out_data[r * n..(r + 1) * n];
                    let u = &up[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(u).map(|(yi, ui)| yi * ui).sum();
                    for j in 0..n {
                        g[r * n + j] += y[j] * (u[j] - dot);
                    }
                }
            });
        }
        OpKind::CrossEntropy { targets } => {
            let (t_len, v) = rows_cols(&parents[0].shape());
            let logits = parents[0].to_vec();
            let probs = softmax_rows_raw(&logits, t_len, v);
            let scale = up[0] / t_len as f64;
            accum(&parents[0], |g| {
                for (r, &tgt) in targets.iter().enumerate() {
                    for j in 0..v {
                        let ind = if j == tgt { 1.0 } else { 0.0 };
                        g[r * v + j] += scale * (probs[r * v + j] - ind);
                    }
                }
            });
        }
        OpKind::BceWithLogits { targets } => {
            let z = parents[0].to_vec();
            let scale = up[0] / z.len() as f64;
            accum(&parents[0], |g| {
                for i in 0..g.len() {
                    let s = if z[i] >= 0.0 {
                        1.0 / (1.0 + (-z[i]).exp())
                    } else {
                        let e = z[i].exp();
                        e / (1.0 + e)
                    };
                    g[i] += scale * (s - targets[i]);
                }
            });
        }
        OpKind::Sum => {
            accum(&parents[0], |g| {
                for v in g.iter_mut() {
                    *v += up[0];
                }
            });
        }
        OpKind::MeanRows => {
            let (m, n) = rows_cols(&parents[0].shape());
            accum(&parents[0], |g| {
                for r in 0..m {
                    for j in 0..n {
                        g[r * n + j] += up[j] / m as f64;
                    }
                }
            });
        }
        OpKind::ConcatRows { first_rows } => {
            let (_, n) = rows_cols(&out_shape);
            let split = first_rows * n;
            accum(&parents[0], |g| add_into(g, &up[..split]));
            accum(&parents[1], |g| add_into(g, &up[split..]));
        }
        OpKind::ConcatCols { widths } => {
            let (m, total) = rows_cols(&out_shape);
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths) {
                accum(p, |g| {
                    for r in 0..m {
                        for j in 0..w {
                            g[r * w + j] += up[r * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        OpKind::SliceCols { start } => {
            let (m, w) = rows_cols(&out_shape);
            let (_, n) = rows_cols(&parents[0].shape());
            accum(&parents[0], |g| {
                for r in 0..m {
                    for j in 0..w {
                        g[r * n + start + j] += up[r * w + j];
                    }
                }
            });
        }
        OpKind::GatherRows { indices } => {
            let (_, d) = rows_cols(&parents[0].shape());
            accum(&parents[0], |g| {
                for (pos, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        g[i * d + j] += up[pos * d + j];
                    }
                }
            });
        }
        OpKind::LayerNormRows { eps } => {
            let (m, n) = rows_cols(&parents[0].shape());
            let x = parents[0].to_vec();
            let gamma = parents[1].to_vec();
            // Per-row statistics recomputed from the input.
            let mut xhat = vec![0.0; m * n];
            let mut inv = vec![0.0; m];
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                inv[r] = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    xhat[r * n + j] = (row[j] - mean) * inv[r];
                }
            }
            accum(&parents[1], |g| {
                for r in 0..m {
                    for j in 0..n {
                        g[j] += up[r * n + j] * xhat[r * n + j];
                    }
                }
            });
            accum(&parents[2], |g| {
                for r in 0..m {
                    for j in 0..n {
                        g[j] += up[r * n + j];
                    }
                }
            });
            accum(&parents[0], |g| {
                for r in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let u = up[r * n + j] * gamma[j];
                        s1 += u;
                        s2 += u * xhat[r * n + j];
                    }
                    for j in 0..n {
                        let u = up[r * n + j] * gamma[j];
                        g[r * n + j] +=
                            inv[r] * (u - s1 / n as f64 - xhat[r * n + j] * s2 / n as f64);
                    }
                }
            });
        }
        OpKind::Reshape => {
            accum(&parents[0], |g| add_into(g, &up));
        }
        OpKind::Im2Col(spec) => {
            let cols = spec.channels * spec.kernel * spec.kernel;
            accum(&parents[0], |g| {
                for oy in 0..spec.out_h {
                    for ox in 0..spec.out_w {
                        let row = (oy * spec.out_w + ox) * cols;
                        let mut col = 0;
                        for ch in 0..spec.channels {
                            for ky in 0..spec.kernel {
                                for kx in 0..spec.kernel {
                                    let iy =
                                        (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix =
                                        (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0
                                        && (iy as usize) < spec.height
                                        && ix >= 0
                                        && (ix as usize) < spec.width
                                    {
                                        g[ch * spec.height * spec.width
                                            + iy as usize * spec.width
                                            + ix as usize] += up[row + col];
                                    }
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            });
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
