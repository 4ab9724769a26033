//! Building blocks: linear layers, layer norm, feed-forward, multi-head
//! attention, and sinusoidal position tables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter list; ordering is the checkpoint layout order.
pub type ParamList = Vec<(String, Tensor)>;

pub(crate) fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::param(data, &[rows, cols]).unwrap()
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: init_matrix(rng, in_dim, out_dim),
            bias: Tensor::param(vec![0.0; out_dim], &[out_dim]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(vec![1.0; dim], &[dim]).unwrap(),
            beta: Tensor::param(vec![0.0; dim], &[dim]).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_rows(&self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// FC-ReLU-FC.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, out_dim: usize) -> FeedForward {
        FeedForward {
            lin1: Linear::new(rng, in_dim, hidden),
            lin2: Linear::new(rng, hidden, out_dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.relu())
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.lin1.params(&format!("{prefix}.lin1"), out);
        self.lin2.params(&format!("{prefix}.lin2"), out);
    }
}

/// Multi-head scaled dot-product attention over full `d`-dim query/key/value
/// projections, split column-wise into heads.
pub struct MultiHeadAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention head count {heads} does not divide model dimension {dim}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: init_matrix(rng, dim, dim),
            wk: init_matrix(rng, dim, dim),
            wv: init_matrix(rng, dim, dim),
            heads,
            dim,
        })
    }

    pub fn forward(&self, queries: &Tensor, keys_values: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(queries, keys_values, mask)?.0)
    }

    /// Also returns the per-head attention weight matrices (N_q × N_v each).
    pub fn forward_with_weights(
        &self,
        queries: &Tensor,
        keys_values: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let q = queries.matmul(&self.wq)?;
        let k = keys_values.matmul(&self.wk)?;
        let v = keys_values.matmul(&self.wv)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let weights = scores.softmax_rows()?;
            head_outs.push(weights.matmul(&vh)?);
            head_weights.push(weights);
        }
        Ok((Tensor::concat_cols(&head_outs)?, head_weights))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
    }
}

/// Additive causal mask: 0 on and below the diagonal, -1e30 above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = -1e30;
        }
    }
    Tensor::new(data, &[len, len]).unwrap()
}

/// Fixed sinusoidal position table, `[max_len, dim]`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; max_len * dim];
    for t in 0..max_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(data, &[max_len, dim]).unwrap()
}

pub fn random_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(data, shape).unwrap()
}
