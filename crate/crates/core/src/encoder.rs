//! Image and report embedding plus the knowledge-driven encoders: both
//! modalities attend over the embedded graph nodes and pass through the
//! shared mapping network, landing in one latent space.

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{Image, NUM_OBSERVATIONS};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamList,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Report,
}

const CONV_CHANNELS: [usize; 3] = [8, 16, 32];

/// Three stride-2 convolutions ending in a patch grid, each patch projected
/// to the model dimension. Stands in for a pretrained backbone at this scale.
pub struct ImageBackbone {
    conv_weights: Vec<Tensor>,
    conv_biases: Vec<Tensor>,
    proj: Linear,
    image_size: usize,
}

impl ImageBackbone {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config) -> ImageBackbone {
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &CONV_CHANNELS {
            conv_weights.push(crate::nn::init_matrix(rng, in_ch * 9, out_ch));
            conv_biases.push(Tensor::param(vec![0.0; out_ch], &[out_ch]).unwrap());
            in_ch = out_ch;
        }
        ImageBackbone {
            conv_weights,
            conv_biases,
            proj: Linear::new(rng, CONV_CHANNELS[2], cfg.d),
            image_size: cfg.image_size,
        }
    }

    /// `[N_I, d]` patch features.
    pub fn embed_image(&self, image: &Image) -> Result<Tensor> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(Error::DimensionMismatch {
                context: "embed_image: image extents".into(),
                left: vec![image.height, image.width],
                right: vec![self.image_size, self.image_size],
            });
        }
        let mut x = Tensor::new(image.data.clone(), &[1, image.height, image.width])?;
        let mut side = self.image_size;
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            let cols = x.im2col(3, 2, 1)?;
            let act = cols.matmul(w)?.add_row(b)?.relu();
            side /= 2;
            let out_ch = b.numel();
            x = act.transpose()?.reshape(&[out_ch, side, side])?;
        }
        let patches = x
            .reshape(&[CONV_CHANNELS[2], side * side])?
            .transpose()?;
        self.proj.forward(&patches)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        for (i, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            out.push((format!("{prefix}.conv{i}.weight"), w.clone()));
            out.push((format!("{prefix}.conv{i}.bias"), b.clone()));
        }
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(rng, d, heads)?,
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(rng, d, 4 * d, d),
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let normed = self.ln1.forward(x)?;
        let x = x.add(&self.attn.forward(&normed, &normed, mask)?)?;
        let normed = self.ln2.forward(&x)?;
        x.add(&self.ffn.forward(&normed)?)
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

/// Transformer encoder over token embeddings, pooled to exactly `N_R` rows
/// by learned query attention.
pub struct ReportEmbedder {
    word_embeddings: Tensor,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    pool_queries: Tensor,
    pool_attn: MultiHeadAttention,
    vocab_size: usize,
    t_max: usize,
}

impl ReportEmbedder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config, vocab_size: usize) -> Result<ReportEmbedder> {
        let layers = (0..cfg.enc_layers)
            .map(|_| EncoderLayer::new(rng, cfg.d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReportEmbedder {
            word_embeddings: crate::nn::init_matrix(rng, vocab_size, cfg.d),
            positions: sinusoidal_positions(cfg.t_max, cfg.d),
            layers,
            final_ln: LayerNorm::new(cfg.d),
            pool_queries: crate::nn::init_matrix(rng, cfg.n_slots(), cfg.d),
            pool_attn: MultiHeadAttention::new(rng, cfg.d, cfg.heads)?,
            vocab_size,
            t_max: cfg.t_max,
        })
    }

    /// `[N_R, d]` pooled features. Tokens at positions >= `valid_len` are
    /// masked out of every attention.
    pub fn embed_report(&self, ids: &[usize], valid_len: usize) -> Result<Tensor> {
        if valid_len == 0 || ids.is_empty() {
            return Err(Error::Contract("embed_report: empty report".into()));
        }
        if valid_len > ids.len() {
            return Err(Error::Contract(format!(
                "embed_report: valid_len {valid_len} exceeds token count {}",
                ids.len()
            )));
        }
        if ids.len() > self.t_max {
            return Err(Error::Contract(format!(
                "embed_report: length {} exceeds t_max {}",
                ids.len(),
                self.t_max
            )));
        }
        let len = ids.len();
        let words = self.word_embeddings.gather_rows(ids)?;
        let pos = self
            .positions
            .gather_rows(&(0..len).collect::<Vec<_>>())?;
        let mut x = words.add(&pos)?;
        let self_mask = key_mask(len, len, valid_len);
        for layer in &self.layers {
            x = layer.forward(&x, self_mask.as_ref())?;
        }
        let x = self.final_ln.forward(&x)?;
        let n_r = self.pool_queries.shape()[0];
        let pool_mask = key_mask(n_r, len, valid_len);
        self.pool_attn
            .forward(&self.pool_queries, &x, pool_mask.as_ref())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.word_embeddings"), self.word_embeddings.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.layer{i}"), out);
        }
        self.final_ln.params(&format!("{prefix}.final_ln"), out);
        out.push((format!("{prefix}.pool_queries"), self.pool_queries.clone()));
        self.pool_attn.params(&format!("{prefix}.pool_attn"), out);
    }
}

/// Additive mask hiding key columns at positions >= `valid_len`.
fn key_mask(rows: usize, cols: usize, valid_len: usize) -> Option<Tensor> {
    if valid_len >= cols {
        return None;
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in valid_len..cols {
            data[r * cols + c] = -1e30;
        }
    }
    Some(Tensor::new(data, &[rows, cols]).unwrap())
}

/// Both knowledge-driven encoders: modality-specific attention over the
/// embedded graph nodes, then the mapping network F. With sharing enabled
/// there is exactly one F parameter buffer.
pub struct KnowledgeEncoders {
    image_attn: MultiHeadAttention,
    report_attn: MultiHeadAttention,
    mapper_image: FeedForward,
    mapper_report: FeedForward,
    pub shared: bool,
}

fn alias_linear(l: &Linear) -> Linear {
    Linear {
        weight: l.weight.clone(),
        bias: l.bias.clone(),
    }
}

fn alias_ffn(f: &FeedForward) -> FeedForward {
    FeedForward {
        lin1: alias_linear(&f.lin1),
        lin2: alias_linear(&f.lin2),
    }
}

impl KnowledgeEncoders {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config) -> Result<KnowledgeEncoders> {
        let image_attn = MultiHeadAttention::new(rng, cfg.d, cfg.heads)?;
        let report_attn = MultiHeadAttention::new(rng, cfg.d, cfg.heads)?;
        let mapper_image = FeedForward::new(rng, cfg.d, cfg.f_hidden, cfg.d);
        let mapper_report = if cfg.shared_f {
            alias_ffn(&mapper_image)
        } else {
            FeedForward::new(rng, cfg.d, cfg.f_hidden, cfg.d)
        };
        Ok(KnowledgeEncoders {
            image_attn,
            report_attn,
            mapper_image,
            mapper_report,
            shared: cfg.shared_f,
        })
    }

    /// G_k = F(Attention_modality(embedding, V')).
    pub fn knowledge_encode(
        &self,
        embedding: &Tensor,
        node_table: &Tensor,
        modality: Modality,
    ) -> Result<Tensor> {
        let (attn, mapper) = match modality {
            Modality::Image => (&self.image_attn, &self.mapper_image),
            Modality::Report => (&self.report_attn, &self.mapper_report),
        };
        // Residual keeps a direct path from the modality features to the
        // classifier; without it the only gradient into the backbone runs
        // through the attention softmax and stalls early in training.
        let attended = embedding.add(&attn.forward(embedding, node_table, None)?)?;
        mapper.forward(&attended)
    }

    pub fn mapper(&self, modality: Modality) -> &FeedForward {
        match modality {
            Modality::Image => &self.mapper_image,
            Modality::Report => &self.mapper_report,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.image_attn.params(&format!("{prefix}.image_attn"), out);
        self.report_attn.params(&format!("{prefix}.report_attn"), out);
        if self.shared {
            self.mapper_image.params(&format!("{prefix}.f"), out);
        } else {
            self.mapper_image.params(&format!("{prefix}.f_image"), out);
            self.mapper_report.params(&format!("{prefix}.f_report"), out);
        }
    }
}

/// Shared multi-label head: mean-pool the knowledge representation, one
/// linear layer, sigmoid per observation.
pub struct ObservationClassifier {
    head: Linear,
}

impl ObservationClassifier {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> ObservationClassifier {
        ObservationClassifier {
            head: Linear::new(rng, d, NUM_OBSERVATIONS),
        }
    }

    /// `[1, 14]` logits; feed to BCE during training.
    pub fn logits(&self, knowledge: &Tensor) -> Result<Tensor> {
        self.head.forward(&knowledge.mean_rows()?)
    }

    /// 14 probabilities in (0, 1).
    pub fn classify(&self, knowledge: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(knowledge)?.sigmoid().to_vec())
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.head.params(&format!("{prefix}.head"), out);
    }
}
