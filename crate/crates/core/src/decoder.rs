//! Three-layer transformer decoder with knowledge-driven attention: causal
//! self-attention over the generated prefix, then attention over the
//! knowledge representation concatenated with bank-distilled knowledge.

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{BOS, EOS, NUM_OBSERVATIONS};
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamList,
};
use crate::tensor::Tensor;

/// Learnable N_B x d memory of distilled task knowledge.
pub struct KnowledgeBank {
    pub table: Tensor,
}

impl KnowledgeBank {
    pub fn new(rng: &mut ChaCha8Rng, n_b: usize, d: usize) -> KnowledgeBank {
        KnowledgeBank {
            table: crate::nn::init_matrix(rng, n_b, d),
        }
    }
}

/// B_k = softmax(G_k B^T) B: each knowledge row distills a convex
/// combination of bank entries.
pub fn bank_distill(knowledge: &Tensor, bank: &KnowledgeBank) -> Result<Tensor> {
    let scores = knowledge.matmul(&bank.table.transpose()?)?;
    scores.softmax_rows()?.matmul(&bank.table)
}

/// Word table plus fixed sinusoidal positions; the two d-dim vectors are
/// concatenated into 2d and projected back to d.
pub struct TokenEmbedding {
    pub word_table: Tensor,
    positions: Tensor,
    pub input_proj: Linear,
    t_max: usize,
}

impl TokenEmbedding {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config, vocab_size: usize) -> TokenEmbedding {
        TokenEmbedding {
            word_table: crate::nn::init_matrix(rng, vocab_size, cfg.d),
            positions: sinusoidal_positions(cfg.t_max, cfg.d),
            input_proj: Linear::new(rng, 2 * cfg.d, cfg.d),
            t_max: cfg.t_max,
        }
    }

    /// x_t for a whole prefix: `[T, d]`.
    pub fn embed_sequence(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.len() > self.t_max {
            return Err(Error::Contract(format!(
                "token position {} exceeds t_max {}",
                ids.len(),
                self.t_max
            )));
        }
        let words = self.word_table.gather_rows(ids)?;
        let pos = self
            .positions
            .gather_rows(&(0..ids.len()).collect::<Vec<_>>())?;
        let both = Tensor::concat_cols(&[words, pos])?;
        self.input_proj.forward(&both)
    }

    /// Single-token embedding at position `t`.
    pub fn embed_token(&self, id: usize, t: usize) -> Result<Tensor> {
        if t >= self.t_max {
            return Err(Error::Contract(format!(
                "token position {t} exceeds t_max {}",
                self.t_max
            )));
        }
        let word = self.word_table.gather_rows(&[id])?;
        let pos = self.positions.gather_rows(&[t])?;
        let both = Tensor::concat_cols(&[word, pos])?;
        self.input_proj.forward(&both)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.word_table"), self.word_table.clone()));
        self.input_proj.params(&format!("{prefix}.input_proj"), out);
    }
}

struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    know_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Result<DecoderLayer> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(rng, d, heads)?,
            ln2: LayerNorm::new(d),
            know_attn: MultiHeadAttention::new(rng, d, heads)?,
            ln3: LayerNorm::new(d),
            ffn: FeedForward::new(rng, d, 4 * d, d),
        })
    }

    fn forward(&self, x: &Tensor, knowledge_keys: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let normed = self.ln1.forward(x)?;
        let x = x.add(&self.self_attn.forward(&normed, &normed, Some(mask))?)?;
        let normed = self.ln2.forward(&x)?;
        let x = x.add(&self.know_attn.forward(&normed, knowledge_keys, None)?)?;
        let normed = self.ln3.forward(&x)?;
        x.add(&self.ffn.forward(&normed)?)
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.self_attn.params(&format!("{prefix}.self_attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.know_attn.params(&format!("{prefix}.know_attn"), out);
        self.ln3.params(&format!("{prefix}.ln3"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

pub struct KnowledgeDecoder {
    pub token_embedding: TokenEmbedding,
    layers: Vec<DecoderLayer>,
    /// Normalizes knowledge rows before distillation and attention so the
    /// decoder sees keys on one scale regardless of which encoder made them.
    know_ln: LayerNorm,
    final_ln: LayerNorm,
    /// Widens to 2d ahead of the output projection.
    out_ffn: FeedForward,
    pub output_proj: Tensor,
    pub bank: Option<KnowledgeBank>,
    /// Per-observation key rows: the row the model appends to the knowledge
    /// interpolates from `label_off[k]` to `label_on[k]` with the predicted
    /// probability of observation k.
    pub label_on: Tensor,
    pub label_off: Tensor,
    vocab_size: usize,
    t_max: usize,
}

impl KnowledgeDecoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config, vocab_size: usize) -> Result<KnowledgeDecoder> {
        let token_embedding = TokenEmbedding::new(rng, cfg, vocab_size);
        let layers = (0..cfg.dec_layers)
            .map(|_| DecoderLayer::new(rng, cfg.d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let bank = cfg
            .use_bank
            .then(|| KnowledgeBank::new(rng, cfg.n_b, cfg.d));
        Ok(KnowledgeDecoder {
            token_embedding,
            layers,
            know_ln: LayerNorm::new(cfg.d),
            final_ln: LayerNorm::new(cfg.d),
            out_ffn: FeedForward::new(rng, cfg.d, 4 * cfg.d, 2 * cfg.d),
            output_proj: crate::nn::init_matrix(rng, 2 * cfg.d, vocab_size),
            bank,
            label_on: crate::nn::init_matrix(rng, NUM_OBSERVATIONS, cfg.d),
            label_off: crate::nn::init_matrix(rng, NUM_OBSERVATIONS, cfg.d),
            vocab_size,
            t_max: cfg.t_max,
        })
    }

    /// The decoder's attention targets: [G_k ; B_k], or G_k alone when the
    /// bank is ablated.
    pub fn knowledge_keys(&self, knowledge: &Tensor) -> Result<Tensor> {
        let normed = self.know_ln.forward(knowledge)?;
        match &self.bank {
            // The distilled rows live in the bank's span whichever encoder
            // produced the knowledge, so they transfer across modalities.
            Some(bank) => bank_distill(&normed, bank),
            None => Ok(normed),
        }
    }

    fn logits_for_inputs(&self, knowledge_keys: &Tensor, inputs: &[usize]) -> Result<Tensor> {
        let mut x = self.token_embedding.embed_sequence(inputs)?;
        let mask = causal_mask(inputs.len());
        for layer in &self.layers {
            x = layer.forward(&x, knowledge_keys, &mask)?;
        }
        let x = self.final_ln.forward(&x)?;
        self.out_ffn.forward(&x)?.matmul(&self.output_proj)
    }

    /// Teacher-forced logits `[T, |D|]` for BOS-shifted targets.
    pub fn decode_train(&self, knowledge: &Tensor, targets: &[usize]) -> Result<Tensor> {
        if targets.is_empty() {
            return Err(Error::Contract("decode_train: empty target sequence".into()));
        }
        if targets.len() > self.t_max {
            return Err(Error::Contract(format!(
                "decode_train: target length {} exceeds t_max {}",
                targets.len(),
                self.t_max
            )));
        }
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        let keys = self.knowledge_keys(knowledge)?;
        self.logits_for_inputs(&keys, &inputs)
    }

    /// Greedy argmax decoding from BOS until EOS or `max_len`; ties break
    /// toward the lowest token id. Deterministic.
    pub fn generate(&self, knowledge: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        let mut state = DecoderState::new(self, knowledge)?;
        while state.generated.len() < max_len.min(self.t_max) {
            let next = state.step(self)?;
            if next == EOS {
                break;
            }
        }
        Ok(state.generated)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.token_embedding.params(&format!("{prefix}.embedding"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.layer{i}"), out);
        }
        self.know_ln.params(&format!("{prefix}.know_ln"), out);
        self.final_ln.params(&format!("{prefix}.final_ln"), out);
        self.out_ffn.params(&format!("{prefix}.out_ffn"), out);
        out.push((format!("{prefix}.output_proj"), self.output_proj.clone()));
        out.push((format!("{prefix}.label_on"), self.label_on.clone()));
        out.push((format!("{prefix}.label_off"), self.label_off.clone()));
        if let Some(bank) = &self.bank {
            out.push((format!("{prefix}.bank"), bank.table.clone()));
        }
    }
}

/// In-flight greedy decode: the generated prefix plus the knowledge key set,
/// which is fixed for the whole decode and therefore distilled once.
pub struct DecoderState {
    pub generated: Vec<usize>,
    knowledge_keys: Tensor,
}

impl DecoderState {
    pub fn new(decoder: &KnowledgeDecoder, knowledge: &Tensor) -> Result<DecoderState> {
        Ok(DecoderState {
            generated: Vec::new(),
            knowledge_keys: decoder.knowledge_keys(knowledge)?.detach(),
        })
    }

    /// Emit one token and append it to the prefix.
    pub fn step(&mut self, decoder: &KnowledgeDecoder) -> Result<usize> {
        let mut inputs = Vec::with_capacity(self.generated.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&self.generated);
        let logits = decoder.logits_for_inputs(&self.knowledge_keys, &inputs)?;
        let v = decoder.vocab_size;
        let last = logits.to_vec()[(inputs.len() - 1) * v..].to_vec();
        let mut best = 0usize;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        self.generated.push(best);
        Ok(best)
    }
}
