//! The assembled model: graph embedder, both modality encoders, shared
//! classifier head, and the knowledge-driven decoder, with one flat
//! name-to-tensor parameter listing for optimization and checkpointing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{Image, Vocabulary};
use crate::decoder::KnowledgeDecoder;
use crate::encoder::{
    ImageBackbone, KnowledgeEncoders, Modality, ObservationClassifier, ReportEmbedder,
};
use crate::error::{Error, Result};
use crate::graph::{GcnEmbedder, KnowledgeGraph};
use crate::nn::ParamList;
use crate::tensor::Tensor;

pub struct Kgae {
    pub config: Config,
    pub vocab: Vocabulary,
    pub graph: KnowledgeGraph,
    pub gcn: GcnEmbedder,
    pub backbone: ImageBackbone,
    pub report_embedder: ReportEmbedder,
    pub encoders: KnowledgeEncoders,
    pub classifier: ObservationClassifier,
    pub decoder: KnowledgeDecoder,
    /// Set after paired finetuning: the decoder then attends over the
    /// knowledge representation concatenated with the raw patch features.
    pub visual_concat: bool,
}

impl Kgae {
    pub fn new(config: Config, graph: KnowledgeGraph, vocab: Vocabulary) -> Result<Kgae> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::Contract("model requires a non-empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gcn = GcnEmbedder::new(&graph, config.d)?;
        let backbone = ImageBackbone::new(&mut rng, &config);
        let report_embedder = ReportEmbedder::new(&mut rng, &config, vocab.len())?;
        let encoders = KnowledgeEncoders::new(&mut rng, &config)?;
        let classifier = ObservationClassifier::new(&mut rng, config.d);
        let decoder = KnowledgeDecoder::new(&mut rng, &config, vocab.len())?;
        Ok(Kgae {
            config,
            vocab,
            graph,
            gcn,
            backbone,
            report_embedder,
            encoders,
            classifier,
            decoder,
            visual_concat: false,
        })
    }

    /// Refined node table V', recomputed per step so graph parameters train.
    pub fn node_table(&self) -> Result<Tensor> {
        self.gcn.embed()
    }

    /// G_I together with the raw patch features I'.
    pub fn encode_image(&self, image: &Image, node_table: &Tensor) -> Result<(Tensor, Tensor)> {
        let features = self.backbone.embed_image(image)?;
        let g = self
            .encoders
            .knowledge_encode(&features, node_table, Modality::Image)?;
        Ok((g, features))
    }

    /// G_R for a tokenized report.
    pub fn encode_report(&self, ids: &[usize], node_table: &Tensor) -> Result<Tensor> {
        let features = self.report_embedder.embed_report(ids, ids.len())?;
        self.encoders
            .knowledge_encode(&features, node_table, Modality::Report)
    }

    /// Observation rows appended to the decoder's knowledge: one row per
    /// label, interpolated between the decoder's off/on embeddings by the
    /// classifier's probability. Both encoders are trained against the same
    /// classifier, so this channel means the same thing for either modality.
    fn observation_rows(&self, g: &Tensor) -> Result<Tensor> {
        // Sharpened gate: report-side classifier outputs saturate during
        // training, so push borderline probabilities toward 0 or 1 to keep
        // the channel's range consistent at inference.
        let probs = self.classifier.logits(g)?.scale(3.0).sigmoid().transpose()?;
        let d = self.config.d;
        let ones = Tensor::new(vec![1.0; d], &[1, d])?;
        let p = probs.matmul(&ones)?;
        let n = p.shape()[0];
        let complement = Tensor::new(vec![1.0; n * d], &[n, d])?.sub(&p)?;
        p.mul(&self.decoder.label_on)?
            .add(&complement.mul(&self.decoder.label_off)?)
    }

    /// What the decoder sees for knowledge G: the observation rows. The raw
    /// G rows carry encoder-specific structure that does not transfer from
    /// the report encoder (which trains the decoder) to the image encoder
    /// (which drives it at inference), so they stay out of the key set.
    pub fn decoder_input(&self, g: &Tensor) -> Result<Tensor> {
        self.observation_rows(g)
    }

    /// What the decoder attends over for this image under the current
    /// regime: [G_I ; observations], plus the raw patch rows I' once
    /// finetuned.
    pub fn decoder_knowledge(&self, image: &Image, node_table: &Tensor) -> Result<Tensor> {
        let (g, features) = self.encode_image(image, node_table)?;
        let k = self.decoder_input(&g)?;
        if self.visual_concat {
            k.concat_rows(&features)
        } else {
            Ok(k)
        }
    }

    /// Greedy report generation for one image.
    pub fn generate_for_image(&self, image: &Image, max_len: usize) -> Result<Vec<usize>> {
        let node_table = self.node_table()?;
        let knowledge = self.decoder_knowledge(image, &node_table)?;
        self.decoder.generate(&knowledge, max_len)
    }

    pub fn generate_text(&self, image: &Image, max_len: usize) -> Result<String> {
        Ok(self.vocab.detokenize(&self.generate_for_image(image, max_len)?))
    }

    /// Auto-encoding loss: reconstruct the report from its own knowledge
    /// representation.
    pub fn reconstruction_loss(&self, ids: &[usize], node_table: &Tensor) -> Result<Tensor> {
        let g = self.encode_report(ids, node_table)?;
        let k = self.decoder_input(&g)?;
        self.decoder.decode_train(&k, ids)?.cross_entropy(ids)
    }

    pub fn params(&self) -> ParamList {
        let mut out = Vec::new();
        self.gcn.params("gcn", &mut out);
        self.backbone.params("backbone", &mut out);
        self.report_embedder.params("report_embedder", &mut out);
        self.encoders.params("encoders", &mut out);
        self.classifier.params("classifier", &mut out);
        self.decoder.params("decoder", &mut out);
        out
    }

    /// Stage-1 subset: everything that feeds the observation classifier.
    pub fn params_stage1(&self) -> ParamList {
        let mut out = Vec::new();
        self.gcn.params("gcn", &mut out);
        self.backbone.params("backbone", &mut out);
        self.report_embedder.params("report_embedder", &mut out);
        self.encoders.params("encoders", &mut out);
        self.classifier.params("classifier", &mut out);
        out
    }

    /// Stage-2 subset: the report-side encoder stack stays frozen and only
    /// the decoder (with its bank) learns to reconstruct.
    pub fn params_stage2(&self) -> ParamList {
        let mut out = Vec::new();
        self.decoder.params("decoder", &mut out);
        out
    }
}
