//! Training procedures: the two-stage unsupervised schedule, optional paired
//! finetuning, and batch inference, each emitting a run manifest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adam::{clip_global_norm, AdamState};
use crate::config::Config;
use crate::corpus::{Study, EOS};
use crate::error::{Error, Result};
use crate::model::Kgae;
use crate::nn::ParamList;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    pub image_corpus_sha256: String,
    pub report_corpus_sha256: String,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_final_loss: f64,
    pub stage2_final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub config: Config,
    pub paired_corpus_sha256: String,
    pub ratio: f64,
    pub subset_size: usize,
    pub steps: usize,
    pub final_loss: f64,
}

/// SHA-256 over ids, reports, labels, and image bytes, in corpus order.
pub fn corpus_digest(studies: &[Study]) -> String {
    let mut h = Sha256::new();
    for s in studies {
        h.update(s.id.as_bytes());
        h.update([0]);
        h.update(s.report.as_bytes());
        h.update([0]);
        for &l in &s.labels {
            h.update([l as u8]);
        }
        if let Some(img) = &s.image {
            for v in &img.data {
                h.update(v.to_le_bytes());
            }
        }
        h.update([0xff]);
    }
    format!("{:x}", h.finalize())
}

/// Round-robin sampler with a fresh seeded shuffle per pass.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> BatchSampler {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Token ids for training, clamped to the decoder horizon with EOS kept
/// terminal.
fn training_ids(model: &Kgae, report: &str) -> Vec<usize> {
    let mut ids = model.vocab.tokenize(report);
    let t_max = model.config.t_max;
    if ids.len() > t_max {
        ids.truncate(t_max);
        ids[t_max - 1] = EOS;
    }
    ids
}

fn zero_all(params: &ParamList) {
    for (_, t) in params {
        t.zero_grad();
    }
}

fn optimize_step(
    loss: &Tensor,
    all_params: &ParamList,
    trained: &[(String, Tensor)],
    adam: &mut AdamState,
    grad_clip: f64,
) -> Result<f64> {
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    zero_all(all_params);
    loss.backward()?;
    // Alternating batches leave the other modality's parameters out of the
    // graph; step only what participated.
    let touched: ParamList = trained
        .iter()
        .filter(|(_, t)| t.grad().is_some())
        .cloned()
        .collect();
    if grad_clip > 0.0 {
        clip_global_norm(&touched, grad_clip);
    }
    adam.step(&touched)?;
    Ok(value)
}

/// Add seeded Gaussian noise scaled to `frac` of the tensor's own standard
/// deviation.
fn perturb(t: &Tensor, frac: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data = t.to_vec();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    let dist = Normal::new(0.0, frac * std).unwrap();
    let noise: Vec<f64> = data.iter().map(|_| dist.sample(rng)).collect();
    t.add(&Tensor::new(noise, &t.shape())?)
}

fn mean_of(losses: Vec<Tensor>) -> Result<Tensor> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for l in it {
        acc = acc.add(&l)?;
    }
    Ok(acc.scale(1.0 / n as f64))
}

/// The sets must carry no pairing into each other: any study in one set
/// linked to a study in the other makes the run supervised by accident.
fn assert_unpaired(images: &[Study], reports: &[Study]) -> Result<()> {
    let report_ids: std::collections::BTreeSet<&str> =
        reports.iter().map(|s| s.id.as_str()).collect();
    for s in images {
        if report_ids.contains(s.id.as_str()) {
            return Err(Error::Contract(format!(
                "study `{}` appears in both the image set and the report set",
                s.id
            )));
        }
        if let Some(p) = s.pair_id.as_deref() {
            if report_ids.contains(p) {
                return Err(Error::Contract(format!(
                    "image study `{}` is paired with report study `{p}`",
                    s.id
                )));
            }
        }
    }
    let image_ids: std::collections::BTreeSet<&str> =
        images.iter().map(|s| s.id.as_str()).collect();
    for s in reports {
        if let Some(p) = s.pair_id.as_deref() {
            if image_ids.contains(p) {
                return Err(Error::Contract(format!(
                    "report study `{}` is paired with image study `{p}`",
                    s.id
                )));
            }
        }
    }
    Ok(())
}

/// Stage 1 trains both knowledge encoders against observation pseudo-labels;
/// stage 2 freezes the report path and trains the decoder by auto-encoding.
pub fn train_unsupervised(
    model: &mut Kgae,
    images: &[Study],
    reports: &[Study],
) -> Result<RunManifest> {
    if images.is_empty() || reports.is_empty() {
        return Err(Error::Contract("training sets must be non-empty".into()));
    }
    for s in images {
        if s.image.is_none() {
            return Err(Error::Contract(format!("image study `{}` has no image", s.id)));
        }
    }
    assert_unpaired(images, reports)?;

    let cfg = model.config.clone();
    let all = model.params();

    // Stage 1: alternate image and report classification batches.
    let stage1_params = model.params_stage1();
    let mut adam1 = AdamState::new(cfg.adam());
    let mut img_sampler = BatchSampler::new(images.len(), cfg.seed.wrapping_add(1));
    let mut rep_sampler = BatchSampler::new(reports.len(), cfg.seed.wrapping_add(2));
    let mut stage1_final_loss = 0.0;
    for step in 0..cfg.stage1_steps {
        let node_table = model.node_table()?;
        let mut losses = Vec::with_capacity(cfg.batch_size);
        if step % 2 == 0 {
            for i in img_sampler.next_batch(cfg.batch_size) {
                let s = &images[i];
                let (g, _) = model.encode_image(s.image.as_ref().unwrap(), &node_table)?;
                let logits = model.classifier.logits(&g)?;
                losses.push(logits.bce_with_logits(&s.label_floats())?);
            }
        } else {
            for i in rep_sampler.next_batch(cfg.batch_size) {
                let s = &reports[i];
                let ids = training_ids(model, &s.report);
                let g = model.encode_report(&ids, &node_table)?;
                let logits = model.classifier.logits(&g)?;
                losses.push(logits.bce_with_logits(&s.label_floats())?);
            }
        }
        let loss = mean_of(losses)?;
        stage1_final_loss = optimize_step(&loss, &all, &stage1_params, &mut adam1, cfg.grad_clip)?;
    }

    // Stage 2: report auto-encoding through the frozen encoder.
    let stage2_params = model.params_stage2();
    let mut adam2 = AdamState::new(cfg.adam());
    let mut sampler = BatchSampler::new(reports.len(), cfg.seed.wrapping_add(3));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let mut stage2_final_loss = 0.0;
    for _ in 0..cfg.stage2_steps {
        let node_table = model.node_table()?;
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for i in sampler.next_batch(cfg.batch_size) {
            let ids = training_ids(model, &reports[i].report);
            let g = model.encode_report(&ids, &node_table)?;
            // Denoising: the decoder only ever sees report knowledge here but
            // must later condition on image knowledge, so jitter its input in
            // proportion to its own spread.
            let g = if cfg.stage2_noise > 0.0 {
                perturb(&g, cfg.stage2_noise, &mut noise_rng)?
            } else {
                g
            };
            let k = model.decoder_input(&g)?;
            let logits = model.decoder.decode_train(&k, &ids)?;
            losses.push(logits.cross_entropy(&ids)?);
        }
        let loss = mean_of(losses)?;
        stage2_final_loss = optimize_step(&loss, &all, &stage2_params, &mut adam2, cfg.grad_clip)?;
    }

    Ok(RunManifest {
        config: cfg.clone(),
        image_corpus_sha256: corpus_digest(images),
        report_corpus_sha256: corpus_digest(reports),
        stage1_steps: cfg.stage1_steps,
        stage2_steps: cfg.stage2_steps,
        stage1_final_loss,
        stage2_final_loss,
    })
}

/// Seeded deterministic subset of `ratio * len` paired studies, rounded up.
pub fn finetune_subset(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "`ratio` ({ratio}) must lie in (0, 1] for finetuning"
        )));
    }
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    order.shuffle(&mut rng);
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Supervised decoder finetuning on image-report pairs: the decoder now
/// attends over [G_I ; I'] and every parameter trains.
pub fn finetune(model: &mut Kgae, paired: &[Study], ratio: f64) -> Result<FinetuneManifest> {
    if paired.is_empty() {
        return Err(Error::Contract("finetune requires paired studies".into()));
    }
    for s in paired {
        if s.image.is_none() {
            return Err(Error::Contract(format!("paired study `{}` has no image", s.id)));
        }
    }
    let cfg = model.config.clone();
    let subset = finetune_subset(paired.len(), ratio, cfg.seed)?;
    model.visual_concat = true;

    let all = model.params();
    let mut adam = AdamState::new(cfg.adam());
    let mut sampler = BatchSampler::new(subset.len(), cfg.seed.wrapping_add(4));
    let mut final_loss = 0.0;
    for _ in 0..cfg.finetune_steps {
        let node_table = model.node_table()?;
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for i in sampler.next_batch(cfg.batch_size) {
            let s = &paired[subset[i]];
            let ids = training_ids(model, &s.report);
            let knowledge = model.decoder_knowledge(s.image.as_ref().unwrap(), &node_table)?;
            let logits = model.decoder.decode_train(&knowledge, &ids)?;
            losses.push(logits.cross_entropy(&ids)?);
        }
        let loss = mean_of(losses)?;
        final_loss = optimize_step(&loss, &all, &all, &mut adam, cfg.grad_clip)?;
    }

    Ok(FinetuneManifest {
        config: cfg.clone(),
        paired_corpus_sha256: corpus_digest(paired),
        ratio,
        subset_size: subset.len(),
        steps: cfg.finetune_steps,
        final_loss,
    })
}

/// Generate a report for every study image.
pub fn infer(model: &Kgae, studies: &[Study], max_len: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(studies.len());
    for s in studies {
        let image = s
            .image
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("study `{}` has no image", s.id)))?;
        out.push(model.generate_text(image, max_len)?);
    }
    Ok(out)
}
