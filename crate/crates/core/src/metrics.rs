//! Generation quality metrics: corpus-level BLEU, mean ROUGE-L, and the
//! label-based clinical efficacy scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_tokens, Lexicon, NUM_OBSERVATIONS};
use crate::error::{Error, Result};

/// Floor applied to zero modified precisions so the geometric mean stays
/// defined.
const BLEU_SMOOTH: f64 = 1e-9;

const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

fn check_corpus(candidates: &[String], references: &[String]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Contract("metrics: empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "metrics: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut out: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-n with uniform weights over orders 1..=n, clipped
/// modified precision, and the standard brevity penalty.
pub fn bleu_n(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    check_corpus(candidates, references)?;
    if n == 0 || n > 4 {
        return Err(Error::Contract(format!("bleu_n: order {n} out of range")));
    }
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| split_tokens(c)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| split_tokens(r)).collect();

    let cand_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let ref_len: usize = ref_tokens.iter().map(Vec::len).sum();

    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut matched = 0u64;
        let mut total = 0u64;
        for (c, r) in cand_tokens.iter().zip(&ref_tokens) {
            let cc = ngram_counts(c, order);
            let rc = ngram_counts(r, order);
            for (gram, &count) in &cc {
                total += count;
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
        let p = if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.max(BLEU_SMOOTH).ln() / n as f64;
    }

    let bp = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-sample ROUGE-L F-score with beta = 1.2.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let ct = split_tokens(c);
        let rt = split_tokens(r);
        if ct.is_empty() || rt.is_empty() {
            continue;
        }
        let l = lcs_len(&ct, &rt) as f64;
        let p = l / ct.len() as f64;
        let rr = l / rt.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        if p > 0.0 && rr > 0.0 {
            sum += (1.0 + b2) * p * rr / (rr + b2 * p);
        }
    }
    Ok(sum / candidates.len() as f64)
}

/// Micro-averaged precision, recall, and F1 of the positive observation
/// labels extracted from generated text against those from the references.
pub fn clinical_efficacy(
    candidates: &[String],
    references: &[String],
    lexicon: &Lexicon,
) -> Result<(f64, f64, f64)> {
    check_corpus(candidates, references)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (c, r) in candidates.iter().zip(references) {
        let pred = lexicon.extract_labels(c);
        let gold = lexicon.extract_labels(r);
        for k in 0..NUM_OBSERVATIONS {
            match (pred[k], gold[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

pub fn evaluate(
    candidates: &[String],
    references: &[String],
    lexicon: &Lexicon,
) -> Result<MetricReport> {
    let mut bleu = [0.0; 4];
    for (i, b) in bleu.iter_mut().enumerate() {
        *b = bleu_n(candidates, references, i + 1)?;
    }
    let rouge = rouge_l(candidates, references)?;
    let (p, r, f1) = clinical_efficacy(candidates, references, lexicon)?;
    Ok(MetricReport {
        bleu,
        rouge_l: rouge,
        ce_precision: p,
        ce_recall: r,
        ce_f1: f1,
    })
}
