//! Tokenizer, vocabulary, study records, corpus JSONL I/O, and the
//! phrase-matching observation labeler.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

/// The 14 radiographic observation categories, in schema order.
pub const OBSERVATIONS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

pub const NO_FINDING_INDEX: usize = 8;
pub const NUM_OBSERVATIONS: usize = 14;

/// Lowercase and split on whitespace; punctuation becomes its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_tokens(text).join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from report texts; word ids are dense, reserved ids 0-3.
    pub fn build(reports: impl IntoIterator<Item = impl AsRef<str>>) -> Vocabulary {
        let mut words: Vec<String> = reports
            .into_iter()
            .flat_map(|r| split_tokens(r.as_ref()))
            .collect();
        words.sort();
        words.dedup();
        let mut tokens = vec![
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<pad>".to_string(),
            "<unk>".to_string(),
        ];
        tokens.extend(words);
        Vocabulary::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Lowercase, split, map through the vocabulary (OOV -> UNK), append EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = split_tokens(text)
            .iter()
            .map(|t| self.id_of(t).unwrap_or(UNK))
            .collect();
        ids.push(EOS);
        ids
    }

    /// Inverse of tokenize up to normalization; reserved ids are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_RESERVED && i < self.tokens.len())
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major pixel values in [0, 1].
    pub data: Vec<f64>,
}

static PAIRING_READS: AtomicU64 = AtomicU64::new(0);

/// Number of times any study's pairing field has been read through the
/// public accessor; the unsupervised pipeline must leave this untouched.
pub fn pairing_reads() -> u64 {
    PAIRING_READS.load(Ordering::Relaxed)
}

/// One sample: image grid, report text, 14-way observation labels, and an
/// optional cross-set partner id.
#[derive(Debug, Clone)]
pub struct Study {
    pub id: String,
    pub image: Option<Image>,
    pub report: String,
    pub labels: Vec<bool>,
    pub(crate) pair_id: Option<String>,
}

impl Study {
    pub fn new(
        id: String,
        image: Option<Image>,
        report: String,
        labels: Vec<bool>,
        pair_id: Option<String>,
    ) -> Study {
        Study {
            id,
            image,
            report,
            labels,
            pair_id,
        }
    }

    /// Instrumented accessor: every read is counted, so tests can assert the
    /// unsupervised path never consumes pairing information.
    pub fn pairing(&self) -> Option<&str> {
        PAIRING_READS.fetch_add(1, Ordering::Relaxed);
        self.pair_id.as_deref()
    }

    pub fn label_floats(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRef {
    file: String,
    offset: u64,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StudyRecord {
    id: String,
    image_ref: Option<ImageRef>,
    report: String,
    labels: Vec<bool>,
    pair_id: Option<String>,
}

fn sidecar_path(jsonl_path: &Path) -> std::path::PathBuf {
    let stem = jsonl_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    jsonl_path.with_file_name(format!("{stem}.images.bin"))
}

/// Write studies as JSONL plus an fp32 sidecar binary for the image grids.
pub fn save_corpus(studies: &[Study], path: &Path) -> Result<()> {
    let p = path.to_string_lossy().into_owned();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut out = BufWriter::new(file);
    let sidecar = sidecar_path(path);
    let mut img_out: Option<BufWriter<File>> = None;
    let mut offset: u64 = 0;
    for s in studies {
        let image_ref = match &s.image {
            Some(img) => {
                let w = img_out.get_or_insert_with(|| {
                    BufWriter::new(File::create(&sidecar).expect("create image sidecar"))
                });
                let this_offset = offset;
                for &v in &img.data {
                    w.write_all(&(v as f32).to_le_bytes())
                        .map_err(|e| Error::io(sidecar.to_string_lossy(), e))?;
                }
                offset += (img.data.len() * 4) as u64;
                Some(ImageRef {
                    file: sidecar
                        .file_name()
                        .map(|f| f.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    offset: this_offset,
                    height: img.height,
                    width: img.width,
                })
            }
            None => None,
        };
        let rec = StudyRecord {
            id: s.id.clone(),
            image_ref,
            report: s.report.clone(),
            labels: s.labels.clone(),
            pair_id: s.pair_id.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Study>> {
    let p = path.to_string_lossy().into_owned();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let reader = BufReader::new(file);
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut sidecars: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut studies = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&p, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StudyRecord =
            serde_json::from_str(&line).map_err(|e| Error::CorpusParse {
                path: p.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if rec.labels.len() != NUM_OBSERVATIONS {
            return Err(Error::CorpusParse {
                path: p.clone(),
                line: lineno + 1,
                message: format!(
                    "field `labels` must have {NUM_OBSERVATIONS} entries, got {}",
                    rec.labels.len()
                ),
            });
        }
        let image = match rec.image_ref {
            Some(r) => {
                let bytes = match sidecars.get(&r.file) {
                    Some(b) => b,
                    None => {
                        let sp = dir.join(&r.file);
                        let mut f = File::open(&sp)
                            .map_err(|e| Error::io(sp.to_string_lossy(), e))?;
                        let mut buf = Vec::new();
                        f.seek(SeekFrom::Start(0))
                            .and_then(|_| f.read_to_end(&mut buf))
                            .map_err(|e| Error::io(sp.to_string_lossy(), e))?;
                        sidecars.entry(r.file.clone()).or_insert(buf)
                    }
                };
                let n = r.height * r.width;
                let start = r.offset as usize;
                if start + n * 4 > bytes.len() {
                    return Err(Error::CorpusParse {
                        path: p.clone(),
                        line: lineno + 1,
                        message: format!("image_ref offset {start} out of range"),
                    });
                }
                let data: Vec<f64> = bytes[start..start + n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                Some(Image {
                    height: r.height,
                    width: r.width,
                    data,
                })
            }
            None => None,
        };
        studies.push(Study {
            id: rec.id,
            image,
            report: rec.report,
            labels: rec.labels,
            pair_id: rec.pair_id,
        });
    }
    Ok(studies)
}

/// Phrase-to-label mapping with negation cues, shared by the observation
/// labeler, the clinical-efficacy metric, and graph construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub labels: Vec<String>,
    pub phrases: Vec<PhraseEntry>,
    pub negation_cues: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhraseEntry {
    pub phrase: String,
    pub label: usize,
}

impl Lexicon {
    pub fn validate(&self) -> Result<()> {
        for e in &self.phrases {
            if e.label >= self.labels.len() {
                return Err(Error::Config(format!(
                    "lexicon phrase `{}` maps to unknown label index {}",
                    e.phrase, e.label
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.to_string_lossy(), e))?;
        let lex: Lexicon = serde_json::from_str(&text)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.to_string_lossy(), e))
    }

    /// Extract 14-way labels from report text: a label is positive when one
    /// of its phrases occurs in a sentence with no negation cue before it;
    /// "No Finding" is positive exactly when nothing else is.
    pub fn extract_labels(&self, text: &str) -> Vec<bool> {
        let mut labels = vec![false; self.labels.len()];
        let norm = normalize(text);
        for sentence in norm.split('.') {
            let tokens: Vec<&str> = sentence.split_whitespace().collect();
            let joined = tokens.join(" ");
            for e in &self.phrases {
                if let Some(pos) = find_phrase(&joined, &e.phrase) {
                    let prefix = &joined[..pos];
                    let negated = prefix
                        .split_whitespace()
                        .any(|t| self.negation_cues.iter().any(|c| c == t));
                    if !negated {
                        labels[e.label] = true;
                    }
                }
            }
        }
        if let Some(nf) = self
            .labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case("no finding"))
        {
            let any_other = labels
                .iter()
                .enumerate()
                .any(|(i, &v)| v && i != nf);
            labels[nf] = !any_other;
        }
        labels
    }
}

/// Word-boundary phrase search in space-joined token text.
fn find_phrase(haystack: &str, phrase: &str) -> Option<usize> {
    let mut start = 0;
    while let Some(rel) = haystack[start..].find(phrase) {
        let pos = start + rel;
        let end = pos + phrase.len();
        let pre_ok = pos == 0 || haystack.as_bytes()[pos - 1] == b' ';
        let post_ok = end == haystack.len() || haystack.as_bytes()[end] == b' ';
        if pre_ok && post_ok {
            return Some(pos);
        }
        start = pos + 1;
    }
    None
}
