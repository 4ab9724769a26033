//! Checkpointing: a JSON manifest carrying everything needed to rebuild the
//! model (config, vocabulary, graph, regime flag, tensor directory) next to
//! a raw little-endian f64 parameter blob.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::model::Kgae;

pub const CHECKPOINT_FORMAT: &str = "kgae-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    /// Loss convention baked into the trained weights.
    loss_reduction: String,
    params_file: String,
    config: Config,
    vocab: Vec<String>,
    graph_nodes: Vec<String>,
    graph_edges: Vec<f64>,
    embedding_seed: u64,
    visual_concat: bool,
    tensors: Vec<TensorEntry>,
}

fn blob_path(manifest_path: &Path, params_file: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(params_file)
}

pub fn save(model: &Kgae, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let params_file = format!("{stem}.params.bin");

    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in model.params() {
        let data = t.to_vec();
        tensors.push(TensorEntry {
            name,
            shape: t.shape(),
            offset,
        });
        offset += data.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f64le".into(),
        loss_reduction: "mean".into(),
        params_file: params_file.clone(),
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        graph_nodes: model.graph.nodes.clone(),
        graph_edges: model.graph.edges.clone(),
        embedding_seed: model.graph.embedding_seed,
        visual_concat: model.visual_concat,
        tensors,
    };

    let mut f = std::fs::File::create(blob_path(path, &params_file))
        .map_err(|e| Error::io(params_file.clone(), e))?;
    f.write_all(&blob).map_err(|e| Error::io(params_file.clone(), e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.to_string_lossy(), e))
}

pub fn load(path: &Path) -> Result<Kgae> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.to_string_lossy(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    if manifest.dtype != "f64le" {
        return Err(Error::Schema(format!(
            "unsupported parameter dtype `{}`",
            manifest.dtype
        )));
    }

    let graph = KnowledgeGraph {
        nodes: manifest.graph_nodes,
        edges: manifest.graph_edges,
        embedding_seed: manifest.embedding_seed,
    };
    let vocab = Vocabulary::from_tokens(manifest.vocab);
    let mut model = Kgae::new(manifest.config, graph, vocab)?;
    model.visual_concat = manifest.visual_concat;

    let bp = blob_path(path, &manifest.params_file);
    let mut raw = Vec::new();
    std::fs::File::open(&bp)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(bp.to_string_lossy(), e))?;
    if raw.len() % 8 != 0 {
        return Err(Error::Schema("parameter blob length not a multiple of 8".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let by_name: std::collections::BTreeMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();

    let mut missing = Vec::new();
    for (name, t) in model.params() {
        let Some(entry) = by_name.get(name.as_str()) else {
            missing.push(name);
            continue;
        };
        if entry.shape != t.shape() {
            return Err(Error::DimensionMismatch {
                context: format!("checkpoint tensor `{name}`"),
                left: entry.shape.clone(),
                right: t.shape(),
            });
        }
        let n = t.numel();
        if entry.offset + n > values.len() {
            return Err(Error::Schema(format!(
                "checkpoint tensor `{name}` overruns the parameter blob"
            )));
        }
        t.set_data(values[entry.offset..entry.offset + n].to_vec())?;
    }
    if !missing.is_empty() {
        return Err(Error::MissingParameters(missing));
    }
    Ok(model)
}
