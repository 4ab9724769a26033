//! Knowledge-graph construction from a report corpus and its one-layer
//! residual GCN embedding.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::error::{Error, Result};
use crate::nn::{init_matrix, ParamList};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

/// Node phrase vocabulary plus the normalized co-occurrence edge matrix.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub nodes: Vec<String>,
    /// Symmetric, zero-diagonal, entries in [0, 1]; row-major n x n.
    pub edges: Vec<f64>,
    pub embedding_seed: u64,
}

fn phrase_in_report(report_norm: &str, phrase: &str) -> bool {
    // Case-insensitive substring on normalized text with word boundaries.
    let hay = report_norm;
    let mut start = 0;
    while let Some(rel) = hay[start..].find(phrase) {
        let pos = start + rel;
        let end = pos + phrase.len();
        let pre_ok = pos == 0 || hay.as_bytes()[pos - 1] == b' ';
        let post_ok = end == hay.len() || hay.as_bytes()[end] == b' ';
        if pre_ok && post_ok {
            return true;
        }
        start = pos + 1;
    }
    false
}

/// The `n_kg` most frequent lexicon phrases in the corpus, counted by
/// report-level occurrence; ties break lexicographically.
pub fn build_node_vocabulary(
    corpus: &[impl AsRef<str>],
    lexicon: &[String],
    n_kg: usize,
) -> Result<Vec<String>> {
    if corpus.is_empty() || n_kg == 0 {
        return Err(Error::Contract(
            "build_node_vocabulary: corpus must be non-empty and n_kg >= 1".into(),
        ));
    }
    let normalized: Vec<String> = corpus.iter().map(|r| normalize(r.as_ref())).collect();
    let mut counted: Vec<(String, usize)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for raw in lexicon {
        let phrase = normalize(raw);
        if phrase.is_empty() || !seen.insert(phrase.clone()) {
            continue;
        }
        let count = normalized
            .iter()
            .filter(|r| phrase_in_report(r, &phrase))
            .count();
        if count > 0 {
            counted.push((phrase, count));
        }
    }
    if counted.len() < n_kg {
        return Err(Error::VocabularyShortfall {
            requested: n_kg,
            found: counted.len(),
        });
    }
    counted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counted.truncate(n_kg);
    Ok(counted.into_iter().map(|(p, _)| p).collect())
}

/// Report-level co-occurrence counts normalized by the global maximum count.
pub fn compute_edge_weights(corpus: &[impl AsRef<str>], nodes: &[String]) -> Vec<f64> {
    let n = nodes.len();
    let normalized: Vec<String> = corpus.iter().map(|r| normalize(r.as_ref())).collect();
    let mut counts = vec![0u64; n * n];
    for report in &normalized {
        let present: Vec<usize> = (0..n)
            .filter(|&i| phrase_in_report(report, &nodes[i]))
            .collect();
        for (a, &i) in present.iter().enumerate() {
            for &j in &present[a + 1..] {
                counts[i * n + j] += 1;
                counts[j * n + i] += 1;
            }
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; n * n];
    }
    counts.iter().map(|&c| c as f64 / max as f64).collect()
}

impl KnowledgeGraph {
    pub fn build(
        corpus: &[impl AsRef<str>],
        lexicon: &[String],
        n_kg: usize,
        embedding_seed: u64,
    ) -> Result<KnowledgeGraph> {
        let nodes = build_node_vocabulary(corpus, lexicon, n_kg)?;
        let edges = compute_edge_weights(corpus, &nodes);
        Ok(KnowledgeGraph {
            nodes,
            edges,
            embedding_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Contract("knowledge graph has no nodes".into()));
        }
        if self.edges.len() != n * n {
            return Err(Error::DimensionMismatch {
                context: "knowledge graph edges".into(),
                left: vec![n, n],
                right: vec![self.edges.len()],
            });
        }
        for i in 0..n {
            if self.edges[i * n + i] != 0.0 {
                return Err(Error::Contract(format!("edge diagonal non-zero at {i}")));
            }
            for j in 0..n {
                let e = self.edges[i * n + j];
                if !(0.0..=1.0).contains(&e) || e != self.edges[j * n + i] {
                    return Err(Error::Contract(format!(
                        "edge matrix not symmetric in [0,1] at ({i},{j})"
                    )));
                }
            }
        }
        let mut sorted = self.nodes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n || self.nodes.iter().any(|p| p.is_empty()) {
            return Err(Error::Contract("node phrases must be unique and non-empty".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = GraphFile {
            d: None,
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            embedding_seed: self.embedding_seed,
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.to_string_lossy(), e))
    }

    pub fn load(path: &Path) -> Result<KnowledgeGraph> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.to_string_lossy(), e))?;
        let file: GraphFile = serde_json::from_str(&text)?;
        let g = KnowledgeGraph {
            nodes: file.nodes,
            edges: file.edges,
            embedding_seed: file.embedding_seed,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    nodes: Vec<String>,
    edges: Vec<f64>,
    embedding_seed: u64,
}

/// Learnable node embeddings V plus the GCN weight; produces the refined
/// node table V' = V + ReLU(E W_v V) with a residual identity at E = 0.
pub struct GcnEmbedder {
    pub node_embeddings: Tensor,
    pub weight: Tensor,
    pub edges: Tensor,
    pub n_nodes: usize,
    pub dim: usize,
}

impl GcnEmbedder {
    pub fn new(graph: &KnowledgeGraph, dim: usize) -> Result<GcnEmbedder> {
        graph.validate()?;
        let n = graph.len();
        let mut rng = ChaCha8Rng::seed_from_u64(graph.embedding_seed);
        let std = 1.0 / (dim as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let v: Vec<f64> = (0..n * dim).map(|_| dist.sample(&mut rng)).collect();
        Ok(GcnEmbedder {
            node_embeddings: Tensor::param(v, &[n, dim])?,
            weight: init_matrix(&mut rng, dim, dim),
            edges: Tensor::new(graph.edges.clone(), &[n, n])?,
            n_nodes: n,
            dim,
        })
    }

    /// One GCN layer exactly: v'_i = v_i + ReLU(sum_j e_ij W_v v_j).
    pub fn embed(&self) -> Result<Tensor> {
        // Row i of (E V W_v^T) is sum_j e_ij (W_v v_j).
        let propagated = self
            .edges
            .matmul(&self.node_embeddings)?
            .matmul(&self.weight.transpose()?)?;
        self.node_embeddings.add(&propagated.relu())
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.node_embeddings"), self.node_embeddings.clone()));
        out.push((format!("{prefix}.weight"), self.weight.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_phrase_vocabulary() {
        let corpus = ["lungs are clear .", "the lungs are clear", "LUNGS ARE CLEAR"];
        let nodes =
            build_node_vocabulary(&corpus, &lex(&["lungs are clear", "cardiomegaly"]), 1)
                .unwrap();
        assert_eq!(nodes, vec!["lungs are clear"]);
    }

    #[test]
    fn equal_count_ties_break_lexicographically() {
        let corpus = ["b phrase and a phrase", "a phrase with b phrase"];
        let nodes =
            build_node_vocabulary(&corpus, &lex(&["b phrase", "a phrase"]), 2).unwrap();
        assert_eq!(nodes, vec!["a phrase", "b phrase"]);
    }

    #[test]
    fn shortfall_reports_found_count() {
        let corpus = ["only one phrase here"];
        let err = build_node_vocabulary(&corpus, &lex(&["one phrase", "missing thing"]), 2)
            .unwrap_err();
        match err {
            Error::VocabularyShortfall { requested, found } => {
                assert_eq!((requested, found), (2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn top_k_matches_hand_count() {
        // 20 reports; phrase frequencies by hand:
        // "heart size is normal": 12, "pleural effusion": 9, "clear lungs": 7,
        // "edema": 5, "fracture": 3, "pneumonia": 2, "mass": 1, "rare one": 1.
        let mut corpus: Vec<String> = Vec::new();
        for i in 0..20 {
            let mut parts: Vec<&str> = Vec::new();
            if i < 12 {
                parts.push("heart size is normal .");
            }
            if i < 9 {
                parts.push("there is pleural effusion .");
            }
            if i < 7 {
                parts.push("clear lungs .");
            }
            if i < 5 {
                parts.push("edema is seen .");
            }
            if i < 3 {
                parts.push("fracture noted .");
            }
            if i < 2 {
                parts.push("pneumonia .");
            }
            if i == 0 {
                parts.push("mass . rare one .");
            }
            corpus.push(parts.join(" "));
        }
        let lexicon = lex(&[
            "heart size is normal",
            "pleural effusion",
            "clear lungs",
            "edema",
            "fracture",
            "pneumonia",
            "mass",
            "rare one",
        ]);
        let nodes = build_node_vocabulary(&corpus, &lexicon, 8).unwrap();
        assert_eq!(
            nodes,
            vec![
                "heart size is normal",
                "pleural effusion",
                "clear lungs",
                "edema",
                "fracture",
                "pneumonia",
                // count 1 tie: lexicographic
                "mass",
                "rare one",
            ]
        );
    }

    #[test]
    fn never_cooccurring_nodes_have_zero_edge() {
        let corpus = ["alpha sign", "beta sign"];
        let nodes = vec!["alpha sign".to_string(), "beta sign".to_string()];
        let e = compute_edge_weights(&corpus, &nodes);
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn max_pair_normalizes_to_one() {
        let corpus = ["alpha sign with beta sign", "alpha sign and beta sign"];
        let nodes = vec!["alpha sign".to_string(), "beta sign".to_string()];
        let e = compute_edge_weights(&corpus, &nodes);
        assert_eq!(e, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn edge_matrix_matches_hand_count() {
        // 10 reports over 4 phrases; pairwise report counts by hand:
        // (a,b)=4, (a,c)=2, (b,c)=1, (a,d)=0, (b,d)=0, (c,d)=1 -> max 4.
        let corpus = [
            "a sign b sign",
            "a sign b sign",
            "a sign b sign c sign",
            "a sign b sign",
            "a sign c sign",
            "c sign d sign",
            "d sign",
            "a sign",
            "b sign",
            "nothing",
        ];
        let nodes: Vec<String> = ["a sign", "b sign", "c sign", "d sign"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let e = compute_edge_weights(&corpus, &nodes);
        let expect = [
            0.0, 1.0, 0.5, 0.0, //
            1.0, 0.0, 0.25, 0.0, //
            0.5, 0.25, 0.0, 0.25, //
            0.0, 0.0, 0.25, 0.0,
        ];
        for (g, w) in e.iter().zip(expect.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    fn toy_graph(n: usize, edges: Vec<f64>) -> KnowledgeGraph {
        KnowledgeGraph {
            nodes: (0..n).map(|i| format!("node {i}")).collect(),
            edges,
            embedding_seed: 1,
        }
    }

    #[test]
    fn zero_edges_embedding_is_identity() {
        let g = toy_graph(3, vec![0.0; 9]);
        let gcn = GcnEmbedder::new(&g, 4).unwrap();
        let v = gcn.node_embeddings.to_vec();
        let vp = gcn.embed().unwrap().to_vec();
        assert_eq!(v, vp);
    }

    #[test]
    fn single_node_embedding_is_identity() {
        let g = toy_graph(1, vec![0.0]);
        let gcn = GcnEmbedder::new(&g, 4).unwrap();
        assert_eq!(gcn.embed().unwrap().to_vec(), gcn.node_embeddings.to_vec());
    }

    #[test]
    fn three_node_embedding_matches_by_hand() {
        let mut edges = vec![0.0; 9];
        edges[1] = 0.5;
        edges[3] = 0.5;
        edges[2] = 0.25;
        edges[6] = 0.25;
        edges[5] = 1.0;
        edges[7] = 1.0;
        let g = toy_graph(3, edges.clone());
        let d = 2;
        let gcn = GcnEmbedder::new(&g, d).unwrap();
        gcn.node_embeddings
            .set_data(vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0])
            .unwrap();
        gcn.weight.set_data(vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let got = gcn.embed().unwrap().to_vec();

        // By hand: w v_j, then sum e_ij, relu, add v_i.
        let v = [[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]];
        let w = [[0.5, -1.0], [2.0, 0.25]];
        let wv: Vec<[f64; 2]> = v
            .iter()
            .map(|vj| {
                [
                    w[0][0] * vj[0] + w[0][1] * vj[1],
                    w[1][0] * vj[0] + w[1][1] * vj[1],
                ]
            })
            .collect();
        let mut expected = Vec::new();
        for i in 0..3 {
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..3 {
                    s += edges[i * 3 + j] * wv[j][c];
                }
                expected.push(v[i][c] + s.max(0.0));
            }
        }
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn embedding_is_differentiable() {
        let mut edges = vec![0.0; 4];
        edges[1] = 0.8;
        edges[2] = 0.8;
        let g = toy_graph(2, edges);
        let gcn = GcnEmbedder::new(&g, 3).unwrap();
        let mut params = Vec::new();
        gcn.params("gcn", &mut params);
        let report = crate::gradcheck::finite_difference_check(
            &params,
            || Ok(gcn.embed()?.sum()),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn graph_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let corpus = ["a sign b sign", "a sign", "b sign a sign"];
        let g = KnowledgeGraph::build(
            &corpus,
            &lex(&["a sign", "b sign"]),
            2,
            7,
        )
        .unwrap();
        g.save(&path).unwrap();
        let loaded = KnowledgeGraph::load(&path).unwrap();
        assert_eq!(g.nodes, loaded.nodes);
        assert_eq!(g.embedding_seed, loaded.embedding_seed);
        assert!(g
            .edges
            .iter()
            .zip(&loaded.edges)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
