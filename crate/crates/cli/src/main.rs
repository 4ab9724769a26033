//! `kgae`: corpus generation, graph building, the training stages, report
//! generation, evaluation, the paired-ratio sweep, and ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgae_core::checkpoint;
use kgae_core::config::Config;
use kgae_core::corpus::{load_corpus, save_corpus, Lexicon, Study, Vocabulary};
use kgae_core::graph::KnowledgeGraph;
use kgae_core::metrics;
use kgae_core::model::Kgae;
use kgae_core::pipeline;
use kgae_core::synthetic::{catalog_graph_lexicon, catalog_lexicon, default_catalog};
use kgae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kgae", version, about = "knowledge-graph auto-encoder for report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image set and report set with exact labels.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 200)]
        reports: usize,
        #[arg(long, default_value_t = 0)]
        pairs: usize,
    },
    /// Build the knowledge graph from a report corpus.
    BuildKg {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long, default_value_t = 26)]
        n_kg: usize,
        #[arg(long, default_value_t = 0)]
        embedding_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage unsupervised training on unpaired images and reports.
    TrainUnsup {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finetune a trained checkpoint on a fraction of paired studies.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate reports for every image in a corpus.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        max_len: usize,
    },
    /// Generate for a held-out corpus and score against its reports.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        studies: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        max_len: usize,
    },
    /// Train and finetune across paired-data ratios and seeds; write CSV.
    SweepRatio {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train the full model and its ablations; write a JSON comparison.
    Ablate {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// TOML configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation: drop the memory bank.
    #[arg(long)]
    no_bank: bool,
    /// Ablation: give each modality its own mapping network.
    #[arg(long)]
    no_shared_f: bool,
    #[arg(long)]
    bank_size: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.no_bank {
            cfg.use_bank = false;
        }
        if self.no_shared_f {
            cfg.shared_f = false;
        }
        if let Some(n_b) = self.bank_size {
            if n_b == 0 {
                return Err(Error::Config("`--bank-size` must be positive".into()));
            }
            cfg.n_b = n_b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.to_string_lossy(), e))
}

fn default_lexicon() -> Lexicon {
    catalog_lexicon(&default_catalog())
}

fn train_model(
    cfg: Config,
    graph_path: &Path,
    images: &[Study],
    reports: &[Study],
) -> Result<(Kgae, pipeline::RunManifest)> {
    let graph = KnowledgeGraph::load(graph_path)?;
    let vocab = Vocabulary::build(reports.iter().map(|s| s.report.as_str()));
    let mut model = Kgae::new(cfg, graph, vocab)?;
    let manifest = pipeline::train_unsupervised(&mut model, images, reports)?;
    Ok((model, manifest))
}

fn evaluate_model(model: &Kgae, studies: &[Study], max_len: usize) -> Result<metrics::MetricReport> {
    let candidates = pipeline::infer(model, studies, max_len)?;
    let references: Vec<String> = studies.iter().map(|s| s.report.clone()).collect();
    metrics::evaluate(&candidates, &references, &default_lexicon())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            out_dir,
            seed,
            images,
            reports,
            pairs,
        } => {
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::io(out_dir.to_string_lossy(), e))?;
            let catalog = default_catalog();
            let corpus = kgae_core::synthetic::generate(seed, images, reports, pairs, &catalog)?;
            save_corpus(&corpus.images, &out_dir.join("images.jsonl"))?;
            save_corpus(&corpus.reports, &out_dir.join("reports.jsonl"))?;
            catalog_lexicon(&catalog).save(&out_dir.join("lexicon.json"))?;
            println!(
                "wrote {} image studies and {} report studies to {}",
                corpus.images.len(),
                corpus.reports.len(),
                out_dir.display()
            );
        }
        Command::BuildKg {
            reports,
            n_kg,
            embedding_seed,
            out,
        } => {
            let studies = load_corpus(&reports)?;
            let texts: Vec<&str> = studies.iter().map(|s| s.report.as_str()).collect();
            let lexicon = catalog_graph_lexicon(&default_catalog());
            let graph = KnowledgeGraph::build(&texts, &lexicon, n_kg, embedding_seed)?;
            graph.save(&out)?;
            println!("built graph with {} nodes -> {}", graph.len(), out.display());
        }
        Command::TrainUnsup {
            images,
            reports,
            graph,
            out,
            model,
        } => {
            let cfg = model.resolve()?;
            let image_studies = load_corpus(&images)?;
            let report_studies = load_corpus(&reports)?;
            let (trained, manifest) = train_model(cfg, &graph, &image_studies, &report_studies)?;
            checkpoint::save(&trained, &out)?;
            write_json(&manifest, &out.with_extension("run.json"))?;
            println!(
                "stage1 loss {:.4}, stage2 loss {:.4} -> {}",
                manifest.stage1_final_loss,
                manifest.stage2_final_loss,
                out.display()
            );
        }
        Command::Finetune {
            checkpoint: ckpt,
            paired,
            ratio,
            out,
        } => {
            let mut model = checkpoint::load(&ckpt)?;
            let studies = load_corpus(&paired)?;
            let manifest = pipeline::finetune(&mut model, &studies, ratio)?;
            checkpoint::save(&model, &out)?;
            write_json(&manifest, &out.with_extension("run.json"))?;
            println!(
                "finetuned on {} pairs (ratio {}), loss {:.4} -> {}",
                manifest.subset_size,
                ratio,
                manifest.final_loss,
                out.display()
            );
        }
        Command::Generate {
            checkpoint: ckpt,
            images,
            out,
            max_len,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let studies = load_corpus(&images)?;
            let texts = pipeline::infer(&model, &studies, max_len)?;
            let mut lines = String::new();
            for (s, t) in studies.iter().zip(&texts) {
                let row = serde_json::json!({ "id": s.id, "report": t });
                lines.push_str(&row.to_string());
                lines.push('\n');
            }
            std::fs::write(&out, lines).map_err(|e| Error::io(out.to_string_lossy(), e))?;
            println!("generated {} reports -> {}", texts.len(), out.display());
        }
        Command::Evaluate {
            checkpoint: ckpt,
            studies,
            out,
            max_len,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let eval_studies = load_corpus(&studies)?;
            let report = evaluate_model(&model, &eval_studies, max_len)?;
            write_json(&report, &out)?;
            println!(
                "bleu1 {:.4} bleu4 {:.4} rouge_l {:.4} ce_f1 {:.4}",
                report.bleu[0], report.bleu[3], report.rouge_l, report.ce_f1
            );
        }
        Command::SweepRatio {
            images,
            reports,
            paired,
            eval,
            ratios,
            seeds,
            graph,
            out,
            model,
        } => {
            if ratios.is_empty() {
                return Err(Error::Config("`--ratios` must list at least one value".into()));
            }
            let base = model.resolve()?;
            let image_studies = load_corpus(&images)?;
            let report_studies = load_corpus(&reports)?;
            let paired_studies = load_corpus(&paired)?;
            let eval_studies = load_corpus(&eval)?;
            let mut csv =
                String::from("ratio,seed,bleu1,bleu2,bleu3,bleu4,rouge_l,ce_p,ce_r,ce_f1\n");
            for &seed in &seeds {
                for &ratio in &ratios {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    let (mut trained, _) =
                        train_model(cfg, &graph, &image_studies, &report_studies)?;
                    if ratio > 0.0 {
                        pipeline::finetune(&mut trained, &paired_studies, ratio)?;
                    }
                    let m = evaluate_model(&trained, &eval_studies, base.t_max)?;
                    csv.push_str(&format!(
                        "{ratio},{seed},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                        m.bleu[0],
                        m.bleu[1],
                        m.bleu[2],
                        m.bleu[3],
                        m.rouge_l,
                        m.ce_precision,
                        m.ce_recall,
                        m.ce_f1
                    ));
                }
            }
            std::fs::write(&out, csv).map_err(|e| Error::io(out.to_string_lossy(), e))?;
            println!(
                "swept {} ratios x {} seeds -> {}",
                ratios.len(),
                seeds.len(),
                out.display()
            );
        }
        Command::Ablate {
            images,
            reports,
            eval,
            graph,
            out,
            model,
        } => {
            let base = model.resolve()?;
            let image_studies = load_corpus(&images)?;
            let report_studies = load_corpus(&reports)?;
            let eval_studies = load_corpus(&eval)?;
            let variants: [(&str, bool, bool); 3] = [
                ("full", true, true),
                ("no_bank", false, true),
                ("no_shared_f_no_bank", false, false),
            ];
            let mut rows = Vec::new();
            for (name, use_bank, shared_f) in variants {
                let mut cfg = base.clone();
                cfg.use_bank = use_bank;
                cfg.shared_f = shared_f;
                let (trained, _) = train_model(cfg, &graph, &image_studies, &report_studies)?;
                let m = evaluate_model(&trained, &eval_studies, base.t_max)?;
                println!("{name}: ce_f1 {:.4} bleu1 {:.4}", m.ce_f1, m.bleu[0]);
                rows.push(serde_json::json!({ "variant": name, "metrics": m }));
            }
            write_json(&rows, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
