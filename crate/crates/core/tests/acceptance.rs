//! End-to-end acceptance criteria. Each test prints exactly one PASS line on
//! success; failures panic with a FAIL line carrying the measured value.
//!
//! These train real (small) models and take a few minutes in total.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgae_core::adam::{clip_global_norm, AdamState};
use kgae_core::config::Config;
use kgae_core::corpus::{Image, Study, Vocabulary};
use kgae_core::graph::KnowledgeGraph;
use kgae_core::metrics;
use kgae_core::model::Kgae;
use kgae_core::pipeline;
use kgae_core::synthetic::{catalog_graph_lexicon, catalog_lexicon, default_catalog, generate};
use kgae_core::tensor::Tensor;
use kgae_core::Result;

fn pass(criterion: &str, detail: String) {
    println!("PASS {criterion}: {detail}");
}

fn fail(criterion: &str, detail: String) -> ! {
    panic!("FAIL {criterion}: {detail}");
}

fn small_config() -> Config {
    Config {
        d: 32,
        heads: 4,
        f_hidden: 64,
        enc_layers: 1,
        dec_layers: 2,
        n_kg: 16,
        n_b: 16,
        batch_size: 8,
        lr: 3e-3,
        t_max: 96,
        ..Config::default()
    }
}

fn build_model(cfg: Config, reports: &[String], graph_seed: u64) -> Kgae {
    let catalog = default_catalog();
    let graph =
        KnowledgeGraph::build(reports, &catalog_graph_lexicon(&catalog), cfg.n_kg, graph_seed)
            .unwrap();
    let vocab = Vocabulary::build(reports);
    Kgae::new(cfg, graph, vocab).unwrap()
}

fn micro_f1(candidates: &[String], references: &[String]) -> f64 {
    let lex = catalog_lexicon(&default_catalog());
    metrics::clinical_efficacy(candidates, references, &lex).unwrap().2
}

/// Criterion 1: analytic gradients of a composite loss touching every
/// parameter agree with central finite differences to 1e-4.
#[test]
fn criterion_1_gradient_integrity() {
    const C: &str = "criterion 1 (gradient integrity)";
    let cfg = Config {
        d: 8,
        heads: 2,
        f_hidden: 16,
        enc_layers: 1,
        dec_layers: 1,
        n_kg: 4,
        n_b: 4,
        image_size: 16,
        t_max: 24,
        seed: 11,
        ..Config::default()
    };
    let reports = vec![
        "there is cardiomegaly . the lungs are well expanded .".to_string(),
        "pleural effusion is present . there is cardiomegaly .".to_string(),
        "the lungs are well expanded . no pleural effusion .".to_string(),
    ];
    let graph = KnowledgeGraph::build(
        &reports,
        &[
            "cardiomegaly".to_string(),
            "pleural effusion".to_string(),
            "the lungs are well expanded".to_string(),
            "no pleural effusion".to_string(),
        ],
        4,
        2,
    )
    .unwrap();
    let vocab = Vocabulary::build(&reports);
    let model = Kgae::new(cfg, graph, vocab).unwrap();

    let mut imgrng = ChaCha8Rng::seed_from_u64(3);
    let image = Image {
        height: 16,
        width: 16,
        data: (0..256).map(|_| imgrng.gen_range(0.0..1.0)).collect(),
    };
    let ids = model.vocab.tokenize(&reports[1]);
    let labels = vec![
        0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
    ];

    // Composite loss: image and report classification, auto-encoding, and a
    // visual-concat decode so the backbone also feeds the decoder.
    let loss_fn = || -> Result<Tensor> {
        let node_table = model.node_table()?;
        let (g_i, feats) = model.encode_image(&image, &node_table)?;
        let g_r = model.encode_report(&ids, &node_table)?;
        let l1 = model.classifier.logits(&g_i)?.bce_with_logits(&labels)?;
        let l2 = model.classifier.logits(&g_r)?.bce_with_logits(&labels)?;
        let l3 = model.reconstruction_loss(&ids, &node_table)?;
        let stacked = g_i.concat_rows(&feats)?;
        let l4 = model.decoder.decode_train(&stacked, &ids)?.cross_entropy(&ids)?;
        l1.add(&l2)?.add(&l3)?.add(&l4)
    };

    let params = model.params();
    for (_, t) in &params {
        t.zero_grad();
    }
    let loss = loss_fn().unwrap();
    loss.backward().unwrap();
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(n, t)| {
            let g = t
                .grad()
                .unwrap_or_else(|| fail(C, format!("parameter `{n}` received no gradient")));
            (n.clone(), g)
        })
        .collect();

    // Central differences on a deterministic sample of each tensor.
    let eps = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    let mut checked = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for ((name, t), (_, grad)) in params.iter().zip(&analytic) {
        let n = t.numel();
        let sample: Vec<usize> = if n <= 24 {
            (0..n).collect()
        } else {
            (0..24).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in sample {
            let orig = t.with_data(|d| d[i]);
            t.with_data_mut(|d| d[i] = orig + eps);
            let plus = loss_fn().unwrap().item().unwrap();
            t.with_data_mut(|d| d[i] = orig - eps);
            let minus = loss_fn().unwrap().item().unwrap();
            t.with_data_mut(|d| d[i] = orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-4);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}]");
            }
        }
    }
    if max_rel >= 1e-4 {
        fail(C, format!("max rel err {max_rel:.3e} at {worst} over {checked} elements"));
    }
    pass(
        C,
        format!("max rel err {max_rel:.3e} over {checked} sampled elements, {} tensors", params.len()),
    );
}

/// Criterion 2: structural invariants of the graph, the latent spaces, and
/// the attention and bank distributions.
#[test]
fn criterion_2_structural_invariants() {
    const C: &str = "criterion 2 (structural invariants)";
    let catalog = default_catalog();
    let corpus = generate(41, 4, 120, 0, &catalog).unwrap();
    let reports: Vec<String> = corpus.reports.iter().map(|s| s.report.clone()).collect();
    let cfg = small_config();
    let model = build_model(cfg.clone(), &reports, 41);

    model.graph.validate().unwrap_or_else(|e| fail(C, format!("graph invariant: {e}")));
    let max_edge = model.graph.edges.iter().cloned().fold(0.0f64, f64::max);
    if !model.graph.edges.is_empty() && (max_edge - 1.0).abs() > 1e-12 && max_edge != 0.0 {
        fail(C, format!("edge normalization: max edge {max_edge} is neither 0 nor 1"));
    }

    let node_table = model.node_table().unwrap();
    if node_table.shape() != vec![cfg.n_kg, cfg.d] {
        fail(C, format!("node table shape {:?}", node_table.shape()));
    }
    let study = &corpus.images[0];
    let (g_i, _) = model.encode_image(study.image.as_ref().unwrap(), &node_table).unwrap();
    let ids = model.vocab.tokenize(&reports[0]);
    let g_r = model.encode_report(&ids, &node_table).unwrap();
    if g_i.shape() != g_r.shape() || g_i.shape() != vec![49, cfg.d] {
        fail(C, format!("latent shapes differ: {:?} vs {:?}", g_i.shape(), g_r.shape()));
    }

    // Bank distillation weights are row distributions.
    let bank = model.decoder.bank.as_ref().unwrap();
    let w = g_r
        .matmul(&bank.table.transpose().unwrap())
        .unwrap()
        .softmax_rows()
        .unwrap()
        .to_vec();
    for row in w.chunks(cfg.n_b) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) {
            fail(C, format!("bank weight row sums to {s}"));
        }
    }

    // The shared mapping network is one buffer: listed once, and a mutation
    // through the image side moves the report side.
    let params = model.params();
    if !params.iter().any(|(n, _)| n.starts_with("encoders.f."))
        || params.iter().any(|(n, _)| n.starts_with("encoders.f_image"))
    {
        fail(C, "shared mapper should register exactly one F".into());
    }
    let before = g_r.to_vec();
    // The output bias moves every row regardless of ReLU gating.
    model
        .encoders
        .mapper(kgae_core::encoder::Modality::Image)
        .lin2
        .bias
        .with_data_mut(|d| d[0] += 1.0);
    let after = model.encode_report(&ids, &node_table).unwrap().to_vec();
    if before == after {
        fail(C, "image-side F mutation did not affect the report side".into());
    }

    // Classifier probabilities lie in (0, 1).
    let probs = model.classifier.classify(&g_i).unwrap();
    if probs.len() != 14 || probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        fail(C, format!("classifier probabilities invalid: {probs:?}"));
    }
    pass(C, "graph, latent shapes, bank distributions, shared F, classifier all hold".into());
}

/// Criterion 3: the encoder-decoder stack can overfit 50 reports to at
/// least 95% greedy token match within 2000 steps when the decoder attends
/// over the report's full knowledge representation. (The training-time
/// observation-row bottleneck is deliberately lossy across same-label
/// reports, so capacity is measured on the unrestricted key path.)
#[test]
fn criterion_3_overfit_capacity() {
    const C: &str = "criterion 3 (overfit capacity)";
    let catalog = default_catalog();
    let corpus = generate(101, 0, 50, 0, &catalog).unwrap();
    let reports: Vec<String> = corpus.reports.iter().map(|s| s.report.clone()).collect();
    let mut cfg = small_config();
    cfg.batch_size = 10;
    cfg.lr = 1e-3;
    cfg.seed = 0;
    let model = build_model(cfg.clone(), &reports, 1);

    let all = model.params();
    let mut adam = AdamState::new(cfg.adam());
    let ids_all: Vec<Vec<usize>> = reports.iter().map(|r| model.vocab.tokenize(r)).collect();

    let probe = |step: usize| -> (usize, f64) {
        let node_table = model.node_table().unwrap();
        let mut exact = 0;
        let mut tok = 0.0;
        for ids in &ids_all {
            let g = model.encode_report(ids, &node_table).unwrap().detach();
            let gen = model.decoder.generate(&g, cfg.t_max).unwrap();
            if &gen == ids {
                exact += 1;
            }
            let m = gen.iter().zip(ids).filter(|(a, b)| a == b).count();
            tok += m as f64 / gen.len().max(ids.len()) as f64;
        }
        let _ = step;
        (exact, tok / ids_all.len() as f64)
    };

    let mut result = None;
    for step in 0..2000usize {
        let node_table = model.node_table().unwrap();
        let mut loss: Option<Tensor> = None;
        for b in 0..cfg.batch_size {
            let i = (step * cfg.batch_size + b) % ids_all.len();
            let ids = &ids_all[i];
            let g = model.encode_report(ids, &node_table).unwrap();
            let l = model.decoder.decode_train(&g, ids).unwrap().cross_entropy(ids).unwrap();
            loss = Some(match loss {
                Some(a) => a.add(&l).unwrap(),
                None => l,
            });
        }
        let loss = loss.unwrap().scale(1.0 / cfg.batch_size as f64);
        for (_, t) in &all {
            t.zero_grad();
        }
        loss.backward().unwrap();
        let touched: Vec<_> = all.iter().filter(|(_, t)| t.grad().is_some()).cloned().collect();
        clip_global_norm(&touched, cfg.grad_clip);
        adam.step(&touched).unwrap();
        if (step + 1) % 200 == 0 {
            let (exact, tok) = probe(step + 1);
            if tok >= 0.95 {
                result = Some((step + 1, exact, tok));
                break;
            }
        }
    }
    match result {
        Some((step, exact, tok)) => pass(
            C,
            format!("token match {tok:.3} ({exact}/50 exact) after {step} steps (cap 2000)"),
        ),
        None => {
            let (exact, tok) = probe(2000);
            fail(C, format!("token match {tok:.3} ({exact}/50 exact) after 2000 steps"));
        }
    }
}

struct UnsupRun {
    model: Kgae,
    eval_images: Vec<Study>,
    references: Vec<String>,
    baseline_f1: f64,
}

fn unsup_run(seed: u64, cfg_in: Config) -> UnsupRun {
    let catalog = default_catalog();
    let corpus = generate(200 + seed, 200, 300, 0, &catalog).unwrap();
    let eval_corpus = generate(900 + seed, 40, 0, 0, &catalog).unwrap();
    let reports: Vec<String> = corpus.reports.iter().map(|s| s.report.clone()).collect();
    let mut cfg = cfg_in;
    cfg.seed = seed;
    let mut model = build_model(cfg.clone(), &reports, seed);
    let references: Vec<String> = eval_corpus.images.iter().map(|s| s.report.clone()).collect();

    let baseline_out = pipeline::infer(&model, &eval_corpus.images, cfg.t_max).unwrap();
    let baseline_f1 = micro_f1(&baseline_out, &references);

    pipeline::train_unsupervised(&mut model, &corpus.images, &corpus.reports).unwrap();
    UnsupRun {
        model,
        eval_images: eval_corpus.images,
        references,
        baseline_f1,
    }
}

fn eval_f1(run: &UnsupRun) -> f64 {
    let out = pipeline::infer(&run.model, &run.eval_images, run.model.config.t_max).unwrap();
    micro_f1(&out, &run.references)
}

/// Criteria 4, 5, and 6 share the expensive unsupervised training runs, so
/// they live in one test body; each still prints its own PASS or FAIL line,
/// and the test panics at the end if any of the three failed.
///
/// Criterion 4: unsupervised image-to-report transfer reaches micro-F1 of at
/// least 0.60 on held-out images, and beats the untrained baseline by at
/// least 0.25, averaged over 3 seeds.
///
/// Criterion 5: adding paired supervision does not hurt and more pairs do
/// not hurt: F1(unsup) <= F1(30% pairs) + tol and F1(30%) <= F1(100%) + tol.
///
/// Criterion 6: ablations order as expected: full model >= no bank >=
/// no shared F and no bank, within tolerance.
#[test]
fn criteria_4_5_6_trained_behavior() {
    const C4: &str = "criterion 4 (unsupervised end to end)";
    const C5: &str = "criterion 5 (supervision ordering)";
    const C6: &str = "criterion 6 (ablation ordering)";
    const TOL: f64 = 0.05;
    let mut cfg = small_config();
    cfg.stage1_steps = 4000;
    cfg.stage2_steps = 2000;
    let mut failures: Vec<String> = Vec::new();
    let mut check = |criterion: &str, ok: bool, detail: String| {
        if ok {
            pass(criterion, detail);
        } else {
            println!("FAIL {criterion}: {detail}");
            failures.push(criterion.to_string());
        }
    };

    // Criterion 4: three independent seeds, full model.
    let mut f1s = Vec::new();
    let mut bases = Vec::new();
    let mut seed0_run = None;
    for seed in 0..3u64 {
        let run = unsup_run(seed, cfg.clone());
        f1s.push(eval_f1(&run));
        bases.push(run.baseline_f1);
        if seed == 0 {
            seed0_run = Some(run);
        }
    }
    let seed0_run = seed0_run.unwrap();
    let mean = f1s.iter().sum::<f64>() / 3.0;
    let base = bases.iter().sum::<f64>() / 3.0;
    check(
        C4,
        mean >= 0.60 && mean - base >= 0.25,
        format!(
            "mean micro-F1 {mean:.3} (per seed {:?}), untrained baseline {base:.3}",
            f1s.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
    );

    // Criterion 5: branch the trained seed-0 model through a checkpoint and
    // finetune on held-out pairs at two ratios.
    let unsup = f1s[0];
    let catalog = default_catalog();
    let paired = generate(500, 400, 400, 400, &catalog).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("unsup.json");
    kgae_core::checkpoint::save(&seed0_run.model, &ckpt).unwrap();
    let mut scores = Vec::new();
    for ratio in [0.3, 1.0] {
        let mut branch = kgae_core::checkpoint::load(&ckpt).unwrap();
        branch.config.lr = 3e-4;
        branch.config.finetune_steps = 1200;
        pipeline::finetune(&mut branch, &paired.images, ratio).unwrap();
        let out = pipeline::infer(&branch, &seed0_run.eval_images, cfg.t_max).unwrap();
        scores.push(micro_f1(&out, &seed0_run.references));
    }
    let (f30, f100) = (scores[0], scores[1]);
    check(
        C5,
        f30 + TOL >= unsup && f100 + TOL >= f30 && f100 + TOL >= unsup,
        format!("unsup {unsup:.3}, 30% pairs {f30:.3}, 100% pairs {f100:.3} (tol {TOL})"),
    );

    // Criterion 6: ablations at seed 0 reuse the full run's score.
    let full = f1s[0];
    let mut ablated = Vec::new();
    for (use_bank, shared_f) in [(false, true), (false, false)] {
        let mut c = cfg.clone();
        c.use_bank = use_bank;
        c.shared_f = shared_f;
        let run = unsup_run(0, c);
        ablated.push(eval_f1(&run));
    }
    let (no_bank, neither) = (ablated[0], ablated[1]);
    check(
        C6,
        full + TOL >= no_bank && no_bank + TOL >= neither,
        format!("full {full:.3} >= no bank {no_bank:.3} >= no shared F no bank {neither:.3} (tol {TOL})"),
    );

    assert!(failures.is_empty(), "failed: {}", failures.join(", "));
}

/// Criterion 7: metric kernels match closed-form hand calculations.
#[test]
fn criterion_7_metric_kernels() {
    const C: &str = "criterion 7 (metric kernels)";
    let c = vec!["the lungs clear".to_string()];
    let r = vec!["the lungs are clear".to_string()];
    let bleu1 = metrics::bleu_n(&c, &r, 1).unwrap();
    let expect_bleu = (1.0f64 - 4.0 / 3.0).exp();
    if (bleu1 - expect_bleu).abs() > 1e-9 {
        fail(C, format!("BLEU-1 brevity case: {bleu1:.6} vs {expect_bleu:.6}"));
    }

    let c2 = vec!["a b c d e".to_string()];
    let r2 = vec!["a c e f".to_string()];
    let rouge = metrics::rouge_l(&c2, &r2).unwrap();
    let b2 = 1.2f64 * 1.2;
    let (p, rr) = (3.0 / 5.0, 3.0 / 4.0);
    let expect_rouge = (1.0 + b2) * p * rr / (rr + b2 * p);
    if (rouge - expect_rouge).abs() > 1e-9 {
        fail(C, format!("ROUGE-L LCS case: {rouge:.6} vs {expect_rouge:.6}"));
    }

    let c3 = vec!["the the the".to_string()];
    let r3 = vec!["the cat".to_string()];
    let clipped = metrics::bleu_n(&c3, &r3, 1).unwrap();
    if (clipped - 1.0 / 3.0).abs() > 1e-9 {
        fail(C, format!("BLEU clipping case: {clipped:.6} vs {:.6}", 1.0 / 3.0));
    }
    pass(
        C,
        format!("BLEU-1 BP {bleu1:.4} = exp(1 - 4/3), ROUGE-L {rouge:.4}, clipping 1/3 exact"),
    );
}

/// Criterion 8: identical configuration and seed give bitwise identical
/// parameters, generations, and metrics across independent runs.
#[test]
fn criterion_8_bitwise_reproducibility() {
    const C: &str = "criterion 8 (bitwise reproducibility)";
    let run_once = || {
        let catalog = default_catalog();
        let corpus = generate(55, 6, 40, 0, &catalog).unwrap();
        let reports: Vec<String> = corpus.reports.iter().map(|s| s.report.clone()).collect();
        let mut cfg = small_config();
        cfg.d = 16;
        cfg.f_hidden = 32;
        cfg.n_kg = 8;
        cfg.n_b = 8;
        cfg.batch_size = 2;
        cfg.stage1_steps = 6;
        cfg.stage2_steps = 6;
        cfg.seed = 9;
        let mut model = build_model(cfg, &reports, 9);
        pipeline::train_unsupervised(&mut model, &corpus.images, &corpus.reports).unwrap();
        let out = pipeline::infer(&model, &corpus.images, 24).unwrap();
        let lex = catalog_lexicon(&catalog);
        let refs: Vec<String> = corpus.images.iter().map(|s| s.report.clone()).collect();
        let m = metrics::evaluate(&out, &refs, &lex).unwrap();
        let bits: Vec<u64> = model
            .params()
            .iter()
            .flat_map(|(_, t)| t.to_vec().into_iter().map(f64::to_bits))
            .collect();
        (bits, out, serde_json::to_string(&m).unwrap())
    };
    let a = run_once();
    let b = run_once();
    if a.0 != b.0 {
        fail(C, "parameter bits differ between identical runs".into());
    }
    if a.1 != b.1 || a.2 != b.2 {
        fail(C, "generations or metrics differ between identical runs".into());
    }
    pass(
        C,
        format!("{} parameter values, generations, and metrics bitwise identical", a.0.len()),
    );
}
