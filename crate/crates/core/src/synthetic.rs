//! Synthetic study generator: images with visually planted finding glyphs,
//! template reports describing them, and exact 14-way labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    Image, Lexicon, PhraseEntry, Study, NO_FINDING_INDEX, NUM_OBSERVATIONS, OBSERVATIONS,
};
use crate::error::{Error, Result};

/// One plantable finding: a glyph patch on the image grid, a positive phrase
/// carried verbatim by every template, and a normality sentence for absence.
#[derive(Debug, Clone)]
pub struct Finding {
    pub label: usize,
    pub phrase: &'static str,
    pub templates: [&'static str; 3],
    pub normality: &'static str,
    /// Patch index in the 7x7 grid where the glyph is drawn.
    pub patch: usize,
    pub probability: f64,
}

/// The default catalog: one entry per observation label except "No Finding",
/// which is derived from the absence of everything else.
pub fn default_catalog() -> Vec<Finding> {
    let specs: [(usize, &'static str, [&'static str; 3], &'static str); 13] = [
        (
            0,
            "atelectasis",
            [
                "there is atelectasis at the base .",
                "atelectasis is noted .",
                "streaky atelectasis persists .",
            ],
            "the lungs are well expanded .",
        ),
        (
            1,
            "cardiomegaly",
            [
                "there is cardiomegaly .",
                "cardiomegaly is present .",
                "stable cardiomegaly is seen .",
            ],
            "the heart size is within limits .",
        ),
        (
            2,
            "consolidation",
            [
                "there is consolidation .",
                "consolidation is identified .",
                "patchy consolidation is seen .",
            ],
            "the airspaces appear preserved .",
        ),
        (
            3,
            "pulmonary edema",
            [
                "there is pulmonary edema .",
                "pulmonary edema is present .",
                "mild pulmonary edema is seen .",
            ],
            "the vasculature appears within limits .",
        ),
        (
            4,
            "enlarged cardiomediastinum",
            [
                "there is an enlarged cardiomediastinum .",
                "enlarged cardiomediastinum is present .",
                "the silhouette shows an enlarged cardiomediastinum .",
            ],
            "the mediastinal contours appear preserved .",
        ),
        (
            5,
            "rib fracture",
            [
                "there is a rib fracture .",
                "a displaced rib fracture is seen .",
                "rib fracture is identified .",
            ],
            "the osseous structures appear preserved .",
        ),
        (
            6,
            "lung lesion",
            [
                "there is a lung lesion .",
                "a lung lesion is identified .",
                "lung lesion is seen in the upper zone .",
            ],
            "the parenchyma appears preserved .",
        ),
        (
            7,
            "lung opacity",
            [
                "there is a lung opacity .",
                "lung opacity is present .",
                "a hazy lung opacity is seen .",
            ],
            "the lung fields appear preserved .",
        ),
        (
            9,
            "pleural effusion",
            [
                "there is a pleural effusion .",
                "a small pleural effusion is seen .",
                "pleural effusion is present .",
            ],
            "the costophrenic angles appear sharp .",
        ),
        (
            10,
            "pleural thickening",
            [
                "there is pleural thickening .",
                "pleural thickening is present .",
                "apical pleural thickening is seen .",
            ],
            "the pleural surfaces appear smooth .",
        ),
        (
            11,
            "pneumonia",
            [
                "there is pneumonia .",
                "findings suggest pneumonia .",
                "developing pneumonia is seen .",
            ],
            "the infectious appearance is absent .",
        ),
        (
            12,
            "pneumothorax",
            [
                "there is a pneumothorax .",
                "a small pneumothorax is seen .",
                "pneumothorax is present .",
            ],
            "both lungs appear fully inflated .",
        ),
        (
            13,
            "support device",
            [
                "a support device is in place .",
                "support device is present .",
                "the support device remains in position .",
            ],
            "the tubes and lines are absent .",
        ),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (label, phrase, templates, normality))| Finding {
            label: *label,
            phrase,
            templates: *templates,
            normality,
            patch: i * 4, // 0, 4, ..., 48: distinct cells of the 7x7 grid
            probability: 0.18 + 0.02 * (i % 5) as f64,
        })
        .collect()
}

pub const IMAGE_SIZE: usize = 56;
pub const PATCH_PIXELS: usize = 8;
pub const PATCH_GRID: usize = 7;

/// The evaluation lexicon implied by a catalog.
pub fn catalog_lexicon(catalog: &[Finding]) -> Lexicon {
    Lexicon {
        labels: OBSERVATIONS.iter().map(|s| s.to_string()).collect(),
        phrases: catalog
            .iter()
            .map(|f| PhraseEntry {
                phrase: f.phrase.to_string(),
                label: f.label,
            })
            .collect(),
        negation_cues: vec!["no".into(), "not".into(), "without".into(), "absent".into()],
    }
}

/// Node phrase candidates for knowledge-graph construction: every positive
/// phrase and every normality sentence body.
pub fn catalog_graph_lexicon(catalog: &[Finding]) -> Vec<String> {
    let mut phrases: Vec<String> = catalog.iter().map(|f| f.phrase.to_string()).collect();
    phrases.extend(
        catalog
            .iter()
            .map(|f| crate::corpus::normalize(f.normality.trim_end_matches(" ."))),
    );
    phrases
}

pub fn sample_findings(rng: &mut ChaCha8Rng, catalog: &[Finding]) -> Vec<bool> {
    catalog
        .iter()
        .map(|f| rng.gen_range(0.0..1.0) < f.probability)
        .collect()
}

fn render_image(rng: &mut ChaCha8Rng, catalog: &[Finding], present: &[bool]) -> Image {
    let mut data = vec![0.0f64; IMAGE_SIZE * IMAGE_SIZE];
    // Background noise.
    for v in data.iter_mut() {
        *v = rng.gen_range(0.0..0.10);
    }
    for (f, &on) in catalog.iter().zip(present) {
        if !on {
            continue;
        }
        let py = f.patch / PATCH_GRID;
        let px = f.patch % PATCH_GRID;
        let base = 0.55 + 0.45 * (f.patch as f64 / 48.0);
        for dy in 1..PATCH_PIXELS - 1 {
            for dx in 1..PATCH_PIXELS - 1 {
                // Per-finding texture so glyphs are not all identical squares.
                let tex = ((dx * 3 + dy * 5 + f.patch) % 4) as f64 * 0.05;
                let y = py * PATCH_PIXELS + dy;
                let x = px * PATCH_PIXELS + dx;
                data[y * IMAGE_SIZE + x] = (base - tex).clamp(0.0, 1.0);
            }
        }
    }
    Image {
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        data,
    }
}

fn render_report(rng: &mut ChaCha8Rng, catalog: &[Finding], present: &[bool]) -> String {
    let mut sentences: Vec<String> = Vec::new();
    for (f, &on) in catalog.iter().zip(present) {
        if on {
            let t = f.templates[rng.gen_range(0..f.templates.len())];
            sentences.push(t.to_string());
        }
    }
    let absent: Vec<&Finding> = catalog
        .iter()
        .zip(present)
        .filter(|(_, &on)| !on)
        .map(|(f, _)| f)
        .collect();
    let n_normal = if sentences.is_empty() {
        3.min(absent.len())
    } else {
        rng.gen_range(1..=3).min(absent.len())
    };
    // Deterministic subset: rotate by a sampled start so variety stays seeded.
    let start = if absent.is_empty() {
        0
    } else {
        rng.gen_range(0..absent.len())
    };
    for k in 0..n_normal {
        sentences.push(absent[(start + k) % absent.len()].normality.to_string());
    }
    if present.iter().all(|&p| !p) {
        sentences.push("overall no acute process is seen .".to_string());
    }
    sentences.join(" ")
}

fn labels_for(catalog: &[Finding], present: &[bool]) -> Vec<bool> {
    let mut labels = vec![false; NUM_OBSERVATIONS];
    for (f, &on) in catalog.iter().zip(present) {
        if on {
            labels[f.label] = true;
        }
    }
    labels[NO_FINDING_INDEX] = present.iter().all(|&p| !p);
    labels
}

fn study_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let s = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B54A32D192ED03))
        .wrapping_add(index);
    ChaCha8Rng::seed_from_u64(s)
}

fn make_study(
    seed: u64,
    tag: u64,
    index: u64,
    prefix: &str,
    catalog: &[Finding],
    with_image: bool,
) -> Study {
    let mut rng = study_rng(seed, tag, index);
    let present = sample_findings(&mut rng, catalog);
    let image = with_image.then(|| render_image(&mut rng, catalog, &present));
    let report = render_report(&mut rng, catalog, &present);
    let labels = labels_for(catalog, &present);
    Study::new(format!("{prefix}{index:06}"), image, report, labels, None)
}

/// Generated corpora: an image set and a report set, with the first
/// `n_pairs` entries of each cross-linked as true image-report pairs.
pub struct SyntheticCorpus {
    pub images: Vec<Study>,
    pub reports: Vec<Study>,
}

pub fn generate(
    seed: u64,
    n_images: usize,
    n_reports: usize,
    n_pairs: usize,
    catalog: &[Finding],
) -> Result<SyntheticCorpus> {
    if n_pairs > n_images.min(n_reports) {
        return Err(Error::Config(format!(
            "n_pairs {n_pairs} exceeds min(n_images {n_images}, n_reports {n_reports})"
        )));
    }
    let mut images = Vec::with_capacity(n_images);
    let mut reports = Vec::with_capacity(n_reports);
    // Paired prefix: image study k and report study k share the same
    // underlying findings (tag 0) and reference each other.
    for k in 0..n_pairs {
        let mut img = make_study(seed, 0, k as u64, "img", catalog, true);
        let mut rep = make_study(seed, 0, k as u64, "rep", catalog, false);
        // Re-render the report text with an independent template draw so the
        // pair shares findings, not necessarily the exact wording.
        let mut rng = study_rng(seed, 3, k as u64);
        let present: Vec<bool> = catalog.iter().map(|f| img.labels[f.label]).collect();
        rep.report = render_report(&mut rng, catalog, &present);
        rep.labels = img.labels.clone();
        img.pair_id = Some(rep.id.clone());
        rep.pair_id = Some(img.id.clone());
        images.push(img);
        reports.push(rep);
    }
    for k in n_pairs..n_images {
        images.push(make_study(seed, 1, k as u64, "img", catalog, true));
    }
    for k in n_pairs..n_reports {
        reports.push(make_study(seed, 2, k as u64, "rep", catalog, false));
    }
    Ok(SyntheticCorpus { images, reports })
}
