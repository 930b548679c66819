//! Planted-pattern corpus generator. A chemical-disease pair is positive
//! exactly when the disease appears in an "induced" sentence; a share of
//! positives express the relation across sentence boundaries, with the
//! chemical and the trigger sentence apart. Everything is deterministic
//! given the seed.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_pubtator, Document};
use crate::Result;

const CHEMICALS: &[&str] = &[
    "fexanib",
    "olzapril",
    "dactramine",
    "zubretol",
    "painexol",
    "cortivan",
    "melandril",
    "quizofen",
];

const DISEASES: &[&str] = &[
    "cardiopathy",
    "dermatosis",
    "nephritis",
    "myalgia",
    "vertigo",
    "anemia",
    "colitis",
    "tremor",
];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub seed: u64,
    /// Fraction of positive pairs expressed across sentence boundaries.
    pub cross_sentence_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 65,
            seed: 13,
            cross_sentence_fraction: 0.3,
        }
    }
}

/// Generates the corpus as PubTator-format text.
pub fn generate_pubtator(cfg: &SynthConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = String::new();
    for i in 0..cfg.n_docs {
        let doc_id = format!("{}", 10_000 + i);
        out.push_str(&generate_block(&doc_id, cfg, &mut rng));
        out.push('\n');
    }
    out
}

/// Generates and parses the corpus in one step.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Document>> {
    parse_pubtator(&generate_pubtator(cfg))
}

fn generate_block(doc_id: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> String {
    let chem_idx = rng.random_range(0..CHEMICALS.len());
    let chem = CHEMICALS[chem_idx];
    let chem_id = format!("C{:03}", chem_idx);

    // one or two distinct diseases, each positive with probability 1/2
    let n_dis = rng.random_range(1..=2usize);
    let mut dis_idx: Vec<usize> = Vec::new();
    while dis_idx.len() < n_dis {
        let d = rng.random_range(0..DISEASES.len());
        if !dis_idx.contains(&d) {
            dis_idx.push(d);
        }
    }

    let titles = [
        format!("{chem} case report."),
        format!("report of {chem} therapy."),
        format!("a study of {chem}."),
    ];
    let title = titles.choose(rng).unwrap().clone();
    let mut sentences: Vec<String> = Vec::new();
    let mut relations: Vec<(String, String)> = Vec::new();

    for &d in &dis_idx {
        let disease = DISEASES[d];
        let positive = rng.random_bool(0.5);
        if positive {
            relations.push((chem_id.clone(), format!("D{:03}", d)));
            if rng.random_bool(cfg.cross_sentence_fraction) {
                // trigger sentence without the chemical; the pair is only
                // expressed across the sentence boundary
                sentences.push(
                    [
                        format!("patients received {chem} daily."),
                        format!("two cases took {chem}."),
                    ]
                    .choose(rng)
                    .unwrap()
                    .clone(),
                );
                sentences.push(
                    [
                        format!("the drug later induced {disease}."),
                        format!("severe {disease} was induced soon after."),
                    ]
                    .choose(rng)
                    .unwrap()
                    .clone(),
                );
            } else {
                sentences.push(
                    [
                        format!("{chem} induced {disease} quickly."),
                        format!("severe {disease} was induced by {chem}."),
                    ]
                    .choose(rng)
                    .unwrap()
                    .clone(),
                );
            }
        } else {
            sentences.push(
                [
                    format!("{disease} was present at baseline."),
                    format!("{chem} did not worsen {disease}."),
                    format!("no change of {disease} occurred."),
                ]
                .choose(rng)
                .unwrap()
                .clone(),
            );
        }
    }
    if sentences.is_empty() {
        sentences.push(format!("the {chem} dose was low."));
    }

    let abstract_text = sentences.join(" ");
    let text = format!("{title} {abstract_text}");

    let mut lines = vec![
        format!("{doc_id}|t|{title}"),
        format!("{doc_id}|a|{abstract_text}"),
    ];
    let mut mention_lines: Vec<(usize, String)> = Vec::new();
    for (at, _) in text.match_indices(chem) {
        mention_lines.push((
            at,
            format!(
                "{doc_id}\t{at}\t{}\t{chem}\tChemical\t{chem_id}",
                at + chem.len()
            ),
        ));
    }
    for &d in &dis_idx {
        let disease = DISEASES[d];
        for (at, _) in text.match_indices(disease) {
            mention_lines.push((
                at,
                format!(
                    "{doc_id}\t{at}\t{}\t{disease}\tDisease\tD{:03}",
                    at + disease.len(),
                    d
                ),
            ));
        }
    }
    mention_lines.sort();
    lines.extend(mention_lines.into_iter().map(|(_, l)| l));
    relations.sort();
    relations.dedup();
    for (c, d) in relations {
        lines.push(format!("{doc_id}\tCID\t{c}\t{d}"));
    }
    let mut block = String::new();
    for l in lines {
        writeln!(block, "{l}").unwrap();
    }
    block
}
