//! Command-line entry points wiring the pipeline into reproducible
//! commands. Exit codes: 0 success, 1 validation error (bad flags,
//! config, or input format), 2 runtime failure.

use std::collections::BTreeSet;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{self, MentionCells, PreparedDocument};
use crate::evalkit::{self, MeshTree, Triple};
use crate::relscore::{self, PredRow};
use crate::synth::{self, SynthConfig};
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::trainer::{self, Model, ModelConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bran",
    about = "Bi-affine relation attention networks for document-level relation extraction",
    version
)]
struct Cli {
    /// Master random seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Byte-pair vocabulary commands.
    Bpe {
        #[command(subcommand)]
        command: BpeCommand,
    },
    /// Train a model on a PubTator corpus.
    Train(TrainArgs),
    /// Score candidate pairs of a corpus under a trained model.
    Predict(PredictArgs),
    /// Score a prediction file against gold annotations.
    Eval(EvalArgs),
    /// Average probability files from several runs and threshold them.
    Ensemble(EnsembleArgs),
    /// Finite-difference check of every model gradient.
    Gradcheck(GradcheckArgs),
    /// Emit the planted-pattern synthetic corpus.
    SynthData(SynthArgs),
}

#[derive(Subcommand)]
enum BpeCommand {
    /// Learn merge rules from text files.
    Train {
        /// Input text files; each line contributes to the corpus.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Number of merges to learn.
        #[arg(long)]
        budget: usize,
        /// Output vocabulary file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode text (stdin or --input) to token ids, one line of
    /// space-separated ids per input line.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also print the token strings on a second column.
        #[arg(long)]
        show_tokens: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// PubTator corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// key=value config file; command-line overrides take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for vocab.bpe, model.btn, model.meta, train.log.
    #[arg(long)]
    out: PathBuf,
    /// Config overrides as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// MeSH tree TSV; with --filter-gold, hypernym-shadowed gold
    /// relations are dropped before training.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, requires = "mesh")]
    filter_gold: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// PubTator corpus to score.
    #[arg(long)]
    input: PathBuf,
    /// Output TSV of all candidate probabilities.
    #[arg(long)]
    out: PathBuf,
    /// Decision threshold; defaults to the tuned value in the model.
    #[arg(long)]
    theta: Option<f64>,
    /// Optional file for only the pairs at or above the threshold.
    #[arg(long)]
    predicted_out: Option<PathBuf>,
    /// Optional CONLL-style dump of gold and predicted tags.
    #[arg(long)]
    ner_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold PubTator file.
    #[arg(long)]
    gold: PathBuf,
    /// Prediction TSV from `predict` or `ensemble`.
    #[arg(long)]
    pred: PathBuf,
    /// MeSH tree TSV for hypernym filtering of predictions.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Decision threshold applied to the prediction probabilities.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Two or more probability files covering the same candidates.
    #[arg(long = "pred", required = true, num_args = 1..)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    theta: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 65)]
    docs: usize,
    /// Fraction of positive pairs expressed across sentence boundaries.
    #[arg(long, default_value_t = 0.3)]
    cross_frac: f64,
}

/// Runs the CLI; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version requests are successes
            use clap::error::ErrorKind;
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                return 0;
            }
            eprint!("{err}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) | Error::TrainAbort { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bpe { command } => match command {
            BpeCommand::Train { input, budget, out } => bpe_train(&input, budget, &out),
            BpeCommand::Encode {
                vocab,
                input,
                show_tokens,
            } => bpe_encode(&vocab, input.as_deref(), show_tokens),
        },
        Command::Train(args) => train(args, cli.seed),
        Command::Predict(args) => predict(args),
        Command::Eval(args) => eval(args),
        Command::Ensemble(args) => ensemble(args),
        Command::Gradcheck(args) => gradcheck(args, cli.seed.unwrap_or(42)),
        Command::SynthData(args) => synth_data(args, cli.seed),
    }
}

fn bpe_train(inputs: &[PathBuf], budget: usize, out: &Path) -> Result<()> {
    let mut corpus = Vec::new();
    for path in inputs {
        corpus.push(std::fs::read_to_string(path)?);
    }
    let vocab = train_bpe(&corpus, budget)?;
    vocab.save(out)?;
    println!(
        "trained {} merges over {} files; vocabulary of {} symbols written to {}",
        vocab.merges().len(),
        inputs.len(),
        vocab.size(),
        out.display()
    );
    Ok(())
}

fn bpe_encode(vocab_path: &Path, input: Option<&Path>, show_tokens: bool) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let text = match input {
        Some(path) => std::fs::read_to_string(path)?,
        None => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    for line in text.lines() {
        let toks = vocab.encode(line);
        let ids: Vec<String> = toks.token_ids.iter().map(|id| id.to_string()).collect();
        if show_tokens {
            let pieces: Vec<&str> = toks.token_ids.iter().map(|&id| vocab.display(id)).collect();
            println!("{}\t{}", ids.join(" "), pieces.join(" "));
        } else {
            println!("{}", ids.join(" "));
        }
    }
    Ok(())
}

/// Loads, parses, and prepares a corpus against a vocabulary.
fn load_prepared(
    path: &Path,
    vocab: &Vocabulary,
    cells: MentionCells,
) -> Result<Vec<PreparedDocument>> {
    let stream = std::fs::read_to_string(path)?;
    let docs = corpus::parse_pubtator(&stream)?;
    corpus::prepare(docs, vocab, cells)
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_kv(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    for kv in &args.sets {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(Error::Config(format!(
                "--set expects key=value, got {kv:?}"
            )));
        };
        cfg.set_field(key, value)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let stream = std::fs::read_to_string(&args.corpus)?;
    let mut docs = corpus::parse_pubtator(&stream)?;
    if args.filter_gold {
        let tree = MeshTree::load(args.mesh.as_ref().expect("clap enforces --mesh"))?;
        for doc in &mut docs {
            let triples: BTreeSet<Triple> = doc
                .gold_relations
                .iter()
                .map(|(c, d)| (doc.doc_id.clone(), c.clone(), d.clone()))
                .collect();
            let kept = evalkit::filter_hypernyms(&triples, &tree);
            doc.gold_relations = kept.into_iter().map(|(_, c, d)| (c, d)).collect();
        }
    }

    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let vocab = train_bpe(&texts, cfg.bpe_budget)?;
    let prepared = corpus::prepare(docs, &vocab, cfg.mention_cells)?;

    let outcome = trainer::train(&prepared, &cfg, vocab.size())?;

    std::fs::create_dir_all(&args.out)?;
    vocab.save(&args.out.join("vocab.bpe"))?;
    crate::numerics::save_params(&outcome.model.params, &args.out.join("model.btn"))?;
    std::fs::write(
        args.out.join("train.log"),
        trainer::format_log(&outcome.log),
    )?;
    std::fs::write(
        args.out.join("model.meta"),
        format_meta(&cfg, &outcome, vocab.size()),
    )?;
    println!(
        "trained {} steps; best dev F1 {:.4} at step {} (theta {:.4}); model written to {}",
        outcome.steps_run,
        outcome.best_f1,
        outcome.best_step,
        outcome.best_theta,
        args.out.display()
    );
    if let Some(acc) = outcome.best_ner_accuracy {
        println!("dev tag accuracy {acc:.4}");
    }
    Ok(())
}

fn format_meta(cfg: &TrainConfig, outcome: &trainer::TrainOutcome, vocab_size: usize) -> String {
    format!(
        "theta={}\nbest_f1={}\nbest_step={}\nvocab_size={}\n{}",
        outcome.best_theta,
        outcome.best_f1,
        outcome.best_step,
        vocab_size,
        cfg.to_kv()
    )
}

/// Reads model.meta back into the train config plus tuned threshold and
/// vocabulary size.
fn read_meta(path: &Path) -> Result<(TrainConfig, f64, usize)> {
    let content = std::fs::read_to_string(path)?;
    let mut cfg = TrainConfig::default();
    let mut theta = None;
    let mut vocab_size = None;
    for line in content.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key {
            "theta" => {
                theta = Some(value.parse::<f64>().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    msg: format!("bad theta {value:?}"),
                })?)
            }
            "vocab_size" => {
                vocab_size = Some(value.parse::<usize>().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    msg: format!("bad vocab_size {value:?}"),
                })?)
            }
            "best_f1" | "best_step" => {}
            _ => cfg.set_field(key, value)?,
        }
    }
    let theta = theta.ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        msg: "missing theta".into(),
    })?;
    let vocab_size = vocab_size.ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        msg: "missing vocab_size".into(),
    })?;
    Ok((cfg, theta, vocab_size))
}

/// Loads a trained model directory.
pub fn load_model(dir: &Path) -> Result<(Model, Vocabulary, TrainConfig, f64)> {
    let (cfg, theta, vocab_size) = read_meta(&dir.join("model.meta"))?;
    let vocab = Vocabulary::load(&dir.join("vocab.bpe"))?;
    if vocab.size() != vocab_size {
        return Err(Error::Format {
            path: dir.display().to_string(),
            msg: format!(
                "vocabulary size {} does not match checkpoint metadata {vocab_size}",
                vocab.size()
            ),
        });
    }
    let params = crate::numerics::load_params(&dir.join("model.btn"))?;
    let model = Model::from_parts(
        ModelConfig {
            encoder: cfg.encoder_config(),
            vocab_size,
            n_relations: relscore::N_RELATIONS,
            lambda: cfg.lambda,
        },
        params,
    );
    Ok((model, vocab, cfg, theta))
}

fn predict(args: PredictArgs) -> Result<()> {
    let (model, vocab, cfg, tuned_theta) = load_model(&args.model)?;
    let theta = args.theta.unwrap_or(tuned_theta);
    let prepared = load_prepared(&args.input, &vocab, cfg.mention_cells)?;

    let mut rows = Vec::new();
    let mut ner_dump = String::new();
    for prep in &prepared {
        let (probs, decoded) = trainer::eval_document(&model, prep)?;
        for (pair, prob) in prep.pairs.iter().zip(probs) {
            rows.push(PredRow {
                doc_id: prep.doc.doc_id.clone(),
                chemical_id: pair.chemical_id.clone(),
                disease_id: pair.disease_id.clone(),
                probability: prob,
            });
        }
        if args.ner_out.is_some() {
            if let Some(decoded) = &decoded {
                let tokens: Vec<&str> = prep
                    .tokens
                    .token_ids
                    .iter()
                    .map(|&id| vocab.display(id))
                    .collect();
                ner_dump.push_str(&crate::nertag::conll_dump(&tokens, &prep.bio, decoded));
                ner_dump.push('\n');
            }
        }
    }
    std::fs::write(&args.out, relscore::format_predictions(&rows))?;
    if let Some(path) = &args.predicted_out {
        let kept: Vec<PredRow> = rows
            .iter()
            .filter(|r| r.probability >= theta)
            .cloned()
            .collect();
        std::fs::write(path, relscore::format_predictions(&kept))?;
    }
    if let Some(path) = &args.ner_out {
        std::fs::write(path, ner_dump)?;
    }
    let predicted = rows.iter().filter(|r| r.probability >= theta).count();
    println!(
        "scored {} candidate pairs over {} documents; {} at or above theta {:.4}",
        rows.len(),
        prepared.len(),
        predicted,
        theta
    );
    Ok(())
}

fn gold_triples(path: &Path) -> Result<BTreeSet<Triple>> {
    let stream = std::fs::read_to_string(path)?;
    let docs = corpus::parse_pubtator(&stream)?;
    Ok(docs
        .iter()
        .flat_map(|doc| {
            doc.gold_relations
                .iter()
                .map(|(c, d)| (doc.doc_id.clone(), c.clone(), d.clone()))
        })
        .collect())
}

fn eval(args: EvalArgs) -> Result<()> {
    let gold = gold_triples(&args.gold)?;
    let content = std::fs::read_to_string(&args.pred)?;
    let rows = relscore::parse_predictions(&content, &args.pred.display().to_string())?;
    let mut predictions = evalkit::threshold_predictions(&rows, args.theta);
    if let Some(mesh) = &args.mesh {
        let tree = MeshTree::load(mesh)?;
        predictions = evalkit::filter_hypernyms(&predictions, &tree);
    }
    let report = evalkit::score(&predictions, &gold);
    println!(
        "P={:.4} R={:.4} F1={:.4} (TP={} FP={} FN={}, theta {:.4})",
        report.precision, report.recall, report.f1, report.tp, report.fp, report.fn_, args.theta
    );
    Ok(())
}

fn ensemble(args: EnsembleArgs) -> Result<()> {
    let mut runs = Vec::new();
    for path in &args.preds {
        let content = std::fs::read_to_string(path)?;
        runs.push(relscore::parse_predictions(
            &content,
            &path.display().to_string(),
        )?);
    }
    let averaged = evalkit::ensemble_probabilities(&runs)?;
    let kept: Vec<PredRow> = averaged
        .into_iter()
        .filter(|r| r.probability >= args.theta)
        .collect();
    let text = relscore::format_predictions(&kept);
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    eprintln!(
        "ensembled {} runs; {} pairs at or above theta {:.4}",
        args.preds.len(),
        kept.len(),
        args.theta
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs, seed: u64) -> Result<()> {
    let report = trainer::gradcheck_full_model(args.d, args.heads, args.blocks, seed)?;
    let worst = report.first().map(|(_, e)| *e).unwrap_or(0.0);
    for (name, err) in &report {
        println!("{name}\t{err:.3e}");
    }
    if worst < 1e-5 {
        println!("gradcheck passed: max relative error {worst:.3e}");
        Ok(())
    } else {
        Err(Error::TrainAbort {
            step: 0,
            msg: format!("gradcheck failed: max relative error {worst:.3e}"),
        })
    }
}

fn synth_data(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = SynthConfig {
        n_docs: args.docs,
        seed: seed.unwrap_or(SynthConfig::default().seed),
        cross_sentence_fraction: args.cross_frac,
    };
    let text = synth::generate_pubtator(&cfg);
    std::fs::write(&args.out, &text)?;
    let docs = corpus::parse_pubtator(&text)?;
    let positives: usize = docs.iter().map(|d| d.gold_relations.len()).sum();
    println!(
        "wrote {} documents with {positives} gold relations to {}",
        docs.len(),
        args.out.display()
    );
    Ok(())
}
