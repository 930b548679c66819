//! Joint training: pooled relation loss plus weighted BIO tagging loss,
//! Adam with global-norm clipping and decaying gradient noise, word-UNK
//! dropout, polarity-sampled minibatches, dev-set threshold tuning and
//! early stopping.

mod adam;

pub use adam::{clip_and_noise, global_norm, AdamState};

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{sample_minibatch, MentionCells, PreparedDocument, RelLabel};
use crate::encoder::{self, Ablation, Dropout, EncoderConfig};
use crate::nertag;
use crate::numerics::{NodeId, ParamSet, Tape, Tensor};
use crate::relscore::{self, PairAffinity};
use crate::tokenizer::{PAD_ID, UNK_ID};
use crate::{Error, Result};

// Independent RNG streams derived from one seed.
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_WORD_DROP: u64 = 3;
const STREAM_LAYER_DROP: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Every tunable of a training run, serializable as flat key=value lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub grad_noise_eta: f64,
    pub word_keep: f64,
    pub layer_keep: f64,
    /// BIO objective weight; 0 removes the tagging head entirely.
    pub lambda: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub split_train: usize,
    pub split_dev: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_positions: usize,
    pub bpe_budget: usize,
    pub ablation: Ablation,
    pub mention_cells: MentionCells,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            grad_noise_eta: 0.1,
            word_keep: 0.85,
            layer_keep: 0.9,
            lambda: 1.0,
            max_steps: 2000,
            eval_every: 25,
            patience: 5,
            seed: 42,
            split_train: 850,
            split_dev: 150,
            d: 64,
            heads: 4,
            blocks: 2,
            max_positions: 512,
            bpe_budget: 2500,
            ablation: Ablation::Full,
            mention_cells: MentionCells::First,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro!(
            (learning_rate, f64),
            (batch_size, usize),
            (adam_beta1, f64),
            (adam_beta2, f64),
            (adam_eps, f64),
            (clip_norm, f64),
            (grad_noise_eta, f64),
            (word_keep, f64),
            (layer_keep, f64),
            (lambda, f64),
            (max_steps, usize),
            (eval_every, usize),
            (patience, usize),
            (seed, u64),
            (split_train, usize),
            (split_dev, usize),
            (d, usize),
            (heads, usize),
            (blocks, usize),
            (max_positions, usize),
            (bpe_budget, usize),
            (ablation, Ablation),
            (mention_cells, MentionCells)
        )
    };
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.word_keep) || !in_unit(self.layer_keep) {
            return Err(Error::Config(
                "keep probabilities must lie in (0, 1]".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate, clip_norm and batch_size must be positive".into(),
            ));
        }
        if self.grad_noise_eta < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(
                "grad_noise_eta and lambda must be non-negative".into(),
            ));
        }
        if self.eval_every == 0 || self.split_train == 0 || self.split_dev == 0 {
            return Err(Error::Config(
                "eval_every and split sizes must be positive".into(),
            ));
        }
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            heads: self.heads,
            blocks: self.blocks,
            max_positions: self.max_positions,
            ablation: self.ablation,
        }
    }

    /// Serializes every field as `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($(($field:ident, $ty:ty)),+) => {
                $(writeln!(out, "{}={}", stringify!($field), self.$field).unwrap();)+
            };
        }
        config_fields!(emit);
        out
    }

    /// Parses `key=value` lines; missing keys keep their defaults,
    /// unknown keys are an error.
    pub fn from_kv(content: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (no, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "expected key=value at line {}: {raw:?}",
                    no + 1
                )));
            };
            cfg.set_field(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one field from its textual form; used for both config files
    /// and command-line overrides.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! apply {
            ($(($field:ident, $ty:ty)),+) => {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!(
                                "bad value {value:?} for {key}"
                            ))
                        })?;
                        return Ok(());
                    })+
                    _ => {}
                }
            };
        }
        config_fields!(apply);
        Err(Error::Config(format!("unknown config key {key:?}")))
    }
}

/// Model shape derived from a train config plus the trained vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub lambda: f64,
}

/// All learnable state of one model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.encoder.validate()?;
        if config.vocab_size == 0 || config.n_relations == 0 {
            return Err(Error::Config(
                "vocab_size and n_relations must be positive".into(),
            ));
        }
        let mut rng = stream_rng(seed, STREAM_INIT);
        let mut params = ParamSet::new();
        encoder::init_params(&mut params, &config.encoder, config.vocab_size, &mut rng);
        relscore::init_params(&mut params, config.encoder.d, config.n_relations, &mut rng);
        if config.lambda > 0.0 {
            nertag::init_params(&mut params, config.encoder.d);
        }
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Model {
        Model { config, params }
    }
}

/// Parameter leaves of one forward pass plus the per-module bindings.
pub struct Bound {
    pub order: Vec<(String, NodeId)>,
    pub encoder: encoder::EncoderBinding,
    pub rel: relscore::RelScoreBinding,
    pub ner: Option<nertag::NerBinding>,
}

/// Inserts every parameter as a tape leaf and resolves module bindings.
pub fn bind_model(tape: &mut Tape, model: &Model) -> Bound {
    let mut order = Vec::with_capacity(model.params.len());
    let map: HashMap<String, NodeId> = model
        .params
        .iter()
        .map(|(name, t)| {
            let id = tape.leaf(t.clone());
            order.push((name.to_string(), id));
            (name.to_string(), id)
        })
        .collect();
    let lookup = |name: &str| map[name];
    Bound {
        encoder: encoder::bind(&lookup, &model.config.encoder),
        rel: relscore::bind(&lookup),
        ner: (model.config.lambda > 0.0).then(|| nertag::bind(&lookup)),
        order,
    }
}

/// Encoder output and pairwise affinities of one document.
pub struct DocForward {
    pub encoded: NodeId,
    pub affinity: PairAffinity,
}

pub fn forward_document(
    tape: &mut Tape,
    bound: &Bound,
    token_ids: &[usize],
    mask: &[bool],
    dropout: Option<Dropout>,
) -> Result<DocForward> {
    let encoded = encoder::encode(tape, &bound.encoder, token_ids, mask, dropout)?;
    let (e_head, e_tail) = relscore::project_head_tail(tape, encoded, &bound.rel)?;
    let affinity = relscore::biaffine(tape, e_head, e_tail, &bound.rel, mask)?;
    Ok(DocForward { encoded, affinity })
}

/// Mean softmax cross-entropy over candidate pairs with classes
/// {NULL, CID}.
pub fn relation_loss(tape: &mut Tape, logits: NodeId, labels: &[RelLabel]) -> Result<NodeId> {
    let gold: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
    let mask = vec![true; gold.len()];
    tape.softmax_cross_entropy(logits, &gold, &mask)
}

/// Replaces each token id by UNK independently with probability
/// 1 - keep. PAD is never replaced.
pub fn word_unk_dropout(token_ids: &[usize], keep: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    token_ids
        .iter()
        .map(|&id| {
            if id != PAD_ID && rng.random::<f64>() >= keep {
                UNK_ID
            } else {
                id
            }
        })
        .collect()
}

/// Seeded shuffle then split into train/dev index lists. The configured
/// counts apply directly when the corpus is large enough; otherwise the
/// same train:dev ratio is scaled down.
pub fn split_corpus(
    n_docs: usize,
    split_train: usize,
    split_dev: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut indices: Vec<usize> = (0..n_docs).collect();
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    indices.shuffle(&mut rng);
    let (n_train, n_dev) = if n_docs >= split_train + split_dev {
        (split_train, split_dev)
    } else {
        let ratio = split_dev as f64 / (split_train + split_dev) as f64;
        let n_dev = ((n_docs as f64 * ratio).round() as usize).max(1);
        if n_dev >= n_docs {
            return Err(Error::Config(format!(
                "corpus of {n_docs} documents is too small to split"
            )));
        }
        (n_docs - n_dev, n_dev)
    };
    let train = indices[..n_train].to_vec();
    let dev = indices[n_train..n_train + n_dev].to_vec();
    Ok((train, dev))
}

/// Exhaustive threshold sweep: every distinct probability is a candidate
/// threshold; returns the (theta, F1) pair maximizing F1, preferring the
/// largest theta on ties.
pub fn sweep_threshold(cands: &[(f64, bool)]) -> (f64, f64) {
    if cands.is_empty() {
        return (0.5, 0.0);
    }
    let total_pos = cands.iter().filter(|(_, pos)| *pos).count();
    let mut sorted: Vec<(f64, bool)> = cands.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut best = (sorted[0].0, f64::NEG_INFINITY);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].0;
        // consume every candidate at this probability
        while i < sorted.len() && sorted[i].0 == theta {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fn_ = total_pos - tp;
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        if f1 > best.1 {
            best = (theta, f1);
        }
    }
    (best.0, best.1.max(0.0))
}

/// Positive-class probability per candidate pair of one document under
/// frozen parameters (no dropout).
pub fn score_document(model: &Model, prep: &PreparedDocument) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let mask = vec![true; prep.tokens.len()];
    let fwd = forward_document(&mut tape, &bound, &prep.tokens.token_ids, &mask, None)?;
    let pairs: Vec<&crate::corpus::CandidatePair> = prep.pairs.iter().collect();
    relscore::positive_probabilities(&mut tape, &fwd.affinity, &pairs)
}

/// Greedy BIO decode of one document under frozen parameters, for tag
/// accuracy reporting and CONLL dumps.
pub fn decode_document(
    model: &Model,
    prep: &PreparedDocument,
) -> Result<Vec<crate::corpus::BioTag>> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let Some(ner) = &bound.ner else {
        return Err(Error::Contract(
            "model was built without a tagging head".into(),
        ));
    };
    let mask = vec![true; prep.tokens.len()];
    let encoded = encoder::encode(
        &mut tape,
        &bound.encoder,
        &prep.tokens.token_ids,
        &mask,
        None,
    )?;
    let logits = nertag::ner_scores(&mut tape, encoded, ner)?;
    Ok(nertag::decode_greedy(tape.value(logits)))
}

/// Dev-set evaluation: probabilities for every candidate pair, exact
/// threshold sweep, and tag accuracy when the tagging head exists.
pub struct DevEval {
    pub f1: f64,
    pub theta: f64,
    pub ner_accuracy: Option<f64>,
}

/// Candidate probabilities and decoded tags of one document in a single
/// forward pass under frozen parameters.
pub fn eval_document(
    model: &Model,
    prep: &PreparedDocument,
) -> Result<(Vec<f64>, Option<Vec<crate::corpus::BioTag>>)> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let mask = vec![true; prep.tokens.len()];
    let fwd = forward_document(&mut tape, &bound, &prep.tokens.token_ids, &mask, None)?;
    let pairs: Vec<&crate::corpus::CandidatePair> = prep.pairs.iter().collect();
    let probs = relscore::positive_probabilities(&mut tape, &fwd.affinity, &pairs)?;
    let decoded = match &bound.ner {
        Some(ner) => {
            let logits = nertag::ner_scores(&mut tape, fwd.encoded, ner)?;
            Some(nertag::decode_greedy(tape.value(logits)))
        }
        None => None,
    };
    Ok((probs, decoded))
}

pub fn evaluate_dev(model: &Model, dev: &[&PreparedDocument]) -> Result<DevEval> {
    let mut cands: Vec<(f64, bool)> = Vec::new();
    let mut hit = 0usize;
    let mut total = 0usize;
    for prep in dev {
        let (probs, decoded) = eval_document(model, prep)?;
        for (pair, prob) in prep.pairs.iter().zip(probs) {
            cands.push((prob, pair.label == RelLabel::Cid));
        }
        if let Some(decoded) = decoded {
            for (d, g) in decoded.iter().zip(&prep.bio.0) {
                total += 1;
                if d == g {
                    hit += 1;
                }
            }
        }
    }
    let (theta, f1) = sweep_threshold(&cands);
    let ner_accuracy = (model.config.lambda > 0.0).then(|| {
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    });

    Ok(DevEval {
        f1,
        theta,
        ner_accuracy,
    })
}

/// One training-log line: step, loss, and dev F1 at evaluation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub dev_f1: Option<f64>,
}

/// Formats log lines as `step TAB loss TAB dev_f1` TSV.
pub fn format_log(lines: &[LogLine]) -> String {
    let mut out = String::new();
    for l in lines {
        match l.dev_f1 {
            Some(f1) => writeln!(out, "{}\t{}\t{}", l.step, l.loss, f1).unwrap(),
            None => writeln!(out, "{}\t{}\t", l.step, l.loss).unwrap(),
        }
    }
    out
}

/// Result of a training run: the best dev checkpoint and tuned threshold.
pub struct TrainOutcome {
    pub model: Model,
    pub best_f1: f64,
    pub best_theta: f64,
    pub best_step: usize,
    pub best_ner_accuracy: Option<f64>,
    pub steps_run: usize,
    pub log: Vec<LogLine>,
}

/// Joint training loop over a prepared corpus. Splits into train/dev,
/// then each step samples a polarity minibatch, accumulates the pooled
/// relation loss plus the weighted tagging loss over the batch on one
/// tape, backpropagates, clips, adds gradient noise, and applies Adam.
/// Every `eval_every` steps the dev F1 is computed with an exact
/// threshold sweep; training stops once no improvement is seen for
/// `patience` consecutive evaluations.
pub fn train(
    prepared: &[PreparedDocument],
    cfg: &TrainConfig,
    vocab_size: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, dev_idx) =
        split_corpus(prepared.len(), cfg.split_train, cfg.split_dev, cfg.seed)?;
    let train_docs: Vec<&PreparedDocument> = train_idx.iter().map(|&i| &prepared[i]).collect();
    let dev_docs: Vec<&PreparedDocument> = dev_idx.iter().map(|&i| &prepared[i]).collect();
    train_with_split(&train_docs, &dev_docs, cfg, vocab_size)
}

/// Training with an explicit train/dev split.
pub fn train_with_split(
    train_docs: &[&PreparedDocument],
    dev_docs: &[&PreparedDocument],
    cfg: &TrainConfig,
    vocab_size: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() || dev_docs.is_empty() {
        return Err(Error::Config("empty train or dev split".into()));
    }
    let model_cfg = ModelConfig {
        encoder: cfg.encoder_config(),
        vocab_size,
        n_relations: relscore::N_RELATIONS,
        lambda: cfg.lambda,
    };
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&model.params);

    let mut rng_sample = stream_rng(cfg.seed, STREAM_SAMPLE);
    let mut rng_word = stream_rng(cfg.seed, STREAM_WORD_DROP);
    let mut rng_layer = stream_rng(cfg.seed, STREAM_LAYER_DROP);
    let mut rng_noise = stream_rng(cfg.seed, STREAM_NOISE);

    let train_owned: Vec<PreparedDocument> = train_docs.iter().map(|d| (*d).clone()).collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, Option<f64>, ParamSet)> = None;
    let mut no_improve = 0usize;
    let mut steps_run = 0usize;

    for step in 0..cfg.max_steps {
        steps_run = step + 1;
        let batch = sample_minibatch(&train_owned, &mut rng_sample, cfg.batch_size)?;
        let total_rel: usize = batch
            .doc_indices
            .iter()
            .map(|&i| count_polarity(&train_owned[i], batch.polarity))
            .sum();
        let total_tokens: usize = batch
            .doc_indices
            .iter()
            .map(|&i| train_owned[i].tokens.len())
            .sum();
        if total_rel == 0 {
            eprintln!(
                "warning: step {step} sampled no candidates of the chosen polarity; skipping"
            );
            log.push(LogLine {
                step,
                loss: f64::NAN,
                dev_f1: None,
            });
            continue;
        }

        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &model);
        let mut loss_terms: Vec<NodeId> = Vec::new();
        for &doc_i in &batch.doc_indices {
            let prep = &train_owned[doc_i];
            let token_ids = word_unk_dropout(&prep.tokens.token_ids, cfg.word_keep, &mut rng_word);
            let mask = vec![true; token_ids.len()];
            let dropout = Dropout {
                keep: cfg.layer_keep,
                rng: &mut rng_layer,
            };
            let fwd = forward_document(&mut tape, &bound, &token_ids, &mask, Some(dropout))?;

            let cands: Vec<&crate::corpus::CandidatePair> = prep
                .pairs
                .iter()
                .filter(|p| p.label == batch.polarity)
                .collect();
            if !cands.is_empty() {
                let logits = relscore::candidate_logits(&mut tape, &fwd.affinity, &cands)?;
                let labels: Vec<RelLabel> = cands.iter().map(|c| c.label).collect();
                let ce = relation_loss(&mut tape, logits, &labels)?;
                let weighted = tape.scale(ce, cands.len() as f64 / total_rel as f64);
                loss_terms.push(weighted);
            }
            if let Some(ner) = &bound.ner {
                let logits = nertag::ner_scores(&mut tape, fwd.encoded, ner)?;
                let ce = nertag::ner_loss(&mut tape, logits, &prep.bio, &mask)?;
                let weighted = tape.scale(
                    ce,
                    cfg.lambda * prep.tokens.len() as f64 / total_tokens as f64,
                );
                loss_terms.push(weighted);
            }
        }
        let mut total = loss_terms[0];
        for &term in &loss_terms[1..] {
            total = tape.add(total, term)?;
        }
        let loss_value = tape.value(total).item();
        if !loss_value.is_finite() {
            return Err(Error::TrainAbort {
                step,
                msg: format!(
                    "non-finite loss {loss_value} (polarity {:?}, {} documents)",
                    batch.polarity,
                    batch.doc_indices.len()
                ),
            });
        }

        let grads = tape.backward(total)?;
        let mut grad_tensors: Vec<Tensor> = bound
            .order
            .iter()
            .map(|(name, id)| {
                grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(model.params.get(name).shape()))
            })
            .collect();
        clip_and_noise(
            &mut grad_tensors,
            cfg.clip_norm,
            cfg.grad_noise_eta,
            step,
            &mut rng_noise,
        );
        adam.step(
            &mut model.params,
            &grad_tensors,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )?;

        let mut dev_f1 = None;
        if (step + 1) % cfg.eval_every == 0 {
            let eval = evaluate_dev(&model, dev_docs)?;
            dev_f1 = Some(eval.f1);
            let improved = best.as_ref().is_none_or(|(f1, ..)| eval.f1 > *f1);
            if improved {
                best = Some((
                    eval.f1,
                    eval.theta,
                    step,
                    eval.ner_accuracy,
                    model.params.clone(),
                ));
                no_improve = 0;
            } else {
                no_improve += 1;
            }
            log.push(LogLine {
                step,
                loss: loss_value,
                dev_f1,
            });
            if no_improve >= cfg.patience {
                break;
            }
            continue;
        }
        log.push(LogLine {
            step,
            loss: loss_value,
            dev_f1,
        });
    }

    // a run shorter than eval_every still needs a tuned threshold
    if best.is_none() {
        let eval = evaluate_dev(&model, dev_docs)?;
        best = Some((
            eval.f1,
            eval.theta,
            steps_run.saturating_sub(1),
            eval.ner_accuracy,
            model.params.clone(),
        ));
    }
    let (best_f1, best_theta, best_step, best_ner_accuracy, best_params) = best.unwrap();
    Ok(TrainOutcome {
        model: Model::from_parts(model.config.clone(), best_params),
        best_f1,
        best_theta,
        best_step,
        best_ner_accuracy,
        steps_run,
        log,
    })
}

fn count_polarity(prep: &PreparedDocument, polarity: RelLabel) -> usize {
    prep.pairs.iter().filter(|p| p.label == polarity).count()
}

/// Builds the tiny document used by the full-model gradient check:
/// twelve tokens, one chemical and one disease entity with two mentions
/// each, so the candidate pair pools over four affinity cells.
pub fn gradcheck_document() -> PreparedDocument {
    use crate::corpus::{BioTag, BioTagSequence, CandidatePair, Document, EntityType};
    use crate::tokenizer::TokenizedText;

    let token_ids = vec![3usize, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
    let n = token_ids.len();
    let tokens = TokenizedText {
        token_ids,
        spans: (0..n).map(|i| (i, i + 1)).collect(),
        word_piece: vec![true; n],
    };
    let bio = BioTagSequence(vec![
        BioTag::B(EntityType::Chemical),
        BioTag::I(EntityType::Chemical),
        BioTag::O,
        BioTag::B(EntityType::Disease),
        BioTag::O,
        BioTag::O,
        BioTag::B(EntityType::Chemical),
        BioTag::O,
        BioTag::B(EntityType::Disease),
        BioTag::I(EntityType::Disease),
        BioTag::O,
        BioTag::O,
    ]);
    let pairs = vec![CandidatePair {
        chemical_id: "C1".into(),
        disease_id: "D1".into(),
        label: RelLabel::Cid,
        cells: vec![(0, 3), (0, 8), (6, 3), (6, 8)],
    }];
    PreparedDocument {
        doc: Document {
            doc_id: "gradcheck".into(),
            title: String::new(),
            abstract_text: String::new(),
            text: String::new(),
            mentions: vec![],
            entities: vec![],
            gold_relations: Default::default(),
        },
        tokens,
        bio,
        pairs,
    }
}

/// Joint relation + tagging loss of the gradcheck document under the
/// given parameters, with dropout off.
pub fn gradcheck_loss(model_cfg: &ModelConfig, params: &ParamSet) -> Result<f64> {
    let model = Model::from_parts(model_cfg.clone(), params.clone());
    let prep = gradcheck_document();
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &model);
    let mask = vec![true; prep.tokens.len()];
    let fwd = forward_document(&mut tape, &bound, &prep.tokens.token_ids, &mask, None)?;
    let cands: Vec<&crate::corpus::CandidatePair> = prep.pairs.iter().collect();
    let logits = relscore::candidate_logits(&mut tape, &fwd.affinity, &cands)?;
    let labels: Vec<RelLabel> = cands.iter().map(|c| c.label).collect();
    let rel = relation_loss(&mut tape, logits, &labels)?;
    let ner_bind = bound
        .ner
        .as_ref()
        .ok_or_else(|| Error::Contract("gradcheck requires the tagging head".into()))?;
    let ner_logits = nertag::ner_scores(&mut tape, fwd.encoded, ner_bind)?;
    let ner = nertag::ner_loss(&mut tape, ner_logits, &prep.bio, &mask)?;
    let scaled = tape.scale(ner, model.config.lambda);
    let total = tape.add(rel, scaled)?;
    Ok(tape.value(total).item())
}

/// Finite-difference check of every model parameter against the analytic
/// gradients of the joint loss. Returns the guarded relative error per
/// parameter, worst first.
pub fn gradcheck_full_model(
    d: usize,
    heads: usize,
    blocks: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    use crate::numerics::gradcheck;

    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            d,
            heads,
            blocks,
            max_positions: 16,
            ablation: Ablation::Full,
        },
        vocab_size: 12,
        n_relations: relscore::N_RELATIONS,
        lambda: 1.0,
    };
    let model = Model::new(model_cfg.clone(), seed)?;
    // perturb the zero-initialized output layers so their gradients are
    // exercised away from the symmetric point
    let mut params = model.params.clone();
    let mut rng = stream_rng(seed, STREAM_INIT + 7);
    for (name, t) in params.iter_mut() {
        if name.starts_with("rel.l_") || name.starts_with("ner.") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let model = Model::from_parts(model_cfg.clone(), params);

    let prep = gradcheck_document();
    let analytic: HashMap<String, Tensor> = {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &model);
        let mask = vec![true; prep.tokens.len()];
        let fwd = forward_document(&mut tape, &bound, &prep.tokens.token_ids, &mask, None)?;
        let cands: Vec<&crate::corpus::CandidatePair> = prep.pairs.iter().collect();
        let logits = relscore::candidate_logits(&mut tape, &fwd.affinity, &cands)?;
        let labels: Vec<RelLabel> = cands.iter().map(|c| c.label).collect();
        let rel = relation_loss(&mut tape, logits, &labels)?;
        let ner_bind = bound.ner.as_ref().unwrap();
        let ner_logits = nertag::ner_scores(&mut tape, fwd.encoded, ner_bind)?;
        let ner = nertag::ner_loss(&mut tape, ner_logits, &prep.bio, &mask)?;
        let scaled = tape.scale(ner, model.config.lambda);
        let total = tape.add(rel, scaled)?;
        let grads = tape.backward(total)?;
        bound
            .order
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(model.params.get(name).shape()));
                (name.clone(), g)
            })
            .collect()
    };

    let mut report =
        gradcheck::check_params(&model.params, &analytic, gradcheck::DEFAULT_STEP, |p| {
            gradcheck_loss(&model_cfg, p)
        })?;
    report.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(report)
}
