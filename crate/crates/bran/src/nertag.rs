//! Token-level BIO entity classifier over encoder outputs. Trained
//! jointly with relation extraction, sharing all embeddings and
//! transformer parameters; at evaluation it only reports tag accuracy and
//! never feeds relation candidate construction.

use std::fmt::Write as _;

use crate::corpus::{BioTag, BioTagSequence, TAGSET_SIZE};
use crate::numerics::{NodeId, ParamSet, Tape, Tensor};
use crate::Result;

/// Registers the linear classifier parameters, zero-initialized so
/// initial tag distributions are uniform.
pub fn init_params(params: &mut ParamSet, d: usize) {
    params.insert("ner.w", Tensor::zeros(&[d, TAGSET_SIZE]));
    params.insert("ner.b", Tensor::zeros(&[TAGSET_SIZE]));
}

pub struct NerBinding {
    w: NodeId,
    b: NodeId,
}

pub fn bind(lookup: &dyn Fn(&str) -> NodeId) -> NerBinding {
    NerBinding {
        w: lookup("ner.w"),
        b: lookup("ner.b"),
    }
}

/// Per-token tag logits: `c_i = W_N b_i + bias`, shape `[n, 5]`.
pub fn ner_scores(tape: &mut Tape, encoded: NodeId, binding: &NerBinding) -> Result<NodeId> {
    let logits = tape.matmul(encoded, binding.w)?;
    tape.add_bias(logits, binding.b)
}

/// Mean per-token softmax cross-entropy over unmasked tokens.
pub fn ner_loss(
    tape: &mut Tape,
    logits: NodeId,
    gold: &BioTagSequence,
    mask: &[bool],
) -> Result<NodeId> {
    let gold_idx: Vec<usize> = gold.0.iter().map(|t| t.class_index()).collect();
    tape.softmax_cross_entropy(logits, &gold_idx, mask)
}

/// Greedy per-token argmax decoding with transition repair: an I tag
/// whose type does not continue the previous tag becomes a B tag.
pub fn decode_greedy(logits: &Tensor) -> Vec<BioTag> {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(n);
    let mut prev = BioTag::O;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let mut tag = BioTag::from_class_index(argmax);
        if let BioTag::I(t) = tag {
            let continues = matches!(prev, BioTag::B(p) | BioTag::I(p) if p == t);
            if !continues {
                tag = BioTag::B(t);
            }
        }
        out.push(tag);
        prev = tag;
    }
    out
}

/// Fraction of unmasked tokens whose decoded tag matches gold.
pub fn tag_accuracy(decoded: &[BioTag], gold: &BioTagSequence, mask: &[bool]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for ((d, g), &m) in decoded.iter().zip(&gold.0).zip(mask) {
        if m {
            total += 1;
            if d == g {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// CONLL-style dump: one `token TAB gold TAB predicted` line per token.
pub fn conll_dump(tokens: &[&str], gold: &BioTagSequence, predicted: &[BioTag]) -> String {
    let mut out = String::new();
    for ((tok, g), p) in tokens.iter().zip(&gold.0).zip(predicted) {
        writeln!(out, "{}\t{}\t{}", tok, g.as_str(), p.as_str()).unwrap();
    }
    out
}
