//! Relation scoring: head/tail MLP projections of encoder states, the
//! per-relation bi-affine pairwise affinity tensor, LogSumExp pooling of
//! mention-pair cells into entity-pair scores, and thresholded
//! predictions.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::corpus::{CandidatePair, RelLabel};
use crate::encoder::glorot;
use crate::numerics::{NodeId, ParamSet, Tape, Tensor};
use crate::{Error, Result};

/// Number of relation classes for the chemical-disease task: NULL and CID.
pub const N_RELATIONS: usize = 2;

/// Registers head/tail MLPs and the bi-affine relation parameters.
/// The relation tensor and bias start at zero so initial pair scores are
/// uniform across classes.
pub fn init_params(params: &mut ParamSet, d: usize, n_relations: usize, rng: &mut ChaCha8Rng) {
    for side in ["head", "tail"] {
        params.insert(&format!("rel.{side}.w0"), glorot(&[d, d], d, d, rng));
        params.insert(&format!("rel.{side}.b0"), Tensor::zeros(&[d]));
        params.insert(&format!("rel.{side}.w1"), glorot(&[d, d], d, d, rng));
        params.insert(&format!("rel.{side}.b1"), Tensor::zeros(&[d]));
    }
    params.insert("rel.l_tensor", Tensor::zeros(&[n_relations, d, d]));
    params.insert("rel.l_bias", Tensor::zeros(&[d, n_relations]));
}

/// Tape handles for the relation-scoring parameters.
pub struct RelScoreBinding {
    head_w0: NodeId,
    head_b0: NodeId,
    head_w1: NodeId,
    head_b1: NodeId,
    tail_w0: NodeId,
    tail_b0: NodeId,
    tail_w1: NodeId,
    tail_b1: NodeId,
    l_tensor: NodeId,
    l_bias: NodeId,
}

pub fn bind(lookup: &dyn Fn(&str) -> NodeId) -> RelScoreBinding {
    RelScoreBinding {
        head_w0: lookup("rel.head.w0"),
        head_b0: lookup("rel.head.b0"),
        head_w1: lookup("rel.head.w1"),
        head_b1: lookup("rel.head.b1"),
        tail_w0: lookup("rel.tail.w0"),
        tail_b0: lookup("rel.tail.b0"),
        tail_w1: lookup("rel.tail.w1"),
        tail_b1: lookup("rel.tail.b1"),
        l_tensor: lookup("rel.l_tensor"),
        l_bias: lookup("rel.l_bias"),
    }
}

/// Two independent two-layer MLPs produce the head and tail version of
/// every token: `e = W1 relu(W0 b + b0) + b1`.
pub fn project_head_tail(
    tape: &mut Tape,
    encoded: NodeId,
    binding: &RelScoreBinding,
) -> Result<(NodeId, NodeId)> {
    let mlp = |tape: &mut Tape, w0, b0, w1, b1| -> Result<NodeId> {
        let h = tape.matmul(encoded, w0)?;
        let h = tape.add_bias(h, b0)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w1)?;
        tape.add_bias(out, b1)
    };
    let head = mlp(
        tape,
        binding.head_w0,
        binding.head_b0,
        binding.head_w1,
        binding.head_b1,
    )?;
    let tail = mlp(
        tape,
        binding.tail_w0,
        binding.tail_b0,
        binding.tail_w1,
        binding.tail_b1,
    )?;
    Ok((head, tail))
}

/// The pairwise affinity scores `A[r,i,j]` over all token pairs for every
/// relation, as one `[l, n, n]` tape node, plus the per-token validity
/// mask. Cells touching a padded position are invalid and may never be
/// pooled.
pub struct PairAffinity {
    pub node: NodeId,
    pub n: usize,
    pub n_relations: usize,
    pub valid: Vec<bool>,
}

impl PairAffinity {
    pub fn cell_is_valid(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.valid[i] && self.valid[j]
    }
}

/// Bi-affine scores: `A[r,i,j] = e_head_i^T L_r e_tail_j + e_head_i^T l_b_r`.
/// The bias term depends on the head index and relation only.
pub fn biaffine(
    tape: &mut Tape,
    e_head: NodeId,
    e_tail: NodeId,
    binding: &RelScoreBinding,
    valid: &[bool],
) -> Result<PairAffinity> {
    let n = tape.value(e_head).shape()[0];
    if valid.len() != n {
        return Err(Error::Contract(format!(
            "validity mask of {} entries for {n} tokens",
            valid.len()
        )));
    }
    let n_relations = tape.value(binding.l_tensor).shape()[0];
    // [l,n,d] = broadcast(e_head) @ L, then [l,n,n] against e_tail^T
    let hl = tape.bmm(e_head, binding.l_tensor, false)?;
    let scores = tape.bmm(hl, e_tail, true)?;
    // [n,l] head-projection of the per-relation bias vectors
    let head_bias = tape.matmul(e_head, binding.l_bias)?;
    let node = tape.add_pair_bias(scores, head_bias)?;
    Ok(PairAffinity {
        node,
        n,
        n_relations,
        valid: valid.to_vec(),
    })
}

/// LogSumExp pooling of an entity pair's mention-pair cells: one scalar
/// score node per relation.
pub fn pool_entity_pair(
    tape: &mut Tape,
    affinity: &PairAffinity,
    cells: &[(usize, usize)],
) -> Result<Vec<NodeId>> {
    if cells.is_empty() {
        return Err(Error::Contract(
            "entity pair with no mention-pair cells".into(),
        ));
    }
    if let Some(&(i, j)) = cells.iter().find(|&&(i, j)| !affinity.cell_is_valid(i, j)) {
        return Err(Error::Contract(format!(
            "affinity cell ({i}, {j}) is outside the valid token range"
        )));
    }
    let n = affinity.n;
    (0..affinity.n_relations)
        .map(|r| {
            let idxs: Vec<usize> = cells.iter().map(|&(i, j)| (r * n + i) * n + j).collect();
            tape.logsumexp_gather(affinity.node, &idxs)
        })
        .collect()
}

/// Pooled per-relation scores for every candidate pair, stacked into one
/// `[n_candidates, l]` logit node.
pub fn candidate_logits(
    tape: &mut Tape,
    affinity: &PairAffinity,
    pairs: &[&CandidatePair],
) -> Result<NodeId> {
    let mut scores = Vec::with_capacity(pairs.len() * affinity.n_relations);
    for pair in pairs {
        scores.extend(pool_entity_pair(tape, affinity, &pair.cells)?);
    }
    tape.stack_scalars(&scores, &[pairs.len(), affinity.n_relations])
}

/// Softmax probability of the CID class for every candidate pair.
pub fn positive_probabilities(
    tape: &mut Tape,
    affinity: &PairAffinity,
    pairs: &[&CandidatePair],
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let logits = candidate_logits(tape, affinity, pairs)?;
    let probs = tape.softmax(logits)?;
    let l = affinity.n_relations;
    Ok((0..pairs.len())
        .map(|c| tape.value(probs).data()[c * l + RelLabel::Cid.class_index()])
        .collect())
}

/// One scored candidate pair of a document.
#[derive(Clone, Debug, PartialEq)]
pub struct PredRow {
    pub doc_id: String,
    pub chemical_id: String,
    pub disease_id: String,
    pub probability: f64,
}

/// Formats prediction rows as the TAB-separated output file, sorted by
/// document then descending probability.
pub fn format_predictions(rows: &[PredRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        a.doc_id
            .cmp(&b.doc_id)
            .then(b.probability.total_cmp(&a.probability))
            .then(a.chemical_id.cmp(&b.chemical_id))
            .then(a.disease_id.cmp(&b.disease_id))
    });
    let mut out = String::new();
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}",
            r.doc_id, r.chemical_id, r.disease_id, r.probability
        )
        .unwrap();
    }
    out
}

/// Parses a prediction file written by [`format_predictions`].
pub fn parse_predictions(content: &str, path_for_errors: &str) -> Result<Vec<PredRow>> {
    let mut rows = Vec::new();
    for (no, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [doc_id, chem, dis, prob] = fields.as_slice() else {
            return Err(Error::Format {
                path: path_for_errors.to_string(),
                msg: format!("expected 4 TAB-separated fields at line {}", no + 1),
            });
        };
        let probability: f64 = prob.parse().map_err(|_| Error::Format {
            path: path_for_errors.to_string(),
            msg: format!("bad probability {prob:?} at line {}", no + 1),
        })?;
        rows.push(PredRow {
            doc_id: doc_id.to_string(),
            chemical_id: chem.to_string(),
            disease_id: dis.to_string(),
            probability,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use crate::tokenizer;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn bind_set(tape: &mut Tape, params: &ParamSet) -> RelScoreBinding {
        let ids: std::collections::HashMap<String, NodeId> = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect();
        bind(&|n: &str| ids[n])
    }

    #[test]
    fn zero_mlp_weights_give_zero_projections() {
        let d = 4;
        let mut params = ParamSet::new();
        let mut r = rng(0);
        init_params(&mut params, d, N_RELATIONS, &mut r);
        for (name, t) in params.iter_mut() {
            if name.contains(".w") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let binding = bind_set(&mut tape, &params);
        let enc = tape.leaf(Tensor::from_fn(&[3, d], || 0.5));
        let (head, tail) = project_head_tail(&mut tape, enc, &binding).unwrap();
        assert!(tape.value(head).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(tail).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_and_tail_projections_differ() {
        let d = 6;
        let mut params = ParamSet::new();
        let mut r = rng(1);
        init_params(&mut params, d, N_RELATIONS, &mut r);
        let mut tape = Tape::new();
        let binding = bind_set(&mut tape, &params);
        let enc = tape.leaf(Tensor::from_fn(&[4, d], || r.random_range(-1.0..1.0)));
        let (head, tail) = project_head_tail(&mut tape, enc, &binding).unwrap();
        assert_ne!(tape.value(head).data(), tape.value(tail).data());
    }

    #[test]
    fn hand_checked_mlp_projection() {
        // d=2: e = W1 relu(W0 b + b0) + b1
        let mut params = ParamSet::new();
        params.insert(
            "rel.head.w0",
            Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
        );
        params.insert(
            "rel.head.b0",
            Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(),
        );
        params.insert(
            "rel.head.w1",
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        params.insert(
            "rel.head.b1",
            Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap(),
        );
        for n in ["w0", "b0", "w1", "b1"] {
            let t = params.get(&format!("rel.head.{n}")).clone();
            params.insert(&format!("rel.tail.{n}"), t);
        }
        params.insert("rel.l_tensor", Tensor::zeros(&[1, 2, 2]));
        params.insert("rel.l_bias", Tensor::zeros(&[2, 1]));

        let mut tape = Tape::new();
        let binding = bind_set(&mut tape, &params);
        let enc = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let (head, _) = project_head_tail(&mut tape, enc, &binding).unwrap();
        // h = relu([1,2] W0 + b0) = relu([1+4+0.5, -1+1-0.5]) = [5.5, 0]
        // e = [5.5, 0] W1 + b1 = [5.6, 11.2]
        let got = tape.value(head).data();
        assert!((got[0] - 5.6).abs() < 1e-12);
        assert!((got[1] - 11.2).abs() < 1e-12);
    }

    #[test]
    fn zero_relation_parameters_give_zero_affinity() {
        let d = 3;
        let mut params = ParamSet::new();
        let mut r = rng(2);
        init_params(&mut params, d, N_RELATIONS, &mut r);
        let mut tape = Tape::new();
        let binding = bind_set(&mut tape, &params);
        let h = tape.leaf(Tensor::from_fn(&[4, d], || r.random_range(-1.0..1.0)));
        let t = tape.leaf(Tensor::from_fn(&[4, d], || r.random_range(-1.0..1.0)));
        let aff = biaffine(&mut tape, h, t, &binding, &[true; 4]).unwrap();
        assert!(tape.value(aff.node).data().iter().all(|&v| v == 0.0));
    }

    /// Binding whose MLP handles are unused placeholders; only the
    /// relation tensor and bias matter for direct biaffine tests.
    fn raw_binding(l_tensor: NodeId, l_bias: NodeId, filler: NodeId) -> RelScoreBinding {
        RelScoreBinding {
            head_w0: filler,
            head_b0: filler,
            head_w1: filler,
            head_b1: filler,
            tail_w0: filler,
            tail_b0: filler,
            tail_w1: filler,
            tail_b1: filler,
            l_tensor,
            l_bias,
        }
    }

    #[test]
    fn hand_checked_bilinear_form() {
        // e_head = [1,0], e_tail = [0,1], L = [[1,2],[3,4]] -> score 2
        let mut tape = Tape::new();
        let e_head = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let e_tail = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap());
        let l_tensor = tape.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l_bias = tape.leaf(Tensor::zeros(&[2, 1]));
        let binding = raw_binding(l_tensor, l_bias, e_head);
        let aff = biaffine(&mut tape, e_head, e_tail, &binding, &[true]).unwrap();
        assert!((tape.value(aff.node).at3(0, 0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bias_term_is_constant_across_tail_index() {
        // L = 0 and l_b = [1,1]: row i of A equals e_head_i . l_b everywhere
        let d = 2;
        let n = 3;
        let mut tape = Tape::new();
        let e_head =
            tape.leaf(Tensor::from_vec(&[n, d], vec![1.0, 0.0, 0.5, 0.5, 0.0, 2.0]).unwrap());
        let e_tail = tape.leaf(Tensor::from_fn(&[n, d], || 7.0));
        let l_tensor = tape.leaf(Tensor::zeros(&[1, d, d]));
        let l_bias = tape.leaf(Tensor::from_vec(&[d, 1], vec![1.0, 1.0]).unwrap());
        let binding = raw_binding(l_tensor, l_bias, e_head);
        let aff = biaffine(&mut tape, e_head, e_tail, &binding, &[true; 3]).unwrap();
        let v = tape.value(aff.node);
        for (i, expect) in [1.0, 1.0, 2.0].into_iter().enumerate() {
            for j in 0..n {
                assert!((v.at3(0, i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_superposition_in_tail() {
        // A(u + v) = A(u) + A(v) holding the head side and parameters fixed
        let d = 4;
        let n = 3;
        let mut r = rng(3);
        let l_vals = Tensor::from_fn(&[N_RELATIONS, d, d], || r.random_range(-1.0..1.0));
        let head_t = Tensor::from_fn(&[n, d], || r.random_range(-1.0..1.0));
        let u = Tensor::from_fn(&[n, d], || r.random_range(-1.0..1.0));
        let v = Tensor::from_fn(&[n, d], || r.random_range(-1.0..1.0));
        let sum = Tensor::from_vec(
            &[n, d],
            u.data().iter().zip(v.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();

        let eval = |tail_t: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let l_tensor = tape.leaf(l_vals.clone());
            let l_bias = tape.leaf(Tensor::zeros(&[d, N_RELATIONS]));
            let h = tape.leaf(head_t.clone());
            let t = tape.leaf(tail_t.clone());
            let binding = raw_binding(l_tensor, l_bias, h);
            let aff = biaffine(&mut tape, h, t, &binding, &vec![true; n]).unwrap();
            tape.value(aff.node).clone()
        };
        let a_u = eval(&u);
        let a_v = eval(&v);
        let a_sum = eval(&sum);
        for ((x, y), z) in a_u.data().iter().zip(a_v.data()).zip(a_sum.data()) {
            assert!((x + y - z).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_singleton_and_pairs() {
        let mut tape = Tape::new();
        let vals = Tensor::from_vec(
            &[1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let node = tape.leaf(vals);
        let aff = PairAffinity {
            node,
            n: 3,
            n_relations: 1,
            valid: vec![true; 3],
        };
        // singleton: the pooled score is the cell value
        let s = pool_entity_pair(&mut tape, &aff, &[(1, 2)]).unwrap();
        assert!((tape.value(s[0]).item() - 6.0).abs() < 1e-12);
        // two equal cells of value v pool to v + ln 2
        let s = pool_entity_pair(&mut tape, &aff, &[(0, 1), (0, 1)]).unwrap();
        assert!((tape.value(s[0]).item() - (2.0 + 2.0_f64.ln())).abs() < 1e-12);
        // cells {1,2,3}
        let s = pool_entity_pair(&mut tape, &aff, &[(0, 0), (0, 1), (0, 2)]).unwrap();
        assert!((tape.value(s[0]).item() - 3.40760596444438).abs() < 1e-10);
        // empty cell list is a contract violation
        assert!(pool_entity_pair(&mut tape, &aff, &[]).is_err());
    }

    #[test]
    fn pooling_rejects_invalid_cells() {
        let mut tape = Tape::new();
        let node = tape.leaf(Tensor::zeros(&[1, 3, 3]));
        let aff = PairAffinity {
            node,
            n: 3,
            n_relations: 1,
            valid: vec![true, true, false],
        };
        // cells touching the padded position or out of range are refused
        assert!(pool_entity_pair(&mut tape, &aff, &[(0, 2)]).is_err());
        assert!(pool_entity_pair(&mut tape, &aff, &[(5, 0)]).is_err());
        assert!(pool_entity_pair(&mut tape, &aff, &[(0, 1)]).is_ok());
    }

    #[test]
    fn pooling_bracket_and_monotonicity() {
        let mut r = rng(4);
        for _ in 0..200 {
            let n = 4;
            let vals = Tensor::from_fn(&[1, n, n], || r.random_range(-5.0..5.0));
            let cells: Vec<(usize, usize)> = (0..r.random_range(1..6))
                .map(|_| (r.random_range(0..n), r.random_range(0..n)))
                .collect();
            let mut tape = Tape::new();
            let node = tape.leaf(vals.clone());
            let aff = PairAffinity {
                node,
                n,
                n_relations: 1,
                valid: vec![true; n],
            };
            let s = pool_entity_pair(&mut tape, &aff, &cells).unwrap();
            let pooled = tape.value(s[0]).item();
            let max = cells
                .iter()
                .map(|&(i, j)| vals.at3(0, i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let m = cells.len() as f64;
            assert!(max <= pooled && pooled <= max + m.ln());

            // raising one pooled cell never decreases the score
            let (ci, cj) = cells[0];
            let mut raised = vals.clone();
            raised.data_mut()[ci * n + cj] += 1.0;
            let mut tape2 = Tape::new();
            let node2 = tape2.leaf(raised);
            let aff2 = PairAffinity {
                node: node2,
                n,
                n_relations: 1,
                valid: vec![true; n],
            };
            let s2 = pool_entity_pair(&mut tape2, &aff2, &cells).unwrap();
            assert!(tape2.value(s2[0]).item() >= pooled);
        }
    }

    /// Enumerates the cells explicitly and applies plain scalar
    /// exp-sum-log, independent of the tape ops.
    fn brute_force_pool(aff: &Tensor, n: usize, r: usize, cells: &[(usize, usize)]) -> f64 {
        let sum: f64 = cells
            .iter()
            .map(|&(i, j)| aff.data()[(r * n + i) * n + j].exp())
            .sum();
        sum.ln()
    }

    #[test]
    fn pooled_scores_match_brute_force_enumeration() {
        let mut r = rng(5);
        for _ in 0..50 {
            let n = r.random_range(2..7);
            let vals = Tensor::from_fn(&[N_RELATIONS, n, n], || r.random_range(-3.0..3.0));
            let n_cells = r.random_range(1..=(n * n).min(6));
            let cells: Vec<(usize, usize)> = (0..n_cells)
                .map(|_| (r.random_range(0..n), r.random_range(0..n)))
                .collect();
            let mut tape = Tape::new();
            let node = tape.leaf(vals.clone());
            let aff = PairAffinity {
                node,
                n,
                n_relations: N_RELATIONS,
                valid: vec![true; n],
            };
            let scores = pool_entity_pair(&mut tape, &aff, &cells).unwrap();
            for (rel, s) in scores.iter().enumerate() {
                let oracle = brute_force_pool(&vals, n, rel, &cells);
                assert!((tape.value(*s).item() - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_scores_give_half_probability() {
        let pair = CandidatePair {
            chemical_id: "C1".into(),
            disease_id: "D1".into(),
            label: RelLabel::Null,
            cells: vec![(0, 1)],
        };
        let mut tape = Tape::new();
        let node = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        let aff = PairAffinity {
            node,
            n: 2,
            n_relations: 2,
            valid: vec![true; 2],
        };
        let probs = positive_probabilities(&mut tape, &aff, &[&pair]).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_checked_probability() {
        // pooled scores NULL=0, CID=ln 3 give probability 3/4
        let pair = CandidatePair {
            chemical_id: "C1".into(),
            disease_id: "D1".into(),
            label: RelLabel::Cid,
            cells: vec![(0, 0)],
        };
        let mut tape = Tape::new();
        let mut vals = Tensor::zeros(&[2, 1, 1]);
        vals.data_mut()[1] = 3.0_f64.ln();
        let node = tape.leaf(vals);
        let aff = PairAffinity {
            node,
            n: 1,
            n_relations: 2,
            valid: vec![true; 1],
        };
        let probs = positive_probabilities(&mut tape, &aff, &[&pair]).unwrap();
        assert!((probs[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn threshold_one_predicts_nothing() {
        // with finite pooled scores the softmax probability is always
        // strictly below 1, so theta = 1.0 predicts nothing
        let mut r = rng(7);
        let pairs: Vec<CandidatePair> = (0..6)
            .map(|i| CandidatePair {
                chemical_id: format!("C{i}"),
                disease_id: format!("D{i}"),
                label: RelLabel::Null,
                cells: vec![(i % 3, (i + 1) % 3)],
            })
            .collect();
        let mut tape = Tape::new();
        let node = tape.leaf(Tensor::from_fn(&[2, 3, 3], || r.random_range(-40.0..40.0)));
        let aff = PairAffinity {
            node,
            n: 3,
            n_relations: 2,
            valid: vec![true; 3],
        };
        let pair_refs: Vec<&CandidatePair> = pairs.iter().collect();
        let probs = positive_probabilities(&mut tape, &aff, &pair_refs).unwrap();
        assert!(probs.iter().all(|&p| p < 1.0));
        assert_eq!(probs.iter().filter(|&&p| p >= 1.0).count(), 0);
    }

    #[test]
    fn gradients_through_biaffine_pooling_softmax() {
        let d = 3;
        let n = 4;
        let mut r = rng(6);
        let e_head = Tensor::from_fn(&[n, d], || r.random_range(-1.0..1.0));
        let e_tail = Tensor::from_fn(&[n, d], || r.random_range(-1.0..1.0));
        let l_tensor = Tensor::from_fn(&[2, d, d], || r.random_range(-1.0..1.0));
        let l_bias = Tensor::from_fn(&[d, 2], || r.random_range(-1.0..1.0));
        let cells = vec![(0usize, 1usize), (2, 3), (1, 1)];
        let err = gradcheck::check_fn(
            &[e_head, e_tail, l_tensor, l_bias],
            gradcheck::DEFAULT_STEP,
            move |tape, ids| {
                let binding = raw_binding(ids[2], ids[3], ids[0]);
                let aff = biaffine(tape, ids[0], ids[1], &binding, &[true; 4])?;
                let scores = pool_entity_pair(tape, &aff, &cells)?;
                let logits = tape.stack_scalars(&scores, &[1, 2])?;
                tape.softmax_cross_entropy(logits, &[1], &[true])
            },
        )
        .unwrap();
        assert!(err < 1e-5, "biaffine+pooling gradient error {err}");
    }

    #[test]
    fn prediction_file_round_trip_and_sorting() {
        let rows = vec![
            PredRow {
                doc_id: "2".into(),
                chemical_id: "C1".into(),
                disease_id: "D1".into(),
                probability: 0.25,
            },
            PredRow {
                doc_id: "1".into(),
                chemical_id: "C2".into(),
                disease_id: "D2".into(),
                probability: 0.5,
            },
            PredRow {
                doc_id: "1".into(),
                chemical_id: "C1".into(),
                disease_id: "D3".into(),
                probability: 0.9,
            },
        ];
        let text = format_predictions(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("1\tC1\tD3"));
        assert!(lines[1].starts_with("1\tC2\tD2"));
        assert!(lines[2].starts_with("2\tC1\tD1"));
        let parsed = parse_predictions(&text, "test").unwrap();
        assert_eq!(parsed.len(), 3);
        assert!((parsed[0].probability - 0.9).abs() < 1e-9);
    }

    #[test]
    fn aligned_mention_cells_index_valid_positions() {
        let vocab = tokenizer::train_bpe(&["drugx causes illy"], 6).unwrap();
        let toks = vocab.encode("drugx causes illy");
        let (hf, _) = toks.align_span(0, 5).unwrap();
        let (tf, _) = toks.align_span(13, 17).unwrap();
        assert!(hf < toks.len() && tf < toks.len());
    }
}
