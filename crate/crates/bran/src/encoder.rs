//! Self-attention document encoder: summed token/position embeddings
//! followed by transformer blocks. Each block applies multi-head
//! attention with a residual and layer norm, then a width-1/5/1
//! convolutional feed-forward stack, and adds the result back to the
//! block input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NodeId, ParamSet, Tape, Tensor};
use crate::{Error, Result};

/// Score assigned to masked key positions before the attention softmax.
const MASK_PENALTY: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Attention sublayer removed; blocks are convolution-only.
    CnnOnly,
    /// Middle convolution uses kernel width 1 instead of 5.
    NoWidth5,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "cnn_only" => Ok(Ablation::CnnOnly),
            "no_width5" => Ok(Ablation::NoWidth5),
            _ => Err(Error::Config(format!(
                "ablation must be full, cnn_only or no_width5, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::CnnOnly => "cnn_only",
            Ablation::NoWidth5 => "no_width5",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Embedding and model width.
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Positions past this index share one trained fallback vector.
    pub max_positions: usize,
    pub ablation: Ablation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            heads: 4,
            blocks: 2,
            max_positions: 512,
            ablation: Ablation::Full,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding size {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        4 * self.d
    }

    fn middle_width(&self) -> usize {
        match self.ablation {
            Ablation::NoWidth5 => 1,
            _ => 5,
        }
    }

    fn has_attention(&self) -> bool {
        self.ablation != Ablation::CnnOnly
    }
}

/// Uniform Glorot draw in [-limit, limit] with limit = sqrt(6/(fan_in+fan_out)).
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, || rng.random_range(-limit..limit))
}

/// Registers all encoder parameters into `params` in a fixed order.
pub fn init_params(
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d;
    let inner = cfg.inner_dim();
    params.insert("embed.token", glorot(&[vocab_size, d], vocab_size, d, rng));
    params.insert(
        "embed.pos",
        glorot(&[cfg.max_positions, d], cfg.max_positions, d, rng),
    );
    params.insert(
        "embed.pos_fallback",
        glorot(&[1, d], cfg.max_positions, d, rng),
    );
    for k in 0..cfg.blocks {
        let p = format!("block{k}");
        if cfg.has_attention() {
            for proj in ["q", "k", "v"] {
                params.insert(&format!("{p}.attn.w{proj}"), glorot(&[d, d], d, d, rng));
                params.insert(&format!("{p}.attn.b{proj}"), Tensor::zeros(&[d]));
            }
            params.insert(&format!("{p}.ln.gain"), Tensor::from_fn(&[d], || 1.0));
            params.insert(&format!("{p}.ln.bias"), Tensor::zeros(&[d]));
        }
        let mid_width = cfg.middle_width();
        params.insert(
            &format!("{p}.conv_in.kernel"),
            glorot(&[1, d, inner], d, inner, rng),
        );
        params.insert(&format!("{p}.conv_in.bias"), Tensor::zeros(&[inner]));
        params.insert(
            &format!("{p}.conv_mid.kernel"),
            glorot(&[mid_width, inner, inner], mid_width * inner, inner, rng),
        );
        params.insert(&format!("{p}.conv_mid.bias"), Tensor::zeros(&[inner]));
        params.insert(
            &format!("{p}.conv_out.kernel"),
            glorot(&[1, inner, d], inner, d, rng),
        );
        params.insert(&format!("{p}.conv_out.bias"), Tensor::zeros(&[d]));
    }
}

/// Per-head attention parameter handles of one block.
pub struct AttnIds {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    ln_gain: NodeId,
    ln_bias: NodeId,
}

/// Parameter handles of one transformer block.
pub struct BlockIds {
    attn: Option<AttnIds>,
    conv_in: (NodeId, NodeId),
    conv_mid: (NodeId, NodeId),
    conv_out: (NodeId, NodeId),
}

/// Tape handles for all encoder parameters of one forward pass.
pub struct EncoderBinding {
    token_table: NodeId,
    pos_table: NodeId,
    pos_fallback: NodeId,
    blocks: Vec<BlockIds>,
    cfg: EncoderConfig,
}

/// Resolves encoder parameter node ids by name from an already-bound set.
pub fn bind(lookup: &dyn Fn(&str) -> NodeId, cfg: &EncoderConfig) -> EncoderBinding {
    let blocks = (0..cfg.blocks)
        .map(|k| {
            let p = format!("block{k}");
            BlockIds {
                attn: cfg.has_attention().then(|| AttnIds {
                    wq: lookup(&format!("{p}.attn.wq")),
                    bq: lookup(&format!("{p}.attn.bq")),
                    wk: lookup(&format!("{p}.attn.wk")),
                    bk: lookup(&format!("{p}.attn.bk")),
                    wv: lookup(&format!("{p}.attn.wv")),
                    bv: lookup(&format!("{p}.attn.bv")),
                    ln_gain: lookup(&format!("{p}.ln.gain")),
                    ln_bias: lookup(&format!("{p}.ln.bias")),
                }),
                conv_in: (
                    lookup(&format!("{p}.conv_in.kernel")),
                    lookup(&format!("{p}.conv_in.bias")),
                ),
                conv_mid: (
                    lookup(&format!("{p}.conv_mid.kernel")),
                    lookup(&format!("{p}.conv_mid.bias")),
                ),
                conv_out: (
                    lookup(&format!("{p}.conv_out.kernel")),
                    lookup(&format!("{p}.conv_out.bias")),
                ),
            }
        })
        .collect();
    EncoderBinding {
        token_table: lookup("embed.token"),
        pos_table: lookup("embed.pos"),
        pos_fallback: lookup("embed.pos_fallback"),
        blocks,
        cfg: cfg.clone(),
    }
}

/// Dropout state for a training-mode forward pass; pass `None` to the
/// encoder to disable all dropout.
pub struct Dropout<'r> {
    pub keep: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    /// Inverted-dropout mask: 0 with probability 1-keep, else 1/keep.
    fn mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = self.keep;
        Tensor::from_fn(shape, || {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

/// Token + position embeddings: `x_i = S[id_i] + P[i]`, with the trained
/// fallback vector standing in for positions at or past `max_positions`.
pub fn embed(tape: &mut Tape, binding: &EncoderBinding, token_ids: &[usize]) -> Result<NodeId> {
    let m = binding.cfg.max_positions;
    let tok = tape.embedding_lookup(binding.token_table, token_ids)?;
    let extended = tape.concat_rows(&[binding.pos_table, binding.pos_fallback])?;
    let pos_ids: Vec<usize> = (0..token_ids.len()).map(|i| i.min(m)).collect();
    let pos = tape.embedding_lookup(extended, &pos_ids)?;
    tape.add(tok, pos)
}

/// Multi-head self-attention sublayer: relu-activated affine projections
/// to per-head queries/keys/values, scaled dot-product attention over
/// unmasked positions, head concatenation (no output projection), then a
/// residual connection and layer norm.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: NodeId,
    attn: &AttnIds,
    cfg: &EncoderConfig,
    mask: &[bool],
    dropout: &mut Option<Dropout>,
) -> Result<NodeId> {
    if mask.iter().all(|&m| !m) {
        return Err(Error::Contract(
            "attention mask excludes every position; softmax is degenerate".into(),
        ));
    }
    let n = mask.len();
    let d = cfg.d;
    let dh = d / cfg.heads;
    let scale = 1.0 / (d as f64).sqrt();

    let project = |tape: &mut Tape, w, b| -> Result<NodeId> {
        let a = tape.matmul(x, w)?;
        let a = tape.add_bias(a, b)?;
        Ok(tape.relu(a))
    };
    let q_all = project(tape, attn.wq, attn.bq)?;
    let k_all = project(tape, attn.wk, attn.bk)?;
    let v_all = project(tape, attn.wv, attn.bv)?;

    let penalty = mask.iter().any(|&m| !m).then(|| {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for (j, &keep) in mask.iter().enumerate() {
                if !keep {
                    t.data_mut()[i * n + j] = MASK_PENALTY;
                }
            }
        }
        t
    });

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = tape.slice_cols(q_all, h * dh, dh)?;
        let k = tape.slice_cols(k_all, h * dh, dh)?;
        let v = tape.slice_cols(v_all, h * dh, dh)?;
        let scores = tape.matmul_nt(q, k)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(p) = &penalty {
            scores = tape.add_const(scores, p)?;
        }
        let weights = tape.softmax(scores)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let mut o = tape.concat_cols(&heads)?;
    if let Some(dr) = dropout {
        let mask_t = dr.mask(&[n, d]);
        o = tape.mul_mask(o, &mask_t)?;
    }
    let o = zero_masked_rows(tape, o, mask, d)?;
    let res = tape.add(x, o)?;
    let normed = tape.layer_norm(res, attn.ln_gain, attn.ln_bias)?;
    zero_masked_rows(tape, normed, mask, d)
}

/// Convolutional feed-forward stack: relu(width-1) -> relu(width-5, or
/// width-1 under the no_width5 ablation) -> width-1.
pub fn feed_forward(tape: &mut Tape, x: NodeId, block: &BlockIds) -> Result<NodeId> {
    let t0 = tape.conv1d(x, block.conv_in.0, block.conv_in.1)?;
    let t0 = tape.relu(t0);
    let t1 = tape.conv1d(t0, block.conv_mid.0, block.conv_mid.1)?;
    let t1 = tape.relu(t1);
    tape.conv1d(t1, block.conv_out.0, block.conv_out.1)
}

/// Multiplies masked (padding) rows by zero so they cannot leak into
/// convolutions or residuals. No-op when every position is valid.
fn zero_masked_rows(tape: &mut Tape, x: NodeId, mask: &[bool], d: usize) -> Result<NodeId> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let mut t = Tensor::zeros(&[mask.len(), d]);
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            for v in &mut t.data_mut()[i * d..(i + 1) * d] {
                *v = 1.0;
            }
        }
    }
    tape.mul_mask(x, &t)
}

/// Full encoder forward: embeddings, then `blocks` transformer blocks
/// connected by outer residuals. Returns `[n, d]` contextual token
/// representations.
pub fn encode(
    tape: &mut Tape,
    binding: &EncoderBinding,
    token_ids: &[usize],
    mask: &[bool],
    mut dropout: Option<Dropout>,
) -> Result<NodeId> {
    let cfg = binding.cfg.clone();
    cfg.validate()?;
    if token_ids.len() != mask.len() {
        return Err(Error::Contract(format!(
            "token/mask length mismatch: {} vs {}",
            token_ids.len(),
            mask.len()
        )));
    }
    let n = token_ids.len();
    let d = cfg.d;

    let mut x = embed(tape, binding, token_ids)?;
    if let Some(dr) = &mut dropout {
        let m = dr.mask(&[n, d]);
        x = tape.mul_mask(x, &m)?;
    }
    x = zero_masked_rows(tape, x, mask, d)?;

    for block in &binding.blocks {
        let m = match &block.attn {
            Some(attn) => multi_head_attention(tape, x, attn, &cfg, mask, &mut dropout)?,
            None => x,
        };
        let mut t2 = feed_forward(tape, m, block)?;
        if let Some(dr) = &mut dropout {
            let mask_t = dr.mask(&[n, d]);
            t2 = tape.mul_mask(t2, &mask_t)?;
        }
        let t2 = zero_masked_rows(tape, t2, mask, d)?;
        x = tape.add(x, t2)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::SeedableRng;
    use std::collections::HashMap;

    fn test_cfg(d: usize, heads: usize, blocks: usize) -> EncoderConfig {
        EncoderConfig {
            d,
            heads,
            blocks,
            max_positions: 8,
            ablation: Ablation::Full,
        }
    }

    fn build(cfg: &EncoderConfig, vocab: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_params(&mut params, cfg, vocab, &mut rng);
        params
    }

    fn bind_all(tape: &mut Tape, params: &ParamSet) -> HashMap<String, NodeId> {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect()
    }

    #[test]
    fn config_rejects_zero_blocks_and_bad_heads() {
        assert!(test_cfg(8, 2, 0).validate().is_err());
        assert!(test_cfg(7, 2, 1).validate().is_err());
        assert!(test_cfg(8, 2, 1).validate().is_ok());
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let cfg = test_cfg(4, 2, 1);
        let mut params = build(&cfg, 6, 0);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        let x = embed(&mut tape, &binding, &[0, 1, 2]).unwrap();
        assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positions_past_max_share_fallback() {
        let cfg = test_cfg(4, 2, 1);
        let params = build(&cfg, 6, 1);
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        // same token everywhere, sequence running past max_positions
        let token_ids = vec![3; cfg.max_positions + 3];
        let x = embed(&mut tape, &binding, &token_ids).unwrap();
        let v = tape.value(x);
        let d = cfg.d;
        let a = v.data()[cfg.max_positions * d..(cfg.max_positions + 1) * d].to_vec();
        let b = v.data()[(cfg.max_positions + 2) * d..(cfg.max_positions + 3) * d].to_vec();
        assert_eq!(a, b);
        let p0 = v.data()[0..d].to_vec();
        assert_ne!(p0, a);
    }

    #[test]
    fn embed_hand_checked_sums() {
        let cfg = test_cfg(2, 1, 1);
        let mut params = ParamSet::new();
        params.insert(
            "embed.token",
            Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        params.insert(
            "embed.pos",
            Tensor::from_vec(&[8, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap(),
        );
        params.insert("embed.pos_fallback", Tensor::zeros(&[1, 2]));
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = EncoderBinding {
            token_table: ids["embed.token"],
            pos_table: ids["embed.pos"],
            pos_fallback: ids["embed.pos_fallback"],
            blocks: vec![],
            cfg: cfg.clone(),
        };
        let x = embed(&mut tape, &binding, &[2, 0, 1]).unwrap();
        assert_eq!(
            tape.value(x).data(),
            &[5.0, 6.0 + 0.1, 1.0 + 0.2, 2.0 + 0.3, 3.0 + 0.4, 4.0 + 0.5]
        );
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        // with one token the softmax weight is 1 regardless of parameters,
        // so the output is LN(x + per-head values concatenated)
        let cfg = test_cfg(4, 2, 1);
        let params = build(&cfg, 6, 2);
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        let x = embed(&mut tape, &binding, &[1]).unwrap();
        let attn = binding.blocks[0].attn.as_ref().unwrap();
        let out = multi_head_attention(&mut tape, x, attn, &cfg, &[true], &mut None).unwrap();

        let v = tape.matmul(x, attn.wv).unwrap();
        let v = tape.add_bias(v, attn.bv).unwrap();
        let v = tape.relu(v);
        let res = tape.add(x, v).unwrap();
        let expect = tape.layer_norm(res, attn.ln_gain, attn.ln_bias).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_identical_attention_outputs() {
        let cfg = test_cfg(6, 3, 1);
        let params = build(&cfg, 6, 3);
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        let row: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let data: Vec<f64> = row.iter().cycle().take(24).copied().collect();
        let x = tape.leaf(Tensor::from_vec(&[4, 6], data).unwrap());
        let attn = binding.blocks[0].attn.as_ref().unwrap();
        let out = multi_head_attention(&mut tape, x, attn, &cfg, &[true; 4], &mut None).unwrap();
        let v = tape.value(out);
        for r in 1..4 {
            for j in 0..6 {
                assert!((v.at2(0, j) - v.at2(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_checked_two_token_single_head_attention() {
        // weights chosen to keep projections positive, so relu is identity
        let cfg = test_cfg(2, 1, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let wq = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let wk = tape.leaf(Tensor::from_vec(&[2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap());
        let wv = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let zero2 = tape.leaf(Tensor::zeros(&[2]));
        let gain = tape.leaf(Tensor::from_fn(&[2], || 1.0));
        let bias = tape.leaf(Tensor::zeros(&[2]));
        let attn = AttnIds {
            wq,
            bq: zero2,
            wk,
            bk: zero2,
            wv,
            bv: zero2,
            ln_gain: gain,
            ln_bias: bias,
        };
        let out =
            multi_head_attention(&mut tape, x, &attn, &cfg, &[true, true], &mut None).unwrap();

        // by hand: q = x, k = 0.5x, v = x Wv = [[1,2],[3,4]]
        // row 0 scores scaled by 1/sqrt(2): [0.5, 0]/sqrt(2)
        let s = 0.5 / 2.0_f64.sqrt();
        let w00 = s.exp() / (s.exp() + 1.0);
        let o00 = w00 * 1.0 + (1.0 - w00) * 3.0;
        let o01 = w00 * 2.0 + (1.0 - w00) * 4.0;
        let r = [1.0 + o00, o01];
        let mean = (r[0] + r[1]) / 2.0;
        let var = ((r[0] - mean).powi(2) + (r[1] - mean).powi(2)) / 2.0;
        let expect0 = (r[0] - mean) / (var + 1e-10).sqrt();
        assert!((tape.value(out).at2(0, 0) - expect0).abs() < 1e-9);
    }

    #[test]
    fn zero_conv_parameters_give_zero_feed_forward() {
        let cfg = test_cfg(4, 2, 1);
        let mut params = build(&cfg, 6, 4);
        for (name, t) in params.iter_mut() {
            if name.contains("conv") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        let x = tape.leaf(Tensor::from_fn(&[3, 4], || 1.0));
        let out = feed_forward(&mut tape, x, &binding.blocks[0]).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_center_kernel_passes_middle_layer_through() {
        let inner = 8;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4, inner], || 0.7));
        let mut k = Tensor::zeros(&[5, inner, inner]);
        for c in 0..inner {
            k.data_mut()[(2 * inner + c) * inner + c] = 1.0;
        }
        let k = tape.leaf(k);
        let b = tape.leaf(Tensor::zeros(&[inner]));
        let y = tape.conv1d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn hand_checked_width5_convolution_sums() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let k = tape.leaf(Tensor::from_fn(&[5, 2, 2], || 0.1));
        let b = tape.leaf(Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        let y = tape.conv1d(x, k, b).unwrap();
        // row 0: taps -2,-1 are zero padding; rows 0..=2 contribute
        let w0: f64 = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].iter().sum();
        assert!((tape.value(y).at2(0, 0) - (0.5 + 0.1 * w0)).abs() < 1e-12);
        assert!((tape.value(y).at2(0, 1) - (-0.5 + 0.1 * w0)).abs() < 1e-12);
        // row 2 sees every input row
        let w2: f64 = (1..=8).map(f64::from).sum();
        assert!((tape.value(y).at2(2, 0) - (0.5 + 0.1 * w2)).abs() < 1e-12);
    }

    #[test]
    fn zero_block_parameters_leave_embeddings_unchanged() {
        let cfg = test_cfg(4, 2, 2);
        let mut params = build(&cfg, 6, 5);
        for (name, t) in params.iter_mut() {
            if name.starts_with("block") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        let token_ids = [0usize, 2, 4];
        let embedded = embed(&mut tape, &binding, &token_ids).unwrap();
        let out = encode(&mut tape, &binding, &token_ids, &[true; 3], None).unwrap();
        assert!(tape.value(out).is_finite());
        for (a, b) in tape
            .value(out)
            .data()
            .iter()
            .zip(tape.value(embedded).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_rows_do_not_change_real_tokens() {
        let cfg = test_cfg(8, 2, 2);
        let params = build(&cfg, 10, 6);
        let run = |token_ids: &[usize], mask: &[bool]| {
            let mut tape = Tape::new();
            let ids = bind_all(&mut tape, &params);
            let binding = bind(&|n: &str| ids[n], &cfg);
            let out = encode(&mut tape, &binding, token_ids, mask, None).unwrap();
            tape.value(out).clone()
        };
        let base = run(&[2, 3, 4, 5], &[true; 4]);
        let padded = run(
            &[2, 3, 4, 5, 1, 1, 1],
            &[true, true, true, true, false, false, false],
        );
        for i in 0..4 {
            for j in 0..8 {
                assert!(
                    (base.at2(i, j) - padded.at2(i, j)).abs() < 1e-10,
                    "padding leaked into row {i}"
                );
            }
        }
    }

    #[test]
    fn permuting_tokens_changes_outputs() {
        let cfg = test_cfg(8, 2, 1);
        let params = build(&cfg, 10, 7);
        let run = |token_ids: &[usize]| {
            let mut tape = Tape::new();
            let ids = bind_all(&mut tape, &params);
            let binding = bind(&|n: &str| ids[n], &cfg);
            let out = encode(&mut tape, &binding, token_ids, &[true; 4], None).unwrap();
            tape.value(out).clone()
        };
        let a = run(&[2, 3, 4, 5]);
        let b = run(&[5, 4, 3, 2]);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn all_false_mask_is_degenerate() {
        let cfg = test_cfg(4, 2, 1);
        let params = build(&cfg, 6, 8);
        let mut tape = Tape::new();
        let ids = bind_all(&mut tape, &params);
        let binding = bind(&|n: &str| ids[n], &cfg);
        let err = encode(&mut tape, &binding, &[1, 2], &[false, false], None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn ablations_preserve_output_shape_and_shrink_params() {
        let vocab = 10;
        let count = |ablation| {
            let cfg = EncoderConfig {
                ablation,
                ..test_cfg(8, 2, 2)
            };
            let params = build(&cfg, vocab, 9);
            let mut tape = Tape::new();
            let ids = bind_all(&mut tape, &params);
            let binding = bind(&|n: &str| ids[n], &cfg);
            let out = encode(&mut tape, &binding, &[1, 2, 3], &[true; 3], None).unwrap();
            assert_eq!(tape.value(out).shape(), &[3, 8]);
            params.total_scalars()
        };
        let d = 8usize;
        let full = count(Ablation::Full);
        let cnn = count(Ablation::CnnOnly);
        let no5 = count(Ablation::NoWidth5);
        // attention removal drops q/k/v weights+biases and the layer norm
        assert_eq!(full - cnn, 2 * (3 * (d * d + d) + 2 * d));
        // width-1 middle kernel drops 4 of the 5 taps
        let inner = 4 * d;
        assert_eq!(full - no5, 2 * (4 * inner * inner));
    }

    /// Straight-line reimplementation of the encoder forward pass with
    /// plain nested loops, independent of the tape ops.
    #[allow(clippy::needless_range_loop)]
    fn straight_line_forward(
        params: &ParamSet,
        cfg: &EncoderConfig,
        token_ids: &[usize],
    ) -> Vec<Vec<f64>> {
        let d = cfg.d;
        let n = token_ids.len();
        let get = |name: &str| params.get(name);
        let mut x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let tok = get("embed.token");
                let pos = if i < cfg.max_positions {
                    get("embed.pos").data()[i * d..(i + 1) * d].to_vec()
                } else {
                    get("embed.pos_fallback").data().to_vec()
                };
                (0..d)
                    .map(|j| tok.data()[token_ids[i] * d + j] + pos[j])
                    .collect()
            })
            .collect();

        for k in 0..cfg.blocks {
            let p = format!("block{k}");
            let m_rows: Vec<Vec<f64>> = if cfg.ablation == Ablation::CnnOnly {
                x.clone()
            } else {
                let dh = d / cfg.heads;
                let proj = |w: &str, b: &str| -> Vec<Vec<f64>> {
                    let wt = get(&format!("{p}.attn.{w}"));
                    let bt = get(&format!("{p}.attn.{b}"));
                    x.iter()
                        .map(|row| {
                            (0..d)
                                .map(|j| {
                                    let mut acc = bt.data()[j];
                                    for (i, &xv) in row.iter().enumerate() {
                                        acc += xv * wt.data()[i * d + j];
                                    }
                                    acc.max(0.0)
                                })
                                .collect()
                        })
                        .collect()
                };
                let q = proj("wq", "bq");
                let kk = proj("wk", "bk");
                let v = proj("wv", "bv");
                let mut concat = vec![vec![0.0; d]; n];
                for h in 0..cfg.heads {
                    for i in 0..n {
                        let mut scores: Vec<f64> = (0..n)
                            .map(|j| {
                                (0..dh)
                                    .map(|c| q[i][h * dh + c] * kk[j][h * dh + c])
                                    .sum::<f64>()
                                    / (d as f64).sqrt()
                            })
                            .collect();
                        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        for s in scores.iter_mut() {
                            *s /= z;
                        }
                        for c in 0..dh {
                            concat[i][h * dh + c] =
                                (0..n).map(|j| scores[j] * v[j][h * dh + c]).sum();
                        }
                    }
                }
                let gain = get(&format!("{p}.ln.gain"));
                let bias = get(&format!("{p}.ln.bias"));
                (0..n)
                    .map(|i| {
                        let row: Vec<f64> = (0..d).map(|j| x[i][j] + concat[i][j]).collect();
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + 1e-10).sqrt();
                        (0..d)
                            .map(|j| (row[j] - mean) * inv * gain.data()[j] + bias.data()[j])
                            .collect()
                    })
                    .collect()
            };

            let conv =
                |input: &[Vec<f64>], kernel: &Tensor, bias: &Tensor, relu: bool| -> Vec<Vec<f64>> {
                    let w = kernel.shape()[0];
                    let cin = kernel.shape()[1];
                    let cout = kernel.shape()[2];
                    let pad = (w - 1) / 2;
                    (0..input.len())
                        .map(|i| {
                            (0..cout)
                                .map(|co| {
                                    let mut acc = bias.data()[co];
                                    for t in 0..w {
                                        let s = i as isize + t as isize - pad as isize;
                                        if s < 0 || s as usize >= input.len() {
                                            continue;
                                        }
                                        for ci in 0..cin {
                                            acc += input[s as usize][ci]
                                                * kernel.data()[(t * cin + ci) * cout + co];
                                        }
                                    }
                                    if relu {
                                        acc.max(0.0)
                                    } else {
                                        acc
                                    }
                                })
                                .collect()
                        })
                        .collect()
                };
            let t0 = conv(
                &m_rows,
                get(&format!("{p}.conv_in.kernel")),
                get(&format!("{p}.conv_in.bias")),
                true,
            );
            let t1 = conv(
                &t0,
                get(&format!("{p}.conv_mid.kernel")),
                get(&format!("{p}.conv_mid.bias")),
                true,
            );
            let t2 = conv(
                &t1,
                get(&format!("{p}.conv_out.kernel")),
                get(&format!("{p}.conv_out.bias")),
                false,
            );
            for i in 0..n {
                for j in 0..d {
                    x[i][j] += t2[i][j];
                }
            }
        }
        x
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_independent_straight_line_oracle() {
        for ablation in [Ablation::Full, Ablation::CnnOnly, Ablation::NoWidth5] {
            let cfg = EncoderConfig {
                ablation,
                ..test_cfg(6, 2, 2)
            };
            let params = build(&cfg, 9, 11);
            let token_ids = [1usize, 4, 7, 2, 8, 0, 3];
            let mut tape = Tape::new();
            let ids = bind_all(&mut tape, &params);
            let binding = bind(&|n: &str| ids[n], &cfg);
            let out = encode(&mut tape, &binding, &token_ids, &[true; 7], None).unwrap();
            let oracle = straight_line_forward(&params, &cfg, &token_ids);
            for i in 0..7 {
                for j in 0..6 {
                    assert!(
                        (tape.value(out).at2(i, j) - oracle[i][j]).abs() < 1e-12,
                        "mismatch at ({i},{j}) under {ablation}"
                    );
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            d: 8,
            heads: 2,
            blocks: 1,
            max_positions: 8,
            ablation: Ablation::Full,
        };
        let params = build(&cfg, 12, 13);
        let token_ids: Vec<usize> = vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
        let n = token_ids.len();

        let analytic = {
            let mut tape = Tape::new();
            let mut bound = Vec::new();
            let ids: HashMap<String, NodeId> = params
                .iter()
                .map(|(name, t)| {
                    let id = tape.leaf(t.clone());
                    bound.push((name.to_string(), id));
                    (name.to_string(), id)
                })
                .collect();
            let binding = bind(&|n: &str| ids[n], &cfg);
            let out = encode(&mut tape, &binding, &token_ids, &vec![true; n], None).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            bound
                .into_iter()
                .map(|(name, id)| {
                    let g = grads
                        .get(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(params.get(&name).shape()));
                    (name, g)
                })
                .collect::<HashMap<_, _>>()
        };

        let loss_fn = |p: &ParamSet| -> crate::Result<f64> {
            let mut tape = Tape::new();
            let ids: HashMap<String, NodeId> = p
                .iter()
                .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
                .collect();
            let binding = bind(&|n: &str| ids[n], &cfg);
            let out = encode(&mut tape, &binding, &token_ids, &vec![true; n], None)?;
            let sq = tape.mul(out, out)?;
            let loss = tape.sum(sq);
            Ok(tape.value(loss).item())
        };

        let report =
            gradcheck::check_params(&params, &analytic, gradcheck::DEFAULT_STEP, loss_fn).unwrap();
        for (name, err) in report {
            assert!(err < 1e-5, "encoder gradient error {err} in {name}");
        }
    }
}
