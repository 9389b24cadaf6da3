//! Post-norm transformer encoder forward pass on a [`Tape`].

use super::params::{BoundLayer, BoundParams};
use super::tokenizer::TokenSequence;
use super::EncoderConfig;
use crate::adapters::Plugins;
use crate::error::{Error, Result};
use crate::tensor::{concat_cols, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Additive attention bias for masked key positions. Large enough that
/// `exp` underflows to exactly zero after max-subtraction.
const MASK_BIAS: f64 = -1e30;

fn check_sequence(config: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::contract("cannot encode an empty token sequence"));
    }
    if seq.segments.len() != seq.len() || seq.valid.len() != seq.len() {
        return Err(Error::contract(
            "token sequence fields have different lengths",
        ));
    }
    if seq.len() > config.max_seq_len {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds max_seq_len {}; build it with TokenSequence::pair/single to truncate",
            seq.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary"
        )));
    }
    if !seq.valid.iter().any(|&v| v) {
        return Err(Error::contract("token sequence has no valid positions"));
    }
    Ok(())
}

/// Token, position and segment embeddings followed by layer norm.
pub fn embed<'t>(p: &BoundParams<'t>, seq: &TokenSequence) -> Result<Var<'t>> {
    let positions: Vec<usize> = (0..seq.len()).collect();
    let x = p
        .word
        .gather(&seq.ids)?
        .add(&p.position.gather(&positions)?)?
        .add(&p.segment.gather(&seq.segments)?)?;
    Ok(x.layer_norm(&p.emb_ln.0, &p.emb_ln.1, LAYER_NORM_EPS)?)
}

fn attention<'t>(
    config: &EncoderConfig,
    layer: &BoundLayer<'t>,
    x: &Var<'t>,
    key_mask: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    let q = x.matmul(&layer.query.0)?.add_row(&layer.query.1)?;
    let k = x.matmul(&layer.key.0)?.add_row(&layer.key.1)?;
    let v = x.matmul(&layer.value.0)?.add_row(&layer.value.1)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let mut scores = qh.matmul_t(&kh)?.scale(scale);
        if let Some(mask) = key_mask {
            scores = scores.add_row(mask)?;
        }
        let probs = scores.softmax(1)?;
        heads.push(probs.matmul(&vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        concat_cols(&heads)?
    };
    Ok(ctx.matmul(&layer.output.0)?.add_row(&layer.output.1)?)
}

/// Runs the encoder and returns hidden states `[len×h]`.
///
/// With plugins, each layer at or beyond `drop_first_n` routes its FFN
/// residual through the adapter stack before the output layer norm.
pub fn encode<'t>(
    config: &EncoderConfig,
    p: &BoundParams<'t>,
    seq: &TokenSequence,
    plugins: Option<&Plugins<'_, 't>>,
) -> Result<Var<'t>> {
    check_sequence(config, seq)?;
    let tape = p.word.tape();
    let mut x = embed(p, seq)?;
    if let Some(pl) = plugins {
        x = pl.apply_invertible(&x, seq)?;
    }
    let key_mask = if seq.has_padding() {
        let bias = seq
            .valid
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_BIAS })
            .collect();
        Some(tape.constant(Tensor::vector(bias)))
    } else {
        None
    };
    for (l, layer) in p.layers.iter().enumerate() {
        let a = attention(config, layer, &x, key_mask.as_ref())?;
        let x1 = x
            .add(&a)?
            .layer_norm(&layer.attn_ln.0, &layer.attn_ln.1, LAYER_NORM_EPS)?;
        let f = x1
            .matmul(&layer.ffn_in.0)?
            .add_row(&layer.ffn_in.1)?
            .gelu()?
            .matmul(&layer.ffn_out.0)?
            .add_row(&layer.ffn_out.1)?;
        let r = f.add(&x1)?;
        let h = r.layer_norm(&layer.ffn_ln.0, &layer.ffn_ln.1, LAYER_NORM_EPS)?;
        x = match plugins {
            Some(pl) if pl.is_active(l) => pl.apply(l, &h, &r, seq)?.layer_norm(
                &layer.ffn_ln.0,
                &layer.ffn_ln.1,
                LAYER_NORM_EPS,
            )?,
            _ => h,
        };
    }
    Ok(x)
}

/// Relevance logit from the scoring head on the `[CLS]` state, `[1×1]`.
pub fn ce_logit<'t>(
    config: &EncoderConfig,
    p: &BoundParams<'t>,
    seq: &TokenSequence,
    plugins: Option<&Plugins<'_, 't>>,
) -> Result<Var<'t>> {
    let hidden = encode(config, p, seq, plugins)?;
    let cls = hidden.slice_rows(0, 1)?;
    Ok(cls.matmul(&p.score.0)?.add_row(&p.score.1)?)
}

/// MLM logits `[rows.len()×vocab]` for selected positions of `hidden`.
pub fn mlm_head<'t>(
    p: &BoundParams<'t>,
    hidden: &Var<'t>,
    rows: &[usize],
    plugins: Option<&Plugins<'_, 't>>,
) -> Result<Var<'t>> {
    let x = if rows.len() == hidden.value().rows() && rows.iter().enumerate().all(|(i, &r)| i == r)
    {
        *hidden
    } else {
        let picked = rows
            .iter()
            .map(|&r| hidden.slice_rows(r, 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        crate::tensor::concat_rows(&picked)?
    };
    let mut t = x
        .matmul(&p.mlm_dense.0)?
        .add_row(&p.mlm_dense.1)?
        .gelu()?
        .layer_norm(&p.mlm_ln.0, &p.mlm_ln.1, LAYER_NORM_EPS)?;
    if let Some(pl) = plugins {
        t = pl.invert_output(&t)?;
    }
    Ok(t.matmul_t(&p.word)?.add_row(&p.mlm_decoder_bias)?)
}

/// Per-position vocabulary logits `[len×vocab]`.
pub fn mlm_logits<'t>(
    config: &EncoderConfig,
    p: &BoundParams<'t>,
    seq: &TokenSequence,
    plugins: Option<&Plugins<'_, 't>>,
) -> Result<Var<'t>> {
    let hidden = encode(config, p, seq, plugins)?;
    let rows: Vec<usize> = (0..seq.len()).collect();
    mlm_head(p, &hidden, &rows, plugins)
}

/// Mean cross-entropy of the MLM head at `positions` against `targets`.
pub fn mlm_loss<'t>(
    config: &EncoderConfig,
    p: &BoundParams<'t>,
    seq: &TokenSequence,
    positions: &[usize],
    targets: &[usize],
    plugins: Option<&Plugins<'_, 't>>,
) -> Result<Var<'t>> {
    let hidden = encode(config, p, seq, plugins)?;
    let logits = mlm_head(p, &hidden, positions, plugins)?;
    Ok(logits.cross_entropy(targets)?)
}

/// Mean of the hidden states at valid positions, `[1×h]`.
pub fn mean_pool<'t>(tape: &'t Tape, hidden: &Var<'t>, valid: &[bool]) -> Result<Var<'t>> {
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::contract("mean pooling over zero valid positions"));
    }
    let w = valid
        .iter()
        .map(|&v| if v { 1.0 / count as f64 } else { 0.0 })
        .collect::<Vec<_>>();
    let weights = tape.constant(Tensor::new(vec![1, valid.len()], w)?);
    Ok(weights.matmul(hidden)?)
}
