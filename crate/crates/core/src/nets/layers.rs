//! Feature extractor and ensemble-head building blocks.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{NetConfig, NetError, ParamGroup, ParameterRegistry};
use crate::diffcore::{Tape, Tensor, Var};
use crate::nets::params::Binder;

pub(crate) fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

pub(crate) fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

fn dense(reg: &mut ParameterRegistry, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    reg.insert(
        format!("{name}/w"),
        uniform_fan_in(&[fan_in, fan_out], fan_in, rng),
        ParamGroup::Shared,
    );
    reg.insert(format!("{name}/b"), Tensor::zeros(&[fan_out]), ParamGroup::Shared);
}

/// Registers the shared weights of one network: token MLP, attention and `K`
/// candidate blocks.
pub(crate) fn init_network(
    reg: &mut ParameterRegistry,
    cfg: &NetConfig,
    prefix: &str,
    token_in: usize,
    feature_dim: usize,
    block_out: usize,
    rng: &mut impl Rng,
) {
    let attn_in = cfg.token_dim + cfg.embed_dim;
    dense(reg, &format!("{prefix}/token1"), token_in, cfg.token_hidden, rng);
    dense(reg, &format!("{prefix}/token2"), cfg.token_hidden, cfg.token_dim, rng);
    for proj in ["q", "k", "v"] {
        reg.insert(
            format!("{prefix}/attn/w{proj}"),
            uniform_fan_in(&[attn_in, feature_dim], attn_in, rng),
            ParamGroup::Shared,
        );
    }
    dense(reg, &format!("{prefix}/attn/out"), feature_dim + attn_in, feature_dim, rng);
    for k in 0..cfg.blocks {
        dense(reg, &format!("{prefix}/block{k}/hidden"), feature_dim, cfg.block_hidden, rng);
        dense(reg, &format!("{prefix}/block{k}/out"), cfg.block_hidden, block_out, rng);
    }
}

fn linear(tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Result<Var, NetError> {
    let w = binder.get(tape, &format!("{name}/w"))?;
    let b = binder.get(tape, &format!("{name}/b"))?;
    let h = tape.matmul(x, w)?;
    Ok(tape.add_row(h, b)?)
}

/// Token layout for one forward pass: `groups` observers, each attending over
/// `tokens` tokens stored contiguously (row `g * tokens + t`).
pub(crate) struct TokenLayout<'a> {
    pub groups: usize,
    pub tokens: usize,
    /// Row of the embedding table for each token row.
    pub embed_rows: &'a [usize],
    /// Token row holding each group's own (query) token.
    pub self_rows: &'a [usize],
}

/// Token MLP, agent-embedding concatenation and multi-head self-attention.
///
/// Only the observer's own token is used as a query, so the result is one
/// feature row per group, `[groups, feature_dim]`.
pub(crate) fn extract(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &NetConfig,
    prefix: &str,
    feature_dim: usize,
    inputs: Var,
    embed_table: Var,
    layout: &TokenLayout,
) -> Result<Var, NetError> {
    let h = linear(tape, binder, &format!("{prefix}/token1"), inputs)?;
    let h = tape.relu(h)?;
    let tok = linear(tape, binder, &format!("{prefix}/token2"), h)?;
    let emb = tape.gather_rows(embed_table, layout.embed_rows)?;
    let x = tape.concat_cols(&[tok, emb])?;

    let wq = binder.get(tape, &format!("{prefix}/attn/wq"))?;
    let wk = binder.get(tape, &format!("{prefix}/attn/wk"))?;
    let wv = binder.get(tape, &format!("{prefix}/attn/wv"))?;
    let own = tape.gather_rows(x, layout.self_rows)?;
    let q = tape.matmul(own, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;

    let (g, t) = (layout.groups, layout.tokens);
    let dh = feature_dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let qh = tape.reshape(qh, &[g, 1, dh])?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let kh = tape.reshape(kh, &[g, t, dh])?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let vh = tape.reshape(vh, &[g, t, dh])?;
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.bmm(attn, vh, false)?;
        heads.push(tape.reshape(mixed, &[g, dh])?);
    }
    heads.push(own);
    let joined = tape.concat_cols(&heads)?;
    let z = linear(tape, binder, &format!("{prefix}/attn/out"), joined)?;
    Ok(tape.relu(z)?)
}

/// Selector-weighted average of the `K` candidate blocks applied to `z`.
/// `weights` is `[groups, K]` and already softmaxed.
pub(crate) fn ensemble(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &NetConfig,
    prefix: &str,
    z: Var,
    weights: Var,
) -> Result<Var, NetError> {
    let mut total: Option<Var> = None;
    for k in 0..cfg.blocks {
        let out = block(tape, binder, prefix, k, z)?;
        let w = tape.slice_cols(weights, k, 1)?;
        let weighted = tape.mul_col(out, w)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    Ok(total.expect("blocks >= 1 is validated"))
}

/// Output of candidate block `k` alone.
pub(crate) fn block(tape: &mut Tape, binder: &mut Binder, prefix: &str, k: usize, z: Var) -> Result<Var, NetError> {
    let h = linear(tape, binder, &format!("{prefix}/block{k}/hidden"), z)?;
    let h = tape.relu(h)?;
    linear(tape, binder, &format!("{prefix}/block{k}/out"), h)
}
