use rand::Rng;

use super::params::{normal_init, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Cross-attention weights captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Index of the attention layer, counted from the bottleneck outward.
    pub layer: usize,
    /// Query grid `(rows, cols)` in time-major order; rows cover frames.
    pub grid: (usize, usize),
    pub t: f64,
    /// One `[rows * cols, L]` weight matrix per head.
    pub heads: Vec<Tensor>,
}

impl AttentionRecord {
    pub fn tokens(&self) -> usize {
        self.heads.first().map_or(0, |h| h.shape()[1])
    }

    /// `[Q, L]` average over heads.
    pub fn mean_over_heads(&self) -> Tensor {
        let n = self.heads.len() as f64;
        let mut acc = Tensor::zeros(self.heads[0].shape());
        for h in &self.heads {
            acc.data_mut()
                .iter_mut()
                .zip(h.data())
                .for_each(|(a, b)| *a += b / n);
        }
        acc
    }
}

/// Scaled dot-product attention of `q [Q, d]` over `k, v [L, d]`, split into
/// `heads` column groups. Returns `[Q, d]` and, if asked, each head's weights.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    record: bool,
) -> Result<(Var, Option<Vec<Tensor>>)> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if heads == 0
        || !d.is_multiple_of(heads)
        || tape.shape(k) != tape.shape(v)
        || tape.shape(k).last() != Some(&d)
    {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = record.then(Vec::new);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * dh, dh)?,
                tape.slice_last(k, h * dh, dh)?,
                tape.slice_last(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax(logits, 1)?;
        if let Some(w) = weights.as_mut() {
            w.push(tape.tensor(a));
        }
        outs.push(tape.matmul(a, vh)?);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_last(&outs)?
    };
    Ok((out, weights))
}

/// Projections of one cross-attention layer from `d_query` audio features and
/// `d_text` instruction features through a `d_attn` space.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub heads: usize,
}

impl CrossAttention {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_query: usize,
        d_text: usize,
        d_attn: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |name: &str, i: usize, o: usize, rng: &mut R| {
            store.add(
                format!("{prefix}.{name}"),
                normal_init(&[i, o], 1.0 / (i as f64).sqrt(), rng),
                true,
            )
        };
        Ok(Self {
            q: w("q", d_query, d_attn, rng)?,
            k: w("k", d_text, d_attn, rng)?,
            v: w("v", d_text, d_attn, rng)?,
            o: w("o", d_attn, d_query, rng)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        audio: Var,
        text: Var,
        record: bool,
    ) -> Result<(Var, Option<Vec<Tensor>>)> {
        cross_attention(
            tape,
            audio,
            text,
            [b.var(self.q), b.var(self.k), b.var(self.v), b.var(self.o)],
            self.heads,
            record,
        )
    }
}

/// Audio queries `[Q, d_query]` attend over instruction tokens `[L, d_text]`;
/// `proj` holds the query, key, value, and output matrices.
pub fn cross_attention(
    tape: &mut Tape,
    audio: Var,
    text: Var,
    proj: [Var; 4],
    heads: usize,
    record: bool,
) -> Result<(Var, Option<Vec<Tensor>>)> {
    let [wq, wk, wv, wo] = proj;
    let q = tape.matmul(audio, wq)?;
    let k = tape.matmul(text, wk)?;
    let v = tape.matmul(text, wv)?;
    let (att, weights) = multi_head_attention(tape, q, k, v, heads, record)?;
    Ok((tape.matmul(att, wo)?, weights))
}
