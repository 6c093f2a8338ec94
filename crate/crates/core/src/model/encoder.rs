//! Instruction encoder: a frozen token table with fixed sinusoidal positions,
//! one self-attention block whose projections carry low-rank adapters, and a
//! residual layer norm.

use rand::Rng;

use super::attention::multi_head_attention;
use super::params::{normal_init, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Contextual token embeddings `[L, d_text]` for one instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedding {
    tokens: Vec<usize>,
    embeddings: Tensor,
}

impl InstructionEmbedding {
    pub fn new(tokens: Vec<usize>, embeddings: Tensor) -> Result<Self> {
        let s = embeddings.shape();
        if tokens.is_empty() || s.len() != 2 || s[0] != tokens.len() {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!(
                    "expected [{}, d_text] for a non-empty token list",
                    tokens.len()
                ),
            });
        }
        Ok(Self { tokens, embeddings })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Frozen projection plus a trainable low-rank update scaled by `alpha / rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter {
    pub frozen_weight: Tensor,
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoRAAdapter {
    /// `down` is Gaussian, `up` starts at zero.
    pub fn new<R: Rng>(
        frozen_weight: Tensor,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let s = frozen_weight.shape().to_vec();
        if s.len() != 2 || rank == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("adapter needs a matrix weight and rank >= 1, got rank {rank}"),
            });
        }
        Ok(Self {
            down: normal_init(&[s[0], rank], 1.0 / (s[0] as f64).sqrt(), rng),
            up: Tensor::zeros(&[rank, s[1]]),
            frozen_weight,
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.frozen_weight.shape()[0] + self.frozen_weight.shape()[1])
    }
}

/// `x W + (alpha / r) x down up` on the tape.
pub fn lora_forward_var(
    tape: &mut Tape,
    x: Var,
    w: Var,
    down: Var,
    up: Var,
    scale: f64,
) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let low = tape.matmul(x, down)?;
    let low = tape.matmul(low, up)?;
    let low = tape.scale(low, scale)?;
    tape.add(base, low)
}

pub fn lora_forward(x: &Tensor, adapter: &LoRAAdapter) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(adapter.frozen_weight.clone());
    let d = tape.constant(adapter.down.clone());
    let u = tape.constant(adapter.up.clone());
    let out = lora_forward_var(&mut tape, xv, w, d, u, adapter.scale())?;
    Ok(tape.tensor(out))
}

/// Parameter ids of one adapted projection inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct LoraIds {
    pub weight: ParamId,
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

impl LoraIds {
    pub fn register(store: &mut ParamStore, prefix: &str, adapter: LoRAAdapter) -> Result<Self> {
        let scale = adapter.scale();
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), adapter.frozen_weight, false)?,
            down: store.add(format!("{prefix}.lora_down"), adapter.down, true)?,
            up: store.add(format!("{prefix}.lora_up"), adapter.up, true)?,
            scale,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        lora_forward_var(
            tape,
            x,
            b.var(self.weight),
            b.var(self.down),
            b.var(self.up),
            self.scale,
        )
    }

    pub fn adapter(&self, store: &ParamStore, rank: usize, alpha: f64) -> LoRAAdapter {
        LoRAAdapter {
            frozen_weight: store.get(self.weight).clone(),
            down: store.get(self.down).clone(),
            up: store.get(self.up).clone(),
            rank,
            alpha,
        }
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            data[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("finite positions")
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: usize,
    pub max_tokens: usize,
    pub dim: usize,
    pub heads: usize,
    table: ParamId,
    pos: ParamId,
    q: LoraIds,
    k: LoraIds,
    v: LoraIds,
    o: LoraIds,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        max_tokens: usize,
        dim: usize,
        heads: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(
            "enc.token_table",
            normal_init(&[vocab, dim], 1.0, rng),
            false,
        )?;
        let pos = store.add(
            "enc.positions",
            sinusoidal_positions(max_tokens, dim),
            false,
        )?;
        let std = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: &str, store: &mut ParamStore| -> Result<LoraIds> {
            let w = normal_init(&[dim, dim], std, rng);
            let adapter = LoRAAdapter::new(w, rank, alpha, rng)?;
            LoraIds::register(store, &format!("enc.{name}"), adapter)
        };
        let q = proj("q", store)?;
        let k = proj("k", store)?;
        let v = proj("v", store)?;
        let o = proj("o", store)?;
        let ln_gain = store.add("enc.ln.gain", Tensor::ones(&[dim]), false)?;
        let ln_bias = store.add("enc.ln.bias", Tensor::zeros(&[dim]), false)?;
        Ok(Self {
            vocab,
            max_tokens,
            dim,
            heads,
            table,
            pos,
            q,
            k,
            v,
            o,
            ln_gain,
            ln_bias,
        })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.max_tokens {
            return Err(Error::UnknownToken(format!(
                "instruction of {} tokens; expected 1..={}",
                tokens.len(),
                self.max_tokens
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::UnknownToken(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// `[L, dim]` contextual embeddings on the tape.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let emb = tape.gather_rows(b.var(self.table), tokens)?;
        let idx: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(b.var(self.pos), &idx)?;
        let x = tape.add(emb, pos)?;
        let q = self.q.forward(tape, b, x)?;
        let k = self.k.forward(tape, b, x)?;
        let v = self.v.forward(tape, b, x)?;
        let (att, _) = multi_head_attention(tape, q, k, v, self.heads, false)?;
        let o = self.o.forward(tape, b, att)?;
        let res = tape.add(x, o)?;
        tape.layer_norm(res, b.var(self.ln_gain), b.var(self.ln_bias))
    }

    pub fn adapters(&self, store: &ParamStore, rank: usize, alpha: f64) -> [LoRAAdapter; 4] {
        [self.q, self.k, self.v, self.o].map(|ids| ids.adapter(store, rank, alpha))
    }
}
