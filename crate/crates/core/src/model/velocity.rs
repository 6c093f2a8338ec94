//! Conditional velocity network over a `[frames, bins]` latent.
//!
//! ```text
//! [T, F, 2]  conv 3x3 -> c0, + time, + learned frequency embedding   (level 0, skip s0)
//!            2x2 patch merge -> c1, conv 3x3                         (level 1, skip s1)
//!            2x2 patch merge -> d_model                              (bottleneck)
//!            cross-attention, MLP
//!            2x2 patch split -> c1, concat s1, cross-attention, conv (decoder level 1)
//!            2x2 patch split -> c0, concat s0                        (decoder level 0)
//!            zero-initialised 1x1 projection -> [T, F]
//! ```
//!
//! All grids are channels-last, and the time embedding is added to each block.

use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionRecord, CrossAttention};
use super::encoder::{InstructionEmbedding, TextEncoder};
use super::params::{normal_init, Bound, ParamId, ParamStore};
use super::ModelConfig;
use crate::data::instruction::NULL;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register(
        store: &mut ParamStore,
        name: &str,
        i: usize,
        o: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(
                format!("{name}.w"),
                normal_init(&[i, o], 1.0 / (i as f64).sqrt(), rng),
                true,
            )?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[o]), true)?,
        })
    }

    fn zero(store: &mut ParamStore, name: &str, i: usize, o: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[i, o]), true)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[o]), true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn register(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = 1.0 / ((9 * cin) as f64).sqrt();
        Ok(Self {
            w: store.add(
                format!("{name}.w"),
                normal_init(&[3, 3, cin, cout], std, rng),
                true,
            )?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d]), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    time1: Linear,
    time2: Linear,
    /// Per-block projections of the time embedding: level 0, level 1,
    /// bottleneck, decoder level 1, decoder level 0.
    time_proj: [Linear; 5],
    freq_emb: ParamId,
    conv0a: Conv,
    conv0b: Conv,
    down1: Linear,
    conv1: Conv,
    down2: Linear,
    norm_attn0: Norm,
    attn0: CrossAttention,
    norm_mlp: Norm,
    mlp1: Linear,
    mlp2: Linear,
    up2: Linear,
    fuse1: Linear,
    norm_attn1: Norm,
    attn1: CrossAttention,
    conv_dec1: Conv,
    up1: Linear,
    fuse0: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct VelocityModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: TextEncoder,
    net: Backbone,
}

/// `[H, W, C] -> [H/2 * W/2, 4C]`, gathering each 2x2 block into one row.
fn patch_merge(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let p = tape.permute(r, &[0, 2, 1, 3, 4])?;
    tape.reshape(p, &[h / 2 * (w / 2), 4 * c])
}

/// Inverse of [`patch_merge`]: `[H * W, 4C] -> [2H, 2W, C]`.
fn patch_split(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(x)[1] / 4;
    let r = tape.reshape(x, &[h, w, 2, 2, c])?;
    let p = tape.permute(r, &[0, 2, 1, 3, 4])?;
    tape.reshape(p, &[2 * h, 2 * w, c])
}

/// Sinusoidal features of `t` scaled to `[0, 1000]`.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.push((1000.0 * t * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.push((1000.0 * t * freq).cos());
    }
    Tensor::new(vec![1, dim], data).expect("finite time features")
}

impl VelocityModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut enc_rng = rng::stream(config.init_seed, &[0xE5C0]);
        let encoder = TextEncoder::register(
            &mut store,
            config.vocab,
            config.max_tokens,
            config.d_text,
            config.heads,
            config.lora_rank,
            config.lora_alpha,
            &mut enc_rng,
        )?;
        let r = &mut rng::stream(config.init_seed, &[0xBB0E]);
        let ModelConfig {
            c0,
            c1,
            d_model: d,
            d_text,
            heads,
            time_features: tf,
            bins,
            ..
        } = config;
        let s = &mut store;
        let net = Backbone {
            time1: Linear::register(s, "time.fc1", tf, d, r)?,
            time2: Linear::register(s, "time.fc2", d, d, r)?,
            time_proj: [
                Linear::register(s, "time.level0", d, c0, r)?,
                Linear::register(s, "time.level1", d, c1, r)?,
                Linear::register(s, "time.mid", d, d, r)?,
                Linear::register(s, "time.dec1", d, c1, r)?,
                Linear::register(s, "time.dec0", d, c0, r)?,
            ],
            freq_emb: s.add("level0.freq_emb", normal_init(&[bins, c0], 0.1, r), true)?,
            conv0a: Conv::register(s, "level0.conv_a", 2, c0, r)?,
            conv0b: Conv::register(s, "level0.conv_b", c0, c0, r)?,
            down1: Linear::register(s, "level1.merge", 4 * c0, c1, r)?,
            conv1: Conv::register(s, "level1.conv", c1, c1, r)?,
            down2: Linear::register(s, "mid.merge", 4 * c1, d, r)?,
            norm_attn0: Norm::register(s, "mid.attn_norm", d)?,
            attn0: CrossAttention::register(s, "mid.attn", d, d_text, d, heads, r)?,
            norm_mlp: Norm::register(s, "mid.mlp_norm", d)?,
            mlp1: Linear::register(s, "mid.mlp1", d, 2 * d, r)?,
            mlp2: Linear::register(s, "mid.mlp2", 2 * d, d, r)?,
            up2: Linear::register(s, "dec1.split", d, 4 * c1, r)?,
            fuse1: Linear::register(s, "dec1.fuse", 2 * c1, c1, r)?,
            norm_attn1: Norm::register(s, "dec1.attn_norm", c1)?,
            attn1: CrossAttention::register(s, "dec1.attn", c1, d_text, d, heads, r)?,
            conv_dec1: Conv::register(s, "dec1.conv", c1, c1, r)?,
            up1: Linear::register(s, "dec0.split", c1, 4 * c0, r)?,
            fuse0: Linear::register(s, "dec0.fuse", 2 * c0, c0, r)?,
            out: Linear::zero(s, "out", c0, 1)?,
        };
        Ok(Self {
            config,
            params: store,
            encoder,
            net,
        })
    }

    /// Rebuilds the architecture for `config` and loads `params` into it.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable scalars inside the instruction encoder's adapters.
    pub fn lora_param_count(&self) -> usize {
        self.encoder
            .adapters(&self.params, self.config.lora_rank, self.config.lora_alpha)
            .iter()
            .map(|a| a.param_count())
            .sum()
    }

    pub fn encoder_adapters(&self) -> [super::encoder::LoRAAdapter; 4] {
        self.encoder
            .adapters(&self.params, self.config.lora_rank, self.config.lora_alpha)
    }

    pub fn encode_var(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        self.encoder.forward(tape, p, tokens)
    }

    pub fn encode_instruction(&self, tokens: &[usize]) -> Result<InstructionEmbedding> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = self.encode_var(&mut tape, &p, tokens)?;
        InstructionEmbedding::new(tokens.to_vec(), tape.tensor(e))
    }

    /// The null-instruction embedding used for the unconditional branch.
    pub fn drop_condition(
        &self,
        _instruction: &InstructionEmbedding,
    ) -> Result<InstructionEmbedding> {
        self.encode_instruction(&[NULL])
    }

    fn check_latent(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        let want = [self.config.frames, self.config.bins];
        if shape != want {
            return Err(Error::shape(op, &want, shape));
        }
        Ok(())
    }

    /// Velocity for `x_t` conditioned on the source latent and the instruction
    /// tokens embedded as `text [L, d_text]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: Var,
        source: Var,
        t: f64,
        text: Var,
        record: bool,
    ) -> Result<(Var, Vec<AttentionRecord>)> {
        self.check_latent("predict_velocity", tape.shape(x_t))?;
        self.check_latent("predict_velocity source", tape.shape(source))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange {
                what: "t",
                detail: format!("{t} outside [0, 1]"),
            });
        }
        let n = &self.net;
        let ModelConfig {
            frames: h,
            bins: w,
            c0,
            c1,
            ..
        } = self.config;
        let mut records = Vec::new();

        let tf = tape.constant(time_features(t, self.config.time_features));
        let te = n.time1.forward(tape, p, tf)?;
        let te = tape.silu(te)?;
        let te = n.time2.forward(tape, p, te)?;
        let te = tape.silu(te)?;
        let mut temb = Vec::with_capacity(5);
        for proj in &n.time_proj {
            let v = proj.forward(tape, p, te)?;
            let width = tape.shape(v)[1];
            temb.push(tape.reshape(v, &[width])?);
        }

        let a = tape.reshape(x_t, &[h, w, 1])?;
        let b = tape.reshape(source, &[h, w, 1])?;
        let inp = tape.concat_last(&[a, b])?;
        let x = n.conv0a.forward(tape, p, inp)?;
        let x = tape.add(x, p.var(n.freq_emb))?;
        let x = tape.add(x, temb[0])?;
        let x = tape.silu(x)?;
        let x = n.conv0b.forward(tape, p, x)?;
        let s0 = tape.silu(x)?;

        let m = patch_merge(tape, s0)?;
        let m = n.down1.forward(tape, p, m)?;
        let m = tape.add(m, temb[1])?;
        let m = tape.silu(m)?;
        let m = tape.reshape(m, &[h / 2, w / 2, c1])?;
        let m = n.conv1.forward(tape, p, m)?;
        let s1 = tape.silu(m)?;

        let z = patch_merge(tape, s1)?;
        let z = n.down2.forward(tape, p, z)?;
        let z = tape.add(z, temb[2])?;
        let z = tape.silu(z)?;
        let zn = n.norm_attn0.forward(tape, p, z)?;
        let (att, wts) = n.attn0.forward(tape, p, zn, text, record)?;
        if let Some(heads) = wts {
            records.push(AttentionRecord {
                layer: 0,
                grid: (h / 4, w / 4),
                t,
                heads,
            });
        }
        let z = tape.add(z, att)?;
        let zn = n.norm_mlp.forward(tape, p, z)?;
        let f = n.mlp1.forward(tape, p, zn)?;
        let f = tape.silu(f)?;
        let f = n.mlp2.forward(tape, p, f)?;
        let z = tape.add(z, f)?;

        let u = n.up2.forward(tape, p, z)?;
        let u = patch_split(tape, u, h / 4, w / 4)?;
        let u = tape.concat_last(&[u, s1])?;
        let u = tape.reshape(u, &[h / 2 * (w / 2), 2 * c1])?;
        let u = n.fuse1.forward(tape, p, u)?;
        let u = tape.add(u, temb[3])?;
        let u = tape.silu(u)?;
        let un = n.norm_attn1.forward(tape, p, u)?;
        let (att, wts) = n.attn1.forward(tape, p, un, text, record)?;
        if let Some(heads) = wts {
            records.push(AttentionRecord {
                layer: 1,
                grid: (h / 2, w / 2),
                t,
                heads,
            });
        }
        let u = tape.add(u, att)?;
        let u = tape.reshape(u, &[h / 2, w / 2, c1])?;
        let u = n.conv_dec1.forward(tape, p, u)?;
        let u = tape.silu(u)?;

        let u = tape.reshape(u, &[h / 2 * (w / 2), c1])?;
        let v = n.up1.forward(tape, p, u)?;
        let v = patch_split(tape, v, h / 2, w / 2)?;
        let v = tape.concat_last(&[v, s0])?;
        let v = tape.reshape(v, &[h * w, 2 * c0])?;
        let v = n.fuse0.forward(tape, p, v)?;
        let v = tape.add(v, temb[4])?;
        let v = tape.silu(v)?;
        let out = n.out.forward(tape, p, v)?;
        Ok((tape.reshape(out, &[h, w])?, records))
    }

    pub fn predict_velocity(
        &self,
        x_t: &Tensor,
        source: &Tensor,
        t: f64,
        instruction: &InstructionEmbedding,
        record: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        if x_t.shape() != source.shape() {
            return Err(Error::shape(
                "predict_velocity",
                x_t.shape(),
                source.shape(),
            ));
        }
        let e = instruction.embeddings();
        if e.shape()[1] != self.config.d_text {
            return Err(Error::shape(
                "instruction embedding",
                &[e.shape()[0], self.config.d_text],
                e.shape(),
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let s = tape.constant(source.clone());
        let text = tape.constant(e.clone());
        let (v, rec) = self.forward(&mut tape, &p, x, s, t, text, record)?;
        Ok((tape.tensor(v), rec))
    }
}

impl VelocityField for VelocityModel {
    fn velocity(
        &self,
        x_t: &Tensor,
        source: &Tensor,
        t: f64,
        instruction: &InstructionEmbedding,
        record_attention: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        self.predict_velocity(x_t, source, t, instruction, record_attention)
    }

    fn null_instruction(&self) -> Result<InstructionEmbedding> {
        self.encode_instruction(&[NULL])
    }
}
