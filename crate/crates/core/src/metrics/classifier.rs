//! Small frozen embedder used as the backbone of FD, KL and IS.
//!
//! ```text
//! [T, F] -> conv 3x3 (1 -> 4), silu -> [T, 4F] -> linear 16, silu
//!        -> mean over frames -> linear d_e, tanh (embedding) -> linear C (logits)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{render_scene, Catalog, Envelope, EventSpec};
use crate::error::{Error, Result};
use crate::model::params::normal_init;
use crate::model::{read_params, write_params, ParamStore};
use crate::optim::{AdamHyper, OptimizerState};
use crate::rng;
use crate::tensor::{read_u32, Tape, Tensor, Var};

pub const CLASSIFIER_VERSION: u32 = 1;
pub const MIN_ACCEPTED_ACCURACY: f64 = 0.95;
const MAGIC: &[u8; 8] = b"RFMCLSF1";
const CONV_CHANNELS: usize = 4;
const HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHeader {
    pub version: u32,
    pub frames: usize,
    pub bins: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub held_out_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Std of Gaussian noise added to training scenes.
    pub noise_std: f64,
    pub held_out: usize,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 16,
            learning_rate: 1e-2,
            noise_std: 0.1,
            held_out: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceClassifier {
    header: ClassifierHeader,
    params: ParamStore,
}

/// Clean single-event scene of a random type with the dataset's event ranges.
pub fn single_event_scene(
    catalog: &Catalog,
    frames: usize,
    bins: usize,
    r: &mut ChaCha8Rng,
) -> Result<(Tensor, usize)> {
    let ty = r.gen_range(0..catalog.len());
    let duration = r.gen_range(12.min(frames)..=32.min(frames));
    let onset = r.gen_range(0..=frames - duration);
    let amp = r.gen_range(0.6..=1.0);
    let env = if r.gen_bool(0.5) {
        Envelope::Rect
    } else {
        Envelope::AttackDecay
    };
    let e = EventSpec::of_type(catalog, ty, onset, duration, amp, env)?;
    Ok((render_scene(&[e], catalog, frames, bins)?, ty))
}

impl ReferenceClassifier {
    fn init(frames: usize, bins: usize, classes: usize, seed: u64) -> Result<Self> {
        let embed_dim = classes;
        let mut r = rng::stream(seed, &[0xC1A5]);
        let mut p = ParamStore::new();
        let mut linear = |p: &mut ParamStore, name: &str, i: usize, o: usize| -> Result<()> {
            p.add(
                format!("{name}.w"),
                normal_init(&[i, o], 1.0 / (i as f64).sqrt(), &mut r),
                true,
            )?;
            p.add(format!("{name}.b"), Tensor::zeros(&[o]), true)?;
            Ok(())
        };
        linear(&mut p, "fc1", CONV_CHANNELS * bins, HIDDEN)?;
        linear(&mut p, "emb", HIDDEN, embed_dim)?;
        linear(&mut p, "head", embed_dim, classes)?;
        let mut r = rng::stream(seed, &[0xC0DE]);
        p.add(
            "conv.w",
            normal_init(&[3, 3, 1, CONV_CHANNELS], 1.0 / 3.0, &mut r),
            true,
        )?;
        p.add("conv.b", Tensor::zeros(&[CONV_CHANNELS]), true)?;
        let header = ClassifierHeader {
            version: CLASSIFIER_VERSION,
            frames,
            bins,
            classes,
            embed_dim,
            seed,
            held_out_accuracy: 0.0,
        };
        Ok(Self { header, params: p })
    }

    /// Trains on noisy single-event scenes, then measures accuracy on clean
    /// held-out ones. Fails if accuracy stays below [`MIN_ACCEPTED_ACCURACY`].
    pub fn train(
        catalog: &Catalog,
        frames: usize,
        bins: usize,
        seed: u64,
        cfg: &ClassifierTraining,
    ) -> Result<Self> {
        let mut model = Self::init(frames, bins, catalog.len(), seed)?;
        let mut opt = OptimizerState::new(&model.params, AdamHyper::default());
        let mut r = rng::stream(seed, &[0xDA7A]);
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let (clean, label) = single_event_scene(catalog, frames, bins, &mut r)?;
                let noise = rng::standard_normal(clean.shape(), &mut r);
                let x = clean.zip_map(&noise, "augment", |a, n| a + cfg.noise_std * n)?;
                let (_, logits) = model.forward(&mut tape, &|n| bound.var(n), &x)?;
                let logp = tape.log_softmax(logits)?;
                let mut onehot = Tensor::zeros(&[1, catalog.len()]);
                onehot.data_mut()[label] = -1.0 / cfg.batch as f64;
                let onehot = tape.constant(onehot);
                let picked = tape.mul(logp, onehot)?;
                losses.push(tape.sum(picked)?);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = tape.add(loss, l)?;
            }
            tape.backward(loss)?;
            let grads = model.params.collect_grads(&tape, &bound);
            opt.apply(&mut model.params, &grads, cfg.learning_rate)?;
        }
        let acc = model.accuracy(catalog, cfg.held_out, rng::derive_seed(seed, &[0x7E57]))?;
        model.header.held_out_accuracy = acc;
        if acc < MIN_ACCEPTED_ACCURACY {
            return Err(Error::Metric(format!(
                "reference classifier reached {acc:.3} held-out accuracy, below {MIN_ACCEPTED_ACCURACY}"
            )));
        }
        Ok(model)
    }

    /// Accuracy on `n` clean single-event scenes drawn from `seed`.
    pub fn accuracy(&self, catalog: &Catalog, n: usize, seed: u64) -> Result<f64> {
        let mut r = rng::stream(seed, &[]);
        let mut hits = 0;
        for _ in 0..n {
            let (x, label) =
                single_event_scene(catalog, self.header.frames, self.header.bins, &mut r)?;
            let (_, logits) = self.embed(&x)?;
            let best = logits
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            hits += usize::from(best == Some(label));
        }
        Ok(hits as f64 / n.max(1) as f64)
    }

    pub fn header(&self) -> &ClassifierHeader {
        &self.header
    }

    fn forward(
        &self,
        tape: &mut Tape,
        var: &dyn Fn(crate::model::ParamId) -> Var,
        x: &Tensor,
    ) -> Result<(Var, Var)> {
        let (t, f) = (self.header.frames, self.header.bins);
        if x.shape() != [t, f] {
            return Err(Error::shape("reference classifier", &[t, f], x.shape()));
        }
        let id = |name: &str| var(self.params.id(name).expect("registered parameter"));
        let x = tape.constant(x.reshape(&[t, f, 1])?);
        let h = tape.conv2d(x, id("conv.w"), id("conv.b"))?;
        let h = tape.silu(h)?;
        let h = tape.reshape(h, &[t, CONV_CHANNELS * f])?;
        let h = tape.matmul(h, id("fc1.w"))?;
        let h = tape.add(h, id("fc1.b"))?;
        let h = tape.silu(h)?;
        let pool = tape.constant(Tensor::full(&[1, t], 1.0 / t as f64));
        let h = tape.matmul(pool, h)?;
        let e = tape.matmul(h, id("emb.w"))?;
        let e = tape.add(e, id("emb.b"))?;
        let e = tape.tanh(e)?;
        let logits = tape.matmul(e, id("head.w"))?;
        let logits = tape.add(logits, id("head.b"))?;
        Ok((e, logits))
    }

    /// `(embedding [d_e], logits [C])` of one spectrogram.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (e, l) = self.forward(&mut tape, &|n| bound.var(n), x)?;
        Ok((
            tape.tensor(e).reshape(&[self.header.embed_dim])?,
            tape.tensor(l).reshape(&[self.header.classes])?,
        ))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        write_params(w, &self.params)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a reference classifier file".into()));
        }
        let mut header = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut header)?;
        let header: ClassifierHeader = serde_json::from_slice(&header)?;
        if header.version != CLASSIFIER_VERSION {
            return Err(Error::Format(format!(
                "classifier version {} (expected {CLASSIFIER_VERSION})",
                header.version
            )));
        }
        let params = read_params(r)?;
        let mut expected = Self::init(header.frames, header.bins, header.classes, header.seed)?;
        expected.params.load_from(&params)?;
        expected.header = header;
        Ok(expected)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
