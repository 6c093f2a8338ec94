//! Training, validation, evaluation and the start-time ablation.

pub mod ablate;
pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Catalog, Dataset, DetectorConfig, EditTriplet};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, interpolate, sample, target_velocity, SamplerConfig};
use crate::metrics::{
    self, clap_alignment, ClassifierTraining, MetricReport, ReferenceClassifier, Scored,
};
use crate::model::VelocityModel;
use crate::optim::{AdamHyper, OptimizerState};
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub use ablate::{ablate_tstart, Ablation, AblationRow, SeedRow};
pub use checkpoint::{Checkpoint, CheckpointHeader, EpochRecord, CHECKPOINT_VERSION};
pub use config::{EvalConfig, RunConfig, TrainConfig};

const EPOCH_STREAM: u64 = 0xE90C;
const VALIDATION_STREAM: u64 = 0x7A11;
const EVAL_STREAM: u64 = 0xE7A1;
const SUBSET_STREAM: u64 = 0x5B5E;

/// One Adam update on the mean flow-matching loss of `batch`. Returns the loss
/// before the update.
pub fn train_step(
    model: &mut VelocityModel,
    batch: &[&EditTriplet],
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let sigma = cfg.sampler.sigma_min;
    let null = [crate::data::instruction::NULL];
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let mut total = None;
    for item in batch {
        let x0 = item.edited.spectrogram();
        let t: f64 = rng.gen();
        let eps = rng::standard_normal(x0.shape(), rng);
        let drop = rng.gen_bool(cfg.p_uncond);
        let x_t = tape.constant(interpolate(x0, &eps, t, sigma)?);
        let target = tape.constant(target_velocity(x0, &eps, sigma)?);
        let source = tape.constant(item.input.spectrogram().clone());
        let tokens: &[usize] = if drop {
            &null
        } else {
            &item.instruction_tokens
        };
        let text = model.encode_var(&mut tape, &p, tokens)?;
        let (v, _) = model.forward(&mut tape, &p, x_t, source, t, text, false)?;
        let l = fm_loss(&mut tape, v, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        let ids: Vec<String> = batch
            .iter()
            .map(|b| format!("{}:{:?}", b.base_id, b.task))
            .collect();
        return Err(Error::NonFiniteLoss {
            loss: value,
            batch: ids.join(","),
        });
    }
    tape.backward(loss)?;
    let grads = model.params().collect_grads(&tape, &p);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        let ids: Vec<String> = batch
            .iter()
            .map(|b| format!("{}:{:?}", b.base_id, b.task))
            .collect();
        return Err(Error::NonFiniteLoss {
            loss: value,
            batch: format!("non-finite gradient; {}", ids.join(",")),
        });
    }
    opt.apply(model.params_mut(), &grads, cfg.learning_rate)?;
    Ok(value)
}

/// Produces an edited spectrogram for a triplet's input and instruction.
pub trait Editor: Sync {
    fn edit(&self, item: &EditTriplet, sampler: &SamplerConfig, seed: u64) -> Result<Tensor>;
}

/// Samples the learned flow from the triplet's input.
pub struct ModelEditor<'a>(pub &'a VelocityModel);

impl Editor for ModelEditor<'_> {
    fn edit(&self, item: &EditTriplet, sampler: &SamplerConfig, seed: u64) -> Result<Tensor> {
        let instr = self.0.encode_instruction(&item.instruction_tokens)?;
        sample(self.0, item.input.spectrogram(), &instr, sampler, seed)
    }
}

/// Returns the ground-truth edit.
pub struct OracleEditor;

impl Editor for OracleEditor {
    fn edit(&self, item: &EditTriplet, _: &SamplerConfig, _: u64) -> Result<Tensor> {
        Ok(item.edited.spectrogram().clone())
    }
}

/// `min(n, len)` indices drawn without replacement, in ascending order.
pub fn subset_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, &[SUBSET_STREAM]));
    idx.truncate(n.min(len));
    idx.sort_unstable();
    idx
}

fn edit_all(
    editor: &dyn Editor,
    items: &[EditTriplet],
    idx: &[usize],
    sampler: &SamplerConfig,
    seed: u64,
    stream: u64,
) -> Result<Vec<Tensor>> {
    idx.par_iter()
        .map(|&i| {
            editor.edit(
                &items[i],
                sampler,
                rng::derive_seed(seed, &[stream, i as u64]),
            )
        })
        .collect()
}

/// Mean proxy-CLAP of edits on a seeded subset of `items`.
pub fn validate(
    editor: &dyn Editor,
    items: &[EditTriplet],
    catalog: &Catalog,
    detector: &DetectorConfig,
    sampler: &SamplerConfig,
    subset_size: usize,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let idx = subset_indices(items.len(), subset_size, seed);
    let outputs = edit_all(editor, items, &idx, sampler, seed, VALIDATION_STREAM)?;
    let total: f64 = idx
        .iter()
        .zip(&outputs)
        .map(|(&i, out)| clap_alignment(out, &items[i].target_caption_events, catalog, detector))
        .sum();
    Ok(total / idx.len() as f64)
}

/// Full metric suite on a seeded subset of `items`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    editor: &dyn Editor,
    items: &[EditTriplet],
    classifier: &ReferenceClassifier,
    catalog: &Catalog,
    detector: &DetectorConfig,
    sampler: &SamplerConfig,
    subset_size: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    let idx = subset_indices(items.len(), subset_size, seed);
    let outputs = edit_all(editor, items, &idx, sampler, seed, EVAL_STREAM)?;
    let scored: Vec<Scored<'_>> = idx
        .iter()
        .zip(&outputs)
        .map(|(&i, out)| Scored {
            output: out,
            reference: items[i].edited.spectrogram(),
            caption: &items[i].target_caption_events,
        })
        .collect();
    metrics::evaluate(&scored, classifier, catalog, detector, config_hash)
}

/// Loads `path` if it holds a classifier trained with `seed` for this latent
/// size; otherwise trains one and stores it there.
pub fn reference_classifier(
    path: &Path,
    catalog: &Catalog,
    frames: usize,
    bins: usize,
    seed: u64,
    training: &ClassifierTraining,
) -> Result<ReferenceClassifier> {
    if path.exists() {
        let c = ReferenceClassifier::load(path)?;
        let h = c.header();
        if (h.frames, h.bins, h.classes, h.seed) == (frames, bins, catalog.len(), seed) {
            return Ok(c);
        }
    }
    let c = ReferenceClassifier::train(catalog, frames, bins, seed, training)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    c.save(path)?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub best_score: f64,
    pub history: Vec<EpochRecord>,
}

pub fn write_metrics_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,loss,val_clap")?;
    for r in history {
        writeln!(w, "{},{},{}", r.epoch, r.loss, r.val_clap)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg.train.epochs` epochs under `workdir`, validating after each one
/// and keeping `best.ckpt` (highest validation proxy-CLAP) and `last.ckpt`.
/// With `resume`, continues from `last.ckpt` of the same configuration.
pub fn train_loop(
    cfg: &RunConfig,
    workdir: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let data = Dataset::load(&workdir.join(&tc.dataset_dir))?;
    if (data.manifest.frames, data.manifest.bins) != (cfg.model.frames, cfg.model.bins) {
        return Err(Error::Config(format!(
            "dataset latent {}x{} does not match model {}x{}",
            data.manifest.frames, data.manifest.bins, cfg.model.frames, cfg.model.bins
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let dir = workdir.join(&tc.checkpoint_dir);
    fs::create_dir_all(&dir)?;
    let (best_path, last_path, log_path) = (
        dir.join("best.ckpt"),
        dir.join("last.ckpt"),
        dir.join("metrics.csv"),
    );
    let hash = cfg.config_hash();

    let (mut model, mut opt, mut history) = if resume && last_path.exists() {
        let ck = Checkpoint::load_for(&last_path, &cfg.model)?;
        if ck.header.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "last checkpoint belongs to config {}, current is {hash}",
                ck.header.config_hash
            )));
        }
        (ck.model, ck.optimizer, ck.header.history)
    } else {
        let model = VelocityModel::new(cfg.model.clone())?;
        let opt = OptimizerState::new(model.params(), AdamHyper::default());
        (model, opt, Vec::new())
    };
    let mut best = history
        .iter()
        .map(|r| r.val_clap)
        .fold(f64::NEG_INFINITY, f64::max);
    let val_sampler = tc.validation_sampler();

    for epoch in history.len()..tc.epochs {
        let mut r = rng::stream(tc.seed, &[EPOCH_STREAM, epoch as u64]);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&EditTriplet> = chunk.iter().map(|&i| &data.train[i]).collect();
            loss_sum += train_step(&mut model, &batch, &mut opt, tc, &mut r)?;
            batches += 1;
        }
        let val_clap = validate(
            &ModelEditor(&model),
            &data.val,
            &data.catalog,
            &cfg.data.detector,
            &val_sampler,
            tc.validation_subset_size,
            tc.seed,
        )?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_clap,
        };
        history.push(record.clone());
        let ck = Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                model: cfg.model.clone(),
                config_hash: hash.clone(),
                epochs_done: epoch + 1,
                history: history.clone(),
                adam: opt.hyper,
                adam_step: opt.step,
            },
            model,
            optimizer: opt,
        };
        if val_clap > best {
            best = val_clap;
            ck.save(&best_path)?;
        }
        ck.save(&last_path)?;
        write_metrics_log(&log_path, &history)?;
        on_epoch(&record);
        model = ck.model;
        opt = ck.optimizer;
    }
    if !best_path.exists() {
        return Err(Error::Checkpoint(
            "no epoch was run, so there is no best checkpoint".into(),
        ));
    }
    Ok(TrainOutcome {
        best_path,
        last_path,
        best_score: best,
        history,
    })
}
