//! Desk-scale triplet dataset: generation, balancing, and the on-disk layout.
//!
//! A dataset directory holds `manifest.json`, `catalog.json`, and one
//! `{split}.bin` per split. Split files start with the magic `RFMTRIP1` and a
//! little-endian u32 record count. Each record is
//!
//! ```text
//! u64 base_id | u8 task | u32 n, n × u32 tokens | u32 m, m × u32 caption ids
//! | input events | edited events | input tensor | edited tensor
//! ```
//!
//! where an event list is a u32 count followed by fixed 33-byte events
//! (u32 type, onset, duration, freq_lo, freq_hi; f64 amplitude; u8 envelope).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::catalog::Catalog;
use super::detect::DetectorConfig;
use super::instruction::Task;
use super::scene::{Envelope, EventSpec, Scene};
use super::triplet::{
    build_triplets, filter_triplet, scene_event_count_filter, EditTriplet,
    DEFAULT_SIMILARITY_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{read_tensor, write_tensor};

const MAGIC: &[u8; 8] = b"RFMTRIP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames: usize,
    pub bins: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub similarity_threshold: f64,
    pub min_base_events: usize,
    pub max_base_events: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_amplitude: f64,
    pub max_amplitude: f64,
    pub detector: DetectorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            bins: 16,
            train_size: 3000,
            val_size: 300,
            test_size: 300,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            min_base_events: 1,
            max_base_events: 2,
            min_duration: 12,
            max_duration: 32,
            min_amplitude: 0.6,
            max_amplitude: 1.0,
            detector: DetectorConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_base_events + 1 > super::triplet::MAX_SCENE_EVENTS
            || self.min_base_events > self.max_base_events
        {
            return bad(format!(
                "base events {}..={} must leave room for one mixed-in event",
                self.min_base_events, self.max_base_events
            ));
        }
        if self.min_duration == 0
            || self.min_duration > self.max_duration
            || self.max_duration > self.frames
        {
            return bad(format!(
                "durations {}..={} do not fit {} frames",
                self.min_duration, self.max_duration, self.frames
            ));
        }
        if !(self.min_amplitude > 0.0
            && self.min_amplitude <= self.max_amplitude
            && self.max_amplitude <= 1.0)
        {
            return bad(format!(
                "amplitudes {}..={} outside (0, 1]",
                self.min_amplitude, self.max_amplitude
            ));
        }
        for (name, n) in [
            ("train", self.train_size),
            ("val", self.val_size),
            ("test", self.test_size),
        ] {
            if n > 0 && n < Task::ALL.len() {
                return Err(Error::InfeasibleBalance(format!(
                    "{name} split of {n} cannot hold every task"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub size: usize,
    /// Half-open range of base-scene ids drawn for this split.
    pub base_ids: (u64, u64),
    pub per_task: BTreeMap<Task, usize>,
    pub generated: usize,
    pub passed_filter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub similarity_threshold: f64,
    pub catalog_version: u32,
    pub frames: usize,
    pub bins: usize,
    pub splits: BTreeMap<Split, SplitManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub catalog: Catalog,
    pub train: Vec<EditTriplet>,
    pub val: Vec<EditTriplet>,
    pub test: Vec<EditTriplet>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[EditTriplet] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        fs::write(
            dir.join("catalog.json"),
            serde_json::to_string_pretty(&self.catalog)?,
        )?;
        for s in Split::ALL {
            let mut buf = Vec::new();
            write_split(&mut buf, self.split(s))?;
            fs::write(dir.join(format!("{}.bin", s.name())), buf)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let catalog: Catalog = serde_json::from_slice(&fs::read(dir.join("catalog.json"))?)?;
        if catalog.version != manifest.catalog_version {
            return Err(Error::Format(format!(
                "catalog version {} but manifest expects {}",
                catalog.version, manifest.catalog_version
            )));
        }
        let mut parts = Vec::new();
        for s in Split::ALL {
            let bytes = fs::read(dir.join(format!("{}.bin", s.name())))?;
            let items = read_split(
                &mut bytes.as_slice(),
                &catalog,
                manifest.frames,
                manifest.bins,
            )?;
            let expected = manifest.splits.get(&s).map_or(0, |m| m.size);
            if items.len() != expected {
                return Err(Error::Format(format!(
                    "{} holds {} records, manifest says {expected}",
                    s.name(),
                    items.len()
                )));
            }
            parts.push(items);
        }
        let test = parts.pop().unwrap_or_default();
        let val = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        Ok(Self {
            manifest,
            catalog,
            train,
            val,
            test,
        })
    }
}

/// Draws base scene `base_id` and its two mix-in events.
pub fn sample_base(
    cfg: &DataConfig,
    catalog: &Catalog,
    seed: u64,
    base_id: u64,
) -> Result<(Scene, EventSpec, EventSpec)> {
    let mut r = rng::stream(seed, &[base_id]);
    let mut types: Vec<usize> = (0..catalog.len()).collect();
    types.shuffle(&mut r);
    let n_base = r.gen_range(cfg.min_base_events..=cfg.max_base_events);
    let mut event = |ty: usize| {
        let duration = r.gen_range(cfg.min_duration..=cfg.max_duration);
        let onset = r.gen_range(0..=cfg.frames - duration);
        let amp = r.gen_range(cfg.min_amplitude..=cfg.max_amplitude);
        let env = if r.gen_bool(0.5) {
            Envelope::Rect
        } else {
            Envelope::AttackDecay
        };
        EventSpec::of_type(catalog, ty, onset, duration, amp, env)
    };
    let base: Vec<EventSpec> = types[..n_base]
        .iter()
        .map(|&t| event(t))
        .collect::<Result<_>>()?;
    let a = event(types[n_base])?;
    let b = event(types[n_base + 1])?;
    Ok((Scene::new(base, catalog, cfg.frames, cfg.bins)?, a, b))
}

/// Number of base scenes drawn for a split of `size` triplets.
pub fn bases_for(size: usize) -> u64 {
    size.div_ceil(6) as u64
}

/// Generates, filters, and balances one split from base ids `ids`.
pub fn generate_split(
    cfg: &DataConfig,
    catalog: &Catalog,
    seed: u64,
    size: usize,
    ids: std::ops::Range<u64>,
) -> Result<(Vec<EditTriplet>, SplitManifest)> {
    let per_base: Vec<Vec<EditTriplet>> = ids
        .clone()
        .into_par_iter()
        .map(|id| {
            let (x, a, b) = sample_base(cfg, catalog, seed, id)?;
            build_triplets(&x, id, &a, &b, catalog)
        })
        .collect::<Result<_>>()?;
    let generated: Vec<EditTriplet> = per_base.into_iter().flatten().collect();
    let n_generated = generated.len();
    let passed: Vec<bool> = generated
        .par_iter()
        .map(|t| {
            scene_event_count_filter(&t.input)
                && scene_event_count_filter(&t.edited)
                && filter_triplet(t, cfg.similarity_threshold, catalog, &cfg.detector)
        })
        .collect();
    let kept: Vec<EditTriplet> = generated
        .into_iter()
        .zip(passed)
        .filter(|(_, ok)| *ok)
        .map(|(t, _)| t)
        .collect();
    let n_passed = kept.len();
    let items = balance(kept, size);
    let mut per_task: BTreeMap<Task, usize> = Task::ALL.iter().map(|&t| (t, 0)).collect();
    for t in &items {
        *per_task.entry(t.task).or_default() += 1;
    }
    let manifest = SplitManifest {
        size: items.len(),
        base_ids: (ids.start, ids.end),
        per_task,
        generated: n_generated,
        passed_filter: n_passed,
    };
    Ok((items, manifest))
}

/// Keeps at most `size` triplets with per-task counts within one of each
/// other, preserving generation order.
pub fn balance(items: Vec<EditTriplet>, size: usize) -> Vec<EditTriplet> {
    let k = Task::ALL.len();
    let mut avail = [0usize; 3];
    for t in &items {
        avail[t.task.index()] += 1;
    }
    let mut quota = [0usize; 3];
    for (i, q) in quota.iter_mut().enumerate() {
        *q = (size / k + usize::from(i < size % k)).min(avail[i]);
    }
    let floor = *quota.iter().min().unwrap_or(&0);
    quota.iter_mut().for_each(|q| *q = (*q).min(floor + 1));
    let mut taken = [0usize; 3];
    items
        .into_iter()
        .filter(|t| {
            let i = t.task.index();
            let ok = taken[i] < quota[i];
            taken[i] += usize::from(ok);
            ok
        })
        .collect()
}

/// Generates every split. Base ids are consecutive across splits, so no base
/// scene is shared between them.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let catalog = Catalog::standard(cfg.bins)?;
    let mut next = 0u64;
    let mut splits = BTreeMap::new();
    let mut parts = Vec::new();
    for (s, size) in [
        (Split::Train, cfg.train_size),
        (Split::Val, cfg.val_size),
        (Split::Test, cfg.test_size),
    ] {
        let ids = next..next + bases_for(size);
        next = ids.end;
        let (items, m) = generate_split(cfg, &catalog, seed, size, ids)?;
        splits.insert(s, m);
        parts.push(items);
    }
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            similarity_threshold: cfg.similarity_threshold,
            catalog_version: catalog.version,
            frames: cfg.frames,
            bins: cfg.bins,
            splits,
        },
        catalog,
        train,
        val,
        test,
    })
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(take(r)?) as usize)
}

fn write_events<W: Write>(w: &mut W, events: &[EventSpec]) -> Result<()> {
    put_u32(w, events.len())?;
    for e in events {
        for v in [e.event_type, e.onset, e.duration, e.freq_lo, e.freq_hi] {
            put_u32(w, v)?;
        }
        w.write_all(&e.peak_amplitude.to_le_bytes())?;
        w.write_all(&[match e.envelope {
            Envelope::Rect => 0,
            Envelope::AttackDecay => 1,
        }])?;
    }
    Ok(())
}

fn read_events<R: Read>(r: &mut R) -> Result<Vec<EventSpec>> {
    let n = get_u32(r)?;
    (0..n)
        .map(|_| {
            let [event_type, onset, duration, freq_lo, freq_hi] = [
                get_u32(r)?,
                get_u32(r)?,
                get_u32(r)?,
                get_u32(r)?,
                get_u32(r)?,
            ];
            let peak_amplitude = f64::from_le_bytes(take(r)?);
            let envelope = match take::<1, _>(r)?[0] {
                0 => Envelope::Rect,
                1 => Envelope::AttackDecay,
                x => return Err(Error::Format(format!("envelope tag {x}"))),
            };
            Ok(EventSpec {
                event_type,
                onset,
                duration,
                freq_lo,
                freq_hi,
                peak_amplitude,
                envelope,
            })
        })
        .collect()
}

pub fn write_split<W: Write>(w: &mut W, items: &[EditTriplet]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, items.len())?;
    for t in items {
        w.write_all(&t.base_id.to_le_bytes())?;
        w.write_all(&[t.task.index() as u8])?;
        put_u32(w, t.instruction_tokens.len())?;
        for &tok in &t.instruction_tokens {
            put_u32(w, tok)?;
        }
        put_u32(w, t.target_caption_events.len())?;
        for &e in &t.target_caption_events {
            put_u32(w, e)?;
        }
        write_events(w, t.input.events())?;
        write_events(w, t.edited.events())?;
        write_tensor(w, t.input.spectrogram())?;
        write_tensor(w, t.edited.spectrogram())?;
    }
    Ok(())
}

/// Reads a split file, re-rendering each scene from its events and rejecting
/// records whose stored spectrogram disagrees with the rendering.
pub fn read_split<R: Read>(
    r: &mut R,
    catalog: &Catalog,
    frames: usize,
    bins: usize,
) -> Result<Vec<EditTriplet>> {
    if &take::<8, _>(r)? != MAGIC {
        return Err(Error::Format("bad split magic".into()));
    }
    let n = get_u32(r)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base_id = u64::from_le_bytes(take(r)?);
        let task = Task::from_index(take::<1, _>(r)?[0] as usize)?;
        let nt = get_u32(r)?;
        let instruction_tokens = (0..nt).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let nc = get_u32(r)?;
        let target_caption_events = (0..nc)
            .map(|_| get_u32(r))
            .collect::<Result<BTreeSet<_>>>()?;
        let input = Scene::new(read_events(r)?, catalog, frames, bins)?;
        let edited = Scene::new(read_events(r)?, catalog, frames, bins)?;
        for (scene, side) in [(&input, "input"), (&edited, "edited")] {
            if &read_tensor(r)? != scene.spectrogram() {
                return Err(Error::Format(format!(
                    "record {i}: stored {side} spectrogram differs from its events"
                )));
            }
        }
        out.push(EditTriplet {
            base_id,
            input,
            edited,
            instruction_tokens,
            task,
            target_caption_events,
        });
    }
    Ok(out)
}
