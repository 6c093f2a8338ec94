use std::io::Write;

use rayon::prelude::*;

use super::{subset_indices, Editor};
use crate::data::{Catalog, DetectorConfig, EditTriplet};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::metrics::{self, clap_alignment, MetricReport, ReferenceClassifier, Scored};
use crate::rng;
use crate::tensor::Tensor;

const ABLATION_STREAM: u64 = 0xAB1A;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub t_start: f64,
    pub report: MetricReport,
    /// Mean Euclidean distance between output and input.
    pub l2_to_input: f64,
}

/// Per-seed means over the ablation items, for paired sign tests.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRow {
    pub seed_index: usize,
    pub t_start: f64,
    pub clap: f64,
    pub l2_to_input: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub per_seed: Vec<SeedRow>,
}

/// Evaluates the editor at each start time with the same noise seeds, so rows
/// differ only in `t_start`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_tstart(
    editor: &dyn Editor,
    items: &[EditTriplet],
    classifier: &ReferenceClassifier,
    catalog: &Catalog,
    detector: &DetectorConfig,
    base: &SamplerConfig,
    values: &[f64],
    seeds: usize,
    item_count: usize,
    seed: u64,
    config_hash: &str,
) -> Result<Ablation> {
    if values.is_empty() || seeds == 0 || items.is_empty() {
        return Err(Error::Config(
            "ablation needs t_start values, seeds and items".into(),
        ));
    }
    let idx = subset_indices(
        items.len(),
        item_count,
        rng::derive_seed(seed, &[ABLATION_STREAM]),
    );
    let jobs: Vec<(usize, usize)> = (0..seeds)
        .flat_map(|s| idx.iter().map(move |&i| (s, i)))
        .collect();
    let mut rows = Vec::with_capacity(values.len());
    let mut per_seed = Vec::with_capacity(values.len() * seeds);
    for &t_start in values {
        let sampler = SamplerConfig { t_start, ..*base };
        sampler.validate()?;
        let outputs: Vec<Tensor> = jobs
            .par_iter()
            .map(|&(s, i)| {
                editor.edit(
                    &items[i],
                    &sampler,
                    rng::derive_seed(seed, &[ABLATION_STREAM, s as u64, i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let mut l2 = Vec::with_capacity(jobs.len());
        let mut clap = Vec::with_capacity(jobs.len());
        for (&(_, i), out) in jobs.iter().zip(&outputs) {
            l2.push(out.l2_distance(items[i].input.spectrogram())?);
            clap.push(clap_alignment(
                out,
                &items[i].target_caption_events,
                catalog,
                detector,
            ));
        }
        for (s, (c, d)) in clap.chunks(idx.len()).zip(l2.chunks(idx.len())).enumerate() {
            per_seed.push(SeedRow {
                seed_index: s,
                t_start,
                clap: c.iter().sum::<f64>() / c.len() as f64,
                l2_to_input: d.iter().sum::<f64>() / d.len() as f64,
            });
        }
        let scored: Vec<Scored<'_>> = jobs
            .iter()
            .zip(&outputs)
            .map(|(&(_, i), out)| Scored {
                output: out,
                reference: items[i].edited.spectrogram(),
                caption: &items[i].target_caption_events,
            })
            .collect();
        rows.push(AblationRow {
            t_start,
            report: metrics::evaluate(&scored, classifier, catalog, detector, config_hash)?,
            l2_to_input: l2.iter().sum::<f64>() / l2.len() as f64,
        });
    }
    Ok(Ablation { rows, per_seed })
}

impl Ablation {
    /// `t_start,clap,fd,kl,is,l2_to_input,n`
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t_start,clap,fd,kl,is,l2_to_input,n")?;
        for r in &self.rows {
            let m = &r.report;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.t_start, m.clap_mean, m.fd, m.kl, m.is, r.l2_to_input, m.n
            )?;
        }
        Ok(())
    }

    /// `seed,t_start,clap,l2_to_input`
    pub fn write_seed_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "seed,t_start,clap,l2_to_input")?;
        for r in &self.per_seed {
            writeln!(
                w,
                "{},{},{},{}",
                r.seed_index, r.t_start, r.clap, r.l2_to_input
            )?;
        }
        Ok(())
    }

    /// Per-seed values of `metric` at `t_start`, in seed order.
    pub fn seed_values(&self, t_start: f64, metric: impl Fn(&SeedRow) -> f64) -> Vec<f64> {
        self.per_seed
            .iter()
            .filter(|r| r.t_start == t_start)
            .map(metric)
            .collect()
    }
}
