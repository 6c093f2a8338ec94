//! Evaluation: Fréchet distance, paired KL, Inception Score and proxy-CLAP
//! over a frozen in-repo embedder, plus attention-map export.

pub mod attention;
pub mod classifier;
pub mod frechet;
pub mod scores;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, DetectorConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{
    box_attention_contrast, export_temporal_heatmap, export_token_dynamics, load_pgm, read_pgm,
    token_attention_map, write_pgm, Heatmap, TokenDynamics,
};
pub use classifier::{ClassifierTraining, ReferenceClassifier};
pub use frechet::{frechet_distance, GaussianStats};
pub use scores::{clap_alignment, inception_score, paired_kl, sign_test_pvalue, softmax};

/// Summary written by `eval` and `ablate-tstart`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Fréchet distance between reference and output embeddings.
    pub fd: f64,
    pub kl: f64,
    pub is: f64,
    pub clap_mean: f64,
    pub n: usize,
    pub config_hash: String,
}

/// One scored edit: the model output, the ground-truth edited scene, and the
/// caption the output should match.
pub struct Scored<'a> {
    pub output: &'a Tensor,
    pub reference: &'a Tensor,
    pub caption: &'a BTreeSet<usize>,
}

/// `(embedding, logits)` from the reference classifier.
type Embedded = (Tensor, Tensor);

/// Full metric suite over paired outputs and references.
pub fn evaluate(
    items: &[Scored<'_>],
    classifier: &ReferenceClassifier,
    catalog: &Catalog,
    detector: &DetectorConfig,
    config_hash: &str,
) -> Result<MetricReport> {
    if items.len() < 2 {
        return Err(Error::Metric(format!(
            "metric suite needs at least 2 items, got {}",
            items.len()
        )));
    }
    let embedded: Vec<(Embedded, Embedded, f64)> = items
        .par_iter()
        .map(|s| {
            Ok((
                classifier.embed(s.output)?,
                classifier.embed(s.reference)?,
                clap_alignment(s.output, s.caption, catalog, detector),
            ))
        })
        .collect::<Result<_>>()?;
    let out_emb: Vec<Vec<f64>> = embedded.iter().map(|e| e.0 .0.data().to_vec()).collect();
    let ref_emb: Vec<Vec<f64>> = embedded.iter().map(|e| e.1 .0.data().to_vec()).collect();
    let out_logits: Vec<Tensor> = embedded.iter().map(|e| e.0 .1.clone()).collect();
    let ref_logits: Vec<Tensor> = embedded.iter().map(|e| e.1 .1.clone()).collect();
    let posteriors = out_logits
        .iter()
        .map(|l| Tensor::from_vec(softmax(l.data())))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        fd: frechet_distance(
            &GaussianStats::from_samples(&ref_emb)?,
            &GaussianStats::from_samples(&out_emb)?,
        )?,
        kl: paired_kl(&ref_logits, &out_logits)?,
        is: inception_score(&posteriors)?,
        clap_mean: embedded.iter().map(|e| e.2).sum::<f64>() / items.len() as f64,
        n: items.len(),
        config_hash: config_hash.to_owned(),
    })
}
