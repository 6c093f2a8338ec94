//! Matched-filter event detector and the Jaccard caption similarity built on it.
//!
//! For each catalog type the detector slides a `window`-frame template over
//! the type's band plus one guard row on each side. The template is the
//! type's texture inside the band and zero on the guard rows. An event counts
//! as present when, at some offset, the zero-mean normalised
//! cross-correlation reaches `theta_det` and the mean level in the band rows
//! reaches `min_band_level`. The level gate keeps zero-mean noise from
//! registering as an event.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, EventType};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub theta_det: f64,
    pub window: usize,
    pub min_band_level: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            theta_det: 0.6,
            window: 8,
            min_band_level: 0.15,
        }
    }
}

/// Peak normalised cross-correlation of `ty`'s template over `spec`, along
/// with the band level at that peak. Returns `(ncc, level)` of the best window
/// that passes the level gate, or of the best window overall when none does.
pub fn template_response(spec: &Tensor, ty: &EventType, cfg: &DetectorConfig) -> (f64, f64) {
    let (frames, bins) = (spec.shape()[0], spec.shape()[1]);
    let w = cfg.window.min(frames);
    let rows: Vec<usize> = (ty.freq_lo.saturating_sub(1)..(ty.freq_hi + 1).min(bins)).collect();
    let band_rows = ty.freq_hi - ty.freq_lo;
    let data = spec.data();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut best_gated = (f64::NEG_INFINITY, 0.0);
    let mut patch = Vec::with_capacity(rows.len() * w);
    let mut template = Vec::with_capacity(rows.len() * w);
    for start in 0..=frames - w {
        patch.clear();
        template.clear();
        let mut band_sum = 0.0;
        for k in 0..w {
            for &r in &rows {
                let v = data[(start + k) * bins + r];
                patch.push(v);
                let in_band = r >= ty.freq_lo && r < ty.freq_hi;
                template.push(if in_band { ty.texture.gain(k) } else { 0.0 });
                if in_band {
                    band_sum += v;
                }
            }
        }
        let ncc = normalized_correlation(&patch, &template);
        let level = band_sum / (band_rows * w) as f64;
        if ncc > best.0 {
            best = (ncc, level);
        }
        if level >= cfg.min_band_level && ncc > best_gated.0 {
            best_gated = (ncc, level);
        }
    }
    if best_gated.0.is_finite() {
        best_gated
    } else {
        best
    }
}

/// Zero-mean normalised cross-correlation; 0 when either side is constant.
pub fn normalized_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 1e-300 || vb <= 1e-300 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

pub fn detect_events(spec: &Tensor, catalog: &Catalog, cfg: &DetectorConfig) -> BTreeSet<usize> {
    catalog
        .types
        .iter()
        .filter(|ty| {
            let (ncc, level) = template_response(spec, ty, cfg);
            ncc >= cfg.theta_det && level >= cfg.min_band_level
        })
        .map(|ty| ty.id)
        .collect()
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Jaccard similarity between detected events and the caption's event set.
pub fn proxy_similarity(
    spec: &Tensor,
    caption_events: &BTreeSet<usize>,
    catalog: &Catalog,
    cfg: &DetectorConfig,
) -> f64 {
    jaccard(&detect_events(spec, catalog, cfg), caption_events)
}
