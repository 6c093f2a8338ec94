use std::collections::BTreeSet;

use crate::data::{proxy_similarity, Catalog, DetectorConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KL_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(KL_FLOOR)).ln())
        .sum()
}

/// Mean over pairs of `KL(softmax(target) || softmax(edited))`.
pub fn paired_kl(target_logits: &[Tensor], edited_logits: &[Tensor]) -> Result<f64> {
    if target_logits.len() != edited_logits.len() || target_logits.is_empty() {
        return Err(Error::Metric(format!(
            "paired_kl needs equal non-empty lists, got {} and {}",
            target_logits.len(),
            edited_logits.len()
        )));
    }
    let mut total = 0.0;
    for (t, e) in target_logits.iter().zip(edited_logits) {
        if t.numel() != e.numel() {
            return Err(Error::shape("paired_kl", t.shape(), e.shape()));
        }
        total += kl(&softmax(t.data()), &softmax(e.data()));
    }
    Ok(total / target_logits.len() as f64)
}

/// `exp(mean_x KL(p(y|x) || p(y)))` over class posteriors.
pub fn inception_score(posteriors: &[Tensor]) -> Result<f64> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::Metric("inception_score of no samples".into()))?;
    let c = first.numel();
    let mut marginal = vec![0.0; c];
    for p in posteriors {
        if p.numel() != c {
            return Err(Error::shape("inception_score", first.shape(), p.shape()));
        }
        let sum: f64 = p.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 || p.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Metric(format!(
                "posterior row sums to {sum}, not a distribution"
            )));
        }
        marginal
            .iter_mut()
            .zip(p.data())
            .for_each(|(m, x)| *m += x / posteriors.len() as f64);
    }
    let mean_kl = posteriors
        .iter()
        .map(|p| kl(p.data(), &marginal))
        .sum::<f64>()
        / posteriors.len() as f64;
    Ok(mean_kl.exp())
}

/// Proxy audio-text alignment of an edited spectrogram with its target caption.
pub fn clap_alignment(
    edited: &Tensor,
    target_caption_events: &BTreeSet<usize>,
    catalog: &Catalog,
    detector: &DetectorConfig,
) -> f64 {
    proxy_similarity(edited, target_caption_events, catalog, detector)
}

/// One-sided sign-test p-value: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test_pvalue(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // log-space binomial terms
    let ln_choose =
        |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    (wins..=n)
        .map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_scene, Envelope, EventSpec};
    use crate::rng;
    use rand::Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_cases() {
        let a = t(&[0.3, -1.2, 2.0]);
        assert_eq!(
            paired_kl(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(),
            0.0
        );
        let v = paired_kl(&[t(&[50.0, 0.0])], &[t(&[0.0, 0.0])]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!(paired_kl(std::slice::from_ref(&a), &[]).is_err());
        assert!(paired_kl(&[a], &[t(&[1.0])]).is_err());
    }

    #[test]
    fn kl_nonnegative_and_shift_invariant() {
        let mut r = rng::stream(4, &[]);
        for _ in 0..200 {
            let p: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
            let q: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
            let base = paired_kl(&[t(&p)], &[t(&q)]).unwrap();
            assert!(base >= 0.0);
            let c = r.gen_range(-10.0..10.0);
            let shifted: Vec<f64> = p.iter().map(|x| x + c).collect();
            assert!((paired_kl(&[t(&shifted)], &[t(&q)]).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn inception_cases() {
        let row = t(&[0.2, 0.5, 0.3]);
        assert!((inception_score(&[row.clone(), row.clone(), row]).unwrap() - 1.0).abs() < 1e-15);
        let one_hot = [t(&[1.0, 0.0]), t(&[0.0, 1.0])];
        assert!((inception_score(&one_hot).unwrap() - 2.0).abs() < 1e-12);
        assert!(inception_score(&[t(&[0.5, 0.6])]).is_err());
        assert!(inception_score(&[]).is_err());
        let mut r = rng::stream(9, &[]);
        let rows: Vec<Tensor> = (0..50)
            .map(|_| {
                t(&softmax(
                    &(0..4).map(|_| r.gen_range(-4.0..4.0)).collect::<Vec<_>>(),
                ))
            })
            .collect();
        let is = inception_score(&rows).unwrap();
        assert!((1.0..=4.0).contains(&is));
    }

    #[test]
    fn clap_cases() {
        let c = Catalog::standard(16).unwrap();
        let d = DetectorConfig::default();
        let e = EventSpec::of_type(&c, 4, 10, 20, 0.8, Envelope::Rect).unwrap();
        let s = render_scene(&[e], &c, 64, 16).unwrap();
        assert_eq!(clap_alignment(&s, &[4].into(), &c, &d), 1.0);
        assert_eq!(
            clap_alignment(&Tensor::zeros(&[64, 16]), &[4].into(), &c, &d),
            0.0
        );
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_pvalue(1, 0) - 0.5).abs() < 1e-15);
        assert!((sign_test_pvalue(5, 0) - 1.0 / 32.0).abs() < 1e-15);
        // P(X >= 15 | 20, 0.5) = 21700 / 2^20
        assert!((sign_test_pvalue(15, 5) - 21700.0 / 1048576.0).abs() < 1e-12);
        assert!(sign_test_pvalue(14, 6) > 0.05);
        assert_eq!(sign_test_pvalue(0, 0), 1.0);
    }
}
