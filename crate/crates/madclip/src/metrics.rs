//! Image-level and pixel-level AUROC.
//!
//! AUROC is computed with the Mann–Whitney midrank formulation:
//! `(concordant pairs + 0.5 * tied pairs) / (positives * negatives)`.
//! Both numerators are exact sums of halves, so the rank method agrees
//! exactly with brute-force pair enumeration.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One evaluated test sample: image-level score/label plus the optional
/// pixel map/mask pair used for segmentation AUROC.
pub struct EvalRecord<S: Scalar> {
    pub score: S,
    pub label: u8,
    pub map: Option<Vec<S>>,
    pub mask: Option<Vec<u8>>,
}

impl<S: Scalar> EvalRecord<S> {
    pub fn validate(&self) -> Result<()> {
        if self.map.is_some() != self.mask.is_some() {
            return Err(Error::Input(
                "eval record must carry map and mask together".into(),
            ));
        }
        if let (Some(m), Some(g)) = (&self.map, &self.mask) {
            if m.len() != g.len() {
                return Err(Error::Input(format!(
                    "map has {} pixels but mask has {}",
                    m.len(),
                    g.len()
                )));
            }
        }
        Ok(())
    }
}

/// Area under the ROC curve for binary labels, ties counted half.
pub fn auroc<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: tied groups share the average 1-based rank.
    let n = order.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Pixel-level AUROC over all pixels of all map/mask pairs pooled together.
pub fn pixel_auroc<S: Scalar>(maps: &[Vec<S>], masks: &[Vec<u8>]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Input(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        if m.len() != g.len() {
            return Err(Error::Input("map/mask pixel count mismatch".into()));
        }
        scores.extend_from_slice(m);
        labels.extend(g.iter().map(|&v| u8::from(v != 0)));
    }
    auroc(&scores, &labels)
}

/// O(N^2) reference: fraction of (positive, negative) pairs ranked correctly,
/// ties counted half. Kept for tests and the acceptance suite.
pub fn auroc_pair_enumeration<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<f64> {
    let pos: Vec<S> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<S> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut num = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                num += 1.0;
            } else if p == n {
                num += 0.5;
            }
        }
    }
    Ok(num / (pos.len() as f64 * neg.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_separation() {
        let auc = auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        let auc = auroc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn hand_enumerated_case() {
        // pairs: (0.9>0.3), (0.9>0.1), (0.6>0.3), (0.6>0.1) -> 4/4
        let auc = auroc(&[0.9, 0.3, 0.6, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn single_class_errors() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn rank_method_matches_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(2..120);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pair_enumeration(&scores, &labels).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<u8> = (0..40).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let base = auroc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() + 1.0).collect();
        assert!((auroc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn complement_symmetry_without_ties() {
        let scores: Vec<f64> = vec![0.11, 0.42, 0.87, 0.23, 0.95, 0.61];
        let labels: Vec<u8> = vec![0, 1, 1, 0, 1, 0];
        let a = auroc(&scores, &labels).unwrap();
        let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
        let b = auroc(&negated, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_auroc_pools_globally() {
        let maps = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        let masks = vec![vec![1u8, 0], vec![1, 0]];
        assert_eq!(pixel_auroc(&maps, &masks).unwrap(), 1.0);
        let flat = pixel_auroc(&vec![vec![0.5; 4]], &vec![vec![1, 0, 1, 0]]).unwrap();
        assert_eq!(flat, 0.5);
    }
}
