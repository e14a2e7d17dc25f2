//! Dice, Focal, the sigmoid pairwise image-text loss, the softmax
//! contrastive alternative, and the per-level composite.
//!
//! Per feature level `i` the composite is
//! `L^i = l1 * Dice + l2 * Focal + l3 * Pair`, summed over levels. Dice and
//! Focal are computed only for samples that carry masks; the pairwise term
//! always applies, so classification-only datasets degrade gracefully to
//! `L = sum_i l3 * Pair^i`.
//!
//! The pairwise losses consume the pre-softmax image-level logits (mean
//! patch scores per anchor); the sigmoid loss applies its own learnable
//! temperature `t` and bias `b`, with `t` parameterized in log space.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const FOCAL_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Siglip,
    ClipSoftmax,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Siglip => "siglip",
            LossMode::ClipSoftmax => "clip_softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "siglip" => Ok(LossMode::Siglip),
            "clip_softmax" => Ok(LossMode::ClipSoftmax),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

/// Which image-prompt pairings enter the sigmoid loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    Both,
    AbnormalOnly,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::Both => "both",
            PairMode::AbnormalOnly => "abnormal_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(PairMode::Both),
            "abnormal_only" => Ok(PairMode::AbnormalOnly),
            other => Err(Error::Config(format!("unknown pair mode `{other}`"))),
        }
    }
}

/// Loss weights and scalar-parameter initializers.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_pair: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Initial sigmoid-loss temperature (stored in log space as a parameter).
    pub siglip_t: f64,
    pub siglip_b: f64,
    pub mode: LossMode,
    pub pairs: PairMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            lambda_pair: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            siglip_t: 10.0,
            siglip_b: -10.0,
            mode: LossMode::Siglip,
            pairs: PairMode::Both,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dice < 0.0 || self.lambda_focal < 0.0 || self.lambda_pair < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!(
                "focal_alpha must lie in [0, 1], found {}",
                self.focal_alpha
            )));
        }
        if self.siglip_t <= 0.0 {
            return Err(Error::Config(
                "siglip_t must be positive (it is learned in log space)".into(),
            ));
        }
        Ok(())
    }
}

/// Labels plus per-sample optional flattened masks for one batch.
pub struct BatchTargets {
    pub labels: Vec<u8>,
    pub masks: Vec<Option<Vec<u8>>>,
}

impl BatchTargets {
    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.labels.len() != self.masks.len() {
            return Err(Error::Input(format!(
                "{} labels vs {} mask slots",
                self.labels.len(),
                self.masks.len()
            )));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::Input("labels must be 0 or 1".into()));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if let Some(m) = m {
                if m.len() != pixels {
                    return Err(Error::Input(format!(
                        "mask {i} has {} pixels, expected {pixels}",
                        m.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_same_len<S: Scalar>(pred: &Tensor<S>, gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn mask_tensor<S: Scalar>(gt: &[u8], map: impl Fn(u8) -> f64) -> Tensor<S> {
    Tensor::new(
        gt.iter().map(|&g| S::from_f64(map(g))).collect(),
        vec![gt.len()],
    )
}

/// Dice loss on the tape: `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_on_tape<S: Scalar>(tape: &mut Tape<S>, pred: NodeId, gt: &[u8]) -> Result<NodeId> {
    check_same_len(tape.value(pred), gt)?;
    let eps = S::from_f64(DICE_EPS);
    let g = tape.constant(mask_tensor(gt, |v| v as f64));
    let overlap = tape.mul(pred, g);
    let overlap_sum = tape.sum_all(overlap);
    let num = tape.scale(overlap_sum, S::from_f64(2.0));
    let num = tape.add_imm(num, eps);
    let pred_sum = tape.sum_all(pred);
    let gt_sum = S::from_f64(gt.iter().filter(|&&v| v != 0).count() as f64);
    let den = tape.add_imm(pred_sum, gt_sum + eps);
    let ratio = tape.div(num, den);
    let neg = tape.neg(ratio);
    Ok(tape.add_imm(neg, S::one()))
}

/// Focal loss on the tape: mean over pixels of
/// `-alpha_t (1 - p_t)^gamma ln(p_t)` with predictions clamped away from
/// {0, 1} and `alpha` applied to positives, `1 - alpha` to negatives.
pub fn focal_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred: NodeId,
    gt: &[u8],
    gamma: f64,
    alpha: f64,
) -> Result<NodeId> {
    check_same_len(tape.value(pred), gt)?;
    let lo = S::from_f64(FOCAL_CLAMP);
    let hi = S::from_f64(1.0 - FOCAL_CLAMP);
    let clamped = tape.clamp(pred, lo, hi);
    // p_t = g * p + (1 - g)(1 - p), affine in p.
    let sign = tape.constant(mask_tensor(gt, |v| 2.0 * v as f64 - 1.0));
    let offset = tape.constant(mask_tensor(gt, |v| 1.0 - v as f64));
    let signed = tape.mul(clamped, sign);
    let p_t = tape.add(signed, offset);
    let neg_pt = tape.neg(p_t);
    let one_minus = tape.add_imm(neg_pt, S::one());
    let weight = tape.pow_imm(one_minus, S::from_f64(gamma));
    let log_pt = tape.ln(p_t);
    let alpha_t = tape.constant(mask_tensor(gt, |v| {
        if v != 0 {
            alpha
        } else {
            1.0 - alpha
        }
    }));
    let weighted = tape.mul(weight, log_pt);
    let weighted = tape.mul(weighted, alpha_t);
    let mean = tape.mean_all(weighted);
    Ok(tape.neg(mean))
}

/// Sign matrix `z` for the sigmoid loss: +1 where the prompt polarity
/// matches the label, -1 otherwise. Columns are (normal, abnormal) for
/// `PairMode::Both` and just (abnormal) for `PairMode::AbnormalOnly`.
pub fn pair_sign_matrix<S: Scalar>(labels: &[u8], pairs: PairMode) -> Tensor<S> {
    let b = labels.len();
    match pairs {
        PairMode::Both => {
            let mut data = Vec::with_capacity(2 * b);
            for &c in labels {
                data.push(S::from_f64(if c == 0 { 1.0 } else { -1.0 }));
                data.push(S::from_f64(if c == 1 { 1.0 } else { -1.0 }));
            }
            Tensor::new(data, vec![b, 2])
        }
        PairMode::AbnormalOnly => {
            let data = labels
                .iter()
                .map(|&c| S::from_f64(if c == 1 { 1.0 } else { -1.0 }))
                .collect();
            Tensor::new(data, vec![b, 1])
        }
    }
}

/// Sigmoid pairwise loss on the tape: mean over all pairs of
/// `log(1 + exp(z * (-t * l + b)))`. `logits` is `[B, P]`, `z` the matching
/// sign matrix, `t`/`b` scalar nodes (gradients flow into both).
pub fn siglip_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    z: &Tensor<S>,
    t: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    if tape.value(logits).shape != z.shape {
        return Err(Error::Input(format!(
            "logits shape {:?} does not match sign matrix {:?}",
            tape.value(logits).shape,
            z.shape
        )));
    }
    if !tape.value(logits).all_finite() {
        return Err(Error::Numeric("non-finite pair logits".into()));
    }
    let z = tape.constant(z.clone());
    let scaled = tape.mul_scalar(logits, t);
    let neg = tape.neg(scaled);
    let shifted = tape.add_scalar(neg, b);
    let signed = tape.mul(shifted, z);
    let sp = tape.softplus(signed);
    Ok(tape.mean_all(sp))
}

/// Softmax contrastive alternative (image -> text direction only):
/// cross-entropy of the temperature-scaled two-prompt softmax against the
/// class index.
pub fn clip_softmax_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    labels: &[u8],
    tau: NodeId,
) -> Result<NodeId> {
    let shape = &tape.value(logits).shape;
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Input(format!(
            "softmax loss expects [B, 2] logits, found {shape:?}"
        )));
    }
    if tape.value(logits).rows() != labels.len() {
        return Err(Error::Input(format!(
            "{} logit rows vs {} labels",
            tape.value(logits).rows(),
            labels.len()
        )));
    }
    if !tape.value(logits).all_finite() {
        return Err(Error::Numeric("non-finite pair logits".into()));
    }
    let scaled = tape.mul_scalar(logits, tau);
    Ok(tape.softmax_xent2(scaled, labels))
}

// ── Eager wrappers ──────────────────────────────────────────────────────

pub fn dice_loss<S: Scalar>(pred: &Tensor<S>, gt: &[u8]) -> Result<S> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let loss = dice_on_tape(&mut tape, p, gt)?;
    Ok(tape.value(loss).item())
}

pub fn focal_loss<S: Scalar>(pred: &Tensor<S>, gt: &[u8], gamma: f64, alpha: f64) -> Result<S> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let loss = focal_on_tape(&mut tape, p, gt, gamma, alpha)?;
    Ok(tape.value(loss).item())
}

/// Sigmoid pairwise loss over `[B, 2]` logits with both pairings per image.
pub fn siglip_loss<S: Scalar>(logits: &Tensor<S>, labels: &[u8], t: S, b: S) -> Result<S> {
    let z = pair_sign_matrix::<S>(labels, PairMode::Both);
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let tn = tape.constant(Tensor::scalar(t));
    let bn = tape.constant(Tensor::scalar(b));
    let loss = siglip_on_tape(&mut tape, l, &z, tn, bn)?;
    Ok(tape.value(loss).item())
}

pub fn clip_softmax_loss<S: Scalar>(logits: &Tensor<S>, labels: &[u8], tau: S) -> Result<S> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let t = tape.constant(Tensor::scalar(tau));
    let loss = clip_softmax_on_tape(&mut tape, l, labels, t)?;
    Ok(tape.value(loss).item())
}

// ── Composite ───────────────────────────────────────────────────────────

/// One feature level's predictions on the tape.
pub struct LevelPrediction {
    pub layer: usize,
    /// Per-sample `[h*w]` map nodes; `None` when the sample has no mask.
    pub maps: Vec<Option<NodeId>>,
    /// `[B, P]` pre-softmax pair logits.
    pub logits: NodeId,
}

/// Weighted per-level terms (values for logging) plus the total loss node.
pub struct CompositeLoss {
    pub total: NodeId,
    /// `(layer, dice, focal, pair)` unweighted term values per level.
    pub per_level: Vec<(usize, f64, f64, f64)>,
}

/// Assemble `L = sum_i (l1 Dice^i + l2 Focal^i + l3 Pair^i)` on the tape.
/// Dice/Focal average over the masked samples of the batch; the pair term
/// uses the configured loss mode. `t`/`b` feed the sigmoid loss (`t` also
/// serves as the softmax temperature in clip mode).
pub fn composite_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    levels: &[LevelPrediction],
    targets: &BatchTargets,
    weights: &LossWeights,
    t: NodeId,
    b: NodeId,
) -> Result<CompositeLoss> {
    weights.validate()?;
    if levels.is_empty() {
        return Err(Error::Config("composite loss needs at least one level".into()));
    }
    let batch = targets.labels.len();
    if batch == 0 {
        return Err(Error::Config("composite loss needs a non-empty batch".into()));
    }
    let masked: Vec<usize> = (0..batch).filter(|&i| targets.masks[i].is_some()).collect();
    let any_weight =
        weights.lambda_dice > 0.0 || weights.lambda_focal > 0.0 || weights.lambda_pair > 0.0;
    if any_weight && weights.lambda_pair == 0.0 && masked.is_empty() {
        return Err(Error::Config(
            "no applicable loss term: segmentation weights are set but the batch has no masks"
                .into(),
        ));
    }

    let z = pair_sign_matrix::<S>(&targets.labels, weights.pairs);
    let mut total: Option<NodeId> = None;
    let mut per_level = Vec::with_capacity(levels.len());
    for level in levels {
        if level.maps.len() != batch {
            return Err(Error::Input(format!(
                "level {} carries {} map slots for a batch of {batch}",
                level.layer,
                level.maps.len()
            )));
        }
        let mut dice_val = 0.0;
        let mut focal_val = 0.0;
        let mut level_terms: Vec<(NodeId, f64)> = Vec::new();

        if !masked.is_empty() {
            let inv = S::from_f64(1.0 / masked.len() as f64);
            let mut dice_acc: Option<NodeId> = None;
            let mut focal_acc: Option<NodeId> = None;
            for &i in &masked {
                let map = level.maps[i].ok_or_else(|| {
                    Error::Input(format!(
                        "sample {i} has a mask but level {} provides no map",
                        level.layer
                    ))
                })?;
                let gt = targets.masks[i].as_ref().unwrap();
                let d = dice_on_tape(tape, map, gt)?;
                let f = focal_on_tape(tape, map, gt, weights.focal_gamma, weights.focal_alpha)?;
                dice_acc = Some(match dice_acc {
                    None => d,
                    Some(a) => tape.add(a, d),
                });
                focal_acc = Some(match focal_acc {
                    None => f,
                    Some(a) => tape.add(a, f),
                });
            }
            let dice = tape.scale(dice_acc.unwrap(), inv);
            let focal = tape.scale(focal_acc.unwrap(), inv);
            dice_val = tape.value(dice).item().to_f64();
            focal_val = tape.value(focal).item().to_f64();
            level_terms.push((dice, weights.lambda_dice));
            level_terms.push((focal, weights.lambda_focal));
        }

        let pair = match weights.mode {
            LossMode::Siglip => siglip_on_tape(tape, level.logits, &z, t, b)?,
            LossMode::ClipSoftmax => clip_softmax_on_tape(tape, level.logits, &targets.labels, t)?,
        };
        let pair_val = tape.value(pair).item().to_f64();
        level_terms.push((pair, weights.lambda_pair));

        for (node, lambda) in level_terms {
            if lambda == 0.0 {
                continue;
            }
            let weighted = tape.scale(node, S::from_f64(lambda));
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted),
            });
        }
        per_level.push((level.layer, dice_val, focal_val, pair_val));
    }

    let total = match total {
        Some(t) => t,
        // All lambdas zero: a legal configuration whose loss is constantly
        // zero (and therefore gradient-free).
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    Ok(CompositeLoss { total, per_level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_hand_case() {
        // pred = [[1,1],[0,0]], gt = [[1,0],[0,0]] -> 1 - 2/(2+1) = 1/3.
        let pred = Tensor::from_f64_slice(&[1.0, 1.0, 0.0, 0.0], &[4]);
        let gt = [1, 0, 0, 0];
        let loss = dice_loss(&pred, &gt).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-4, "{loss}");
    }

    #[test]
    fn dice_perfect_and_inverted() {
        let gt = [1, 0, 1, 0];
        let exact = Tensor::from_f64_slice(&[1.0, 0.0, 1.0, 0.0], &[4]);
        assert!(dice_loss(&exact, &gt).unwrap() < 1e-4);
        let inverted = Tensor::from_f64_slice(&[0.0, 1.0, 0.0, 1.0], &[4]);
        assert!(dice_loss(&inverted, &gt).unwrap() > 0.9999);
    }

    #[test]
    fn focal_hand_case() {
        // Single pixel p = 0.9, gt = 1, gamma = 2, alpha = 0.25:
        // 0.25 * 0.01 * (-ln 0.9) = 2.634e-4.
        let pred = Tensor::from_f64_slice(&[0.9], &[1]);
        let loss = focal_loss(&pred, &[1], 2.0, 0.25).unwrap();
        assert!((loss - 2.634e-4).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn focal_reduces_to_scaled_bce_at_gamma_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let gt: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2) as u8).collect();
        let focal = focal_loss(
            &Tensor::from_f64_slice(&pred, &[12]),
            &gt,
            0.0,
            0.5,
        )
        .unwrap();
        let bce: f64 = pred
            .iter()
            .zip(&gt)
            .map(|(&p, &g)| {
                let pt = if g == 1 { p } else { 1.0 - p };
                -pt.ln()
            })
            .sum::<f64>()
            / 12.0;
        assert!((focal - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_is_tiny_on_exact_predictions() {
        let gt = [1u8, 0, 1, 1];
        let pred = Tensor::from_f64_slice(&[1.0, 0.0, 1.0, 1.0], &[4]);
        let loss = focal_loss(&pred, &gt, 2.0, 0.25).unwrap();
        assert!(loss < 1e-5 * 0.25, "{loss}");
    }

    #[test]
    fn siglip_zero_logits_give_ln2() {
        let logits = Tensor::from_f64_slice(&[0.0, 0.0], &[1, 2]);
        let loss = siglip_loss(&logits, &[1], 1.0, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn siglip_matched_pairs_saturate_to_zero() {
        // Both pairings strongly correct for an abnormal image.
        let logits = Tensor::from_f64_slice(&[-50.0, 50.0], &[1, 2]);
        let loss = siglip_loss(&logits, &[1], 1.0, 0.0).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn siglip_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b = rng.gen_range(1..6);
            let logits: Vec<f64> = (0..2 * b).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2) as u8).collect();
            let t = rng.gen_range(0.5..12.0);
            let bias = rng.gen_range(-2.0..2.0);
            let got = siglip_loss(
                &Tensor::from_f64_slice(&logits, &[b, 2]),
                &labels,
                t,
                bias,
            )
            .unwrap();
            let mut expected = 0.0;
            for (i, &c) in labels.iter().enumerate() {
                for (col, polarity) in [(0usize, 0u8), (1, 1)] {
                    let z = if polarity == c { 1.0 } else { -1.0 };
                    let x: f64 = z * (-t * logits[i * 2 + col] + bias);
                    expected += x.max(0.0) + (-x.abs()).exp().ln_1p();
                }
            }
            expected /= (2 * b) as f64;
            assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
        }
    }

    #[test]
    fn clip_softmax_cases() {
        let equal = Tensor::from_f64_slice(&[0.3, 0.3], &[1, 2]);
        let loss = clip_softmax_loss(&equal, &[0], 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = Tensor::from_f64_slice(&[30.0, -30.0], &[1, 2]);
        assert!(clip_softmax_loss(&confident, &[0], 1.0).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = [1u8, 0, 0, 1];
        let tau = 3.0;
        let got = clip_softmax_loss(&Tensor::from_f64_slice(&logits, &[4, 2]), &labels, tau)
            .unwrap();
        let mut expected = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            let (l0, l1) = (tau * logits[i * 2], tau * logits[i * 2 + 1]);
            let lse = l0.max(l1) + ((l0 - l0.max(l1)).exp() + (l1 - l0.max(l1)).exp()).ln();
            let correct = if c == 1 { l1 } else { l0 };
            expected += lse - correct;
        }
        expected /= 4.0;
        assert!((got - expected).abs() < 1e-7);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gt: Vec<u8> = (0..8).map(|_| rng.gen_range(0..2) as u8).collect();
        let pred = Tensor::from_f64_slice(
            &(0..8).map(|_| rng.gen_range(0.1..0.9)).collect::<Vec<_>>(),
            &[8],
        );
        let gt_d = gt.clone();
        let rep = finite_diff_check(&[pred.clone()], 1e-4, move |tape, ids| {
            dice_on_tape(tape, ids[0], &gt_d).unwrap()
        });
        assert!(rep.max_rel_err < 1e-3, "dice {}", rep.max_rel_err);

        let gt_f = gt.clone();
        let rep = finite_diff_check(&[pred.clone()], 1e-4, move |tape, ids| {
            focal_on_tape(tape, ids[0], &gt_f, 2.0, 0.25).unwrap()
        });
        assert!(rep.max_rel_err < 1e-3, "focal {}", rep.max_rel_err);

        let logits = Tensor::from_f64_slice(
            &(0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
            &[4, 2],
        );
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2) as u8).collect();
        let t0 = Tensor::from_f64_slice(&[3.0], &[1]);
        let b0 = Tensor::from_f64_slice(&[-1.0], &[1]);
        let z = pair_sign_matrix::<f64>(&labels, PairMode::Both);
        let rep = finite_diff_check(
            &[logits.clone(), t0.clone(), b0],
            1e-4,
            move |tape, ids| siglip_on_tape(tape, ids[0], &z, ids[1], ids[2]).unwrap(),
        );
        assert!(rep.max_rel_err < 1e-3, "siglip {}", rep.max_rel_err);

        let labels_c = labels.clone();
        let rep = finite_diff_check(&[logits, t0], 1e-4, move |tape, ids| {
            clip_softmax_on_tape(tape, ids[0], &labels_c, ids[1]).unwrap()
        });
        assert!(rep.max_rel_err < 1e-3, "clip {}", rep.max_rel_err);
    }

    fn toy_levels(
        tape: &mut Tape<f64>,
        maps: &[Vec<f64>],
        logits: &[f64],
        batch: usize,
        with_masks: &[bool],
    ) -> LevelPrediction {
        let map_nodes: Vec<Option<NodeId>> = (0..batch)
            .map(|i| {
                with_masks[i].then(|| {
                    tape.constant(Tensor::from_f64_slice(&maps[i], &[maps[i].len()]))
                })
            })
            .collect();
        let l = tape.constant(Tensor::from_f64_slice(logits, &[batch, 2]));
        LevelPrediction {
            layer: 1,
            maps: map_nodes,
            logits: l,
        }
    }

    #[test]
    fn composite_terms_add_up_and_levels_sum() {
        let mut tape = Tape::new();
        let weights = LossWeights::default();
        let maps = vec![vec![0.7, 0.2, 0.6, 0.4], vec![0.1, 0.8, 0.3, 0.9]];
        let targets = BatchTargets {
            labels: vec![0, 1],
            masks: vec![Some(vec![0, 0, 1, 0]), Some(vec![0, 1, 0, 1])],
        };
        targets.validate(4).unwrap();
        let t = tape.constant(Tensor::scalar(10.0));
        let b = tape.constant(Tensor::scalar(-10.0));
        let lvl1 = toy_levels(&mut tape, &maps, &[0.4, -0.2, -0.5, 0.7], 2, &[true, true]);
        let out1 = composite_on_tape(&mut tape, &[lvl1], &targets, &weights, t, b).unwrap();
        let single = tape.value(out1.total).item();

        // Four identical levels quadruple the loss.
        let mut tape4 = Tape::new();
        let t4 = tape4.constant(Tensor::scalar(10.0));
        let b4 = tape4.constant(Tensor::scalar(-10.0));
        let levels: Vec<LevelPrediction> = (0..4)
            .map(|_| toy_levels(&mut tape4, &maps, &[0.4, -0.2, -0.5, 0.7], 2, &[true, true]))
            .collect();
        let out4 = composite_on_tape(&mut tape4, &levels, &targets, &weights, t4, b4).unwrap();
        let quad = tape4.value(out4.total).item();
        assert!((quad - 4.0 * single).abs() < 1e-9);

        // The logged decomposition reproduces the total.
        let recomposed: f64 = out1
            .per_level
            .iter()
            .map(|(_, d, f, p)| d + f + p)
            .sum();
        assert!((recomposed - single).abs() < 1e-6);
    }

    #[test]
    fn composite_mask_gating_and_weight_zeroing() {
        let weights = LossWeights {
            lambda_dice: 0.0,
            lambda_focal: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::scalar(10.0));
        let b = tape.constant(Tensor::scalar(-10.0));
        let maps = vec![vec![0.7, 0.2], vec![0.1, 0.8]];
        let targets = BatchTargets {
            labels: vec![0, 1],
            masks: vec![Some(vec![0, 1]), Some(vec![1, 0])],
        };
        let lvl = toy_levels(&mut tape, &maps, &[0.4, -0.2, -0.5, 0.7], 2, &[true, true]);
        let logits_node = lvl.logits;
        let out = composite_on_tape(&mut tape, &[lvl], &targets, &weights, t, b).unwrap();
        let z = pair_sign_matrix::<f64>(&targets.labels, PairMode::Both);
        let expected = siglip_on_tape(&mut tape, logits_node, &z, t, b).unwrap();
        assert!(
            (tape.value(out.total).item() - tape.value(expected).item()).abs() < 1e-12,
            "zeroed segmentation weights leave only the pair term"
        );

        // Classification-only batch (no masks) works with default weights.
        let mut tape2 = Tape::new();
        let t2 = tape2.constant(Tensor::scalar(10.0));
        let b2 = tape2.constant(Tensor::scalar(-10.0));
        let lvl2 = toy_levels(&mut tape2, &maps, &[0.4, -0.2, -0.5, 0.7], 2, &[false, false]);
        let targets2 = BatchTargets {
            labels: vec![0, 1],
            masks: vec![None, None],
        };
        let out2 =
            composite_on_tape(&mut tape2, &[lvl2], &targets2, &LossWeights::default(), t2, b2)
                .unwrap();
        assert!(tape2.value(out2.total).item() > 0.0);

        // Segmentation-only weights without masks: nothing applicable.
        let seg_only = LossWeights {
            lambda_pair: 0.0,
            ..Default::default()
        };
        let mut tape3 = Tape::new();
        let t3 = tape3.constant(Tensor::scalar(10.0));
        let b3 = tape3.constant(Tensor::scalar(-10.0));
        let lvl3 = toy_levels(&mut tape3, &maps, &[0.4, -0.2, -0.5, 0.7], 2, &[false, false]);
        assert!(matches!(
            composite_on_tape(&mut tape3, &[lvl3], &targets2, &seg_only, t3, b3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.gen_range(2..10);
            let pred = Tensor::from_f64_slice(
                &(0..n).map(|_| rng.gen_range(0.01..0.99)).collect::<Vec<_>>(),
                &[n],
            );
            let mut gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            gt[0] = 1;
            assert!(dice_loss(&pred, &gt).unwrap() >= 0.0);
            assert!(focal_loss(&pred, &gt, 2.0, 0.25).unwrap() >= 0.0);
            let b = rng.gen_range(1..5);
            let logits = Tensor::from_f64_slice(
                &(0..2 * b).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>(),
                &[b, 2],
            );
            let labels: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2) as u8).collect();
            assert!(siglip_loss(&logits, &labels, 5.0, -2.0).unwrap() >= 0.0);
            assert!(clip_softmax_loss(&logits, &labels, 2.0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let pred = Tensor::from_f64_slice(&[0.5, 0.5], &[2]);
        assert!(matches!(
            dice_loss(&pred, &[1, 0, 1]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            focal_loss(&pred, &[1], 2.0, 0.25),
            Err(Error::Input(_))
        ));
    }
}
