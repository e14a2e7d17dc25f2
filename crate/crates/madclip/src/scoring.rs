//! Dual-branch patch scores and their aggregation into the anomaly map and
//! anomaly score.
//!
//! Per layer, the normality/abnormality channels are cosine scores of the
//! adapted (unit-row) features against the two anchors; with subtraction
//! enabled the opposite-class similarity is subtracted:
//!
//! ```text
//! s_n[p]  = O_n[p] . t_n  - O_n[p] . t_ab
//! s_ab[p] = O_ab[p] . t_ab - O_ab[p] . t_n
//! ```
//!
//! A learnable scalar temperature multiplies both channels before the
//! two-way softmax. The map path interpolates the channel logits bilinearly
//! to the target size first and applies the softmax per pixel, keeping the
//! abnormal channel; the score path averages the per-patch abnormal
//! probability. Both aggregate as plain means over layers.
//!
//! The segmentation head feeds the map; the detection head feeds the score.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BilinearPlan, Tensor};
use std::rc::Rc;

/// Per-patch channel scores of one tapped layer (temperature not applied).
#[derive(Clone, Debug)]
pub struct LayerScores<S: Scalar> {
    pub layer: usize,
    pub s_n: Vec<S>,
    pub s_ab: Vec<S>,
}

/// Pixel-level anomaly map (abnormal-channel probability) plus the
/// image-level anomaly score, both in [0, 1].
#[derive(Clone, Debug)]
pub struct AnomalyOutput<S: Scalar> {
    pub map: Vec<S>,
    pub h: usize,
    pub w: usize,
    pub score: S,
}

/// Build both channels of one layer on the tape. Inputs are assumed
/// row-normalized (the adapters guarantee it); `use_subtraction = false`
/// drops the opposite-class terms.
pub fn layer_scores_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    features_n: NodeId,
    features_ab: NodeId,
    t_n: NodeId,
    t_ab: NodeId,
    use_subtraction: bool,
) -> (NodeId, NodeId) {
    let dt = tape.value(t_n).len();
    let g = tape.value(features_n).rows();
    let t_n_col = tape.reshape(t_n, &[dt, 1]);
    let t_ab_col = tape.reshape(t_ab, &[dt, 1]);

    let own_n = tape.matmul(features_n, t_n_col);
    let own_n = tape.reshape(own_n, &[g]);
    let own_ab = tape.matmul(features_ab, t_ab_col);
    let own_ab = tape.reshape(own_ab, &[g]);
    if !use_subtraction {
        return (own_n, own_ab);
    }
    let cross_n = tape.matmul(features_n, t_ab_col);
    let cross_n = tape.reshape(cross_n, &[g]);
    let cross_ab = tape.matmul(features_ab, t_n_col);
    let cross_ab = tape.reshape(cross_ab, &[g]);
    let s_n = tape.sub(own_n, cross_n);
    let s_ab = tape.sub(own_ab, cross_ab);
    (s_n, s_ab)
}

fn check_unit_rows<S: Scalar>(name: &str, t: &Tensor<S>) -> Result<()> {
    let c = t.cols();
    for (i, row) in t.data.chunks(c).enumerate() {
        let norm = row
            .iter()
            .fold(S::zero(), |a, &v| a + v * v)
            .sqrt()
            .to_f64();
        // All-zero rows are legal (zero features stay zero through the
        // epsilon-guarded normalization).
        if norm > 1e-4 && (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "{name} row {i} has norm {norm:.6}; expected unit (or zero) rows"
            )));
        }
    }
    Ok(())
}

/// Eager scoring of one layer with contract checks on normalization.
pub fn layer_scores<S: Scalar>(
    features_n: &Tensor<S>,
    features_ab: &Tensor<S>,
    t_n: &Tensor<S>,
    t_ab: &Tensor<S>,
    use_subtraction: bool,
    layer: usize,
) -> Result<LayerScores<S>> {
    check_unit_rows("normal-branch features", features_n)?;
    check_unit_rows("abnormal-branch features", features_ab)?;
    check_unit_rows("t_n", &Tensor::new(t_n.data.clone(), vec![1, t_n.len()]))?;
    check_unit_rows("t_ab", &Tensor::new(t_ab.data.clone(), vec![1, t_ab.len()]))?;
    let mut tape = Tape::new();
    let fn_ = tape.constant(features_n.clone());
    let fab = tape.constant(features_ab.clone());
    let tn = tape.constant(t_n.clone());
    let tab = tape.constant(t_ab.clone());
    let (s_n, s_ab) = layer_scores_on_tape(&mut tape, fn_, fab, tn, tab, use_subtraction);
    Ok(LayerScores {
        layer,
        s_n: tape.value(s_n).data.clone(),
        s_ab: tape.value(s_ab).data.clone(),
    })
}

/// Map path on the tape: per layer, scale both channels by the temperature,
/// bilinearly interpolate the `[grid, grid]` logits to the target size, take
/// the per-pixel two-way softmax's abnormal channel, then average layers.
/// Returns a `[h*w]` node with values in [0, 1].
pub fn anomaly_map_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    channels: &[(NodeId, NodeId)],
    grid_side: usize,
    target: (usize, usize),
    temperature: NodeId,
) -> Result<NodeId> {
    if channels.is_empty() {
        return Err(Error::Input("anomaly map needs at least one layer".into()));
    }
    let plan = Rc::new(BilinearPlan::<S>::new(
        grid_side,
        grid_side,
        target.0,
        target.1,
    ));
    let mut acc: Option<NodeId> = None;
    for &(s_n, s_ab) in channels {
        if tape.value(s_n).len() != grid_side * grid_side {
            return Err(Error::Input(format!(
                "layer scores hold {} patches, expected {}",
                tape.value(s_n).len(),
                grid_side * grid_side
            )));
        }
        let n_scaled = tape.mul_scalar(s_n, temperature);
        let ab_scaled = tape.mul_scalar(s_ab, temperature);
        let n_up = tape.bilinear(n_scaled, plan.clone());
        let ab_up = tape.bilinear(ab_scaled, plan.clone());
        // Two-way softmax's abnormal channel: sigmoid(ab - n) per pixel.
        let diff = tape.sub(ab_up, n_up);
        let prob = tape.sigmoid(diff);
        acc = Some(match acc {
            None => prob,
            Some(a) => tape.add(a, prob),
        });
    }
    Ok(tape.scale(acc.unwrap(), S::from_f64(1.0 / channels.len() as f64)))
}

/// Score path on the tape: per layer, mean abnormal-channel probability over
/// patches, then the mean over layers. Returns a scalar node in [0, 1].
pub fn anomaly_score_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    channels: &[(NodeId, NodeId)],
    temperature: NodeId,
) -> Result<NodeId> {
    if channels.is_empty() {
        return Err(Error::Input("anomaly score needs at least one layer".into()));
    }
    let mut acc: Option<NodeId> = None;
    for &(s_n, s_ab) in channels {
        let diff = tape.sub(s_ab, s_n);
        let scaled = tape.mul_scalar(diff, temperature);
        let prob = tape.sigmoid(scaled);
        let mean = tape.mean_all(prob);
        acc = Some(match acc {
            None => mean,
            Some(a) => tape.add(a, mean),
        });
    }
    Ok(tape.scale(acc.unwrap(), S::from_f64(1.0 / channels.len() as f64)))
}

fn channels_to_tape<S: Scalar>(
    tape: &mut Tape<S>,
    scores: &[LayerScores<S>],
) -> Vec<(NodeId, NodeId)> {
    scores
        .iter()
        .map(|ls| {
            let n = tape.constant(Tensor::new(ls.s_n.clone(), vec![ls.s_n.len()]));
            let ab = tape.constant(Tensor::new(ls.s_ab.clone(), vec![ls.s_ab.len()]));
            (n, ab)
        })
        .collect()
}

/// Eager anomaly map over plain layer scores.
pub fn anomaly_map<S: Scalar>(
    scores: &[LayerScores<S>],
    grid_side: usize,
    target: (usize, usize),
    temperature: S,
) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let channels = channels_to_tape(&mut tape, scores);
    let temp = tape.constant(Tensor::scalar(temperature));
    let map = anomaly_map_on_tape(&mut tape, &channels, grid_side, target, temp)?;
    Ok(tape.value(map).data.clone())
}

/// Eager anomaly score over plain layer scores.
pub fn anomaly_score<S: Scalar>(scores: &[LayerScores<S>], temperature: S) -> Result<S> {
    let mut tape = Tape::new();
    let channels = channels_to_tape(&mut tape, scores);
    let temp = tape.constant(Tensor::scalar(temperature));
    let score = anomaly_score_on_tape(&mut tape, &channels, temp)?;
    Ok(tape.value(score).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, g: usize, d: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(g * d);
        for _ in 0..g {
            let row: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.into_iter().map(|v| v / norm));
        }
        Tensor::new(data, vec![g, d])
    }

    #[test]
    fn hand_vector_scores() {
        // O = [1, 0], t_n = [1, 0], t_ab = [0, 1] -> s_n = 1 - 0 = 1.
        let o = Tensor::from_f64_slice(&[1.0, 0.0], &[1, 2]);
        let t_n = Tensor::from_f64_slice(&[1.0, 0.0], &[2]);
        let t_ab = Tensor::from_f64_slice(&[0.0, 1.0], &[2]);
        let ls = layer_scores(&o, &o, &t_n, &t_ab, true, 1).unwrap();
        assert!((ls.s_n[0] - 1.0).abs() < 1e-12);
        // Abnormal branch on the same features: 0 - 1 = -1.
        assert!((ls.s_ab[0] + 1.0).abs() < 1e-12);

        // Without subtraction the cross terms are dropped.
        let plain = layer_scores(&o, &o, &t_n, &t_ab, false, 1).unwrap();
        assert!((plain.s_n[0] - 1.0).abs() < 1e-12);
        assert!((plain.s_ab[0] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn equal_similarities_give_zero_score() {
        let d = 1.0 / 2.0f64.sqrt();
        let o = Tensor::from_f64_slice(&[d, d], &[1, 2]);
        let t_n = Tensor::from_f64_slice(&[1.0, 0.0], &[2]);
        let t_ab = Tensor::from_f64_slice(&[0.0, 1.0], &[2]);
        let ls = layer_scores(&o, &o, &t_n, &t_ab, true, 1).unwrap();
        assert!(ls.s_n[0].abs() < 1e-12);
    }

    #[test]
    fn non_normalized_inputs_violate_contract() {
        let o = Tensor::from_f64_slice(&[2.0, 0.0], &[1, 2]);
        let t = Tensor::from_f64_slice(&[1.0, 0.0], &[2]);
        assert!(matches!(
            layer_scores(&o, &o, &t, &t, true, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_interpolation_matches_per_patch_softmax() {
        let scores = LayerScores {
            layer: 1,
            s_n: vec![0.0, 1.0, -0.5, 2.0],
            s_ab: vec![0.0, -1.0, 0.5, 1.0],
        };
        let map = anomaly_map(&[scores.clone()], 2, (2, 2), 1.0).unwrap();
        for (i, &m) in map.iter().enumerate() {
            let expected = 1.0 / (1.0 + (scores.s_n[i] - scores.s_ab[i]).exp());
            assert_eq!(m, expected, "identity interpolation must be exact");
        }
        // Equal logits -> 0.5 everywhere.
        let flat = LayerScores {
            layer: 1,
            s_n: vec![0.3; 4],
            s_ab: vec![0.3; 4],
        };
        for v in anomaly_map(&[flat], 2, (2, 2), 3.7).unwrap() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_softmax_reduces_to_sigmoid_of_difference() {
        let scores = LayerScores {
            layer: 1,
            s_n: vec![-2.0; 4],
            s_ab: vec![2.0; 4],
        };
        let map = anomaly_map(&[scores], 2, (6, 6), 1.0).unwrap();
        for v in map {
            assert!((v - 0.98201).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn layer_averaging_is_exact() {
        let a = LayerScores {
            layer: 1,
            s_n: vec![0.1, 0.4, -0.3, 0.9],
            s_ab: vec![0.7, -0.2, 0.5, 0.0],
        };
        let b = LayerScores {
            layer: 2,
            s_n: vec![-0.6, 0.2, 0.8, 0.1],
            s_ab: vec![0.3, 0.3, -0.9, 0.6],
        };
        let m1 = anomaly_map(&[a.clone()], 2, (4, 4), 2.0).unwrap();
        let m2 = anomaly_map(&[b.clone()], 2, (4, 4), 2.0).unwrap();
        let both = anomaly_map(&[a, b], 2, (4, 4), 2.0).unwrap();
        for i in 0..both.len() {
            assert_eq!(both[i], (m1[i] + m2[i]) / 2.0);
        }
    }

    #[test]
    fn score_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = 9;
        let layers: Vec<LayerScores<f64>> = (0..3)
            .map(|l| LayerScores {
                layer: l,
                s_n: (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                s_ab: (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let temp = 7.3;
        let got = anomaly_score(&layers, temp).unwrap();
        let mut expected = 0.0;
        for l in &layers {
            let mut layer_mean = 0.0;
            for p in 0..g {
                let x = temp * (l.s_ab[p] - l.s_n[p]);
                layer_mean += 1.0 / (1.0 + (-x).exp());
            }
            expected += layer_mean / g as f64;
        }
        expected /= layers.len() as f64;
        assert!((got - expected).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn all_equal_channels_score_half() {
        let flat = LayerScores {
            layer: 1,
            s_n: vec![0.8; 16],
            s_ab: vec![0.8; 16],
        };
        let score = anomaly_score(&[flat], 5.0).unwrap();
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_layer_list_is_an_input_error() {
        assert!(matches!(
            anomaly_score::<f64>(&[], 1.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            anomaly_map::<f64>(&[], 2, (4, 4), 1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn complementarity_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = LayerScores {
            layer: 1,
            s_n: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            s_ab: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let map = anomaly_map(&[base.clone()], 4, (10, 10), 4.0).unwrap();
        for &p in &map {
            // Normal channel is the complement by construction of the
            // two-way softmax.
            assert!((0.0..=1.0).contains(&p));
        }
        let score = anomaly_score(&[base.clone()], 4.0).unwrap();

        // Raising one patch's abnormal channel never decreases the outputs.
        let mut bumped = base.clone();
        bumped.s_ab[5] += 0.5;
        let map2 = anomaly_map(&[bumped.clone()], 4, (10, 10), 4.0).unwrap();
        let score2 = anomaly_score(&[bumped], 4.0).unwrap();
        assert!(score2 >= score);
        for (after, before) in map2.iter().zip(&map) {
            assert!(after >= before || (after - before).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_row_helper_accepts_mixed_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut feats = unit_rows(&mut rng, 4, 8);
        for v in feats.data.iter_mut().take(8) {
            *v = 0.0; // first row all-zero
        }
        check_unit_rows("mixed", &feats).unwrap();
    }
}
