//! Dual-branch learnable adapter bank.
//!
//! Per tapped layer and branch: a shared projection followed by a detection
//! head and a segmentation head, all bias-free ReLU stages:
//!
//! ```text
//! shared = relu(F W_shared)            [G, d]
//! det    = norm(relu(shared W_det))    [G, d_text]
//! seg    = norm(relu(shared W_seg))    [G, d_text]
//! ```
//!
//! Heads project into the text embedding width and rows are L2-normalized so
//! downstream dot products against the prompt anchors realize cosine
//! similarity. `residual_ratio` optionally blends raw features back into the
//! shared stage; the default 0 is pure replacement.

use crate::autodiff::{NodeId, Tape};
use crate::backbone::{BackboneSpec, FeatureStack};
use crate::error::{Error, Result};
use crate::params::{ParamNodes, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ROW_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterMode {
    Dual,
    /// One adapter set serves both branches (ablation: removing one set).
    SharedSingleBranch,
    /// Detection and segmentation share one head per branch (ablation).
    SingleHead,
}

impl AdapterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::Dual => "dual",
            AdapterMode::SharedSingleBranch => "shared_single_branch",
            AdapterMode::SingleHead => "single_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(AdapterMode::Dual),
            "shared_single_branch" => Ok(AdapterMode::SharedSingleBranch),
            "single_head" => Ok(AdapterMode::SingleHead),
            other => Err(Error::Config(format!("unknown adapter mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Normal,
    Abnormal,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Normal => "normal",
            Branch::Abnormal => "abnormal",
        }
    }
}

/// Borrowed view of one layer's adapter weights.
pub struct AdapterLayer<'a, S: Scalar> {
    pub w_shared: &'a Tensor<S>,
    pub w_det: &'a Tensor<S>,
    pub w_seg: &'a Tensor<S>,
}

/// Schema of the adapter parameters; the tensors live in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DualAdapterBank {
    pub mode: AdapterMode,
    pub tap_layers: Vec<usize>,
    pub vision_dim: usize,
    pub text_dim: usize,
    pub residual_ratio: f64,
}

impl DualAdapterBank {
    /// Stored parameter name for a logical `(branch, layer, part)` triple,
    /// folding the aliasing of the ablation modes.
    pub fn param_name(&self, branch: Branch, layer: usize, part: &str) -> String {
        let branch = match self.mode {
            AdapterMode::SharedSingleBranch => Branch::Normal,
            _ => branch,
        };
        let part = match (self.mode, part) {
            (AdapterMode::SingleHead, "W_seg") => "W_det",
            _ => part,
        };
        format!("adapter.{}.{}.{}", branch.as_str(), layer, part)
    }

    pub fn layer<'a, S: Scalar>(
        &self,
        store: &'a ParamStore<S>,
        branch: Branch,
        layer: usize,
    ) -> Result<AdapterLayer<'a, S>> {
        Ok(AdapterLayer {
            w_shared: store.get(&self.param_name(branch, layer, "W_shared"))?,
            w_det: store.get(&self.param_name(branch, layer, "W_det"))?,
            w_seg: store.get(&self.param_name(branch, layer, "W_seg"))?,
        })
    }
}

/// Create the bank schema and insert reproducibly initialized parameters.
/// The normal and abnormal branches use distinct sub-seeds in dual modes.
pub fn init_bank<S: Scalar>(
    spec: &BackboneSpec,
    seed: u64,
    mode: AdapterMode,
    residual_ratio: f64,
    store: &mut ParamStore<S>,
) -> Result<DualAdapterBank> {
    if !(0.0..=1.0).contains(&residual_ratio) {
        return Err(Error::Config(format!(
            "residual_ratio must lie in [0, 1], found {residual_ratio}"
        )));
    }
    let bank = DualAdapterBank {
        mode,
        tap_layers: spec.tap_layers.clone(),
        vision_dim: spec.vision_dim,
        text_dim: spec.text_dim,
        residual_ratio,
    };
    let branches: &[Branch] = match mode {
        AdapterMode::SharedSingleBranch => &[Branch::Normal],
        _ => &[Branch::Normal, Branch::Abnormal],
    };
    for (bi, &branch) in branches.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(bi as u64));
        for &layer in &spec.tap_layers {
            let shared = kaiming_uniform(&mut rng, spec.vision_dim, spec.vision_dim);
            store.insert(bank.param_name(branch, layer, "W_shared"), shared)?;
            let det = kaiming_uniform(&mut rng, spec.vision_dim, spec.text_dim);
            store.insert(bank.param_name(branch, layer, "W_det"), det)?;
            if mode != AdapterMode::SingleHead {
                let seg = kaiming_uniform(&mut rng, spec.vision_dim, spec.text_dim);
                store.insert(bank.param_name(branch, layer, "W_seg"), seg)?;
            }
        }
    }
    Ok(bank)
}

fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::new(
        (0..fan_in * fan_out)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect(),
        vec![fan_in, fan_out],
    )
}

/// Adapted, row-normalized head outputs for one layer on the tape.
pub fn adapt_layer_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    branch: Branch,
    layer: usize,
    bank: &DualAdapterBank,
    nodes: &ParamNodes,
) -> Result<(NodeId, NodeId)> {
    if tape.value(features).cols() != bank.vision_dim {
        return Err(Error::Config(format!(
            "features have width {}, adapters expect {}",
            tape.value(features).cols(),
            bank.vision_dim
        )));
    }
    let eps = S::from_f64(ROW_NORM_EPS);
    let w_shared = nodes.get(&bank.param_name(branch, layer, "W_shared"))?;
    let w_det = nodes.get(&bank.param_name(branch, layer, "W_det"))?;
    let w_seg = nodes.get(&bank.param_name(branch, layer, "W_seg"))?;

    let projected = tape.matmul(features, w_shared);
    let mut shared = tape.relu(projected);
    if bank.residual_ratio > 0.0 {
        let r = S::from_f64(bank.residual_ratio);
        let kept = tape.scale(shared, S::one() - r);
        let raw = tape.scale(features, r);
        shared = tape.add(kept, raw);
    }
    let det_pre = tape.matmul(shared, w_det);
    let det_pre = tape.relu(det_pre);
    let det = tape.row_l2_normalize(det_pre, eps);
    let seg_pre = tape.matmul(shared, w_seg);
    let seg_pre = tape.relu(seg_pre);
    let seg = tape.row_l2_normalize(seg_pre, eps);
    Ok((det, seg))
}

/// Adapted det/seg outputs for every tapped layer of one branch.
pub struct AdaptedStack<S: Scalar> {
    /// `(layer, det [G, d_text], seg [G, d_text])` in tap order.
    pub layers: Vec<(usize, Tensor<S>, Tensor<S>)>,
}

/// Eager wrapper over [`adapt_layer_on_tape`] for the whole stack.
pub fn adapt<S: Scalar>(
    features: &FeatureStack<S>,
    branch: Branch,
    bank: &DualAdapterBank,
    store: &ParamStore<S>,
) -> Result<AdaptedStack<S>> {
    let mut tape = Tape::new();
    let nodes = store.register_frozen(&mut tape);
    let mut layers = Vec::with_capacity(features.layers.len());
    for (layer, feats) in &features.layers {
        let f = tape.constant(feats.clone());
        let (det, seg) = adapt_layer_on_tape(&mut tape, f, branch, *layer, bank, &nodes)?;
        layers.push((
            *layer,
            tape.value(det).clone(),
            tape.value(seg).clone(),
        ));
    }
    Ok(AdaptedStack { layers })
}
