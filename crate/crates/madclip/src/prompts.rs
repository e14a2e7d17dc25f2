//! Learnable prompt ensembles and the two text anchors `t_n` / `t_ab`.
//!
//! Each polarity owns one learnable context of `M` token embeddings, shared
//! across its synonym ensemble. A template is the sequence
//! `context || class(synonym) || objective`, wrapped in the encoder's
//! start/end sentinels. The anchor of a polarity is the renormalized mean of
//! its `k` encoded synonym prompts.
//!
//! In handcrafted mode the context is replaced by the frozen embeddings of a
//! fixed phrase and no prompt parameters exist.

use crate::autodiff::{NodeId, Tape};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::params::{ParamNodes, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Normal,
    Abnormal,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Normal => "normal",
            Polarity::Abnormal => "abnormal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Learnable,
    Handcrafted,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Learnable => "learnable",
            PromptMode::Handcrafted => "handcrafted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(PromptMode::Learnable),
            "handcrafted" => Ok(PromptMode::Handcrafted),
            other => Err(Error::Config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

/// Default synonym word lists; the first entries are the canonical examples.
pub fn default_synonyms() -> (Vec<String>, Vec<String>) {
    (
        ["flawless", "unblemished", "normal", "healthy", "intact"]
            .map(String::from)
            .to_vec(),
        ["with a flaw", "disease", "abnormal", "unhealthy", "damaged"]
            .map(String::from)
            .to_vec(),
    )
}

/// One concrete prompt: learnable (or frozen handcrafted) context plus the
/// frozen class-synonym and objective embeddings.
pub struct PromptTemplate<S: Scalar> {
    pub context_tokens: Tensor<S>,
    pub class_tokens: Tensor<S>,
    pub objective_tokens: Tensor<S>,
    pub polarity: Polarity,
}

/// Prompt configuration; learnable context tensors live in the param store
/// under `prompt.{normal|abnormal}.context`.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub normal_synonyms: Vec<String>,
    pub abnormal_synonyms: Vec<String>,
    /// Modality word(s), e.g. "brain"; the ablation swaps in "medical image".
    pub objective: String,
    /// Learnable context length `M`.
    pub context_len: usize,
    pub mode: PromptMode,
    /// Context phrase used in handcrafted mode.
    pub handcrafted_text: String,
}

impl PromptBank {
    pub fn validate(&self) -> Result<()> {
        if self.normal_synonyms.is_empty() || self.abnormal_synonyms.is_empty() {
            return Err(Error::Config("synonym lists must not be empty".into()));
        }
        if self.normal_synonyms.len() != self.abnormal_synonyms.len() {
            return Err(Error::Config(format!(
                "synonym ensembles must be balanced: {} normal vs {} abnormal",
                self.normal_synonyms.len(),
                self.abnormal_synonyms.len()
            )));
        }
        if self
            .normal_synonyms
            .iter()
            .any(|s| self.abnormal_synonyms.contains(s))
        {
            return Err(Error::Config(
                "normal and abnormal synonym lists must be disjoint".into(),
            ));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ensemble_size(&self) -> usize {
        self.normal_synonyms.len()
    }

    fn context_param(polarity: Polarity) -> String {
        format!("prompt.{}.context", polarity.as_str())
    }

    /// Insert the learnable context parameters (no-op in handcrafted mode).
    pub fn init_params<S: Scalar>(
        &self,
        backbone: &Backbone<S>,
        seed: u64,
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        self.validate()?;
        if self.mode == PromptMode::Handcrafted {
            return Ok(());
        }
        let dt = backbone.spec().text_dim;
        for (i, polarity) in [Polarity::Normal, Polarity::Abnormal].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37 + i as u64));
            let ctx = Tensor::new(
                (0..self.context_len * dt)
                    .map(|_| S::from_f64(rng.gen_range(-0.02..0.02)))
                    .collect(),
                vec![self.context_len, dt],
            );
            store.insert(Self::context_param(polarity), ctx)?;
        }
        Ok(())
    }

    /// Frozen word-sequence embedding: one row per whitespace-separated word.
    fn embed_phrase<S: Scalar>(backbone: &Backbone<S>, phrase: &str) -> Result<Tensor<S>> {
        let words: Vec<&str> = phrase.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Config(format!("empty phrase `{phrase}`")));
        }
        let dt = backbone.spec().text_dim;
        let mut data = Vec::with_capacity(words.len() * dt);
        for word in &words {
            data.extend_from_slice(&backbone.embed_word(word)?.data);
        }
        Ok(Tensor::new(data, vec![words.len(), dt]))
    }

    fn frozen_context<S: Scalar>(&self, backbone: &Backbone<S>) -> Result<Tensor<S>> {
        Self::embed_phrase(backbone, &self.handcrafted_text)
    }

    /// Materialize the template for one synonym of one polarity, reading the
    /// current context from the store in learnable mode.
    pub fn template<S: Scalar>(
        &self,
        backbone: &Backbone<S>,
        store: &ParamStore<S>,
        polarity: Polarity,
        synonym_idx: usize,
    ) -> Result<PromptTemplate<S>> {
        let synonyms = match polarity {
            Polarity::Normal => &self.normal_synonyms,
            Polarity::Abnormal => &self.abnormal_synonyms,
        };
        let synonym = synonyms.get(synonym_idx).ok_or_else(|| {
            Error::Config(format!("synonym index {synonym_idx} out of range"))
        })?;
        let context_tokens = match self.mode {
            PromptMode::Learnable => store.get(&Self::context_param(polarity))?.clone(),
            PromptMode::Handcrafted => self.frozen_context(backbone)?,
        };
        Ok(PromptTemplate {
            context_tokens,
            class_tokens: Self::embed_phrase(backbone, synonym)?,
            objective_tokens: Self::embed_phrase(backbone, &self.objective)?,
            polarity,
        })
    }

    /// Build both anchors on the tape, differentiable into the learnable
    /// contexts. Each anchor is the renormalized mean of the `k` encoded
    /// synonym prompts of its polarity.
    pub fn anchors_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        backbone: &Backbone<S>,
        nodes: &ParamNodes,
    ) -> Result<(NodeId, NodeId)> {
        self.validate()?;
        let t_n = self.polarity_anchor(tape, backbone, nodes, Polarity::Normal)?;
        let t_ab = self.polarity_anchor(tape, backbone, nodes, Polarity::Abnormal)?;
        Ok((t_n, t_ab))
    }

    fn polarity_anchor<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        backbone: &Backbone<S>,
        nodes: &ParamNodes,
        polarity: Polarity,
    ) -> Result<NodeId> {
        let synonyms = match polarity {
            Polarity::Normal => &self.normal_synonyms,
            Polarity::Abnormal => &self.abnormal_synonyms,
        };
        let dt = backbone.spec().text_dim;
        let context = match self.mode {
            PromptMode::Learnable => nodes.get(&Self::context_param(polarity))?,
            PromptMode::Handcrafted => {
                let frozen = self.frozen_context(backbone)?;
                tape.constant(frozen)
            }
        };
        let sos = tape.constant(reshape_row(backbone.sos_embedding(), dt));
        let eos = tape.constant(reshape_row(backbone.eos_embedding(), dt));
        let objective = tape.constant(Self::embed_phrase(backbone, &self.objective)?);

        let mut sum: Option<NodeId> = None;
        for synonym in synonyms {
            let class = tape.constant(Self::embed_phrase(backbone, synonym)?);
            let seq = tape.concat_rows(&[sos, context, class, objective, eos]);
            if tape.value(seq).rows() > backbone.spec().text_ctx {
                return Err(Error::Config(format!(
                    "prompt for `{synonym}` is {} tokens; text context is {}",
                    tape.value(seq).rows(),
                    backbone.spec().text_ctx
                )));
            }
            let encoded = backbone.text_encode_on_tape(tape, seq)?;
            sum = Some(match sum {
                None => encoded,
                Some(acc) => tape.add(acc, encoded),
            });
        }
        let sum = sum.expect("validated non-empty synonym list");
        let mean = tape.scale(sum, S::from_f64(1.0 / synonyms.len() as f64));
        let mean = tape.reshape(mean, &[1, dt]);
        let normed = tape.row_l2_normalize(mean, S::from_f64(1e-8));
        Ok(tape.reshape(normed, &[dt]))
    }
}

fn reshape_row<S: Scalar>(t: Tensor<S>, dt: usize) -> Tensor<S> {
    Tensor::new(t.data, vec![1, dt])
}

/// Concatenate a template into the encoder input sequence
/// `sos || context || class || objective || eos`.
pub fn compose<S: Scalar>(
    backbone: &Backbone<S>,
    template: &PromptTemplate<S>,
) -> Result<Tensor<S>> {
    let dt = backbone.spec().text_dim;
    for (name, part) in [
        ("context", &template.context_tokens),
        ("class", &template.class_tokens),
        ("objective", &template.objective_tokens),
    ] {
        if part.cols() != dt {
            return Err(Error::Config(format!(
                "{name} tokens have width {}, text encoder expects {dt}",
                part.cols()
            )));
        }
    }
    let rows = 2 + template.context_tokens.rows()
        + template.class_tokens.rows()
        + template.objective_tokens.rows();
    if rows > backbone.spec().text_ctx {
        return Err(Error::Config(format!(
            "composed prompt is {rows} tokens; text context is {}",
            backbone.spec().text_ctx
        )));
    }
    let mut data = Vec::with_capacity(rows * dt);
    data.extend_from_slice(&backbone.sos_embedding().data);
    data.extend_from_slice(&template.context_tokens.data);
    data.extend_from_slice(&template.class_tokens.data);
    data.extend_from_slice(&template.objective_tokens.data);
    data.extend_from_slice(&backbone.eos_embedding().data);
    Ok(Tensor::new(data, vec![rows, dt]))
}

/// Eager anchors: encode through a throwaway tape and return plain tensors.
pub fn anchors<S: Scalar>(
    bank: &PromptBank,
    backbone: &Backbone<S>,
    store: &ParamStore<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut tape = Tape::new();
    let nodes = store.register_frozen(&mut tape);
    let (t_n, t_ab) = bank.anchors_on_tape(&mut tape, backbone, &nodes)?;
    Ok((tape.value(t_n).clone(), tape.value(t_ab).clone()))
}
