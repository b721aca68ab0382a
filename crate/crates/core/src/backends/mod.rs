//! Inference layer: model traits, deterministic CPU models and the batch
//! handlers that own the physical KV page and embed arenas.
//!
//! Two models ship with the kernel. [`MockHashModel`] derives next-token
//! weights from a hash of the visible `(position, token)` set, which makes
//! every distribution recomputable from page contents alone. [`ToyTransformer`]
//! is a two-layer pre-norm transformer in `f64` with seeded weights.

mod dist;
pub mod handler;
pub mod hash;
mod mock;
pub mod process;
mod tokenizer;
mod transformer;
pub mod wire;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ApiResult;

pub use dist::{Distribution, ExactMass, DEFAULT_TOP_K};
pub use handler::{Backend, LocalBackend};
pub use mock::{mock_distribution, MockHashModel};
pub use tokenizer::{ByteTokenizer, BOS, EOS, VOCAB_SIZE};
pub use transformer::{ToyTransformer, TransformerShape};

/// A named group of related model operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Trait {
    Allocate,
    Forward,
    InputText,
    Tokenize,
    OutputText,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Allocate,
        Trait::Forward,
        Trait::InputText,
        Trait::Tokenize,
        Trait::OutputText,
    ];

    /// Direct supertraits.
    pub fn supertraits(self) -> &'static [Trait] {
        match self {
            Trait::Allocate => &[],
            Trait::Forward => &[Trait::Allocate],
            Trait::InputText => &[Trait::Allocate, Trait::Forward],
            Trait::Tokenize => &[Trait::InputText],
            Trait::OutputText => &[Trait::Allocate],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Trait::Allocate => "Allocate",
            Trait::Forward => "Forward",
            Trait::InputText => "InputText",
            Trait::Tokenize => "Tokenize",
            Trait::OutputText => "OutputText",
        }
    }

    pub fn parse(name: &str) -> Option<Trait> {
        Trait::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Expands a trait set with every transitive supertrait.
pub fn trait_closure(traits: impl IntoIterator<Item = Trait>) -> BTreeSet<Trait> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<Trait> = traits.into_iter().collect();
    while let Some(t) = stack.pop() {
        if out.insert(t) {
            stack.extend_from_slice(t.supertraits());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub traits: BTreeSet<Trait>,
    pub vocab_size: u32,
    pub page_capacity: usize,
    pub max_batch_tokens: usize,
}

impl ModelDescriptor {
    pub fn has(&self, t: Trait) -> bool {
        self.traits.contains(&t)
    }
}

/// Backend-defined per-token state.
///
/// Mock embeds carry the token id on input and the visible-set hash on
/// output; the transformer carries dense `f64` vectors in both cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Token(u32),
    Hash(u64),
    Dense(Vec<f64>),
}

/// Where an attended token comes from during one forward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Index into the visible context slots of the call.
    Context(usize),
    /// Index into the call's own input tokens.
    Input(usize),
}

/// A context token as seen by a model: position plus stored KV payload.
#[derive(Debug, Clone, Copy)]
pub struct ContextToken<'a> {
    pub position: u32,
    pub payload: &'a Payload,
}

/// An input token: position plus input-embed payload.
#[derive(Debug, Clone, Copy)]
pub struct InputToken<'a> {
    pub position: u32,
    pub payload: &'a Payload,
}

/// Per-input result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutput {
    /// State appended to the KV cache for this token.
    pub kv: Payload,
    /// Output state written to an output embed.
    pub state: Payload,
}

/// A model the inference layer can execute.
///
/// `attend[i]` lists the tokens input `i` attends to, sorted by position and
/// ending with `Source::Input(i)` itself. Models must process inputs in
/// order: input `i` may attend to inputs `j < i` only.
pub trait Model: Send {
    fn descriptor(&self) -> &ModelDescriptor;

    fn embed_token(&self, token: u32, position: u32) -> ApiResult<Payload>;

    fn forward(
        &self,
        context: &[ContextToken<'_>],
        inputs: &[InputToken<'_>],
        attend: &[Vec<Source>],
    ) -> ApiResult<Vec<TokenOutput>>;

    fn next_dist(&self, state: &Payload, k: usize) -> ApiResult<Distribution>;

    fn tokenizer(&self) -> &ByteTokenizer;
}

/// Which model implementation a config entry selects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mock,
    Transformer,
}

/// Configuration of one served model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub kind: ModelKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Restricts the advertised traits (supertrait closure is applied).
    #[serde(default)]
    pub traits: Option<Vec<Trait>>,
}

fn default_seed() -> u64 {
    42
}

impl ModelSpec {
    pub fn mock(name: &str) -> Self {
        ModelSpec { name: name.into(), kind: ModelKind::Mock, seed: 42, traits: None }
    }

    pub fn transformer(name: &str, seed: u64) -> Self {
        ModelSpec { name: name.into(), kind: ModelKind::Transformer, seed, traits: None }
    }

    pub fn build(&self, page_capacity: usize, max_batch_tokens: usize) -> Box<dyn Model> {
        let traits = match &self.traits {
            Some(t) => trait_closure(t.iter().copied()),
            None => Trait::ALL.into_iter().collect(),
        };
        let descriptor = ModelDescriptor {
            name: self.name.clone(),
            traits,
            vocab_size: VOCAB_SIZE,
            page_capacity,
            max_batch_tokens,
        };
        match self.kind {
            ModelKind::Mock => Box::new(MockHashModel::new(descriptor)),
            ModelKind::Transformer => Box::new(ToyTransformer::new(descriptor, self.seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_follows_supertraits() {
        let c = trait_closure([Trait::Tokenize]);
        assert_eq!(
            c.into_iter().collect::<Vec<_>>(),
            vec![Trait::Allocate, Trait::Forward, Trait::InputText, Trait::Tokenize]
        );
        let c = trait_closure([Trait::OutputText]);
        assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![Trait::Allocate, Trait::OutputText]);
    }

    #[test]
    fn trait_names_parse() {
        for t in Trait::ALL {
            assert_eq!(Trait::parse(t.name()), Some(t));
        }
        assert_eq!(Trait::parse("InputImage"), None);
    }
}
