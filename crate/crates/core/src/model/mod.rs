//! Tiny autoregressive scorers and their frozen reference copies.
//!
//! A model maps `(prompt, response)` to a [`ScoreTable`]: one log-probability
//! per response token, each conditioned on the prompt and the response prefix.
//! [`Model::forward`] keeps the activations needed to push a gradient with
//! respect to those log-probabilities back onto the flat parameter vector,
//! which is how every objective in this crate obtains exact parameter
//! gradients: `dL/dθ = Σ_t (∂L/∂logp_t) · ∇θ logp_t`.

mod bigram;
mod transformer;

use std::ops::Deref;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use transformer::TransformerLayout;

/// Shape of a model. Stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// One logits row per previous token (plus a start row).
    Bigram { vocab: usize, context: usize },
    /// Pre-norm decoder-only attention stack.
    Transformer {
        vocab: usize,
        context: usize,
        width: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        /// Start the output projection at zero so the initial next-token
        /// distribution is uniform.
        #[serde(default)]
        zero_head: bool,
    },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Transformer {
            vocab: 256,
            context: 128,
            width: 64,
            layers: 2,
            heads: 4,
            hidden: 256,
            zero_head: false,
        }
    }
}

impl Architecture {
    /// Small transformer for finite-difference checks (well under 5k
    /// parameters).
    pub fn tiny(vocab: usize) -> Self {
        Architecture::Transformer {
            vocab,
            context: 24,
            width: 8,
            layers: 1,
            heads: 2,
            hidden: 16,
            zero_head: false,
        }
    }

    pub fn vocab(&self) -> usize {
        match *self {
            Architecture::Bigram { vocab, .. } | Architecture::Transformer { vocab, .. } => vocab,
        }
    }

    /// Maximum `|prompt| + |response|`.
    pub fn context(&self) -> usize {
        match *self {
            Architecture::Bigram { context, .. } | Architecture::Transformer { context, .. } => {
                context
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArchitecture(m.to_string()));
        match *self {
            Architecture::Bigram { vocab, context } => {
                if vocab == 0 || context == 0 {
                    return bad("vocab and context must be positive");
                }
            }
            Architecture::Transformer {
                vocab,
                context,
                width,
                layers,
                heads,
                hidden,
                ..
            } => {
                if vocab == 0
                    || context == 0
                    || width == 0
                    || layers == 0
                    || heads == 0
                    || hidden == 0
                {
                    return bad("all transformer dimensions must be positive");
                }
                if width % heads != 0 {
                    return bad("width must be divisible by heads");
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Architecture::Bigram { vocab, .. } => (vocab + 1) * vocab,
            Architecture::Transformer { .. } => TransformerLayout::new(self).total,
        }
    }
}

/// Per-token log-probabilities of a response under a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreTable<T>(pub Vec<T>);

impl<T: Scalar> ScoreTable<T> {
    pub fn logprobs(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `log π(y | x)`.
    pub fn total(&self) -> T {
        self.0.iter().copied().sum()
    }
}

impl<T> Deref for ScoreTable<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Activations retained by a forward pass.
pub struct Trace<T> {
    table: ScoreTable<T>,
    /// Full next-token log-distributions at every response position.
    rows: Vec<Vec<T>>,
    cache: Cache<T>,
}

enum Cache<T> {
    Bigram(bigram::BigramCache),
    Transformer(Box<transformer::TransformerCache<T>>),
    Empty,
}

impl<T: Scalar> Trace<T> {
    pub fn table(&self) -> &ScoreTable<T> {
        &self.table
    }

    pub fn into_table(self) -> ScoreTable<T> {
        self.table
    }

    /// Next-token log-distribution that produced response token `t`.
    pub fn distribution(&self, t: usize) -> &[T] {
        &self.rows[t]
    }
}

/// Trainable policy: an architecture, the seed it was initialized from, and a
/// flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    arch: Architecture,
    seed: u64,
    params: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(seed: u64, arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &arch {
            Architecture::Bigram { vocab, .. } => bigram::init(*vocab, &mut rng),
            Architecture::Transformer { .. } => transformer::init(&arch, &mut rng),
        };
        Ok(Model { arch, seed, params })
    }

    /// Rebuilds a model from stored parts, checking the parameter count.
    pub fn from_parts(arch: Architecture, seed: u64, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::LengthMismatch {
                what: "parameter vector",
                expected: arch.num_params(),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArchitecture("non-finite parameter".into()));
        }
        Ok(Model { arch, seed, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn vocab(&self) -> usize {
        self.arch.vocab()
    }

    fn check_input(&self, prompt: &[u32], response: &[u32]) -> Result<()> {
        let vocab = self.vocab();
        if let Some(&token) = prompt
            .iter()
            .chain(response)
            .find(|&&t| t as usize >= vocab)
        {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        let needed = prompt.len() + response.len();
        if needed > self.arch.context() {
            return Err(Error::ContextOverflow {
                needed,
                context: self.arch.context(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping activations for [`Model::backward`].
    pub fn forward(&self, prompt: &[u32], response: &[u32]) -> Result<Trace<T>> {
        self.check_input(prompt, response)?;
        if response.is_empty() {
            return Ok(Trace {
                table: ScoreTable(Vec::new()),
                rows: Vec::new(),
                cache: Cache::Empty,
            });
        }
        let (rows, cache) = match &self.arch {
            Architecture::Bigram { vocab, .. } => {
                let (rows, c) = bigram::forward(&self.params, *vocab, prompt, response);
                (rows, Cache::Bigram(c))
            }
            Architecture::Transformer { .. } => {
                let (rows, c) = transformer::forward(&self.arch, &self.params, prompt, response);
                (rows, Cache::Transformer(Box::new(c)))
            }
        };
        let table = ScoreTable(
            rows.iter()
                .zip(response)
                .map(|(row, &tok)| row[tok as usize])
                .collect(),
        );
        Ok(Trace { table, rows, cache })
    }

    /// `log π(response^t | prompt ⊕ response^{<t})` for every `t`.
    pub fn score(&self, prompt: &[u32], response: &[u32]) -> Result<ScoreTable<T>> {
        self.forward(prompt, response).map(Trace::into_table)
    }

    /// Accumulates `Σ_t d_logprobs[t] · ∇θ logp_t` into `grad`.
    pub fn backward(&self, trace: &Trace<T>, d_logprobs: &[T], grad: &mut [T]) -> Result<()> {
        if d_logprobs.len() != trace.table.len() {
            return Err(Error::LengthMismatch {
                what: "logprob gradient",
                expected: trace.table.len(),
                found: d_logprobs.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                what: "parameter gradient",
                expected: self.params.len(),
                found: grad.len(),
            });
        }
        match &trace.cache {
            Cache::Empty => {}
            Cache::Bigram(c) => bigram::backward(self.vocab(), c, &trace.rows, d_logprobs, grad),
            Cache::Transformer(c) => {
                transformer::backward(&self.arch, &self.params, c, &trace.rows, d_logprobs, grad)
            }
        }
        Ok(())
    }

    /// Log-distribution over the next token after `context`.
    pub fn next_token_logprobs(&self, context: &[u32]) -> Result<Vec<T>> {
        let trace = self.forward(context, &[0])?;
        Ok(trace
            .rows
            .into_iter()
            .next()
            .expect("one response position"))
    }

    /// Supervised cross-entropy over the target tokens only.
    pub fn sft_loss(&self, prompt: &[u32], target: &[u32]) -> Result<T> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        Ok(-self.score(prompt, target)?.total())
    }

    /// [`Model::sft_loss`] plus its parameter gradient (accumulated into `grad`).
    pub fn sft_loss_grad(&self, prompt: &[u32], target: &[u32], grad: &mut [T]) -> Result<T> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let trace = self.forward(prompt, target)?;
        let seed = vec![-T::one(); target.len()];
        self.backward(&trace, &seed, grad)?;
        Ok(-trace.table.total())
    }

    pub fn zeros_like_params(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }
}

/// An immutable, shareable snapshot of a model, used as `π_ref`.
#[derive(Clone, Debug)]
pub struct FrozenModel<T>(Arc<Model<T>>);

impl<T: Scalar> FrozenModel<T> {
    pub fn new(model: Model<T>) -> Self {
        FrozenModel(Arc::new(model))
    }

    pub fn model(&self) -> &Model<T> {
        &self.0
    }
}

impl<T> Deref for FrozenModel<T> {
    type Target = Model<T>;

    fn deref(&self) -> &Model<T> {
        &self.0
    }
}

/// Deep copy of `policy` that no training step can reach.
pub fn freeze_reference<T: Scalar>(policy: &Model<T>) -> FrozenModel<T> {
    FrozenModel::new(policy.clone())
}
